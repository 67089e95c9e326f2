#include "cli.hpp"

int main(int argc, char** argv) { return magpath::cli::run({argv, argv + argc}); }
