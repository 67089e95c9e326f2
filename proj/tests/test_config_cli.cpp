#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "cli.hpp"
#include "magpath/config.hpp"
#include "magpath/pipeline.hpp"
#include "magpath/telepath.hpp"
#include "small_pipeline.hpp"

using namespace magpath;
using namespace magpath::test;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::uint16_t free_port() {
  Server probe(Endpoint{"127.0.0.1", 0}, std::make_shared<ServerModels>(), ChannelModel{});
  return probe.endpoint().port;
}

}  // namespace

TEST_CASE("project config") {
  ProjectConfig c = default_project_config();
  CHECK(c.mag.lr == 3e-3);
  CHECK(c.cohort.slides == 200);
  CHECK(c.cohort.patients == 100);
  CHECK(c.folds == 10);
  CHECK(c.channel.bandwidth_bps == 200e6);
  c.validate();

  apply_setting(c, "glt.heads", "2");
  CHECK(c.glt.heads == 2);
  apply_setting(c, "encoder.channels", "4,8");
  CHECK(c.encoder.channels == std::vector<std::size_t>{4, 8});
  apply_setting(c, "encoder.strides", "2,2");
  apply_setting(c, "channel.bandwidth_mbps", "50");
  CHECK(c.channel.bandwidth_bps == 50e6);
  CHECK_THROWS_AS(apply_setting(c, "no.such.key", "1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "glt.heads", "two"), ConfigError);

  apply_setting(c, "seed", "9");
  CHECK(c.seed == 9);

  const fs::path dir = fresh_dir("magpath_test_config");
  {
    std::ofstream(dir / "a.cfg") << to_text(c);
  }
  const ProjectConfig back = load_project_config(dir / "a.cfg");
  CHECK(to_text(back) == to_text(c));
  {
    std::ofstream(dir / "b.cfg") << "# comment\n\nglt.heads = 4\n";
  }
  CHECK(load_project_config(dir / "b.cfg").glt.heads == 4);
  {
    std::ofstream(dir / "c.cfg") << "glt.heads\n";
  }
  CHECK_THROWS_AS(load_project_config(dir / "c.cfg"), ConfigError);
  CHECK_THROWS_AS(load_project_config(dir / "missing.cfg"), ConfigError);

  ProjectConfig bad = default_project_config();
  bad.glt.heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("cli exit codes") {
  CHECK(cli::run({"magpath"}) == cli::kUsage);
  CHECK(cli::run({"magpath", "frobnicate"}) == cli::kUsage);
  CHECK(cli::run({"magpath", "--set", "glt.heads=x", "cost"}) == cli::kUsage);
  CHECK(cli::run({"magpath", "--set", "nonsense", "cost"}) == cli::kUsage);
  const fs::path root = fresh_dir("magpath_test_cli_codes");
  CHECK(cli::run(cli_args(root, {"synth", "--patients", "20", "--slides", "20"})) == cli::kUsage);
  CHECK(cli::run(cli_args(root, {"eval", "--features", (root / "none.magw").string()})) == cli::kUsage);
  CHECK(cli::run(cli_args(root, {"train-mag", "--mag", "20"})) == cli::kUsage);
  CHECK(cli::run(cli_args(root, {"train-mag", "--mag", "5"})) == cli::kUsage);
  CHECK(cli::run(cli_args(root, {"send", "--endpoint", "127.0.0.1:1", "--slide", "0"})) == cli::kUsage);
  fs::remove_all(root);
}

TEST_CASE("cli end to end") {
  const fs::path root = fresh_dir("magpath_test_cli_e2e");
  auto run = [&](std::vector<std::string> cmd) { return cli::run(cli_args(root, std::move(cmd))); };

  REQUIRE(run({"synth", "--slides", "40", "--patients", "30"}) == cli::kOk);
  CHECK(fs::exists(root / "data" / "splits.txt"));
  CHECK(CohortSource::on_disk(root / "data").size() == 40);

  REQUIRE(run({"train-mag", "--mag", "5"}) == cli::kOk);
  CHECK(fs::exists(root / "models" / "teacher.magw"));
  CHECK(fs::exists(root / "models" / "student_5x.magw"));
  CHECK(fs::exists(root / "reports" / "mag_loss_5x.csv"));

  REQUIRE(run({"extract", "--mag", "20"}) == cli::kOk);
  REQUIRE(run({"extract", "--mag", "5"}) == cli::kOk);
  REQUIRE(run({"extract", "--mag", "5", "--plain"}) == cli::kOk);
  const fs::path f20 = root / "data" / "features" / "bags_20x.magw";
  const fs::path f5 = root / "data" / "features" / "bags_5x_mag.magw";
  CHECK(load_bags(f20).size() == 40);
  CHECK(fs::exists(root / "data" / "features" / "bags_5x_plain.magw"));

  REQUIRE(run({"train-glt", "--features", f20.string(), "--fold", "0"}) == cli::kOk);
  REQUIRE(run({"train-glt", "--features", f5.string(), "--fold", "0"}) == cli::kOk);
  CHECK(fs::exists(root / "models" / "glt_bags_20x.magw"));
  REQUIRE(run({"eval", "--features", f20.string()}) == cli::kOk);
  {
    // Ten fold rows plus an aggregate row whose mean AUC is the fold average.
    std::istringstream csv(read_file(root / "reports" / "eval_bags_20x.csv"));
    std::string line;
    std::getline(csv, line);
    const auto auc_col = static_cast<std::size_t>(std::count(line.begin(), line.begin() + static_cast<long>(line.find("auc")), ','));
    std::vector<std::string> rows;
    while (std::getline(csv, line)) rows.push_back(line);
    REQUIRE(rows.size() == 11);
    auto field = [&](const std::string& row) {
      std::istringstream in(row);
      std::string f;
      for (std::size_t i = 0; i <= auc_col; ++i) std::getline(in, f, ',');
      return std::stod(f);
    };
    // Folds whose test set holds a single class have no AUC and are skipped.
    double mean = 0.0, defined = 0.0;
    for (std::size_t i = 0; i < 10; ++i)
      if (const double a = field(rows[i]); !std::isnan(a)) {
        mean += a;
        defined += 1.0;
      }
    mean /= defined;
    CHECK(field(rows[10]) == doctest::Approx(mean).epsilon(1e-12));
    std::size_t maps = 0;
    for (const auto& e : fs::directory_iterator(root / "reports" / "heatmaps_bags_20x")) maps += e.path().extension() == ".pgm";
    CHECK(maps == 40);
  }
  REQUIRE(run({"eval", "--features", f5.string(), "--fold", "2"}) == cli::kOk);
  CHECK(run({"eval", "--features", f5.string(), "--fold", "10"}) == cli::kUsage);
  REQUIRE(run({"cost"}) == cli::kOk);
  CHECK(fs::exists(root / "reports" / "cost.csv"));

  SUBCASE("serve and send over loopback") {
    const std::string ep = "127.0.0.1:" + std::to_string(free_port());
    int serve_code = -1;
    std::thread server([&] { serve_code = run({"serve", "--endpoint", ep, "--max-sessions", "2", "--simulated"}); });
    int sent = 0;
    for (int attempt = 0; attempt < 200 && sent < 2; ++attempt) {
      const int code = run({"send", "--endpoint", ep, "--slide", "3", "--mag", sent == 0 ? "20" : "5", "--simulated"});
      if (code == cli::kOk) ++sent;
      else std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    server.join();
    CHECK(sent == 2);
    CHECK(serve_code == cli::kOk);
    REQUIRE(run({"report"}) == cli::kOk);
    const auto logs = parse_session_log_csv(read_file(root / "reports" / "sessions.csv"));
    REQUIRE(logs.size() == 2);
    CHECK(logs[0].magnification == 20);
    CHECK(logs[1].magnification == 5);
    CHECK(fs::exists(root / "reports" / "session_report.csv"));
    CHECK(fs::exists(root / "reports" / "report.txt"));
  }
  fs::remove_all(root);
}
