#include "magpath/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace magpath {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string tok;
  while (std::getline(in, tok, ',')) out.push_back(parse_uint(key, trim(tok)));
  if (out.empty()) throw ConfigError("config: '" + key + "' expects a comma-separated list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(ProjectConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ProjectConfig&)> get;
};

#define MAGPATH_DOUBLE(member) \
  Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.member = parse_double(k, v); }, \
        [](const ProjectConfig& c) { return num(c.member); }}
#define MAGPATH_UINT(member) \
  Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.member = parse_uint(k, v); }, \
        [](const ProjectConfig& c) { return std::to_string(c.member); }}
#define MAGPATH_PATH(member) \
  Field{[](ProjectConfig& c, const std::string&, const std::string& v) { c.member = v; }, \
        [](const ProjectConfig& c) { return c.member.string(); }}
#define MAGPATH_LIST(member) \
  Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.member = parse_list(k, v); }, \
        [](const ProjectConfig& c) { return join(c.member); }}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table{
      {"data_dir", MAGPATH_PATH(data_dir)},
      {"model_dir", MAGPATH_PATH(model_dir)},
      {"report_dir", MAGPATH_PATH(report_dir)},
      {"seed", Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.set_seed(parse_uint(k, v)); },
                     [](const ProjectConfig& c) { return std::to_string(c.seed); }}},
      {"encoder.channels", MAGPATH_LIST(encoder.channels)},
      {"encoder.strides", MAGPATH_LIST(encoder.strides)},
      {"encoder.kernel", MAGPATH_UINT(encoder.kernel)},
      {"encoder.input_mean", MAGPATH_DOUBLE(encoder.input_mean)},
      {"encoder.input_std", MAGPATH_DOUBLE(encoder.input_std)},
      {"encoder.teacher_seed", MAGPATH_UINT(teacher_seed)},
      {"mag.lr", MAGPATH_DOUBLE(mag.lr)},
      {"mag.decay", MAGPATH_DOUBLE(mag.decay)},
      {"mag.epochs", MAGPATH_UINT(mag.epochs)},
      {"mag.batch_size", MAGPATH_UINT(mag.batch_size)},
      {"mag.pairs", MAGPATH_UINT(mag_pairs)},
      {"mag.holdout", MAGPATH_DOUBLE(mag_holdout)},
      {"glt.d_model", MAGPATH_UINT(glt.d_model)},
      {"glt.heads", MAGPATH_UINT(glt.heads)},
      {"glt.layers", MAGPATH_UINT(glt.layers)},
      {"glt.dilations", MAGPATH_LIST(glt.dilations)},
      {"glt.kernel", MAGPATH_UINT(glt.kernel)},
      {"glt.dropout", MAGPATH_DOUBLE(glt.dropout)},
      {"glt.local_branch",
       Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.glt.local_branch = parse_bool(k, v); },
             [](const ProjectConfig& c) { return std::string(c.glt.local_branch ? "true" : "false"); }}},
      {"glt.epochs", MAGPATH_UINT(glt_train.epochs)},
      {"glt.lr", MAGPATH_DOUBLE(glt_train.lr)},
      {"glt.weight_decay", MAGPATH_DOUBLE(glt_train.weight_decay)},
      {"glt.lookahead_k", MAGPATH_UINT(glt_train.lookahead_k)},
      {"glt.lookahead_alpha", MAGPATH_DOUBLE(glt_train.lookahead_alpha)},
      {"synth.base_size", MAGPATH_UINT(synth.base_size)},
      {"synth.texture_frequency", MAGPATH_DOUBLE(synth.texture_frequency)},
      {"synth.texture_amplitude", MAGPATH_DOUBLE(synth.texture_amplitude)},
      {"synth.angle_jitter_deg", MAGPATH_DOUBLE(synth.angle_jitter_deg)},
      {"synth.blob_amplitude", MAGPATH_DOUBLE(synth.blob_amplitude)},
      {"synth.blob_period_min", MAGPATH_DOUBLE(synth.blob_period_min)},
      {"synth.blob_period_max", MAGPATH_DOUBLE(synth.blob_period_max)},
      {"synth.noise_amplitude", MAGPATH_DOUBLE(synth.noise_amplitude)},
      {"synth.stain_jitter", MAGPATH_DOUBLE(synth.stain_jitter)},
      {"synth.min_tissue_fraction", MAGPATH_DOUBLE(synth.min_tissue_fraction)},
      {"cohort.slides", MAGPATH_UINT(cohort.slides)},
      {"cohort.patients", MAGPATH_UINT(cohort.patients)},
      {"tiling.patch20", MAGPATH_UINT(tiling.patch20)},
      {"tiling.background_threshold", MAGPATH_DOUBLE(tiling.background_threshold)},
      {"tiling.min_tissue_fraction", MAGPATH_DOUBLE(tiling.min_tissue_fraction)},
      {"splits.folds", MAGPATH_UINT(folds)},
      {"splits.train", MAGPATH_DOUBLE(train_ratio)},
      {"splits.val", MAGPATH_DOUBLE(val_ratio)},
      {"splits.test", MAGPATH_DOUBLE(test_ratio)},
      {"channel.bandwidth_mbps",
       Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.channel.bandwidth_bps = parse_double(k, v) * 1e6; },
             [](const ProjectConfig& c) { return num(c.channel.bandwidth_bps / 1e6); }}},
      {"channel.latency_ms",
       Field{[](ProjectConfig& c, const std::string& k, const std::string& v) { c.channel.latency_s = parse_double(k, v) / 1e3; },
             [](const ProjectConfig& c) { return num(c.channel.latency_s * 1e3); }}},
      {"cost.bytes_per_pixel", MAGPATH_DOUBLE(bytes_per_pixel)},
      {"cost.compression_ratio", MAGPATH_DOUBLE(compression_ratio)},
      {"eval.bootstrap", MAGPATH_UINT(bootstrap)},
  };
  return table;
}

#undef MAGPATH_DOUBLE
#undef MAGPATH_UINT
#undef MAGPATH_PATH
#undef MAGPATH_LIST

}  // namespace

void ProjectConfig::set_seed(std::uint64_t s) {
  seed = s;
  cohort.seed = s;
  mag.seed = s;
  glt_train.seed = s;
}

void ProjectConfig::validate() const {
  encoder.validate();
  mag.validate();
  glt.validate();
  glt_train.validate();
  synth.validate();
  tiling.validate();
  channel.validate();
  if (synth.base_size % tiling.patch20 != 0)
    throw ConfigError("config: synth.base_size must be a multiple of tiling.patch20");
  if (tiling.patch_size(5) < encoder.min_input_side())
    throw ConfigError("config: 5x patches are smaller than the encoder's stride contraction");
  if (glt.d_in != encoder.embedding_dim())
    throw ConfigError("config: gltrans input width must equal the encoder embedding width");
  if (mag_pairs == 0) throw ConfigError("config: mag.pairs must be positive");
  if (!(mag_holdout >= 0.0 && mag_holdout < 1.0)) throw ConfigError("config: mag.holdout must lie in [0, 1)");
  if (!(bytes_per_pixel > 0.0) || !(compression_ratio > 0.0))
    throw ConfigError("config: cost parameters must be > 0");
  if (bootstrap == 0) throw ConfigError("config: eval.bootstrap must be positive");
}

ProjectConfig default_project_config() {
  ProjectConfig cfg;
  cfg.mag.lr = 3e-3;
  cfg.set_seed(cfg.seed);
  return cfg;
}

void apply_setting(ProjectConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : fields())
    if (name == key) {
      field.set(cfg, key, value);
      if (key == "encoder.channels") cfg.glt.d_in = cfg.encoder.embedding_dim();
      return;
    }
  throw ConfigError("config: unknown key '" + key + "'");
}

ProjectConfig load_project_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path.string());
  ProjectConfig cfg = default_project_config();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    apply_setting(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::string to_text(const ProjectConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + "=" + field.get(cfg) + "\n";
  return out;
}

}  // namespace magpath
