#include "cli.hpp"

#include <signal.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "magpath/config.hpp"
#include "magpath/pipeline.hpp"
#include "magpath/telepath.hpp"

namespace magpath::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> settings;
  std::optional<double> bandwidth_mbps, latency_ms;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string kv(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::string out;
  for (const auto& [k, v] : rows) out += k + "=" + v + "\n";
  return out;
}

ProjectConfig resolve_config(const Globals& g) {
  ProjectConfig cfg = g.config_path.empty() ? default_project_config() : load_project_config(g.config_path);
  for (const auto& s : g.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (const char* env = std::getenv("MAGPATH_SEED"); env && *env) apply_setting(cfg, "seed", env);
  if (g.seed) cfg.set_seed(*g.seed);
  if (g.bandwidth_mbps) apply_setting(cfg, "channel.bandwidth_mbps", num(*g.bandwidth_mbps));
  if (g.latency_ms) apply_setting(cfg, "channel.latency_ms", num(*g.latency_ms));
  cfg.validate();
  return cfg;
}

std::string mag_tag(int magnification) { return std::to_string(magnification) + "x"; }

fs::path teacher_path(const ProjectConfig& c) { return c.model_dir / "teacher.magw"; }
fs::path student_path(const ProjectConfig& c, int m) { return c.model_dir / ("student_" + mag_tag(m) + ".magw"); }
fs::path splits_path(const ProjectConfig& c) { return c.data_dir / "splits.txt"; }

std::string features_stem(int magnification, bool aligned) {
  if (magnification == 20) return "bags_20x";
  return "bags_" + mag_tag(magnification) + (aligned ? "_mag" : "_plain");
}
fs::path glt_path(const ProjectConfig& c, const std::string& stem) { return c.model_dir / ("glt_" + stem + ".magw"); }

void require_file(const fs::path& p, const std::string& hint) {
  if (!fs::is_regular_file(p)) throw InputError("missing " + p.string() + " (" + hint + ")");
}

/// Loads the teacher if present, otherwise creates it and saves it once.
Encoder obtain_teacher(const ProjectConfig& c) {
  if (fs::is_regular_file(teacher_path(c))) {
    Encoder t(c.encoder, load_bundle(teacher_path(c)));
    t.freeze();
    return t;
  }
  Encoder t = make_teacher(c.encoder, c.teacher_seed);
  fs::create_directories(c.model_dir);
  save_bundle(teacher_path(c), t.params());
  return t;
}

Encoder load_encoder(const ProjectConfig& c, const fs::path& p, const std::string& hint) {
  require_file(p, hint);
  Encoder e(c.encoder, load_bundle(p));
  e.freeze();
  return e;
}

int validate_mag(int m, bool allow20) {
  if (m == 5 || m == 10 || (allow20 && m == 20)) return m;
  throw ConfigError("--mag must be " + std::string(allow20 ? "5, 10 or 20" : "5 or 10"));
}

// ---- commands --------------------------------------------------------------

int cmd_synth(ProjectConfig c, std::optional<std::size_t> slides, std::optional<std::size_t> patients) {
  if (slides) c.cohort.slides = *slides;
  if (patients) c.cohort.patients = *patients;
  std::vector<int> ids(c.cohort.patients);
  for (std::size_t p = 0; p < ids.size(); ++p) ids[p] = static_cast<int>(p);
  if (ids.size() < 3 * c.folds)
    throw InputError("too few patients: " + std::to_string(ids.size()) + " patients cannot form " +
                     std::to_string(c.folds) + " folds (need at least " + std::to_string(3 * c.folds) + ")");
  const SplitPlan plan = make_splits(ids, c.folds, c.train_ratio, c.val_ratio, c.test_ratio, c.seed);
  const CohortSource source = CohortSource::generated(c.cohort, c.synth);

  fs::remove_all(c.data_dir / "slides");
  fs::create_directories(c.data_dir / "slides");
  std::vector<double> tissue(source.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(source.size()); ++i) {
    try {
      const SyntheticSlide s = source.load(static_cast<std::size_t>(i));
      save_slide(slide_dir(c.data_dir, s.slide_id), s);
      tissue[static_cast<std::size_t>(i)] = s.tissue_fraction();
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  save_split_plan(splits_path(c), plan);
  write_text(c.data_dir / "cohort_config.txt", to_text(c));

  std::size_t positive = 0;
  double mean_tissue = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    positive += static_cast<std::size_t>(source.slides[i].label);
    mean_tissue += tissue[i];
  }
  mean_tissue /= static_cast<double>(source.size());
  const std::string summary = kv({{"command", "synth"},
                                  {"seed", std::to_string(c.seed)},
                                  {"slides", std::to_string(source.size())},
                                  {"patients", std::to_string(c.cohort.patients)},
                                  {"positive_slides", std::to_string(positive)},
                                  {"negative_slides", std::to_string(source.size() - positive)},
                                  {"mean_tissue_fraction", num(mean_tissue)},
                                  {"folds", std::to_string(plan.folds.size())}});
  write_text(c.report_dir / "synth_summary.txt", summary);
  std::cout << summary;
  return kOk;
}

int cmd_train_mag(const ProjectConfig& c, int magnification) {
  validate_mag(magnification, false);
  const CohortSource source = CohortSource::on_disk(c.data_dir);
  const PatientSplit split = holdout_split(patient_ids(source), c.mag_holdout, c.seed);
  const std::vector<PatchPair> pairs = sample_pairs(source, split.train, magnification, c.mag_pairs, c.seed, c.tiling);
  const Encoder teacher = obtain_teacher(c);
  Encoder student = make_student(teacher);
  const Encoder before = student;
  const std::vector<MagEpoch> trace = train_mag(pairs, teacher, student, c.mag);
  save_bundle(student_path(c, magnification), student.params());
  const std::string tag = mag_tag(magnification);
  write_text(c.report_dir / ("mag_loss_" + tag + ".csv"), loss_trace_csv(trace));

  // Slide-level similarity to the teacher's 20x embeddings on held-out patients.
  std::string sim = "slide_id,patient,similarity_before,similarity_after\n";
  std::size_t held = 0, improved = 0;
  const std::set<int> holdout(split.holdout.begin(), split.holdout.end());
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!holdout.count(source.slides[i].patient)) continue;
    const SyntheticSlide s = source.load(i);
    const Tensor high = extract_embeddings(teacher, tile(s, 20, c.tiling));
    const std::vector<Patch> low = tile(s, magnification, c.tiling);
    const double b = feature_similarity(extract_embeddings(before, low), high).mean;
    const double a = feature_similarity(extract_embeddings(student, low), high).mean;
    ++held;
    improved += a > b;
    sim += std::to_string(s.slide_id) + "," + std::to_string(s.patient) + "," + num(b) + "," + num(a) + "\n";
  }
  write_text(c.report_dir / ("mag_similarity_" + tag + ".csv"), sim);
  const double ratio = trace.back().mean_loss / trace.front().mean_loss;
  const std::string summary = kv({{"command", "train-mag"},
                                  {"magnification", std::to_string(magnification)},
                                  {"seed", std::to_string(c.seed)},
                                  {"pairs", std::to_string(pairs.size())},
                                  {"epochs", std::to_string(trace.size())},
                                  {"initial_loss", num(trace.front().mean_loss)},
                                  {"final_loss", num(trace.back().mean_loss)},
                                  {"loss_ratio", num(ratio)},
                                  {"holdout_slides", std::to_string(held)},
                                  {"holdout_slides_improved", std::to_string(improved)}});
  write_text(c.report_dir / ("mag_" + tag + ".txt"), summary);
  std::cout << summary;
  return kOk;
}

int cmd_extract(const ProjectConfig& c, int magnification, bool plain, std::string out) {
  validate_mag(magnification, true);
  const bool aligned = magnification != 20 && !plain;
  const Encoder encoder =
      aligned ? load_encoder(c, student_path(c, magnification), "run train-mag --mag " + std::to_string(magnification))
              : obtain_teacher(c);
  const CohortSource source = CohortSource::on_disk(c.data_dir);
  const std::vector<Bag> bags = make_bags(source, encoder, magnification, c.tiling);
  const std::string stem = features_stem(magnification, aligned);
  const fs::path path = out.empty() ? c.data_dir / "features" / (stem + ".magw") : fs::path(out);
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  save_bags(path, bags);
  std::size_t instances = 0;
  for (const auto& b : bags) instances += b.size();
  const std::string summary = kv({{"command", "extract"},
                                  {"magnification", std::to_string(magnification)},
                                  {"encoder", aligned ? "student" : "teacher"},
                                  {"features", path.string()},
                                  {"bags", std::to_string(bags.size())},
                                  {"instances", std::to_string(instances)}});
  write_text(c.report_dir / ("extract_" + path.stem().string() + ".txt"), summary);
  std::cout << summary;
  return kOk;
}

std::vector<Bag> load_features(const std::string& path) {
  if (path.empty()) throw ConfigError("--features is required");
  require_file(path, "run extract first");
  return load_bags(path);
}

int cmd_train_glt(const ProjectConfig& c, const std::string& features, std::size_t fold) {
  const std::vector<Bag> bags = load_features(features);
  require_file(splits_path(c), "run synth first");
  const SplitPlan plan = load_split_plan(splits_path(c));
  if (fold >= plan.folds.size()) throw ConfigError("--fold " + std::to_string(fold) + " out of range");
  const GLTransTrainResult r = train_fold(bags, plan.folds[fold], fold, c.glt, c.glt_train);
  const std::string stem = fs::path(features).stem().string();
  fs::create_directories(c.model_dir);
  save_bundle(glt_path(c, stem), r.model.to_bundle());
  write_text(c.report_dir / ("glt_trace_" + stem + ".csv"), glt_trace_csv(r.trace));
  const std::string summary = kv({{"command", "train-glt"},
                                  {"features", features},
                                  {"fold", std::to_string(fold)},
                                  {"model", glt_path(c, stem).string()},
                                  {"best_epoch", std::to_string(r.best_epoch)},
                                  {"best_val_f1", num(r.trace[r.best_epoch].val_f1)}});
  write_text(c.report_dir / ("train_glt_" + stem + ".txt"), summary);
  std::cout << summary;
  return kOk;
}

int cmd_eval(const ProjectConfig& c, const std::string& features, const std::string& fold_arg) {
  const std::vector<Bag> bags = load_features(features);
  require_file(splits_path(c), "run synth first");
  const SplitPlan plan = load_split_plan(splits_path(c));
  std::optional<std::size_t> only;
  if (fold_arg != "all") {
    if (fold_arg.empty() || fold_arg.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("--fold must be 'all' or a fold index");
    only = std::stoul(fold_arg);
  }
  const CvResult cv = cross_validate(bags, plan, c.glt, c.glt_train, c.bootstrap, only);
  const std::string stem = fs::path(features).stem().string();
  write_text(c.report_dir / ("eval_" + stem + ".csv"), eval_csv(cv));

  std::string preds = "fold,slide_id,patient,label,pred,prob\n";
  const fs::path heat_dir = c.report_dir / ("heatmaps_" + stem);
  fs::remove_all(heat_dir);
  for (const auto& f : cv.folds)
    for (std::size_t i = 0; i < f.slide_ids.size(); ++i) {
      const Bag& b = *f.test_bags[i];
      preds += std::to_string(f.fold) + "," + std::to_string(b.slide_id) + "," + std::to_string(b.patient) + "," +
               std::to_string(f.labels[i]) + "," + std::to_string(f.preds[i]) + "," + num(f.probs[i]) + "\n";
      char name[32];
      std::snprintf(name, sizeof name, "slide_%04d.pgm", b.slide_id);
      heatmap_export(f.outputs[i].scores, b.coords, b.grid_side, b.grid_side, heat_dir / name);
    }
  write_text(c.report_dir / ("eval_" + stem + "_predictions.csv"), preds);
  const std::string summary = kv({{"command", "eval"},
                                  {"features", features},
                                  {"folds", std::to_string(cv.folds.size())},
                                  {"mean_auc", num(cv.mean_auc)},
                                  {"mean_accuracy", num(cv.mean_accuracy)},
                                  {"mean_f1", num(cv.mean_f1)},
                                  {"ci_low", num(cv.pooled_ci.low)},
                                  {"ci_high", num(cv.pooled_ci.high)}});
  write_text(c.report_dir / ("eval_" + stem + ".txt"), summary);
  std::cout << summary;
  return kOk;
}

int cmd_cost(const ProjectConfig& c) {
  std::string csv = "magnification,pixels,gigapixels,stored_bytes,transfer_s\n";
  for (int m : kMagnifications) {
    const double side = static_cast<double>(c.synth.base_size / level_factor(m));
    const CostReport r = cost_model(side * side, c.bytes_per_pixel, c.compression_ratio, c.channel, m);
    csv += std::to_string(m) + "," + num(side * side) + "," + num(r.gigapixels) + "," + num(r.stored_bytes) + "," +
           num(r.transfer_s) + "\n";
  }
  write_text(c.report_dir / "cost.csv", csv);
  std::cout << csv;
  return kOk;
}

std::shared_ptr<ServerModels> load_server_models(const ProjectConfig& c) {
  auto models = std::make_shared<ServerModels>();
  models->tiling = c.tiling;
  const fs::path glt20 = glt_path(c, features_stem(20, false));
  require_file(teacher_path(c), "run train-mag first");
  require_file(glt20, "run train-glt on the 20x features first");
  models->encoders.emplace(20, load_encoder(c, teacher_path(c), "run train-mag first"));
  models->classifiers.emplace(20, GLTrans::from_bundle(load_bundle(glt20)));
  for (int m : {10, 5}) {
    const fs::path glt = glt_path(c, features_stem(m, true));
    if (!fs::is_regular_file(student_path(c, m)) || !fs::is_regular_file(glt)) continue;
    models->encoders.emplace(m, load_encoder(c, student_path(c, m), ""));
    models->classifiers.emplace(m, GLTrans::from_bundle(load_bundle(glt)));
  }
  return models;
}

ChannelModel channel_for(const ProjectConfig& c, bool simulated) {
  ChannelModel ch = c.channel;
  ch.mode = simulated ? ChannelMode::Simulated : ChannelMode::RealSocket;
  return ch;
}

int cmd_serve(const ProjectConfig& c, const std::string& endpoint, std::size_t max_sessions, bool simulated) {
  const auto models = load_server_models(c);
  // Block termination signals before any thread starts so sigwait sees them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  if (max_sessions == 0) pthread_sigmask(SIG_BLOCK, &set, nullptr);
  Server server(Endpoint::parse(endpoint), models, channel_for(c, simulated), c.report_dir / "sessions");
  std::cout << "listening on " << server.endpoint().str() << " magnifications:";
  for (const auto& [m, e] : models->encoders) std::cout << " " << m;
  std::cout << std::endl;
  if (max_sessions > 0) {
    server.wait_for_sessions(max_sessions);
  } else {
    int sig = 0;
    sigwait(&set, &sig);
  }
  server.stop();
  const auto logs = server.logs();
  std::cout << "served " << logs.size() << " sessions" << std::endl;
  return kOk;
}

int cmd_send(const ProjectConfig& c, const std::string& endpoint, int slide, int magnification, bool simulated,
             std::size_t chunk_kib) {
  validate_mag(magnification, true);
  SendOptions opts;
  opts.channel = channel_for(c, simulated);
  opts.chunk_size = chunk_kib * 1024;
  const fs::path dir = slide_dir(c.data_dir, slide);
  if (!fs::is_directory(dir)) throw InputError("no slide " + std::to_string(slide) + " under " + c.data_dir.string());
  const SendResult r = send_slide(Endpoint::parse(endpoint), dir, magnification, opts);
  const std::string id = std::to_string(r.diagnosis.session_id);
  const fs::path out = c.report_dir / "send";
  fs::create_directories(out);
  {
    std::ofstream f(out / ("session_" + id + "_heatmap.pgm"), std::ios::binary);
    f << r.diagnosis.heatmap_pgm;
  }
  const std::string summary = kv({{"command", "send"},
                                  {"session_id", id},
                                  {"slide_id", std::to_string(slide)},
                                  {"magnification", std::to_string(magnification)},
                                  {"mode", simulated ? "simulated" : "real"},
                                  {"label", std::to_string(r.diagnosis.label)},
                                  {"prob0", num(r.diagnosis.probs[0])},
                                  {"prob1", num(r.diagnosis.probs[1])},
                                  {"bytes", std::to_string(r.timing.bytes)},
                                  {"transfer_s", num(r.timing.transfer_s)},
                                  {"inference_s", num(r.timing.inference_s)},
                                  {"total_s", num(r.timing.total_s)}});
  write_text(out / ("session_" + id + ".txt"), summary);
  std::cout << summary;
  return kOk;
}

int cmd_report(const ProjectConfig& c) {
  std::string out;
  if (fs::is_directory(c.report_dir)) {
    std::vector<fs::path> summaries;
    for (const auto& e : fs::directory_iterator(c.report_dir))
      if (e.path().extension() == ".txt" && e.path().filename() != "report.txt") summaries.push_back(e.path());
    std::sort(summaries.begin(), summaries.end());
    for (const auto& p : summaries) out += "[" + p.stem().string() + "]\n" + read_file(p);
  }
  const fs::path session_dir = c.report_dir / "sessions";
  if (fs::is_directory(session_dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(session_dir))
      if (e.path().extension() == ".csv") files.push_back(e.path());
    std::vector<SessionLog> logs;
    for (const auto& p : files)
      for (const auto& l : parse_session_log_csv(read_file(p))) logs.push_back(l);
    std::sort(logs.begin(), logs.end(), [](const auto& a, const auto& b) { return a.session_id < b.session_id; });
    if (!logs.empty()) {
      write_text(c.report_dir / "sessions.csv", session_log_csv(logs));
      const std::string table = session_report_csv(session_report(logs));
      write_text(c.report_dir / "session_report.csv", table);
      out += "[sessions]\n" + table;
    }
  }
  if (out.empty()) throw InputError("nothing to report under " + c.report_dir.string());
  write_text(c.report_dir / "report.txt", out);
  std::cout << out;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"magpath: magnification-aligned slide classification toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--seed", g.seed, "master seed (overrides MAGPATH_SEED and the config)");
  app.add_option("--set", g.settings, "config override key=value (repeatable)");
  app.add_option("--bandwidth-mbps", g.bandwidth_mbps, "channel bandwidth");
  app.add_option("--latency-ms", g.latency_ms, "channel latency");

  std::optional<std::size_t> slides, patients;
  auto* synth = app.add_subcommand("synth", "generate the synthetic cohort and split plan");
  synth->add_option("--slides", slides);
  synth->add_option("--patients", patients);

  int mag = 5;
  auto* train_mag = app.add_subcommand("train-mag", "align a low-magnification student to the teacher");
  train_mag->add_option("--mag", mag, "5 or 10");

  bool plain = false;
  std::string features;
  auto* extract = app.add_subcommand("extract", "embed every slide into a bag file");
  extract->add_option("--mag", mag, "5, 10 or 20")->required();
  extract->add_flag("--plain", plain, "use the teacher even below 20x");
  extract->add_option("--features", features, "output path");

  std::size_t fold_index = 0;
  auto* train_glt = app.add_subcommand("train-glt", "train the classifier on one fold");
  train_glt->add_option("--features", features)->required();
  train_glt->add_option("--fold", fold_index);

  std::string fold_arg = "all";
  auto* eval = app.add_subcommand("eval", "cross-validated evaluation");
  eval->add_option("--features", features)->required();
  eval->add_option("--fold", fold_arg, "all or a fold index");

  auto* cost = app.add_subcommand("cost", "storage and transfer cost per magnification");

  std::string endpoint = "127.0.0.1:5055";
  std::size_t max_sessions = 0;
  bool simulated = false;
  auto* serve = app.add_subcommand("serve", "telepathology server");
  serve->add_option("--endpoint", endpoint);
  serve->add_option("--max-sessions", max_sessions, "exit after this many sessions (0: run until signalled)");
  serve->add_flag("--simulated", simulated, "report channel-model transfer times");

  int slide = 0;
  std::size_t chunk_kib = kDefaultChunkSize / 1024;
  auto* send = app.add_subcommand("send", "upload one slide and print the diagnosis");
  send->add_option("--endpoint", endpoint);
  send->add_option("--slide", slide);
  send->add_option("--mag", mag);
  send->add_flag("--simulated", simulated);
  send->add_option("--chunk-kib", chunk_kib)->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));

  auto* report = app.add_subcommand("report", "merge session logs and print experiment summaries");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    const ProjectConfig cfg = resolve_config(g);
    if (synth->parsed()) return cmd_synth(cfg, slides, patients);
    if (train_mag->parsed()) return cmd_train_mag(cfg, mag);
    if (extract->parsed()) return cmd_extract(cfg, mag, plain, features);
    if (train_glt->parsed()) return cmd_train_glt(cfg, features, fold_index);
    if (eval->parsed()) return cmd_eval(cfg, features, fold_arg);
    if (cost->parsed()) return cmd_cost(cfg);
    if (serve->parsed()) return cmd_serve(cfg, endpoint, max_sessions, simulated);
    if (send->parsed()) return cmd_send(cfg, endpoint, slide, mag, simulated, chunk_kib);
    if (report->parsed()) return cmd_report(cfg);
  } catch (const NetworkError& e) {
    std::cerr << "error [" << e.stage << "]: " << e.what() << "\n";
    return kRuntime;
  } catch (const ProtocolError& e) {
    std::cerr << "error [protocol]: " << e.what() << "\n";
    return kRuntime;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace magpath::cli
