#include "magpath/gltrans.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "magpath/optim.hpp"

namespace magpath {

namespace {

std::string layer_prefix(std::size_t layer) { return "block" + std::to_string(layer + 1) + "."; }

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) {
  Tensor y(x.shape());
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) y.at(i, j) = x.at(order[i], j);
  return y;
}

std::string bag_key(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag.%06zu.", i);
  return buf;
}

}  // namespace

void Bag::validate() const {
  expect_rank(embeddings, 2, "bag embeddings");
  if (coords.size() != embeddings.dim(0))
    throw ContractError("bag " + std::to_string(slide_id) + ": " + std::to_string(coords.size()) +
                        " coordinates for " + std::to_string(embeddings.dim(0)) + " instances");
  if (label != 0 && label != 1) throw InputError("bag " + std::to_string(slide_id) + ": label must be 0 or 1");
}

void save_bags(const std::filesystem::path& path, const std::vector<Bag>& bags) {
  ParamStore store;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const Bag& b = bags[i];
    b.validate();
    const std::string key = bag_key(i);
    Tensor coords({b.size(), 2});
    for (std::size_t k = 0; k < b.size(); ++k) {
      coords.at(k, 0) = static_cast<double>(b.coords[k].row);
      coords.at(k, 1) = static_cast<double>(b.coords[k].col);
    }
    store.add(key + "embeddings", b.embeddings, false);
    store.add(key + "coords", std::move(coords), false);
    store.add(key + "meta",
              Tensor({4}, {static_cast<double>(b.slide_id), static_cast<double>(b.patient),
                           static_cast<double>(b.label), static_cast<double>(b.grid_side)}),
              false);
  }
  save_bundle(path, store);
}

std::vector<Bag> load_bags(const std::filesystem::path& path) {
  const ParamStore store = load_bundle(path);
  std::vector<Bag> bags;
  for (std::size_t i = 0;; ++i) {
    const std::string k = bag_key(i);
    if (!store.contains(k + "embeddings")) break;
    Bag b;
    b.embeddings = store.get(k + "embeddings").value;
    const Tensor& coords = store.get(k + "coords").value;
    const Tensor& meta = store.get(k + "meta").value;
    expect_shape(meta, {4}, "bag meta");
    expect_rank(coords, 2, "bag coords");
    for (std::size_t r = 0; r < coords.dim(0); ++r)
      b.coords.push_back({static_cast<std::size_t>(coords.at(r, 0)), static_cast<std::size_t>(coords.at(r, 1))});
    b.slide_id = static_cast<int>(meta[0]);
    b.patient = static_cast<int>(meta[1]);
    b.label = static_cast<int>(meta[2]);
    b.grid_side = static_cast<std::size_t>(meta[3]);
    b.validate();
    bags.push_back(std::move(b));
  }
  if (bags.empty()) throw InputError("no bags in " + path.string());
  return bags;
}

void GLTransConfig::validate() const {
  if (d_in == 0 || d_model == 0 || heads == 0 || layers == 0)
    throw ConfigError("gltrans: d_in, d_model, heads and layers must be positive");
  if (d_model % heads != 0)
    throw ConfigError("gltrans: d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (dilations.empty()) throw ConfigError("gltrans: need at least one dilation rate");
  for (auto r : dilations)
    if (r == 0) throw ConfigError("gltrans: dilation rates must be positive");
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("gltrans: kernel width must be odd");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("gltrans: dropout must lie in [0, 1)");
  if (classes != 2) throw ConfigError("gltrans: only binary heads are supported");
}

nn::Var glt_block(nn::Var tokens, const GltBlockVars& w, const GLTransConfig& cfg, std::mt19937_64* rng) {
  auto drop = [&](nn::Var v) { return rng ? nn::dropout(v, cfg.dropout, *rng) : v; };
  nn::Var normed = nn::layer_norm(tokens, w.ln1_gain, w.ln1_shift);
  nn::Var residual = nn::add(tokens, drop(nn::mhsa(normed, w.attn, cfg.heads)));
  if (cfg.local_branch) {
    nn::Var local = nn::dilated_conv1d(normed, w.conv_weight[0], w.conv_bias[0], cfg.dilations[0]);
    for (std::size_t r = 1; r < cfg.dilations.size(); ++r)
      local = nn::add(local, nn::dilated_conv1d(normed, w.conv_weight[r], w.conv_bias[r], cfg.dilations[r]));
    local = nn::scale(local, 1.0 / static_cast<double>(cfg.dilations.size()));
    local = nn::dense(nn::relu(local), w.local_weight, w.local_bias);
    residual = nn::add(residual, drop(local));
  }
  return nn::layer_norm(residual, w.ln2_gain, w.ln2_shift);
}

PooledVars attention_pool(nn::Var tokens, nn::Var w, nn::Var b) {
  const std::size_t n = tokens.value().dim(0);
  nn::Var logits = nn::reshape(nn::dense(tokens, w, b), {1, n});
  nn::Var scores = nn::softmax(logits);
  return {nn::matmul(scores, tokens), scores};
}

GLTrans::GLTrans(GLTransConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d_model;
  const double dense_std = 1.0 / std::sqrt(static_cast<double>(d));
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
    params_.add(name + ".weight", normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    params_.add(name + ".bias", Tensor({out}));
  };
  params_.add("input.scale", Tensor({cfg_.d_in}, 1.0), false);
  params_.add("input.shift", Tensor({cfg_.d_in}), false);
  dense("input", cfg_.d_in, d);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = layer_prefix(l);
    params_.add(p + "ln1.gain", Tensor({d}, 1.0));
    params_.add(p + "ln1.shift", Tensor({d}));
    for (const char* m : {"q", "k", "v", "o"}) {
      params_.add(p + "attn.w" + m, normal_tensor({d, d}, dense_std, rng));
      params_.add(p + "attn.b" + m, Tensor({d}));
    }
    for (auto r : cfg_.dilations) {
      const std::string c = p + "conv.r" + std::to_string(r);
      params_.add(c + ".weight",
                  normal_tensor({cfg_.kernel, d, d}, 1.0 / std::sqrt(static_cast<double>(cfg_.kernel * d)), rng));
      params_.add(c + ".bias", Tensor({d}));
    }
    dense(p + "local", d, d);
    params_.add(p + "ln2.gain", Tensor({d}, 1.0));
    params_.add(p + "ln2.shift", Tensor({d}));
  }
  dense("pool", d, 1);
  dense("head", d, cfg_.classes);
}

GLTrans::GLTrans(GLTransConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const GLTrans reference(cfg_, 0);
  if (reference.params_.size() != params_.size())
    throw ContractError("gltrans: parameter bundle has " + std::to_string(params_.size()) +
                        " entries, expected " + std::to_string(reference.params_.size()));
  for (const auto& p : reference.params_) {
    Param& mine = params_.get(p.name);
    expect_shape(mine.value, p.value.shape(), p.name.c_str());
    mine.trainable = p.trainable;
  }
}

void GLTrans::fit_standardization(const std::vector<Bag>& bags) {
  if (bags.empty()) throw InputError("gltrans: cannot fit standardisation on no bags");
  const std::size_t d = cfg_.d_in;
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double count = 0.0;
  for (const auto& b : bags) {
    if (b.embeddings.dim(1) != d) throw ContractError("gltrans: bag width differs from d_in");
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) sum[j] += b.embeddings.at(i, j);
    count += static_cast<double>(b.size());
  }
  for (auto& s : sum) s /= count;
  for (const auto& b : bags)
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) sq[j] += (b.embeddings.at(i, j) - sum[j]) * (b.embeddings.at(i, j) - sum[j]);
  Tensor& scale = params_.get("input.scale").value;
  Tensor& shift = params_.get("input.shift").value;
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(sq[j] / count);
    scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
    shift[j] = -sum[j] * scale[j];
  }
}

GltBlockVars GLTrans::bind_block(std::size_t layer, const Binder& bind) const {
  const std::string p = layer_prefix(layer);
  GltBlockVars w;
  w.ln1_gain = bind(p + "ln1.gain");
  w.ln1_shift = bind(p + "ln1.shift");
  w.attn = {bind(p + "attn.wq"), bind(p + "attn.bq"), bind(p + "attn.wk"), bind(p + "attn.bk"),
            bind(p + "attn.wv"), bind(p + "attn.bv"), bind(p + "attn.wo"), bind(p + "attn.bo")};
  if (cfg_.local_branch) {
    for (auto r : cfg_.dilations) {
      const std::string c = p + "conv.r" + std::to_string(r);
      w.conv_weight.push_back(bind(c + ".weight"));
      w.conv_bias.push_back(bind(c + ".bias"));
    }
    w.local_weight = bind(p + "local.weight");
    w.local_bias = bind(p + "local.bias");
  }
  w.ln2_gain = bind(p + "ln2.gain");
  w.ln2_shift = bind(p + "ln2.shift");
  return w;
}

GLTrans::Recorded GLTrans::run(nn::Var embeddings, const Binder& bind,
                               std::mt19937_64* rng) const {
  const Tensor& x = embeddings.value();
  expect_rank(x, 2, "gltrans input");
  if (x.dim(1) != cfg_.d_in)
    throw ContractError("gltrans: embedding width " + std::to_string(x.dim(1)) + " but model expects " +
                        std::to_string(cfg_.d_in));
  nn::Var h = nn::column_affine(embeddings, params_.get("input.scale").value, params_.get("input.shift").value);
  h = nn::dense(h, bind("input.weight"), bind("input.bias"));
  for (std::size_t l = 0; l < cfg_.layers; ++l) h = glt_block(h, bind_block(l, bind), cfg_, rng);
  const PooledVars pooled = attention_pool(h, bind("pool.weight"), bind("pool.bias"));
  nn::Var logits = nn::dense(pooled.pooled, bind("head.weight"), bind("head.bias"));
  return {nn::softmax(logits), pooled.scores};
}

GLTrans::Recorded GLTrans::forward(nn::Tape& tape, nn::Var embeddings, std::mt19937_64* dropout_rng) {
  const Binder bind = [&](const std::string& name) { return tape.param(params_.get(name)); };
  return run(embeddings, bind, dropout_rng);
}

PredictionOutput GLTrans::predict(const Tensor& embeddings) const {
  nn::Tape tape;
  const Binder bind = [&](const std::string& name) { return tape.constant(params_.get(name).value); };
  const Recorded rec = run(tape.constant(embeddings), bind, nullptr);
  PredictionOutput out;
  const Tensor& p = rec.probs.value();
  out.probs = {p[0], p[1]};
  out.label = p[1] > p[0] ? 1 : 0;
  const Tensor& s = rec.scores.value();
  out.scores.assign(s.data(), s.data() + s.size());
  return out;
}

ParamStore GLTrans::to_bundle() const {
  ParamStore out = params_;
  std::vector<double> header{static_cast<double>(cfg_.d_in),    static_cast<double>(cfg_.d_model),
                             static_cast<double>(cfg_.heads),   static_cast<double>(cfg_.layers),
                             static_cast<double>(cfg_.kernel),  cfg_.dropout,
                             static_cast<double>(cfg_.classes), cfg_.local_branch ? 1.0 : 0.0};
  for (auto r : cfg_.dilations) header.push_back(static_cast<double>(r));
  const std::size_t n = header.size();
  out.add("config.gltrans", Tensor({n}, std::move(header)), false);
  return out;
}

GLTrans GLTrans::from_bundle(const ParamStore& bundle) {
  if (!bundle.contains("config.gltrans")) throw InputError("gltrans bundle lacks its config record");
  const Tensor& h = bundle.get("config.gltrans").value;
  if (h.size() < 9) throw InputError("gltrans bundle: truncated config record");
  GLTransConfig cfg;
  cfg.d_in = static_cast<std::size_t>(h[0]);
  cfg.d_model = static_cast<std::size_t>(h[1]);
  cfg.heads = static_cast<std::size_t>(h[2]);
  cfg.layers = static_cast<std::size_t>(h[3]);
  cfg.kernel = static_cast<std::size_t>(h[4]);
  cfg.dropout = h[5];
  cfg.classes = static_cast<std::size_t>(h[6]);
  cfg.local_branch = h[7] != 0.0;
  cfg.dilations.clear();
  for (std::size_t i = 8; i < h.size(); ++i) cfg.dilations.push_back(static_cast<std::size_t>(h[i]));
  ParamStore params;
  for (const auto& p : bundle)
    if (p.name != "config.gltrans") params.add(p.name, p.value, p.trainable);
  return GLTrans(cfg, std::move(params));
}

nn::Var ce_loss(nn::Var probs, int label) {
  if (label != 0 && label != 1) throw ContractError("ce_loss: label must be 0 or 1");
  return nn::cross_entropy(probs, static_cast<std::size_t>(label));
}

double ce_loss(const std::array<double, 2>& probs, int label) {
  if (label != 0 && label != 1) throw ContractError("ce_loss: label must be 0 or 1");
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], nn::kProbFloor));
}

void GLTransTrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("gltrans training: epochs must be positive");
  if (!(lr > 0.0)) throw ConfigError("gltrans training: learning rate must be > 0");
  if (weight_decay < 0.0) throw ConfigError("gltrans training: weight decay must be >= 0");
  if (lookahead_k == 0) throw ConfigError("gltrans training: lookahead k must be positive");
}

GLTransTrainResult train_gltrans(const std::vector<Bag>& train, const std::vector<Bag>& val,
                                 const GLTransConfig& model_cfg, const GLTransTrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw InputError("train_gltrans: empty training split");
  if (val.empty()) throw InputError("train_gltrans: empty validation split");
  for (const auto& b : train) b.validate();
  for (const auto& b : val) b.validate();

  GLTrans model(model_cfg, cfg.seed);
  model.fit_standardization(train);
  nn::OptimizerConfig ocfg;
  ocfg.kind = nn::OptimizerKind::AdamLookahead;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.lookahead_k = cfg.lookahead_k;
  ocfg.lookahead_alpha = cfg.lookahead_alpha;
  nn::Optimizer opt(model.params(), ocfg);

  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> bag_order(train.size());
  std::iota(bag_order.begin(), bag_order.end(), 0);
  std::vector<int> val_labels;
  for (const auto& b : val) val_labels.push_back(b.label);

  GLTransTrainResult result{model, {}, 0};
  double best_f1 = -1.0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(bag_order.begin(), bag_order.end(), rng);
    double total = 0.0;
    for (std::size_t idx : bag_order) {
      const Bag& bag = train[idx];
      std::vector<std::size_t> order(bag.size());
      std::iota(order.begin(), order.end(), 0);
      if (cfg.shuffle_instances) std::shuffle(order.begin(), order.end(), rng);
      nn::Tape tape;
      model.params().zero_grad();
      const GLTrans::Recorded rec = model.forward(tape, tape.constant(permute_rows(bag.embeddings, order)), &rng);
      nn::Var loss = ce_loss(rec.probs, bag.label);
      total += loss.value()[0];
      tape.backward(loss);
      opt.step(model.params());
    }
    std::vector<int> preds;
    for (const auto& b : val) preds.push_back(model.predict(b).label);
    const double f1 = f1_accuracy(preds, val_labels).f1;
    result.trace.push_back({e, total / static_cast<double>(train.size()), f1});
    if (f1 > best_f1) {
      best_f1 = f1;
      result.best_epoch = e;
      result.model.params().assign_values(model.params());
    }
  }
  return result;
}

std::string glt_trace_csv(const std::vector<GltEpoch>& trace) {
  std::string out = "epoch,train_loss,val_f1\n";
  char line[96];
  for (const auto& t : trace) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", t.epoch, t.train_loss, t.val_f1);
    out += line;
  }
  return out;
}

}  // namespace magpath
