#include "admn/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "admn/errors.hpp"

namespace admn {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

// ---- configuration ----------------------------------------------------------------------

double StageSettings::lr_at(std::size_t step, std::size_t steps_per_epoch) const {
  return linear_decay ? lr * admn::linear_decay(step, epochs * steps_per_epoch) : lr;
}

BudgetSpec RunConfig::budget_spec(std::size_t budget) const {
  BudgetSpec b;
  b.budget = budget;
  b.costs = costs.empty() ? std::vector<std::size_t>(model.modalities.size(), 1) : costs;
  return b;
}

void RunConfig::validate() const {
  corruption.validate();
  model.validate();
  drop.validate();
  if (corruption.values.size() != model.modalities.size()) {
    throw ConfigError("data: one value set per modality is required");
  }
  if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("pretrain.mask_ratio must be in (0, 1)");
  if (!(pretrain_drop >= 0 && pretrain_drop < 1)) throw ConfigError("pretrain.drop must be in [0, 1)");
  for (const auto* s : {&pretrain, &finetune, &controller_train, &autoencoder}) {
    if (s->batch == 0) throw ConfigError("batch sizes must be positive");
    if (!(s->lr >= 0)) throw ConfigError("learning rates must be non-negative");
  }
  if (controller.head == CorruptionHeadKind::quantitative && controller.corruption_outputs != model.modalities.size()) {
    throw ConfigError("controller: quantitative head needs one output per modality");
  }
  if (controller.head == CorruptionHeadKind::categorical && controller.corruption_outputs != corruption.categories()) {
    throw ConfigError("controller: categorical head needs one output per corruption category");
  }
  if (budgets.empty()) throw ConfigError("eval.budgets must list at least one budget");
  if (seeds.empty()) throw ConfigError("eval.seeds must list at least one seed");
  const auto depths = model.depths();
  for (auto L : budgets) {
    try {
      budget_spec(L).validate(depths);
    } catch (const BudgetError& e) {
      throw ConfigError("eval.budgets: " + std::string(e.what()));
    }
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s + ",") {
    if (ch == ',' || ch == ' ' || ch == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
      for (const auto& [key, value] : body) unused_.insert(section + "." + key);
    }
  }

  bool has(const std::string& key) const { return tree_.get_optional<std::string>(path(key)).has_value(); }

  std::string str(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(path(key));
    if (!v) throw ConfigError("config: missing field '" + key + "'");
    unused_.erase(key);
    return trim(*v);
  }

  template <class T>
  T num(const std::string& key) const {
    const std::string s = str(key);
    std::istringstream in(s);
    T v{};
    in >> v;
    if (in.fail() || !in.eof()) throw ConfigError("config: field '" + key + "' has malformed value '" + s + "'");
    if constexpr (std::is_unsigned_v<T>)
      if (s.find('-') != std::string::npos) throw ConfigError("config: field '" + key + "' must be non-negative");
    return v;
  }

  template <class T>
  void opt(const std::string& key, T& target) const {
    if (has(key)) target = num<T>(key);
  }

  bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config: field '" + key + "' must be true or false");
  }

  template <class T>
  std::vector<T> list(const std::string& key) const {
    std::vector<T> out;
    for (const auto& item : split_list(str(key))) {
      std::istringstream in(item);
      T v{};
      in >> v;
      if (in.fail() || !in.eof()) throw ConfigError("config: field '" + key + "' has malformed item '" + item + "'");
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError("config: field '" + key + "' is empty");
    return out;
  }

  void stage(const std::string& section, StageSettings& s, const std::string& prefix = "") const {
    opt(section + "." + prefix + "epochs", s.epochs);
    opt(section + "." + prefix + "lr", s.lr);
    opt(section + "." + prefix + "batch", s.batch);
    const std::string key = section + "." + prefix + "schedule";
    if (!has(key)) return;
    const std::string v = str(key);
    if (v != "none" && v != "linear") throw ConfigError("config: field '" + key + "' must be none or linear");
    s.linear_decay = v == "linear";
  }

  void finish() const {
    if (!unused_.empty()) throw ConfigError("config: unknown field '" + *unused_.begin() + "'");
  }

 private:
  static pt::ptree::path_type path(const std::string& key) { return pt::ptree::path_type(key, '.'); }
  const pt::ptree& tree_;
  mutable std::set<std::string> unused_;
};

}  // namespace

RunConfig parse_run_config(std::istream& in) {
  pt::ptree tree;
  // The INI reader only treats whole ';' lines as comments; strip '#' lines first.
  std::stringstream cleaned;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (!t.empty() && t[0] == '#') continue;
    cleaned << line << '\n';
  }
  try {
    pt::ini_parser::read_ini(cleaned, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  const Reader r(tree);
  RunConfig c;

  c.corruption.mode = synth::parse_corruption_mode(r.str("data.mode"));
  c.corruption.values = {r.list<double>("data.values_a"), r.list<double>("data.values_b")};
  c.samples = r.num<std::size_t>("data.samples");
  c.data_seed = r.num<std::uint64_t>("data.seed");
  if (r.has("data.split")) {
    const auto s = r.list<double>("data.split");
    if (s.size() != 3) throw ConfigError("config: field 'data.split' needs three ratios");
    c.ratios = {s[0], s[1], s[2]};
  }

  const std::string task = r.str("model.task");
  if (task == "regress") {
    c.model.task = TaskKind::regress;
    c.model.outputs = 2;
  } else if (task == "classify") {
    c.model.task = TaskKind::classify;
    c.model.outputs = synth::kSectors;
  } else {
    throw ConfigError("config: field 'model.task' must be regress or classify");
  }
  for (auto& m : c.model.modalities) {
    r.opt("model.depth", m.depth);
    r.opt("model.dim", m.dim);
    r.opt("model.heads", m.heads);
    r.opt("model.patch", m.patch);
    r.opt("model.freeze", m.freeze);
  }
  r.opt("model.fusion_layers", c.model.fusion_layers);
  r.opt("model.fusion_dim", c.model.fusion_dim);
  r.opt("model.fusion_heads", c.model.fusion_heads);
  r.opt("model.head_hidden", c.model.head_hidden);
  r.opt("model.seed", c.model_seed);

  r.stage("pretrain", c.pretrain);
  r.opt("pretrain.mask_ratio", c.mask_ratio);
  r.opt("pretrain.decoder_layers", c.decoder_layers);
  r.opt("pretrain.drop", c.pretrain_drop);

  r.stage("finetune", c.finetune);
  r.opt("finetune.p", c.drop.p);
  r.opt("finetune.q", c.drop.q);
  r.opt("finetune.r", c.drop.r);

  auto& cc = c.controller;
  r.opt("controller.downsample", cc.downsample);
  r.opt("controller.conv1_channels", cc.conv1_channels);
  r.opt("controller.conv2_channels", cc.conv2_channels);
  r.opt("controller.embed_dim", cc.embed_dim);
  r.opt("controller.fusion_layers", cc.fusion_layers);
  r.opt("controller.fusion_heads", cc.fusion_heads);
  r.opt("controller.hidden", cc.hidden);
  if (r.has("controller.head")) {
    const std::string h = r.str("controller.head");
    if (h == "quantitative") cc.head = CorruptionHeadKind::quantitative;
    else if (h == "categorical") cc.head = CorruptionHeadKind::categorical;
    else throw ConfigError("config: field 'controller.head' must be quantitative or categorical");
  }
  cc.corruption_outputs =
      cc.head == CorruptionHeadKind::categorical ? c.corruption.categories() : c.model.modalities.size();
  cc.squared_corruption_loss = r.flag("controller.squared_loss", false);
  r.stage("controller", c.controller_train);
  r.stage("controller", c.autoencoder, "ae_");
  if (r.has("controller.mode")) c.mode = parse_controller_mode(r.str("controller.mode"));
  c.corruption_only_first_epoch = r.flag("controller.corruption_only_first_epoch", true);

  c.budgets = r.list<std::size_t>("eval.budgets");
  c.seeds = r.list<std::uint64_t>("eval.seeds");
  if (r.has("eval.costs")) c.costs = r.list<std::size_t>("eval.costs");

  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  return parse_run_config(in);
}

// ---- layout and small file helpers ----------------------------------------------------------

fs::path Layout::pretrain(std::uint64_t seed) const { return root / "pretrain" / ("seed" + std::to_string(seed)); }
fs::path Layout::finetune(std::uint64_t seed) const { return root / "finetune" / ("seed" + std::to_string(seed)); }
fs::path Layout::controller(ControllerMode mode, std::size_t budget, std::uint64_t seed) const {
  return root / "controller" / to_string(mode) / ("L" + std::to_string(budget)) / ("seed" + std::to_string(seed));
}

namespace {

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void require_artifact(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingArtifactError(what + " not found at " + path.string());
}

}  // namespace

void write_loss_csv(const fs::path& path, const std::vector<LossRow>& rows) {
  auto out = open_out(path);
  out << "phase,epoch,train_loss,val,aux\n";
  for (const auto& r : rows) out << r.phase << ',' << r.epoch << ',' << fmt(r.train) << ',' << fmt(r.val) << ',' << fmt(r.aux) << '\n';
}

std::vector<LossRow> read_loss_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("loss curve not found at " + path.string());
  std::vector<LossRow> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    LossRow r;
    std::string f;
    std::getline(ls, r.phase, ',');
    std::getline(ls, f, ',');
    r.epoch = std::stoul(f);
    std::getline(ls, f, ',');
    r.train = std::stod(f);
    std::getline(ls, f, ',');
    r.val = std::stod(f);
    std::getline(ls, f, ',');
    r.aux = std::stod(f);
    rows.push_back(r);
  }
  return rows;
}

std::vector<const synth::MultimodalSample*> epoch_order(const std::vector<synth::MultimodalSample>& split,
                                                        std::uint64_t seed, std::uint64_t epoch) {
  std::vector<const synth::MultimodalSample*> order;
  for (const auto& s : split) order.push_back(&s);
  Rng rng = Rng(seed).fork(1000 + epoch);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::vector<const synth::MultimodalSample*>> batches(
    const std::vector<const synth::MultimodalSample*>& order, std::size_t batch) {
  // The trailing partial batch is dropped so every step sees `batch` samples.
  std::vector<std::vector<const synth::MultimodalSample*>> out;
  for (std::size_t i = 0; i + batch <= order.size(); i += batch) out.emplace_back(order.begin() + i, order.begin() + i + batch);
  if (out.empty() && !order.empty()) out.push_back(order);
  return out;
}

// ---- data ------------------------------------------------------------------------------------

synth::Dataset run_generate(const RunConfig& cfg, const Layout& layout) {
  auto ds = synth::make_dataset(cfg.corruption, cfg.samples, cfg.data_seed, cfg.ratios);
  synth::save_dataset(layout.data(), ds);
  return ds;
}

synth::Dataset load_run_dataset(const RunConfig& cfg, const Layout& layout) {
  require_artifact(layout.data() / "manifest.txt", "dataset");
  auto ds = synth::load_dataset(layout.data());
  if (ds.modalities() != cfg.model.modalities.size()) throw ConfigError("dataset modality count does not match the model");
  for (const auto& m : cfg.model.modalities) {
    if (m.height != synth::kGrid || m.width != synth::kGrid || m.channels != 1) {
      throw ConfigError("model input geometry does not match the 1x16x16 dataset");
    }
  }
  if (ds.n != cfg.samples || ds.seed != cfg.data_seed || ds.spec.values != cfg.corruption.values ||
      ds.spec.mode != cfg.corruption.mode) {
    throw ConfigError("dataset at " + layout.data().string() + " was generated from a different [data] section");
  }
  return ds;
}

// ---- resumable training state -------------------------------------------------------------------

namespace {

struct OptimizerSlot {
  Adam* opt;
  std::string prefix;
};

struct TrainState {
  fs::path dir;

  fs::path state_dir() const { return dir / "state"; }
  fs::path loss_path() const { return dir / "loss.csv"; }

  // Epochs already completed; restores parameters, optimizer moments and loss rows when a state exists.
  std::size_t restore(const std::vector<NamedTensor>& params, const std::vector<OptimizerSlot>& opts,
                      std::vector<LossRow>& rows) const {
    if (!fs::exists(state_dir() / "manifest.txt")) return 0;
    const auto saved = load_checkpoint(state_dir());
    std::size_t epoch = 0;
    for (const auto& t : saved)
      if (t.name == "state.epoch") epoch = static_cast<std::size_t>(t.tensor.item());
    restore_checkpoint(state_dir(), params);
    for (const auto& o : opts) o.opt->load_state(saved, o.prefix);
    rows = read_loss_csv(loss_path());
    rows.resize(std::min(rows.size(), epoch));
    return epoch;
  }

  void save(const std::vector<NamedTensor>& params, const std::vector<OptimizerSlot>& opts, std::size_t epoch,
            const std::vector<LossRow>& rows) const {
    std::vector<NamedTensor> tensors = params;
    for (const auto& o : opts) {
      const auto st = o.opt->state(o.prefix);
      tensors.insert(tensors.end(), st.begin(), st.end());
    }
    tensors.push_back({"state.epoch", Tensor::scalar(static_cast<double>(epoch)), "state"});
    // Written beside the live state and swapped in, so an interruption never leaves a torn state.
    const fs::path tmp = dir / "state.tmp";
    fs::remove_all(tmp);
    save_checkpoint(tmp, tensors);
    fs::remove_all(state_dir());
    fs::rename(tmp, state_dir());
    write_loss_csv(loss_path(), rows);
  }
};

void append(std::vector<NamedTensor>& out, const std::vector<NamedTensor>& more) { out.insert(out.end(), more.begin(), more.end()); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void log_epoch(const TrainOptions& opts, const std::string& what, const LossRow& r) {
  if (!opts.verbose) return;
  std::cout << what << " " << r.phase << " epoch " << r.epoch << " train " << fmt(r.train) << " val " << fmt(r.val);
  if (r.aux != 0) std::cout << " aux " << fmt(r.aux);
  std::cout << std::endl;
}

bool interrupted(const TrainOptions& opts, std::size_t epoch) { return opts.stop_after && epoch >= *opts.stop_after; }

std::vector<const Matrix*> modality_images(const std::vector<const synth::MultimodalSample*>& batch, std::size_t m) {
  std::vector<const Matrix*> out;
  for (const auto* s : batch) out.push_back(&s->inputs[m]);
  return out;
}

}  // namespace

// ---- Stage 0 -----------------------------------------------------------------------------------

std::vector<LossRow> run_pretrain(const RunConfig& cfg, const Layout& layout, std::uint64_t seed,
                                  const TrainOptions& opts) {
  const auto ds = load_run_dataset(cfg, layout);
  auto net = MultimodalNet::init(cfg.model, seed);
  const std::size_t M = cfg.model.modalities.size();
  std::vector<MaeDecoder> decoders;
  std::vector<Adam> opts_m;
  Rng init_rng = Rng(seed).fork(77);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& mc = cfg.model.modalities[m];
    decoders.push_back(MaeDecoder::init(init_rng, mc, mc.dim, cfg.decoder_layers, mc.heads));
  }
  std::vector<NamedTensor> state;
  for (std::size_t m = 0; m < M; ++m) {
    const std::string pre = "m" + std::to_string(m);
    std::vector<NamedTensor> params;
    net.backbones[m].patch.collect(params, pre + ".patch", "pretrain");
    for (std::size_t j = 0; j < net.backbones[m].layers.size(); ++j)
      net.backbones[m].layers[j].collect(params, pre + ".layer" + std::to_string(j), "pretrain");
    append(params, decoders[m].parameters(pre + ".mae"));
    opts_m.emplace_back(params, AdamConfig{cfg.pretrain.lr});
  }
  std::vector<NamedTensor> params = net.parameters();
  std::vector<OptimizerSlot> slots;
  for (std::size_t m = 0; m < M; ++m) {
    append(params, decoders[m].parameters("m" + std::to_string(m) + ".mae"));
    slots.push_back({&opts_m[m], "adam" + std::to_string(m)});
  }

  const TrainState ts{layout.pretrain(seed)};
  std::vector<LossRow> rows;
  const std::size_t done = ts.restore(params, slots, rows);
  for (std::size_t epoch = done + 1; epoch <= cfg.pretrain.epochs; ++epoch) {
    Rng rng = Rng(seed).fork(2000 + epoch);
    std::vector<double> losses;
    const auto bs = batches(epoch_order(ds.train, seed, epoch), cfg.pretrain.batch);
    std::size_t step = (epoch - 1) * bs.size();
    for (const auto& b : bs) {
      const double lr = cfg.pretrain.lr_at(step++, bs.size());
      double l = 0;
      for (std::size_t m = 0; m < M; ++m)
        l += mae_pretrain_step(rng, net.backbones[m], decoders[m], cfg.model.modalities[m], opts_m[m],
                               modality_images(b, m), cfg.mask_ratio, cfg.pretrain_drop, lr);
      losses.push_back(l / double(M));
    }
    // Validation masks come from a fixed stream so the curve is comparable across epochs.
    double val = 0;
    {
      NoGradGuard ng;
      Rng vr = Rng(seed).fork(999);
      for (const auto& s : ds.val)
        for (std::size_t m = 0; m < M; ++m)
          val += mae_loss(vr, net.backbones[m], decoders[m], cfg.model.modalities[m], s.inputs[m], cfg.mask_ratio, 0.0)
                     .item();
      val /= double(ds.val.size() * M);
    }
    rows.push_back({"mae", epoch, mean_of(losses), val, 0});
    log_epoch(opts, "pretrain", rows.back());
    ts.save(params, slots, epoch, rows);
    if (interrupted(opts, epoch) && epoch < cfg.pretrain.epochs) return rows;
  }
  save_net(ts.dir / "checkpoint", net);
  write_loss_csv(ts.loss_path(), rows);
  return rows;
}

// ---- Stage 1 -----------------------------------------------------------------------------------

std::vector<LossRow> run_finetune(const RunConfig& cfg, const Layout& layout, std::uint64_t seed,
                                  const TrainOptions& opts) {
  const auto ds = load_run_dataset(cfg, layout);
  auto net = MultimodalNet::init(cfg.model, seed);
  const fs::path pre = layout.pretrain(seed) / "checkpoint";
  require_artifact(pre / "manifest.txt", "Stage 0 checkpoint");
  load_net(pre, net);
  net.apply_freeze();
  Adam opt(net.tunable_parameters(), {cfg.finetune.lr});
  const std::vector<NamedTensor> params = net.parameters();
  const std::vector<OptimizerSlot> slots{{&opt, "adam"}};
  const auto depths = cfg.model.depths();
  const TrainState ts{layout.finetune(seed)};
  std::vector<LossRow> rows;
  const std::size_t done = ts.restore(params, slots, rows);
  for (std::size_t epoch = done + 1; epoch <= cfg.finetune.epochs; ++epoch) {
    Rng rng = Rng(seed).fork(3000 + epoch);
    std::vector<double> losses;
    const auto bs = batches(epoch_order(ds.train, seed, epoch), cfg.finetune.batch);
    std::size_t step = (epoch - 1) * bs.size();
    for (const auto& b : bs) losses.push_back(stage1_finetune_step(rng, net, opt, b, cfg.drop, cfg.finetune.lr_at(step++, bs.size())));
    const auto full = evaluate(net, ds.val, upper_bound_provider(depths));
    const auto half = evaluate(net, ds.val, every_other_provider(std::max<std::size_t>(1, depths[0] / 2), depths));
    rows.push_back({"finetune", epoch, mean_of(losses), full.mean_error, half.mean_error});
    log_epoch(opts, "finetune", rows.back());
    ts.save(params, slots, epoch, rows);
    if (interrupted(opts, epoch) && epoch < cfg.finetune.epochs) return rows;
  }
  save_net(ts.dir / "checkpoint", net);
  write_loss_csv(ts.loss_path(), rows);
  return rows;
}

MultimodalNet load_stage1(const RunConfig& cfg, const Layout& layout, std::uint64_t seed) {
  const fs::path dir = layout.finetune(seed) / "checkpoint";
  require_artifact(dir / "manifest.txt", "Stage 1 checkpoint");
  auto net = MultimodalNet::init(cfg.model, seed);
  load_net(dir, net);
  net.set_requires_grad(false);
  return net;
}

// ---- controller -------------------------------------------------------------------------------

std::vector<LossRow> run_train_controller(const RunConfig& cfg, const Layout& layout, std::size_t budget,
                                          ControllerMode mode, std::uint64_t seed, const TrainOptions& opts) {
  const auto spec = cfg.budget_spec(budget);
  spec.validate(cfg.model.depths());
  const auto ds = load_run_dataset(cfg, layout);
  const auto net = load_stage1(cfg, layout, cfg.model_seed);
  const auto frozen_hash = parameter_hash(net.parameters());

  ControllerConfig ccfg = cfg.controller;
  const bool supervised = mode == ControllerMode::corruption_supervised || mode == ControllerMode::plain_st;
  if (!supervised) ccfg.head = CorruptionHeadKind::none;
  ccfg.decoder = mode == ControllerMode::autoencoder;
  auto c = ControllerNet::init(ccfg, cfg.model, seed);

  const std::size_t ae_epochs = mode == ControllerMode::autoencoder ? cfg.autoencoder.epochs : 0;
  std::vector<NamedTensor> ae_params = c.parameters_with_role("perceive");
  append(ae_params, c.parameters_with_role("decoder"));
  Adam ae_opt(ae_params, {cfg.autoencoder.lr});

  std::vector<NamedTensor> trained = c.parameters_with_role("alloc");
  if (mode != ControllerMode::autoencoder) append(trained, c.parameters_with_role("perceive"));
  append(trained, c.parameters_with_role("corruption"));
  Adam opt(trained, {cfg.controller_train.lr});

  const std::vector<NamedTensor> params = c.parameters();
  std::vector<OptimizerSlot> slots{{&opt, "adam"}};
  if (ae_epochs) slots.push_back({&ae_opt, "adam_ae"});
  const TrainState ts{layout.controller(mode, budget, seed)};
  std::vector<LossRow> rows;
  const std::size_t done = ts.restore(params, slots, rows);
  const std::size_t total = ae_epochs + cfg.controller_train.epochs;

  const auto first_order = epoch_order(ds.train, seed, 1);
  const std::size_t ae_steps_per = batches(first_order, cfg.autoencoder.batch).size();
  const std::size_t steps_per = batches(first_order, cfg.controller_train.batch).size();

  for (std::size_t epoch = done + 1; epoch <= total; ++epoch) {
    const auto order = epoch_order(ds.train, seed, epoch);
    if (epoch <= ae_epochs) {
      std::vector<double> losses;
      std::size_t step = (epoch - 1) * ae_steps_per;
      for (const auto& b : batches(order, cfg.autoencoder.batch))
        losses.push_back(ae_pretrain_step(c, ae_opt, b, cfg.autoencoder.lr_at(step++, ae_steps_per)));
      double val = 0;
      {
        NoGradGuard ng;
        for (const auto& s : ds.val) val += reconstruction_loss(c, s.inputs).item();
        val /= double(ds.val.size());
      }
      rows.push_back({"ae_pretrain", epoch, mean_of(losses), val, 0});
    } else {
      // The perceptual stack stays frozen after autoencoder pretraining.
      if (ae_epochs) nn::set_requires_grad(c.parameters_with_role("perceive"), false);
      const std::size_t local = epoch - ae_epochs;
      Rng rng = Rng(seed).fork(4000 + epoch);
      std::vector<double> task, corr;
      std::size_t step = (local - 1) * steps_per;
      for (const auto& b : batches(order, cfg.controller_train.batch)) {
        ControllerSchedule sched;
        sched.epoch = local;
        sched.corruption_only_first_epoch = cfg.corruption_only_first_epoch;
        sched.lr = cfg.controller_train.lr_at(step++, steps_per);
        const auto l = controller_train_step(rng, c, net, opt, b, spec, ds.spec, mode, sched);
        task.push_back(l.task);
        corr.push_back(l.corruption);
      }
      const auto val = evaluate(net, ds.val, controller_provider(c, spec));
      rows.push_back({to_string(mode), epoch, mean_of(task), val.mean_error, mean_of(corr)});
    }
    if (parameter_hash(net.parameters()) != frozen_hash) {
      throw InvariantError("Stage 1 network changed during controller training");
    }
    log_epoch(opts, "controller", rows.back());
    ts.save(params, slots, epoch, rows);
    if (interrupted(opts, epoch) && epoch < total) return rows;
  }
  save_controller(ts.dir / "checkpoint", c);
  write_loss_csv(ts.loss_path(), rows);
  auto dump = open_out(ts.dir / "latent.csv");
  write_latent_dump(dump, c, ds.test, ds.spec);
  return rows;
}

ControllerNet load_trained_controller(const RunConfig& cfg, const Layout& layout, ControllerMode mode,
                                      std::size_t budget, std::uint64_t seed) {
  const fs::path dir = layout.controller(mode, budget, seed) / "checkpoint";
  require_artifact(dir / "manifest.txt", "controller checkpoint (" + to_string(mode) + ", L=" + std::to_string(budget) +
                                             ", seed " + std::to_string(seed) + ")");
  ControllerConfig ccfg = cfg.controller;
  if (mode != ControllerMode::corruption_supervised && mode != ControllerMode::plain_st) ccfg.head = CorruptionHeadKind::none;
  ccfg.decoder = mode == ControllerMode::autoencoder;
  auto c = ControllerNet::init(ccfg, cfg.model, seed);
  load_controller(dir, c);
  return c;
}

// ---- evaluation ---------------------------------------------------------------------------------

std::optional<ControllerMode> provider_mode(const std::string& provider) {
  if (provider == "ADMN") return ControllerMode::corruption_supervised;
  if (provider == "ADMN_AE") return ControllerMode::autoencoder;
  if (provider == "Task-Only") return ControllerMode::task_only;
  if (provider == "Plain-ST") return ControllerMode::plain_st;
  const auto& names = provider_names();
  if (std::find(names.begin(), names.end(), provider) == names.end()) throw ConfigError("unknown provider '" + provider + "'");
  return std::nullopt;
}

namespace {

std::string file_safe(std::string s) {
  std::replace(s.begin(), s.end(), ' ', '_');
  return s;
}

CellResult eval_cell(const RunConfig& cfg, const Layout& layout, const MultimodalNet& net, const synth::Dataset& ds,
                     const std::string& provider, std::size_t budget, std::uint64_t seed) {
  CellResult cell{provider, budget, seed};
  const auto spec = cfg.budget_spec(budget);
  const auto depths = cfg.model.depths();
  MaskProvider mp;
  std::optional<ControllerNet> c;
  try {
    if (auto mode = provider_mode(provider)) {
      c = load_trained_controller(cfg, layout, *mode, budget, seed);
      mp = controller_provider(*c, spec);
      cell.controller_macs = controller_macs(*c);
    } else if (provider == "Naive") {
      mp = naive_provider(spec, depths);
    } else if (provider == "Unimodal-A") {
      mp = unimodal_provider(0, spec, depths);
    } else if (provider == "Unimodal-B") {
      mp = unimodal_provider(1, spec, depths);
    } else {
      mp = upper_bound_provider(depths);
    }
  } catch (const BudgetError&) {
    cell.feasible = false;
    return cell;
  }
  const auto report = evaluate(net, ds.test, mp);
  cell.metric = report.mean_error;
  cell.mean_macs = report.mean_macs;
  if (c) {
    for (const auto& r : report.records)
      if (!enforce_budget(r.mask, spec).ok) throw InvariantError("controller plan broke the budget: " + r.mask.to_string());
    auto log = open_out(layout.eval() / "plans" /
                        (file_safe(provider) + "_L" + std::to_string(budget) + "_seed" + std::to_string(seed) + ".csv"));
    write_plan_log(log, report, ds.test, budget);
  }
  return cell;
}

}  // namespace

std::vector<CellResult> run_eval(const RunConfig& cfg, const Layout& layout, const std::vector<std::string>& providers,
                                 std::size_t threads) {
  const auto ds = load_run_dataset(cfg, layout);
  const auto net = load_stage1(cfg, layout, cfg.model_seed);
  for (const auto& p : providers) provider_mode(p);

  struct Job {
    std::string provider;
    std::size_t budget;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& p : providers)
    for (auto L : cfg.budgets)
      for (auto s : cfg.seeds) jobs.push_back({p, L, s});
  // Artifacts are checked up front so a missing controller fails before any work.
  for (const auto& j : jobs)
    if (auto mode = provider_mode(j.provider)) {
      try {
        cfg.budget_spec(j.budget).validate(cfg.model.depths());
      } catch (const BudgetError&) {
        continue;
      }
      require_artifact(layout.controller(*mode, j.budget, j.seed) / "checkpoint" / "manifest.txt",
                       "controller checkpoint (" + j.provider + ", L=" + std::to_string(j.budget) + ", seed " +
                           std::to_string(j.seed) + ")");
    }

  std::vector<CellResult> cells(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        cells[i] = eval_cell(cfg, layout, net, ds, jobs[i].provider, jobs[i].budget, jobs[i].seed);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return cells;
}

std::vector<SummaryRow> summarize(const std::vector<CellResult>& cells, const std::vector<std::string>& providers,
                                  const std::vector<std::size_t>& budgets) {
  std::vector<SummaryRow> rows;
  for (auto L : budgets) {
    const std::size_t first = rows.size();
    for (const auto& p : providers) {
      SummaryRow r;
      r.provider = p;
      r.budget = L;
      std::vector<double> m;
      double macs = 0, cmacs = 0;
      for (const auto& c : cells) {
        if (c.provider != p || c.budget != L) continue;
        if (!c.feasible) r.feasible = false;
        m.push_back(c.metric);
        macs += c.mean_macs;
        cmacs += double(c.controller_macs);
      }
      r.seeds = m.size();
      if (m.empty()) r.feasible = false;
      if (r.feasible) {
        r.mean = mean_of(m);
        double ss = 0;
        for (double v : m) ss += (v - r.mean) * (v - r.mean);
        r.stdev = m.size() > 1 ? std::sqrt(ss / double(m.size() - 1)) : 0.0;
        r.mean_macs = macs / double(m.size());
        r.controller_macs = cmacs / double(m.size());
      }
      rows.push_back(r);
    }
    for (std::size_t i = first; i < rows.size(); ++i) {
      if (!rows[i].feasible) continue;
      rows[i].rank = 1;
      for (std::size_t j = first; j < rows.size(); ++j)
        if (rows[j].feasible && rows[j].mean < rows[i].mean) ++rows[i].rank;
    }
  }
  return rows;
}

void write_cells_csv(const fs::path& path, const std::vector<CellResult>& cells) {
  auto out = open_out(path);
  out << "provider,budget,seed,feasible,metric,mean_macs,controller_macs\n";
  for (const auto& c : cells)
    out << c.provider << ',' << c.budget << ',' << c.seed << ',' << (c.feasible ? 1 : 0) << ',' << fmt(c.metric) << ','
        << fmt(c.mean_macs) << ',' << c.controller_macs << '\n';
}

std::vector<CellResult> read_cells_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("evaluation results not found at " + path.string() + " (run eval first)");
  std::vector<CellResult> cells;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string f[7];
    for (auto& x : f) std::getline(ls, x, ',');
    try {
      cells.push_back({f[0], std::stoul(f[1]), std::stoull(f[2]), f[3] == "1", std::stod(f[4]), std::stod(f[5]),
                       std::stoull(f[6])});
    } catch (const std::exception&) {
      throw FormatError("malformed results line: " + line);
    }
  }
  return cells;
}

void write_summary_csv(const fs::path& path, const std::vector<SummaryRow>& rows) {
  auto out = open_out(path);
  out << "provider,budget,feasible,mean,std,seeds,rank,mean_macs,controller_macs\n";
  for (const auto& r : rows)
    out << r.provider << ',' << r.budget << ',' << (r.feasible ? 1 : 0) << ',' << fmt(r.mean) << ',' << fmt(r.stdev)
        << ',' << r.seeds << ',' << r.rank << ',' << fmt(r.mean_macs) << ',' << fmt(r.controller_macs) << '\n';
}

void write_table(std::ostream& os, const std::vector<SummaryRow>& rows, const std::vector<std::string>& providers,
                 const std::vector<std::size_t>& budgets) {
  auto cell = [&](const std::string& p, std::size_t L) -> std::string {
    for (const auto& r : rows) {
      if (r.provider != p || r.budget != L) continue;
      if (!r.feasible) return "—";
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << r.mean << " ± " << r.stdev << " (#" << r.rank << ")";
      return s.str();
    }
    return "—";
  };
  // Width in code points, so "±" and "—" count once.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::vector<std::string>> grid{{"provider"}};
  for (auto L : budgets) grid[0].push_back("L=" + std::to_string(L));
  for (const auto& p : providers) {
    grid.push_back({p});
    for (auto L : budgets) grid.back().push_back(cell(p, L));
  }
  std::vector<std::size_t> w(grid[0].size(), 0);
  for (const auto& row : grid)
    for (std::size_t i = 0; i < row.size(); ++i) w[i] = std::max(w[i], width(row[i]));
  for (const auto& row : grid) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      os << row[i] << std::string(w[i] - width(row[i]), ' ');
      os << (i + 1 < row.size() ? "  " : "\n");
    }
  }
}

std::vector<ReportRow> flops_rows(const std::vector<SummaryRow>& rows) {
  std::vector<ReportRow> out;
  for (const auto& r : rows) {
    if (!r.feasible) continue;
    ReportRow rr;
    rr.budget = r.budget;
    rr.provider = r.provider;
    rr.mean_flops = r.mean_macs + r.controller_macs;
    rr.controller_flops = r.controller_macs;
    rr.controller_share = rr.mean_flops > 0 ? r.controller_macs / rr.mean_flops : 0.0;
    rr.mean_metric = r.mean;
    out.push_back(rr);
  }
  return out;
}

void write_eval_outputs(const RunConfig& cfg, const Layout& layout, const std::vector<CellResult>& cells,
                        const std::vector<std::string>& providers) {
  write_cells_csv(layout.eval() / "cells.csv", cells);
  {
    auto out = open_out(layout.eval() / "metrics.csv");
    bool header = true;
    for (const auto& c : cells) {
      if (!c.feasible) continue;
      write_metric_csv(out, "test", c.budget, c.provider, c.seed, c.metric, header);
      header = false;
    }
  }
  const auto summary = summarize(cells, providers, cfg.budgets);
  write_summary_csv(layout.eval() / "summary.csv", summary);
  {
    auto out = open_out(layout.eval() / "table.txt");
    write_table(out, summary, providers, cfg.budgets);
  }
  auto out = open_out(layout.eval() / "flops.csv");
  write_report_csv(out, flops_rows(summary));
}

}  // namespace admn
