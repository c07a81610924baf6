#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include "admn/errors.hpp"
#include "admn/model.hpp"
#include "doctest.h"
#include "grad_util.hpp"

using namespace admn;

namespace {

MultimodalNetConfig small_config() {
  auto cfg = MultimodalNetConfig::toy();
  cfg.fusion_layers = 1;
  return cfg;
}

// 2 modalities, depth 2, dim 8, 8x8 inputs: small enough for finite differences.
MultimodalNetConfig tiny_config() {
  MultimodalNetConfig cfg;
  for (const char* name : {"a", "b"}) {
    ModalityConfig m;
    m.name = name;
    m.height = m.width = 8;
    m.patch = 4;
    m.depth = 2;
    m.dim = 8;
    m.heads = 2;
    m.freeze = 1;
    cfg.modalities.push_back(m);
  }
  cfg.fusion_layers = 1;
  cfg.fusion_dim = 8;
  cfg.fusion_heads = 2;
  cfg.head_hidden = 8;
  return cfg;
}

Matrix random_image(Rng& rng, std::size_t h, std::size_t w) {
  Matrix m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Randomizes biases and norm affines too, so zero-initialized tensors do not
// hide errors in their gradients.
void perturb(MultimodalNet& net, Rng& rng, double s = 0.3) {
  for (auto& p : net.parameters()) {
    Tensor t = p.tensor;
    for (Eigen::Index i = 0; i < t.mutable_value().size(); ++i) t.mutable_value().data()[i] += s * rng.normal();
  }
}

synth::Dataset small_dataset() { return synth::make_dataset({}, 120, 3); }

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(MultimodalNetConfig::toy().validate());
  auto c = MultimodalNetConfig::toy();
  c.modalities[0].freeze = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MultimodalNetConfig::toy();
  c.fusion_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MultimodalNetConfig::toy();
  c.modalities.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(MultimodalNetConfig::toy().fusion_layers == 6);
  CHECK(MultimodalNetConfig::toy().fusion_tokens() == 33);
}

TEST_CASE("backbone_forward examples") {
  auto cfg = small_config();
  auto net = MultimodalNet::init(cfg, 7);
  Rng rng(8);
  const auto& mc = cfg.modalities[0];
  const auto& b = net.backbones[0];
  const Tensor img = image_tensor(random_image(rng, 16, 16), mc);
  const Tensor embedded = nn::add_positional(nn::patch_embed(img, mc.patch, b.patch));

  CHECK(backbone_forward(b, mc, img, {false, false, false, false}).value() == embedded.value());

  Tensor all = embedded;
  for (const auto& l : b.layers) all = nn::transformer_layer_forward(all, l, true);
  CHECK(backbone_forward(b, mc, img, {true, true, true, true}).value() == all.value());

  Tensor sel = nn::transformer_layer_forward(nn::transformer_layer_forward(embedded, b.layers[0], true), b.layers[2], true);
  CHECK(backbone_forward(b, mc, img, {true, false, true, false}).value() == sel.value());

  // A backbone physically missing layers 1 and 3.
  Backbone pruned{b.patch, {b.layers[0], b.layers[2]}};
  ModalityConfig pm = mc;
  pm.depth = 2;
  CHECK(backbone_forward(pruned, pm, img, {true, true}).value() == sel.value());

  CHECK_THROWS_AS(backbone_forward(b, mc, img, {true, true}), ContractError);

  // Gates of exactly 0/1 reproduce the boolean path.
  auto gates = Tensor::from_data({1, 4}, std::vector<double>{1, 0, 1, 0});
  CHECK((backbone_forward(b, mc, img, gates).value() - sel.value()).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("mask-identity consistency over random masks") {
  auto cfg = small_config();
  auto net = MultimodalNet::init(cfg, 9);
  Rng rng(10);
  const auto& mc = cfg.modalities[1];
  const auto& b = net.backbones[1];
  for (int trial = 0; trial < 16; ++trial) {
    std::vector<bool> mask(4);
    for (std::size_t j = 0; j < 4; ++j) mask[j] = (trial >> j) & 1;
    Backbone pruned{b.patch, {}};
    for (std::size_t j = 0; j < 4; ++j)
      if (mask[j]) pruned.layers.push_back(b.layers[j]);
    ModalityConfig pm = mc;
    pm.depth = pruned.layers.size();
    const Tensor img = image_tensor(random_image(rng, 16, 16), mc);
    CHECK(backbone_forward(b, mc, img, mask).value() ==
          backbone_forward(pruned, pm, img, std::vector<bool>(pm.depth, true)).value());
  }
}

TEST_CASE("fuse_and_predict contracts and symmetry") {
  auto cfg = small_config();
  auto net = MultimodalNet::init(cfg, 11);
  CHECK_THROWS_AS(fuse_and_predict(net, {}), ContractError);
  CHECK_THROWS_AS(fuse_and_predict(net, {Tensor()}), ContractError);

  // With identical modality weights, swapping the inputs leaves the output
  // unchanged: the fusion encoder carries no positions, so attention is
  // permutation-equivariant over tokens.
  auto twin = net;
  twin.backbones[1] = twin.backbones[0];
  twin.projections[1] = twin.projections[0];
  Rng rng(12);
  Matrix a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
  const auto mask = LayerMask::all(cfg.depths(), true);
  Matrix ab = forward(twin, {a, b}, mask).value();
  Matrix ba = forward(twin, {b, a}, mask).value();
  CHECK((ab - ba).cwiseAbs().maxCoeff() < 1e-12);
  // The distinct weights of the original net break that symmetry.
  CHECK((forward(net, {a, b}, mask).value() - forward(net, {b, a}, mask).value()).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("all-false masks give the input-independent prior predictor") {
  auto cfg = small_config();
  auto net = MultimodalNet::init(cfg, 13);
  auto ds = small_dataset();
  const auto none = LayerMask::all(cfg.depths(), false);
  const Matrix prior = fuse_and_predict(net, {Tensor(), Tensor()}).value();
  double expected = 0;
  for (const auto& s : ds.test) {
    CHECK(forward(net, s.inputs, none).value() == prior);
    expected += task_error(cfg, prior, s);
  }
  auto report = evaluate(net, ds.test, [&](const synth::MultimodalSample&) { return none; });
  CHECK(report.mean_error == doctest::Approx(expected / ds.test.size()).epsilon(1e-14));
  CHECK_THROWS_AS(evaluate(net, {}, [&](const synth::MultimodalSample&) { return none; }), ContractError);

  auto again = evaluate(net, ds.test, [&](const synth::MultimodalSample&) { return none; });
  CHECK(again.mean_error == report.mean_error);
}

TEST_CASE("instrumented MACs equal the analytic prediction") {
  auto cfg = MultimodalNetConfig::toy();
  auto net = MultimodalNet::init(cfg, 14);
  Rng rng(15);
  Matrix a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
  NoGradGuard ng;
  for (int trial = 0; trial < 40; ++trial) {
    auto mask = sample_training_mask(rng, cfg.depths(), {0.5, 0.2, 0.0});
    std::vector<bool> dropped = sample_modality_dropout(rng, 2, 0.2);
    MacCounter c;
    forward(net, {a, b}, mask, dropped);
    CHECK(c.count() == predicted_macs(net, mask, dropped).total());
  }
  // Full network: 8 backbone layers, 6 fusion layers over 33 tokens.
  const auto full = predicted_macs(net, LayerMask::all(cfg.depths(), true));
  CHECK(full.get("m0.layer3") == layer_flops(16, 32));
  CHECK(full.get("fusion5") == layer_flops(33, 32));
  CHECK(full.total() == 2 * (16 * 16 * 32 + 4 * layer_flops(16, 32) + 16 * 32 * 32) + 6 * layer_flops(33, 32) +
                            32 * 64 + 64 * 2);
}

TEST_CASE("end-to-end gradients at 1e-3") {
  auto cfg = tiny_config();
  auto net = MultimodalNet::init(cfg, 16);
  Rng rng(17);
  perturb(net, rng);
  synth::MultimodalSample s;
  s.z = {0.3, 0.7};
  s.inputs = {random_image(rng, 8, 8), random_image(rng, 8, 8)};
  const auto mask = LayerMask::parse("11|01");
  for (const auto& p : net.parameters()) {
    INFO(p.name);
    CHECK(testing::leaf_grad_error(p.tensor, [&] { return task_loss(cfg, forward(net, s.inputs, mask), s); }) < 1e-3);
  }
  // Gradient into the layer gates.
  auto z = Tensor::from_data({1, 4}, std::vector<double>{1, 0, 1, 1});
  auto report = grad_check([&](const Tensor& g) { return task_loss(cfg, forward_gated(net, s.inputs, g), s); }, z,
                           {1e-5, 1e-3, 1e-5});
  CHECK(report.passed);

  cfg.task = TaskKind::classify;
  cfg.outputs = 8;
  auto cls = MultimodalNet::init(cfg, 18);
  perturb(cls, rng);
  s.label_class = 5;
  for (const auto& p : cls.parameters()) {
    INFO(p.name);
    CHECK(testing::leaf_grad_error(p.tensor, [&] { return task_loss(cfg, forward(cls, s.inputs, mask), s); }) < 1e-3);
  }
}

TEST_CASE("golden forward output") {
  auto cfg = small_config();
  auto net = MultimodalNet::init(cfg, 2024);
  auto ds = synth::make_dataset({}, 60, 2024);
  const auto mask = LayerMask::parse("1010|1111");
  NoGradGuard ng;
  std::vector<double> values;
  for (std::size_t i = 0; i < 4; ++i)
    for (double v : forward(net, ds.test[i].inputs, mask).data()) values.push_back(v);

  const std::filesystem::path path = std::filesystem::path(ADMN_TEST_DATA) / "golden_forward.txt";
  if (std::getenv("ADMN_WRITE_GOLDEN")) {
    std::ofstream out(path);
    out << std::setprecision(17);
    for (double v : values) out << v << '\n';
  }
  std::ifstream in(path);
  REQUIRE_MESSAGE(in.good(), "missing golden file; regenerate with ADMN_WRITE_GOLDEN=1");
  std::vector<double> golden;
  for (double v; in >> v;) golden.push_back(v);
  REQUIRE(golden.size() == values.size());
  for (std::size_t i = 0; i < values.size(); ++i) CHECK(std::abs(values[i] - golden[i]) < 1e-10);
}

TEST_CASE("stage 1 step respects the freeze boundary and lr = 0") {
  auto cfg = small_config();
  for (auto& m : cfg.modalities) m.freeze = m.depth - 1;
  auto net = MultimodalNet::init(cfg, 19);
  net.apply_freeze();
  auto ds = small_dataset();
  std::vector<const synth::MultimodalSample*> batch;
  for (std::size_t i = 0; i < 8; ++i) batch.push_back(&ds.train[i]);

  auto snapshot = [&] {
    std::vector<Matrix> v;
    for (const auto& p : net.parameters()) v.push_back(p.tensor.value());
    return v;
  };
  {
    const auto before = snapshot();
    Adam zero(net.tunable_parameters(), {0.0});
    Rng rng(20);
    stage1_finetune_step(rng, net, zero, batch, {0.0, 0.0, 0.0});
    CHECK(snapshot() == before);
  }

  const auto before = snapshot();
  const auto before_hash = parameter_hash(net.parameters());
  Adam opt(net.tunable_parameters(), {1e-3});
  Rng rng(21);
  stage1_finetune_step(rng, net, opt, batch, {0.0, 0.0, 0.0});
  const auto after = snapshot();
  CHECK(parameter_hash(net.parameters()) != before_hash);
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    INFO(params[i].name);
    const bool frozen = params[i].role == "frozen";
    if (frozen) {
      CHECK(after[i] == before[i]);
    } else if (params[i].name.find("ln") == std::string::npos) {
      CHECK(after[i] != before[i]);
    }
  }
  CHECK(params[0].name == "m0.patch.weight");
  CHECK(params[0].role == "frozen");
  const auto tunable = net.tunable_parameters();
  CHECK(std::none_of(tunable.begin(), tunable.end(), [](const NamedTensor& p) { return p.name.rfind("m0.layer0.", 0) == 0; }));
  CHECK(std::any_of(tunable.begin(), tunable.end(), [](const NamedTensor& p) { return p.name.rfind("m1.layer3.", 0) == 0; }));
}

TEST_CASE("checkpoint round trip reproduces outputs") {
  auto cfg = small_config();
  auto net = MultimodalNet::init(cfg, 22);
  Rng rng(23);
  perturb(net, rng, 0.1);
  const auto dir = std::filesystem::temp_directory_path() / "admn_model_ckpt";
  std::filesystem::remove_all(dir);
  save_net(dir, net);
  auto other = MultimodalNet::init(cfg, 99);
  load_net(dir, other);
  CHECK(parameter_hash(other.parameters()) == parameter_hash(net.parameters()));
  Matrix a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
  const auto mask = LayerMask::parse("1100|1011");
  CHECK(forward(net, {a, b}, mask).value() == forward(other, {a, b}, mask).value());
  std::filesystem::remove_all(dir);
}

TEST_CASE("mae pretraining") {
  CHECK(mae_masked_count(16, 0.75) == 12);
  CHECK(mae_masked_count(16, 1e-6) == 1);
  CHECK(mae_masked_count(16, 0.999999) == 15);

  auto cfg = MultimodalNetConfig::toy();
  auto net = MultimodalNet::init(cfg, 24);
  const auto& mc = cfg.modalities[0];
  Rng init(25);
  auto dec = MaeDecoder::init(init, mc, 32, 1, 4);
  std::vector<NamedTensor> params;
  net.backbones[0].patch.collect(params, "patch", "");
  for (std::size_t j = 0; j < 4; ++j) net.backbones[0].layers[j].collect(params, "l" + std::to_string(j), "");
  for (auto& p : dec.parameters("dec")) params.push_back(p);
  Adam opt(params, {1e-3});

  synth::CorruptionSpec spec;
  spec.values = {{0}, {0}};
  auto ds = synth::make_dataset(spec, 100, 26);
  // Held-out loss under one fixed random state, so masks match across calls.
  auto held_out = [&] {
    NoGradGuard ng;
    Rng fixed(1234);
    double total = 0;
    for (const auto& s : ds.test) total += mae_loss(fixed, net.backbones[0], dec, mc, s.inputs[0], 0.75, 0.0).item();
    return total / double(ds.test.size());
  };
  const double initial = held_out();
  Rng rng(27);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    std::vector<const Matrix*> batch;
    for (std::size_t k = 0; k < 8; ++k) batch.push_back(&ds.train[(step * 8 + k) % ds.train.size()].inputs[0]);
    losses.push_back(mae_pretrain_step(rng, net.backbones[0], dec, mc, opt, batch, 0.75, 0.2));
  }
  const double trained = held_out();
  MESSAGE("mae held-out loss " << initial << " -> " << trained);
  CHECK(trained < initial);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += losses[i];
    last += losses[190 + i];
  }
  CHECK(last < first);
  CHECK_THROWS_AS(mae_loss(rng, net.backbones[0], dec, mc, ds.train[0].inputs[0], 1.0, 0.2), ConfigError);
}
