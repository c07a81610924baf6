#include <sstream>

#include "admn/budget.hpp"
#include "admn/errors.hpp"
#include "admn/nn.hpp"
#include "doctest.h"

using namespace admn;

TEST_CASE("layer_flops matches the op counter") {
  CHECK(layer_flops(1, 8) == 784);
  Rng rng(21);
  for (auto [t, d, h] : {std::tuple{1, 8, 2}, {3, 8, 2}, {16, 32, 4}, {5, 12, 3}}) {
    auto p = nn::TransformerLayerParams::init(rng, d, h);
    auto x = Tensor::zeros({std::size_t(t), std::size_t(d)});
    MacCounter counter;
    nn::transformer_layer_forward(x, p, true);
    CHECK(counter.count() == layer_flops(t, d));
    MacCounter skipped;
    nn::transformer_layer_forward(x, p, false);
    CHECK(skipped.count() == 0);
  }
}

TEST_CASE("layer_flops homogeneity in d") {
  const std::uint64_t t = 7, d = 10;
  const auto quadratic = [&](std::uint64_t dd) { return layer_flops(t, dd) - 2 * t * t * dd; };
  CHECK(quadratic(2 * d) == 4 * quadratic(d));
}

TEST_CASE("plan_cost examples") {
  BudgetSpec unequal{12, {3, 1}, true};
  LayerMask m = LayerMask::parse("100010000001|100001000001");
  CHECK(plan_cost(m, unequal) == 12);
  CHECK(plan_cost(LayerMask::all({12, 12}, false), unequal) == 0);
  CHECK(plan_cost(LayerMask::all({12, 12}, true), BudgetSpec::uniform(24, 2)) == 24);
}

TEST_CASE("plan_cost is linear over disjoint masks") {
  Rng rng(22);
  BudgetSpec spec{0, {3, 1}, false};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<bool> a(16), b(16);
    for (std::size_t i = 0; i < 16; ++i) {
      const auto r = rng.below(3);
      a[i] = r == 1;
      b[i] = r == 2;
    }
    std::vector<bool> u(16);
    for (std::size_t i = 0; i < 16; ++i) u[i] = a[i] || b[i];
    auto ma = LayerMask::from_flat({8, 8}, a), mb = LayerMask::from_flat({8, 8}, b),
         mu = LayerMask::from_flat({8, 8}, u);
    CHECK(plan_cost(mu, spec) == plan_cost(ma, spec) + plan_cost(mb, spec));
  }
}

TEST_CASE("enforce_budget examples") {
  auto spec = BudgetSpec::uniform(6, 2);
  CHECK(enforce_budget(LayerMask::parse("1101|1110"), spec).ok);

  auto excess = enforce_budget(LayerMask::parse("1111|1110"), spec);
  CHECK_FALSE(excess.ok);
  CHECK(excess.excess == 1);
  CHECK(excess.detail.find("excess=1") != std::string::npos);

  auto pin = enforce_budget(LayerMask::parse("0111|1110"), spec);
  CHECK_FALSE(pin.ok);
  CHECK(pin.excess == 0);
  CHECK(pin.missing_pins == std::vector<std::size_t>{0});
  CHECK(pin.detail.find("pin") != std::string::npos);
}

TEST_CASE("BudgetSpec validation") {
  CHECK_NOTHROW(BudgetSpec::uniform(4, 2).validate({4, 4}));
  CHECK_THROWS_AS(BudgetSpec::uniform(1, 2).validate({4, 4}), BudgetError);
  CHECK_THROWS_AS(BudgetSpec::uniform(9, 2).validate({4, 4}), BudgetError);
  CHECK_THROWS_AS((BudgetSpec{4, {0, 1}, true}.validate({4, 4})), ConfigError);
  CHECK_THROWS_AS((BudgetSpec{4, {1}, true}.validate({4, 4})), ConfigError);
}

TEST_CASE("FlopsReport totals and CSV") {
  FlopsReport r;
  r.add("backbone.0", 600);
  r.add("fusion", 300);
  r.add("controller", 100, true);
  CHECK(r.total() == 1000);
  CHECK(r.model_macs() == 900);
  CHECK(r.controller_share() == doctest::Approx(0.1));
  CHECK(r.get("fusion") == 300);

  std::ostringstream os;
  write_report_csv(os, {{4, "naive", 900, 100, 0.1, 0.25}});
  CHECK(os.str() == "budget,provider,mean_flops,controller_flops,controller_share,mean_metric\n"
                    "4,naive,900,100,0.1,0.25\n");
}
