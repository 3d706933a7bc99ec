#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "s4nd/architecture.hpp"
#include "s4nd/config.hpp"

using namespace s4nd;

namespace {

NetworkConfig desk_config() {
  NetworkConfig c;
  c.input_shape = {64, 64, 8};
  c.grid_shape = {8, 8, 8};
  c.growth_rates = {8, 8};
  c.block_depths = {4, 4};
  c.stem_downsample = 1;
  return c;
}

/// One block on a small volume, used for wiring checks.
NetworkConfig tiny_config(Index depth) {
  NetworkConfig c;
  c.input_shape = {8, 8, 2};
  c.grid_shape = {4, 4, 2};
  c.growth_rates = {4};
  c.block_depths = {depth};
  c.stem_channels = 3;
  return c;
}

Index conv_count(Index cin, Index cout, Index taps) { return cin * cout * taps + cout; }

}  // namespace

TEST_CASE("single conv and batch norm parameter counts") {
  NetworkConfig c = tiny_config(1);
  c.stem_channels = 16;
  Network<double> net(c, 1);
  // stem conv 1->16 3x3x3 with bias.
  CHECK(net.stem().conv.weight.size() + net.stem().conv.bias.size() == 448);
  CHECK(net.stem().bn.gamma.size() + net.stem().bn.beta.size() == 32);
}

TEST_CASE("dense block examples") {
  NetworkConfig c;
  Network<float> net(c, 3);
  auto& b1 = net.blocks()[0];
  CHECK(b1.spec.output_channels() == 112);
  CHECK(b1.layers.size() == 6);
  CHECK(net.transitions()[0].conv.params.out_channels == 64);
  CHECK(net.transitions()[0].conv.params.kernel == Extent3{1, 1, 1});
  CHECK(net.blocks()[4].spec.input_channels == 128);

  NetworkConfig fewer = c;
  fewer.output_policy = OutputPolicy::one_fewer;
  Network<float> pnet(fewer, 3);
  CHECK(pnet.blocks()[0].spec.output_channels() == 96);
  CHECK(pnet.blocks()[0].layers.size() == 5);
}

TEST_CASE("transition with growth 64 has 256 outputs") {
  NetworkConfig c;
  c.input_shape = {4, 4, 1};
  c.grid_shape = {1, 1, 1};
  c.growth_rates = {64, 64};
  c.block_depths = {1, 1};
  c.stem_stride = {1, 1, 1};
  c.downsample_stride = {1, 4, 4};
  Network<float> net(c, 1);
  CHECK(net.transitions()[0].conv.params.out_channels == 256);
}

TEST_CASE("default network structure") {
  Network<float> net(NetworkConfig{}, 1);
  CHECK(net.blocks().size() == 5);
  CHECK(net.transitions().size() == 4);
  CHECK(net.pooling_layer_count() == 4);
  CHECK(net.conv_layer_count() == 36);
  const Index n = net.count_parameters();
  CHECK(n >= 3'000'000);
  CHECK(n <= 6'000'000);
  MESSAGE("default parameter count " << n << " (reference " << kReferenceParameterCount << ")");
}

TEST_CASE("parameter count matches closed form") {
  const NetworkConfig c = desk_config();
  Network<double> net(c, 1);
  Index expect = conv_count(1, 16, 27) + 32;
  Index cin = 16;
  for (Index b = 0; b < 2; ++b) {
    for (Index k = 1; k <= 4; ++k) expect += conv_count(cin + (k - 1) * 8, 8, 27) + 16;
    const Index out = cin + 4 * 8;
    if (b == 0) {
      expect += conv_count(out, 32, 1) + 64;
      cin = 32;
    } else {
      expect += conv_count(out, 1, 1);
    }
  }
  CHECK(net.count_parameters() == expect);

  NetworkConfig s = c;
  s.downsample_mode = DownsampleMode::avgpool;
  CHECK(Network<double>(s, 1).count_parameters() == expect);
  s.downsample_mode = DownsampleMode::stride2conv;
  const Index strided = Network<double>(s, 1).count_parameters();
  CHECK(strided == expect + conv_count(16, 16, 27) + conv_count(32, 32, 27));
}

TEST_CASE("desk network forward shapes and range") {
  Network<double> net(desk_config(), 5);
  std::mt19937_64 rng(11);
  const auto x = oracle::random_tensor({1, 1, 8, 64, 64}, rng);
  const auto y = net.infer(x, NormMode::train);
  CHECK(y.shape() == Shape{1, 1, 8, 8, 8});
  for (Index i = 0; i < y.size(); ++i) {
    CHECK(y[i] > 0.0);
    CHECK(y[i] < 1.0);
  }

  Tape<double> tape;
  Var out = net.forward(tape, tape.constant(x), NormMode::infer);
  const auto ref = net.infer(x, NormMode::infer);
  CHECK(tape.value(out) == ref);

  CHECK_THROWS_AS(net.infer(Tensor<double>({1, 1, 8, 32, 64})), DimensionError);
  CHECK_THROWS_AS(net.infer(Tensor<double>({1, 2, 8, 64, 64})), DimensionError);
}

TEST_CASE("head bias sets the initial probability floor") {
  NetworkConfig c = tiny_config(1);
  Network<double> net(c, 1);
  for (auto& l : net.blocks()[0].layers) l.conv.weight.value.fill(0.0);
  net.parameters().back()->value.fill(-4.0);
  auto* head_w = net.parameters()[net.parameters().size() - 2];
  head_w->value.fill(0.0);
  const auto y = net.infer(Tensor<double>({1, 1, 2, 8, 8}, 0.5));
  for (Index i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(1.0 / (1.0 + std::exp(4.0))));
}

TEST_CASE("dense connections concatenate rather than add") {
  NetworkConfig c = tiny_config(3);
  Network<double> net(c, 2);
  auto& block = net.blocks()[0];
  std::mt19937_64 rng(4);
  const auto x0 = oracle::random_tensor({1, 3, 2, 4, 4}, rng);

  std::vector<Tensor<double>> inputs;
  net.probe_block(0, x0, &inputs);
  REQUIRE(inputs.size() == 3);
  for (Index k = 1; k <= 3; ++k) CHECK(inputs[k - 1].channels() == block.spec.layer_input_channels(k));

  // Zero layer 2 (weights and bias): layer 3 must still see x0 and x1 intact.
  block.layers[1].conv.weight.value.fill(0.0);
  block.layers[1].conv.bias.value.fill(0.0);
  std::vector<Tensor<double>> zeroed;
  const auto out = net.probe_block(0, x0, &zeroed);
  const auto& in3 = zeroed[2];
  const Index vol = x0.spatial_volume();
  const Index kept = block.spec.layer_input_channels(2);  // x0 and x1
  for (Index i = 0; i < kept * vol; ++i) CHECK(in3[i] == inputs[2][i]);
  for (Index i = 0; i < kept * vol; ++i) CHECK(in3[i] == inputs[1][i]);
  CHECK(out.channels() == block.spec.output_channels());
  for (Index i = 0; i < x0.size(); ++i) CHECK(out[i] == x0[i]);
}

TEST_CASE("single-layer block outputs concat(input, F1(input))") {
  Network<double> net(tiny_config(1), 2);
  std::mt19937_64 rng(8);
  const auto x0 = oracle::random_tensor({1, 3, 2, 4, 4}, rng);
  const auto out = net.probe_block(0, x0, nullptr);
  auto& layer = net.blocks()[0].layers[0];
  auto f = relu(batchnorm(conv3d(x0, layer.conv.weight.value, layer.conv.bias.value, layer.conv.params),
                          layer.bn.gamma.value, layer.bn.beta.value, layer.bn.state, NormMode::infer));
  CHECK(out == concat_channels<double>({&x0, &f}));
}

TEST_CASE("initialisation is deterministic in the seed") {
  const NetworkConfig c = desk_config();
  Network<float> a(c, 42), b(c, 42), d(c, 43);
  auto pa = a.parameters();
  auto pb = b.parameters();
  auto pd = d.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
    any_diff = any_diff || !(pa[i]->value == pd[i]->value);
  }
  CHECK(any_diff);
  CHECK(pa[0]->name == "stem.conv.weight");
  CHECK(a.parameters()[4]->name == "block1.layer1.conv.weight");
}

TEST_CASE("state records round trip and reject other geometries") {
  const NetworkConfig c = desk_config();
  Network<double> a(c, 1), b(c, 2);
  a.stem().bn.state.running_mean[3] = 0.25;
  b.load_state_records(a.state_records());
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  CHECK(b.stem().bn.state.running_mean[3] == 0.25);

  NetworkConfig other = c;
  other.growth_rates = {8, 16};
  Network<double> o(other, 1);
  CHECK_THROWS_AS(o.load_state_records(a.state_records()), ConfigError);
}
