#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "qdrop/checkpoint.hpp"
#include "qdrop/model.hpp"
#include "test_util.hpp"

using namespace qdrop;
using qdrop::testing::random_tensor;

namespace {

bool same_params(const ModelGraph<float>& a, const ModelGraph<float>& b) {
  const auto ea = model_entries(a), eb = model_entries(b);
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i)
    if (ea[i].name != eb[i].name || ea[i].shape != eb[i].shape || ea[i].values != eb[i].values) return false;
  return true;
}

Tensor<float> random_input(const ModelGraph<float>& m, std::size_t n, Rng& rng) {
  Shape s = m.input_shape;
  s.insert(s.begin(), n);
  Tensor<float> x(s);
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
  return x;
}

// BN statistics far from identity so folding has something to do.
void randomize_bn(ModelGraph<float>& m, Rng& rng) {
  for (auto& l : m.layers)
    if (l.kind == LayerKind::batchnorm2d)
      for (std::size_t c = 0; c < l.gamma.numel(); ++c) {
        l.running_mean[c] = static_cast<float>(rng.uniform(-0.5, 0.5));
        l.running_var[c] = static_cast<float>(rng.uniform(0.5, 2.0));
        l.gamma[c] = static_cast<float>(rng.uniform(0.5, 1.5));
        l.beta[c] = static_cast<float>(rng.uniform(-0.3, 0.3));
      }
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("qdrop_test_" + name);
}

}  // namespace

TEST(Arch, ParseAndErrors) {
  EXPECT_EQ(Arch::parse("mlp:8,16,4").str(), "mlp:8,16,4");
  EXPECT_EQ(Arch::parse("rescnn:3,8").str(), "rescnn:3,8");
  EXPECT_THROW(Arch::parse("mlp"), ConfigError);
  EXPECT_THROW(Arch::parse("mlp:8"), ConfigError);
  EXPECT_THROW(Arch::parse("rescnn:3"), ConfigError);
  EXPECT_THROW(Arch::parse("vgg:3,8"), ConfigError);
  EXPECT_THROW(Arch::parse("mlp:8,x,4"), ConfigError);
  EXPECT_THROW(Arch::parse("mlp:8,0,4"), ConfigError);
}

TEST(BuildModel, DeterministicGivenSeed) {
  auto a = build_model<float>(Arch::mlp({8, 16, 4}), 0);
  auto b = build_model<float>(Arch::mlp({8, 16, 4}), 0);
  auto c = build_model<float>(Arch::mlp({8, 16, 4}), 1);
  EXPECT_TRUE(same_params(a, b));
  EXPECT_FALSE(same_params(a, c));
}

TEST(BuildModel, RescnnSkipEdgesShapeCheck) {
  auto m = build_model<float>(Arch::rescnn(2, 8), 0);
  const auto shapes = infer_shapes(m);
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].kind == LayerKind::residual_add) {
      const auto& l = m.layers[i];
      const Shape& src = l.skip_from == kModelInput ? m.input_shape : shapes[static_cast<std::size_t>(l.skip_from)];
      EXPECT_EQ(src, shapes[i]);
    }
}

TEST(BuildModel, RescnnUnitCount) {
  auto m = build_model<float>(Arch::rescnn(3, 8), 0);
  int stems = 0, blocks = 0, heads = 0;
  for (const auto& u : m.units) {
    stems += u.kind == UnitKind::stem;
    blocks += u.kind == UnitKind::block;
    heads += u.kind == UnitKind::head;
  }
  EXPECT_EQ(stems, 1);
  EXPECT_EQ(blocks, 3);
  EXPECT_EQ(heads, 1);
}

TEST(BuildModel, BadSkipEdgeRejected) {
  auto m = build_model<float>(Arch::rescnn(1, 4), 0);
  for (auto& l : m.layers)
    if (l.kind == LayerKind::residual_add) l.skip_from = kModelInput;  // 3x16x16 vs 4x8x8
  EXPECT_THROW(validate(m), ShapeError);
}

TEST(BuildModel, UncoveredWeightedLayerRejected) {
  auto m = build_model<float>(Arch::mlp({4, 6, 3}), 0);
  m.units.pop_back();
  EXPECT_THROW(validate(m), TopologyError);
}

TEST(PartitionBlocks, BuilderRules) {
  auto mlp = build_model<float>(Arch::mlp({8, 16, 16, 4}), 0);
  auto bl = partition_blocks(mlp);
  ASSERT_EQ(bl.size(), 2u);
  EXPECT_EQ(mlp.layers[bl[0].first].name, "block1.fc");
  EXPECT_EQ(mlp.layers[bl[1].first].name, "block2.fc");
  EXPECT_LT(bl[0].last, bl[1].first);
  EXPECT_EQ(partition_blocks(build_model<float>(Arch::rescnn(2, 8), 0)).size(), 2u);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  auto m = build_model<float>(Arch::mlp({5, 7, 3}), 0);
  for (auto& l : m.layers)
    if (l.has_weight()) std::fill(l.weight.data().begin(), l.weight.data().end(), 0.0f);
  Rng rng(0);
  auto y = forward(m, random_input(m, 4, rng));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, IdentityHooksChangeNothing) {
  auto m = build_model<float>(Arch::rescnn(2, 4), 3);
  Rng rng(1);
  auto x = random_input(m, 3, rng);
  ForwardHooks<float> hooks;
  hooks.weight = [](std::size_t, const Layer<float>& l) { return l.weight; };
  hooks.after = [](std::size_t, const Tensor<float>& t) { return t; };
  auto a = forward(m, x), b = forward(m, x, &hooks);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Forward, HookShapeChangeThrows) {
  auto m = build_model<float>(Arch::mlp({4, 6, 3}), 0);
  ForwardHooks<float> hooks;
  hooks.after = [](std::size_t, const Tensor<float>& t) { return Tensor<float>(Shape{t.numel() + 1}); };
  Rng rng(0);
  EXPECT_THROW(forward(m, random_input(m, 2, rng), &hooks), HookError);
  EXPECT_THROW(forward(m, Tensor<float>(Shape{2, 5})), ShapeError);
}

TEST(Forward, HandComputedMlp) {
  auto m = build_model<float>(Arch::mlp({2, 2, 2}), 0);
  m.layers[0].weight = Tensor<float>::matrix(2, 2, {1, -1, 2, 0.5f});
  m.layers[0].bias = Tensor<float>::vector({0.5f, -1});
  m.layers[2].weight = Tensor<float>::matrix(2, 2, {1, 2, -1, 3});
  m.layers[2].bias = Tensor<float>::vector({0, 1});
  // x = [1, 2]: z = [1-2+0.5, 2+1-1] = [-0.5, 2]; a = [0, 2]; y = [4, 7]
  auto y = forward(m, Tensor<float>::matrix(1, 2, {1, 2}));
  EXPECT_FLOAT_EQ(y[0], 4.0f);
  EXPECT_FLOAT_EQ(y[1], 7.0f);
}

TEST(Forward, BlockCompositionEqualsWholeModel) {
  for (auto arch : {Arch::rescnn(3, 4), Arch::mlp({6, 8, 8, 8, 3})}) {
    auto m = build_model<float>(arch, 7);
    Rng rng(2);
    auto x = random_input(m, 3, rng);
    auto whole = forward(m, x);
    Tensor<float> cur = x;
    for (const auto& u : m.units) cur = forward_unit(m, u, cur);
    ASSERT_EQ(cur.shape(), whole.shape());
    for (std::size_t i = 0; i < whole.numel(); ++i) EXPECT_EQ(cur[i], whole[i]);
  }
}

TEST(FoldBatchnorm, IdentityStatisticsLeaveWeights) {
  auto m = build_model<float>(Arch::rescnn(1, 4), 0);
  for (auto& l : m.layers)
    if (l.kind == LayerKind::batchnorm2d)
      for (auto& v : l.running_var.data()) v = 1.0f - l.eps;
  auto f = fold_batchnorm(m);
  EXPECT_EQ(f.layers[0].name, "stem.conv");
  for (std::size_t i = 0; i < m.layers[0].weight.numel(); ++i) EXPECT_EQ(f.layers[0].weight[i], m.layers[0].weight[i]);
}

TEST(FoldBatchnorm, ScaleTwoDoublesWeights) {
  auto m = build_model<float>(Arch::rescnn(1, 4), 0);
  for (auto& l : m.layers)
    if (l.kind == LayerKind::batchnorm2d) {
      for (auto& v : l.running_var.data()) v = 1.0f - l.eps;
      for (auto& v : l.gamma.data()) v = 2.0f;
    }
  auto f = fold_batchnorm(m);
  for (std::size_t i = 0; i < m.layers[0].weight.numel(); ++i)
    EXPECT_FLOAT_EQ(f.layers[0].weight[i], 2.0f * m.layers[0].weight[i]);
}

TEST(FoldBatchnorm, PreservesFunction) {
  auto m = build_model<float>(Arch::rescnn(3, 8), 5);
  Rng rng(9);
  randomize_bn(m, rng);
  auto f = fold_batchnorm(m);
  for (const auto& l : f.layers) EXPECT_NE(l.kind, LayerKind::batchnorm2d);
  validate(f);
  EXPECT_EQ(f.units.size(), m.units.size());
  auto x = random_input(m, 10, rng);
  auto a = forward(m, x), b = forward(f, x);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_LT(std::abs(a[i] - b[i]), 1e-5f);
}

TEST(FoldBatchnorm, OrphanBatchnormThrows) {
  auto m = build_model<float>(Arch::rescnn(1, 4), 0);
  std::swap(m.layers[1], m.layers[2]);  // relu between conv and bn
  EXPECT_THROW(fold_batchnorm(m), TopologyError);
}

TEST(ForwardTrain, UpdatesRunningStats) {
  auto m = build_model<float>(Arch::rescnn(1, 4), 0);
  Rng rng(4);
  auto x = random_input(m, 8, rng);
  forward_train(m, x);
  EXPECT_NE(m.layers[1].running_mean[0], 0.0f);
}

TEST(Checkpoint, RoundTripBitExact) {
  auto m = build_model<float>(Arch::rescnn(2, 4), 11);
  Rng rng(1);
  randomize_bn(m, rng);
  const auto path = temp_file("ckpt.qdck");
  save_checkpoint(path.string(), m);
  auto loaded = build_model<float>(Arch::rescnn(2, 4), 99);
  load_parameters(loaded, read_checkpoint(path.string()));
  EXPECT_TRUE(same_params(m, loaded));
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  std::vector<CheckpointEntry> e{{"w", {2, 1}, {1.5f, -2.0f}}};
  const auto path = temp_file("layout.qdck");
  write_checkpoint(path.string(), e);
  // magic 4 + version 2 + name_len 2 + name 1 + rank 1 + dims 8 + payload 8
  EXPECT_EQ(std::filesystem::file_size(path), 26u);
  auto back = read_checkpoint(path.string());
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].name, "w");
  EXPECT_EQ(back[0].shape, (Shape{2, 1}));
  EXPECT_EQ(back[0].values, e[0].values);
  std::filesystem::remove(path);
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(read_checkpoint("/nonexistent/file.qdck"), IoError);
  const auto path = temp_file("bad.qdck");
  { std::FILE* f = std::fopen(path.string().c_str(), "wb"); std::fputs("NOPE", f); std::fclose(f); }
  EXPECT_THROW(read_checkpoint(path.string()), IoError);
  auto m = build_model<float>(Arch::mlp({4, 6, 3}), 0);
  auto entries = model_entries(m);
  entries.pop_back();
  EXPECT_THROW(load_parameters(m, entries), IoError);
  std::filesystem::remove(path);
}
