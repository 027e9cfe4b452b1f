#include <gtest/gtest.h>

#include <cmath>

#include "dagnas/supergraph.hpp"
#include "dagnas/variation.hpp"
#include "support/fixtures.hpp"

using namespace dagnas;
using namespace dagnas::testing;

namespace {

BankLayout small_layout(int n_c = 3, int classes = 3) {
  return BankLayout{BlockPlan::standard(1, 8, 8, 8), n_c, classes};
}

Tensor<float> random_images(int n, const BlockPlan& plan, Rng& rng) {
  Tensor<float> x({n, plan.in_channels, plan.in_h, plan.in_w});
  for (auto& v : x.values()) v = static_cast<float>(uniform01(rng));
  return x;
}

std::vector<int> random_labels(int n, int classes, Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(classes)));
  return y;
}

}  // namespace

TEST(Bank, SameKeySameStorage) {
  ParameterBank bank(1);
  Param& a = bank.get_or_init("k", {2, 3}, ParamKind::Weight, InitRule::He);
  Param& b = bank.get_or_init("k", {2, 3}, ParamKind::Weight, InitRule::He);
  EXPECT_EQ(&a, &b);
  a.value()[0] = 42.0f;
  EXPECT_EQ(bank.at("k").value()[0], 42.0f);
  EXPECT_THROW(bank.get_or_init("k", {3, 2}, ParamKind::Weight, InitRule::He), std::logic_error);
}

TEST(Bank, HeInitializationVariance) {
  ParameterBank bank(2);
  // depthwise 3x3 kernels: fan-in 9 per channel
  const auto& w = bank.get_or_init("dw", {1200, 1, 3, 3}, ParamKind::Weight, InitRule::He, 9).value();
  double mean = 0, sq = 0;
  for (float v : w.values()) mean += v;
  mean /= static_cast<double>(w.size());
  for (float v : w.values()) sq += (v - mean) * (v - mean);
  const double var = sq / static_cast<double>(w.size() - 1);
  EXPECT_NEAR(var, 2.0 / 9.0, 0.1 * 2.0 / 9.0);
  const auto& b = bank.get_or_init("b", {5}, ParamKind::NoDecay, InitRule::Zeros);
  for (float v : b.value().values()) EXPECT_EQ(v, 0.0f);
  for (float v : b.velocity.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Bank, ParameterFreeOperationsOwnNoEntries) {
  for (Op op : {Op::Identity, Op::Avg, Op::Max}) EXPECT_TRUE(op_param_keys({0, 3, 1, op}).empty());
  EXPECT_EQ(op_param_keys({0, 3, 1, Op::DW3}).size(), 8u);
  EXPECT_EQ(op_param_keys({0, 3, 1, Op::FR5}).size(), 7u);
}

TEST(Bank, EagerCreationMatchesClosedForm) {
  for (int n_c : {1, 3, 5}) {
    BankLayout layout = small_layout(n_c);
    ParameterBank bank(3);
    initialize_search_space(bank, layout);
    EXPECT_EQ(bank.size(), expected_entry_count(layout));
    initialize_search_space(bank, layout);  // idempotent
    EXPECT_EQ(bank.size(), expected_entry_count(layout));
  }
  BankLayout no_fr = small_layout();
  no_fr.ops = {Op::Identity, Op::DW3, Op::DW5, Op::Avg, Op::Max};
  ParameterBank bank(3);
  initialize_search_space(bank, no_fr);
  EXPECT_EQ(bank.size(), expected_entry_count(no_fr));
  for (const auto& [key, p] : bank.entries()) EXPECT_EQ(key.find("/FR"), std::string::npos) << key;
}

TEST(Bank, DeterministicInitialization) {
  const auto layout = small_layout();
  ParameterBank a(5), b(5), c(6);
  initialize_search_space(a, layout);
  initialize_search_space(b, layout);
  initialize_search_space(c, layout);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  EXPECT_EQ(a.clone().checksum(), a.checksum());
}

TEST(Network, ForwardShapesAndDeterminism) {
  const auto layout = small_layout();
  ParameterBank bank(7);
  initialize_search_space(bank, layout);
  Rng rng(1);
  const auto x = random_images(4, layout.plan, rng);
  const auto c = random_chromosome(rng, 3);
  auto net1 = instantiate(c, layout.plan, bank, {3});
  auto net2 = instantiate(c, layout.plan, bank, {3});
  const auto y1 = EvalView(net1).logits(x);
  EXPECT_EQ(y1.shape(), (Shape{4, 3}));
  EXPECT_EQ(y1, EvalView(net2).logits(x));
  EXPECT_THROW(instantiate(c, layout.plan, bank, {5}), std::invalid_argument);
}

TEST(Network, ParameterFreeChromosomeBindsOnlyProjectionsAndHead) {
  const auto layout = small_layout();
  ParameterBank bank(8);
  initialize_search_space(bank, layout);
  Rng rng(2);
  const auto c = random_chromosome(rng, 3, {Op::Identity, Op::Avg, Op::Max});
  auto net = instantiate(c, layout.plan, bank, {3});
  for (const auto& key : net.bound_keys()) {
    EXPECT_TRUE(key.find("/src") != std::string::npos || key.rfind("head/", 0) == 0) << key;
  }
}

TEST(Network, SharedCoordinatesShareWeights) {
  const auto layout = small_layout();
  ParameterBank bank(9);
  initialize_search_space(bank, layout);
  auto p1 = node_inheritance_p1();
  auto p2 = p1;
  p2.normal.nodes[0] = 2;  // rewired input, same (node, slot, op) coordinates
  auto n1 = instantiate(p1, layout.plan, bank, {3});
  auto n2 = instantiate(p2, layout.plan, bank, {3});
  Rng rng(3);
  const auto x = random_images(3, layout.plan, rng);
  const auto before = EvalView(n2).logits(x);
  Rng drop(1);
  train_step(n1, x, random_labels(3, 3, rng), SgdConfig{}, drop);
  EXPECT_NE(EvalView(n2).logits(x), before);
}

TEST(Network, UpdatesTouchOnlyBoundParameters) {
  const auto layout = small_layout();
  ParameterBank bank(10);
  initialize_search_space(bank, layout);
  ParameterBank initial = bank.clone();
  Rng rng(4);
  auto net = instantiate(random_chromosome(rng, 3), layout.plan, bank, {3});
  Rng drop(2);
  train_step(net, random_images(4, layout.plan, rng), random_labels(4, 3, rng), SgdConfig{}, drop);
  const auto& bound = net.bound_keys();
  for (const auto& [key, p] : bank.entries()) {
    const bool is_bound = std::find(bound.begin(), bound.end(), key) != bound.end();
    if (!is_bound) EXPECT_EQ(p.value(), initial.at(key).value()) << key;
  }
  int changed = 0;
  for (const auto& key : bound) changed += !(bank.at(key).value() == initial.at(key).value());
  EXPECT_GT(changed, 0);
  EXPECT_EQ(bank.step_count(), 1u);
}

TEST(Network, OffspringKeysExistAndEvaluationIsPure) {
  const auto layout = small_layout();
  ParameterBank bank(11);
  initialize_search_space(bank, layout);
  Rng rng(5);
  const auto a = random_chromosome(rng, 3), b = random_chromosome(rng, 3);
  instantiate(a, layout.plan, bank, {3});
  instantiate(b, layout.plan, bank, {3});
  const std::size_t size = bank.size();
  const auto x = random_images(6, layout.plan, rng);
  const auto y = random_labels(6, 3, rng);
  for (int i = 0; i < 20; ++i) {
    auto [q1, q2] = one_point_crossover(a, b, uniform_int(rng, 1, a.gene_count() - 1));
    const auto q = exchange_mutation(q1, rng);
    auto net = instantiate(q, layout.plan, bank, {3});
    for (const auto& key : net.bound_keys()) EXPECT_TRUE(bank.contains(key));
    const auto sum = bank.checksum();
    const double acc1 = EvalView(net).accuracy(x, y);
    const double acc2 = EvalView(net).accuracy(x, y);
    EXPECT_EQ(acc1, acc2);
    EXPECT_EQ(bank.checksum(), sum);
  }
  EXPECT_EQ(bank.size(), size);
}

TEST(Network, EvalViewLocksTheBank) {
  const auto layout = small_layout();
  ParameterBank bank(12);
  initialize_search_space(bank, layout);
  Rng rng(6);
  auto net = instantiate(random_chromosome(rng, 3), layout.plan, bank, {3});
  Rng drop(3);
  const auto x = random_images(2, layout.plan, rng);
  {
    auto view = inherited_eval_guard(net);
    EXPECT_THROW(view.apply_update(SgdConfig{}), BankLockedError);
    EXPECT_THROW(train_step(net, x, std::vector<int>{0, 1}, SgdConfig{}, drop), BankLockedError);
    EXPECT_THROW(bank.get_or_init("new", {1}, ParamKind::Weight, InitRule::Zeros), BankLockedError);
    EXPECT_FALSE(bank.writable());
  }
  EXPECT_TRUE(bank.writable());
  EXPECT_NO_THROW(train_step(net, x, std::vector<int>{0, 1}, SgdConfig{}, drop));
}

TEST(Network, ConstantPredictorScoresOne) {
  const auto layout = small_layout();
  ParameterBank bank(13);
  initialize_search_space(bank, layout);
  Rng rng(7);
  auto net = instantiate(random_chromosome(rng, 3), layout.plan, bank, {3});
  for (const auto& [key, p] : bank.entries()) {
    if (key.rfind("head/n", 0) == 0) p.node->value.fill(0.0f);
  }
  bank.at("head/b").value()[2] = 1.0f;
  const auto x = random_images(10, layout.plan, rng);
  EXPECT_EQ(EvalView(net).accuracy(x, std::vector<int>(10, 2)), 1.0);
}

TEST(Network, TrainingReducesLossOnFixedBatch) {
  const auto layout = small_layout();
  ParameterBank bank(14);
  initialize_search_space(bank, layout);
  Rng rng(8);
  auto net = instantiate(random_chromosome(rng, 3), layout.plan, bank, {3, 0.0});
  const auto x = random_images(8, layout.plan, rng);
  const auto y = random_labels(8, 3, rng);
  Rng drop(4);
  SgdConfig cfg;
  cfg.learning_rate = 0.05;
  const float first = train_step(net, x, y, cfg, drop);
  float last = first;
  for (int i = 0; i < 30; ++i) last = train_step(net, x, y, cfg, drop);
  EXPECT_LT(last, first);
}
