#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>

#include <json.hpp>

#include "dgm_dte/autodiff.hpp"
#include "dgm_dte/optim.hpp"
#include "dgm_dte/params.hpp"
#include "support.hpp"

using namespace dgm;
using dgm::testing::check_gradients;
using dgm::testing::random_tensor;
using dgm::testing::TestRng;

namespace {

constexpr double kFdTol = 1e-4;

}  // namespace

TEST(Tensor, StorageIsCacheLineAligned) {
  std::vector<Tensor> keep;
  for (std::size_t n = 1; n < 40; ++n) {
    keep.emplace_back(Shape{n, 3}, 1.0);
    keep.push_back(keep.back().reshaped({3 * n}));
    for (const Tensor* t : {&keep[keep.size() - 2], &keep.back()})
      EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t->data().data()) % 64, 0u);
  }
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Ops, MatmulByIdentity) {
  Tape tape;
  auto a = tape.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  auto out = ops::matmul(a, tape.constant(Tensor::identity(2)));
  EXPECT_EQ(out.value(), Tensor::from_rows({{1, 2}, {3, 4}}));
}

TEST(Ops, ReluDefinition) {
  Tape tape;
  auto out = ops::relu(tape.constant(Tensor::vector({-1, 0, 2})));
  EXPECT_EQ(out.value(), Tensor::vector({0, 0, 2}));
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  Tape tape;
  auto out = ops::softmax_rows(tape.constant(Tensor::from_rows({{0, 0}})));
  EXPECT_DOUBLE_EQ(out.value()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(out.value()(0, 1), 0.5);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  TestRng rng(3);
  Tape tape;
  auto x = tape.constant(random_tensor({20, 7}, rng, -30.0, 30.0));
  auto s = ops::softmax_rows(x).value();
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double sum = 0.0;
    for (double v : s.row(r)) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  Tape tape;
  auto a = tape.constant(Tensor::matrix(2, 3));
  auto b = tape.constant(Tensor::matrix(2, 3));
  try {
    ops::matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(ops::add(a, tape.constant(Tensor::matrix(3, 2))), std::invalid_argument);
}

TEST(Ops, RowVectorBroadcastOnly) {
  Tape tape;
  auto a = tape.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  auto b = tape.constant(Tensor::from_rows({{10, 20}}));
  EXPECT_EQ(ops::add(a, b).value(), Tensor::from_rows({{11, 22}, {13, 24}}));
  EXPECT_THROW(ops::add(a, tape.constant(Tensor::from_rows({{1}, {2}}))), std::invalid_argument);
}

TEST(Backward, SumGradientIsOnes) {
  Tape tape;
  auto x = tape.variable(Tensor::vector({1, 2, 3}));
  tape.backward(ops::sum(x));
  EXPECT_EQ(tape.grad(x), Tensor::vector({1, 1, 1}));
}

TEST(Backward, SquareGradient) {
  Tape tape;
  auto x = tape.variable(Tensor::vector({1, 2}));
  tape.backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(tape.grad(x), Tensor::vector({2, 4}));
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  auto x = tape.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(ops::relu(x)), std::invalid_argument);
}

TEST(Backward, ConstantsAndFrozenParamsReceiveNothing) {
  Parameter frozen{"frozen", Tensor::vector({1, 2}), {}, false};
  Parameter live{"live", Tensor::vector({3, 4}), {}, true};
  Tape tape;
  auto f = tape.param(frozen);
  auto l = tape.param(live);
  tape.backward(ops::sum(ops::mul(f, l)));
  EXPECT_TRUE(frozen.grad.empty());
  EXPECT_EQ(live.grad, Tensor::vector({1, 2}));
}

TEST(Backward, VisitsNodesInReverseOrder) {
  // A diamond: both paths must be accumulated before x's gradient is final.
  Tape tape;
  auto x = tape.variable(Tensor::vector({0.5, -1.5}));
  auto a = ops::scale(x, 3.0);
  auto b = ops::mul(x, x);
  tape.backward(ops::sum(ops::add(a, b)));
  EXPECT_EQ(tape.grad(x), Tensor::vector({3.0 + 1.0, 3.0 - 3.0}));
}

TEST(Backward, DeterministicAcrossRebuilds) {
  auto run = [] {
    TestRng rng(11);
    Tape tape;
    auto x = tape.variable(random_tensor({6, 5}, rng));
    auto w = tape.variable(random_tensor({5, 4}, rng));
    auto y = ops::softmax_rows(ops::matmul(x, w));
    tape.backward(ops::mean(ops::mul(y, y)));
    return std::make_pair(tape.grad(x), tape.grad(w));
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, GradEnabledOffRecordsNothing) {
  Parameter p{"p", Tensor::vector({1, 2}), {}, true};
  Tape tape;
  tape.set_grad_enabled(false);
  auto v = tape.param(p);
  ops::sum(ops::mul(v, v));
  EXPECT_EQ(tape.num_nodes(), 0u);
}

// Central-difference checks for every primitive on random inputs in [-2, 2].
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  TestRng rng(100 + GetParam());
  const auto m34 = [&] { return random_tensor({3, 4}, rng); };
  // A fixed random projection turns any output into a scalar with a generic gradient.
  auto project = [&](Tape& t, const Var& y) {
    TestRng r(7);
    return ops::sum(ops::mul(y, t.constant(random_tensor(y.shape(), r))));
  };
  struct Case {
    const char* name;
    std::vector<Tensor> inputs;
    dgm::testing::LossFn fn;
  };
  std::vector<Case> cases = {
      {"matmul", {m34(), random_tensor({4, 2}, rng)}, [&](Tape& t, auto& v) { return project(t, ops::matmul(v[0], v[1])); }},
      {"add", {m34(), m34()}, [&](Tape& t, auto& v) { return project(t, ops::add(v[0], v[1])); }},
      {"add_row", {m34(), random_tensor({1, 4}, rng)}, [&](Tape& t, auto& v) { return project(t, ops::add(v[0], v[1])); }},
      {"sub", {m34(), m34()}, [&](Tape& t, auto& v) { return project(t, ops::sub(v[0], v[1])); }},
      {"mul", {m34(), m34()}, [&](Tape& t, auto& v) { return project(t, ops::mul(v[0], v[1])); }},
      {"scale", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::scale(v[0], -1.7)); }},
      {"relu", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::relu(v[0])); }},
      {"leaky_relu", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::leaky_relu(v[0], 0.2)); }},
      {"sigmoid", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::sigmoid(v[0])); }},
      {"abs", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::abs(v[0])); }},
      {"sqrt", {random_tensor({3, 4}, rng, 0.2, 2.0)}, [&](Tape& t, auto& v) { return project(t, ops::sqrt(v[0])); }},
      {"log", {random_tensor({3, 4}, rng, 0.2, 2.0)}, [&](Tape& t, auto& v) { return project(t, ops::log(v[0])); }},
      {"softmax_rows", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::softmax_rows(v[0])); }},
      {"log_softmax_rows", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::log_softmax_rows(v[0])); }},
      {"concat_cols", {m34(), random_tensor({3, 2}, rng)},
       [&](Tape& t, auto& v) { return project(t, ops::concat_cols({v[0], v[1]})); }},
      {"concat_rows", {m34(), random_tensor({2, 4}, rng)},
       [&](Tape& t, auto& v) { return project(t, ops::concat_rows({v[0], v[1]})); }},
      {"slice_cols", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::slice_cols(v[0], 1, 3)); }},
      {"slice_rows", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::slice_rows(v[0], 1, 3)); }},
      {"sum", {m34()}, [&](Tape&, auto& v) { return ops::scale(ops::sum(v[0]), 0.3); }},
      {"mean", {m34()}, [&](Tape&, auto& v) { return ops::mean(ops::mul(v[0], v[0])); }},
      {"row_sum", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::row_sum(v[0])); }},
      {"gather_rows", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::gather_rows(v[0], {2, 0, 2, 1})); }},
      {"scale_rows", {m34(), random_tensor({3, 1}, rng)},
       [&](Tape& t, auto& v) { return project(t, ops::scale_rows(v[0], v[1])); }},
      {"normalize_columns", {m34()}, [&](Tape& t, auto& v) { return project(t, ops::normalize_columns(v[0])); }},
  };
  auto pattern = std::make_shared<SparsePattern>();
  pattern->offsets = {0, 2, 3, 6};
  pattern->targets = {0, 2, 1, 0, 1, 2};
  pattern->num_cols = 3;
  cases.push_back({"segment_softmax", {random_tensor({6, 1}, rng)},
                   [&](Tape& t, auto& v) { return project(t, ops::segment_softmax(v[0], pattern)); }});
  cases.push_back({"edge_aggregate", {random_tensor({6, 1}, rng), random_tensor({3, 4}, rng)},
                   [&](Tape& t, auto& v) { return project(t, ops::edge_aggregate(v[0], v[1], pattern)); }});

  for (auto& c : cases) {
    auto r = check_gradients(c.inputs, c.fn);
    EXPECT_LT(r.max_rel_error, kFdTol) << c.name << " worst " << r.worst;
    EXPECT_GT(r.checked, 0u) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, PrimitiveGradients, ::testing::Range(0, 5));

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamStore store;
  auto& p = store.add("p", Tensor::vector({1.0, -2.0}));
  AdamState st;
  for (int i = 0; i < 5; ++i) {
    store.zero_grad();
    adam_step(store, st);
  }
  EXPECT_EQ(p.value, Tensor::vector({1.0, -2.0}));
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m1 = 0.1, v1 = 0.001; bias-corrected mhat = vhat = 1 -> step = lr / (1 + eps).
  ParamStore store;
  auto& p = store.add("p", Tensor::scalar(0.0));
  AdamState st;
  p.grad = Tensor::scalar(1.0);
  adam_step(store, st);
  EXPECT_NEAR(p.value[0], -5e-4 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[0], -0.0005, 1e-10);
}

TEST(Adam, ZeroLearningRateIsFixpoint) {
  ParamStore store;
  auto& p = store.add("p", Tensor::vector({0.25, 4.0}));
  AdamState st;
  st.lr = 0.0;
  for (int i = 0; i < 3; ++i) {
    p.grad = Tensor::vector({1.0, -3.0});
    adam_step(store, st);
  }
  EXPECT_EQ(p.value, Tensor::vector({0.25, 4.0}));
}

TEST(Adam, MissingGradientNamesParameter) {
  ParamStore store;
  store.add("layer/W", Tensor::vector({1.0}));
  AdamState st;
  try {
    adam_step(store, st);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer/W"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  TestRng rng(5);
  ParamStore store;
  store.add("a/W", random_tensor({3, 2}, rng));
  store.add("b", Tensor::vector({1.0 / 3.0, -0.1, 1e-300, 12345.678901234567}));
  const auto text = checkpoint_json(store, R"({"k":1})");
  const auto ckpt = parse_checkpoint(text);
  ASSERT_TRUE(ckpt.config_json.has_value());
  EXPECT_EQ(nlohmann::json::parse(*ckpt.config_json), nlohmann::json::parse(R"({"k":1})"));

  ParamStore other;
  other.add("a/W", Tensor::matrix(3, 2));
  other.add("b", Tensor::vector({0, 0, 0, 0}));
  load_params(other, ckpt);
  EXPECT_EQ(other.at("a/W").value, store.at("a/W").value);
  EXPECT_EQ(other.at("b").value, store.at("b").value);
  EXPECT_EQ(checkpoint_json(other, R"({"k":1})"), text);
}

TEST(Checkpoint, ShapeMismatchReportsBothShapes) {
  ParamStore store;
  store.add("w", Tensor::matrix(2, 3));
  const auto ckpt = parse_checkpoint(checkpoint_json(store));
  ParamStore other;
  other.add("w", Tensor::matrix(3, 3));
  try {
    load_params(other, ckpt);
    FAIL();
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,3]"), std::string::npos) << msg;
  }
}

TEST(Kernel, ThreadCountDoesNotChangeResults) {
  TestRng rng(9);
  auto a = random_tensor({300, 40}, rng);
  auto b = random_tensor({40, 30}, rng);
  auto run = [&](std::size_t threads) {
    set_kernel_threads(threads);
    Tape tape;
    return ops::matmul(tape.constant(a), tape.constant(b)).value();
  };
  const auto one = run(1);
  const auto four = run(4);
  set_kernel_threads(1);
  EXPECT_EQ(one, four);
}
