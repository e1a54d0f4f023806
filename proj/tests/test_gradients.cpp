#include <gtest/gtest.h>

#include <adruwams/gradcheck.hpp>

using namespace adruwams;

namespace {

const std::vector<GradCheckResult>& suite() {
    static const std::vector<GradCheckResult> results = run_gradcheck_suite();
    return results;
}

class GradientSuite : public ::testing::TestWithParam<std::string> {};

} // namespace

TEST_P(GradientSuite, AnalyticMatchesCentralDifference) {
    const std::string prefix = GetParam() + "/";
    std::size_t groups = 0;
    for (const auto& r : suite()) {
        if (r.name.rfind(prefix, 0) != 0) continue;
        ++groups;
        EXPECT_GT(r.coordinates, 0u) << r.name;
        EXPECT_LE(r.tolerance, 1e-4) << r.name;
        EXPECT_TRUE(r.passed()) << r.name << " relative error " << r.max_rel_error;
    }
    EXPECT_GT(groups, 0u) << "no results for " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(Ops, GradientSuite,
                         ::testing::Values("relu", "sigmoid", "add", "mul", "mul_broadcast", "concat", "soft_dice_loss",
                                           "conv3d_k3", "conv3d_k1", "conv3d_k3_s2", "conv3d_k5", "conv_transpose3d",
                                           "maxpool3d", "group_norm"));
INSTANTIATE_TEST_SUITE_P(Blocks, GradientSuite,
                         ::testing::Values("res_block_identity", "res_block_projection", "attention_gate", "msa",
                                           "encoder_block", "decoder_block", "model"));

TEST(GradientCheck, ModelCoversEveryParameterTensor) {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.base_filters = 4;
    cfg.bottleneck_filters = 8;
    auto m = make_model<double>(cfg);
    std::size_t expected = 0, seen = 0;
    for (auto& [name, p] : param_list(m)) expected += std::min<std::size_t>(2, p->value.size());
    for (const auto& r : suite())
        if (r.name == "model/params") {
            EXPECT_EQ(r.coordinates, expected);
            ++seen;
        }
    EXPECT_EQ(seen, 1u);
}

TEST(GradientCheck, WrongGradientIsFlagged) {
    Rng rng(5);
    Tensor<double> x = detail::random_tensor(rng, {1, 2, 2, 2, 2});
    auto res = check_gradients(
        "scaled", {{"input", &x}}, [&] { return ops::sigmoid(x); },
        [&](const Tensor<double>& g) {
            auto d = ops::sigmoid_backward(g, ops::sigmoid(x));
            for (auto& v : d.values()) v *= 1.01;
            return std::vector{d};
        },
        rng, 1e-4);
    ASSERT_EQ(res.size(), 1u);
    EXPECT_FALSE(res[0].passed());
    EXPECT_NEAR(res[0].max_rel_error, 0.01 / 1.01, 1e-6);
}

TEST(GradientCheck, ShapeMismatchIsAnError) {
    Rng rng(6);
    Tensor<double> x = detail::random_tensor(rng, {1, 1, 2, 2, 2});
    EXPECT_THROW(check_gradients(
                     "bad", {{"input", &x}}, [&] { return ops::relu(x); },
                     [&](const Tensor<double>&) { return std::vector{Tensor<double>({1, 1, 2, 2, 1})}; }, rng, 1e-4),
                 Error);
}

TEST(GradientCheck, RelativeErrorDefinition) {
    EXPECT_DOUBLE_EQ(relative_error({1.0, -2.0}, {1.0, -1.0}), 0.5);
    EXPECT_EQ(relative_error({0.0, 0.0}, {0.0, 0.0}), 0.0);
    EXPECT_DOUBLE_EQ(relative_error({0.0}, {1e-3}), 1.0);
    EXPECT_THROW(relative_error({1.0}, {}), Error);
}
