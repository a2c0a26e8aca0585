#include "../support/toy_fixtures.hpp"
#include "immlab/analysis.hpp"
#include "immlab/errors.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <numeric>
#include <sstream>

using namespace immlab;

namespace {

Checkpoint one_param(float w) {
    Checkpoint c;
    c.tensors.emplace("layers.0.mlp.w1", Tensor({1}, {w}));
    return c;
}

Delta grad_of(const Checkpoint& c, double g) {
    Delta d;
    for (const auto& [name, t] : c.tensors) {
        d.tensors[name] = DeltaTensor{t.shape(), std::vector<double>(t.numel(), g)};
    }
    return d;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("importance of L(w) = w^2 at w = 3") {
    const auto c = one_param(3.0f);
    const auto imp = importance_from_gradients(c, grad_of(c, 2.0 * 3.0), 1);
    CHECK(imp.per_layer.at(0) == 18.0);
    CHECK(importance_from_gradients(c, grad_of(c, 0.0), 1).per_layer.at(0) == 0.0);
    CHECK_THROWS_AS(importance_from_gradients(c, grad_of(c, std::nan("")), 1), NumericError);
    CHECK_THROWS_AS(importance_from_gradients(c, Delta{}, 1), IncongruentError);
}

TEST_CASE("importance matches a finite-difference reconstruction") {
    const auto model = lm::init_params(toyfix::tiny_task_config(), 17);
    const auto pairs = toyfix::short_calibration_pairs();
    const auto imp = layer_importance(model, pairs);
    const auto fd = toyfix::finite_difference_layer_importance(model, pairs, 1e-4);
    REQUIRE(imp.per_layer.size() == fd.size());
    for (std::size_t n = 0; n < fd.size(); ++n) {
        CHECK(imp.per_layer[n] > 0.0);
        CHECK(std::abs(imp.per_layer[n] - fd[n]) / fd[n] < 5e-2);
    }
    CHECK(imp.nonlayer.count("embed.weight") == 1);
    CHECK(imp.calibration_set_id.size() == 16);
}

TEST_CASE("importance ignores calibration order") {
    const auto model = lm::init_params(toyfix::tiny_task_config(), 3);
    auto pairs = toyfix::short_calibration_pairs();
    const auto a = layer_importance(model, pairs);
    std::reverse(pairs.begin(), pairs.end());
    const auto b = layer_importance(model, pairs);
    CHECK(a.per_layer == b.per_layer);
    CHECK(a.calibration_set_id == b.calibration_set_id);
    CHECK(a.token_count == b.token_count);
    CHECK_THROWS_AS(layer_importance(model, {}), DataError);
}

TEST_CASE("weight change") {
    Checkpoint a;
    a.tensors.emplace("layers.0.attn.wq", Tensor({2}, {0.0f, 0.0f}));
    a.tensors.emplace("layers.0.mlp.w1", Tensor({2}, {0.0f, 0.0f}));
    a.tensors.emplace("layers.1.attn.wq", Tensor({2}, {1.0f, 1.0f}));
    a.tensors.emplace("embed.weight", Tensor({1}, {0.0f}));
    Checkpoint b = a;
    b.tensors.at("layers.0.attn.wq") = Tensor({2}, {3.0f, 4.0f});
    b.tensors.at("layers.0.mlp.w1") = Tensor({2}, {5.0f, 12.0f});
    b.tensors.at("embed.weight") = Tensor({1}, {-2.0f});

    const auto ch = layer_weight_change(a, b);
    CHECK(ch.per_layer == std::vector<double>{18.0, 0.0});
    CHECK(ch.nonlayer.at("embed.weight") == 2.0);
    CHECK(ch.percent_per_layer == std::vector<double>{100.0, 0.0});

    CHECK(layer_change_norms(a, a).per_layer == std::vector<double>{0.0, 0.0});
    CHECK_THROWS_AS(layer_weight_change(a, a), DataError);
}

TEST_CASE("change percentages sum to 100 and ignore a common scale") {
    const std::map<std::string, std::vector<std::size_t>> shapes = {
        {"layers.0.attn.wq", {3, 3}}, {"layers.1.attn.wq", {3, 3}}, {"layers.2.mlp.w2", {2, 4}}};
    const auto a = testutil::random_checkpoint(shapes, 1);
    const auto b = testutil::random_checkpoint(shapes, 2);
    const auto ch = layer_weight_change(a, b);
    CHECK(std::accumulate(ch.percent_per_layer.begin(), ch.percent_per_layer.end(), 0.0) ==
          doctest::Approx(100.0));

    auto a2 = a;
    auto b2 = b;
    for (auto* c : {&a2, &b2}) {
        for (auto& [_, t] : c->tensors) {
            for (auto& x : t.values()) {
                x *= 4.0f;
            }
        }
    }
    const auto ch2 = layer_weight_change(a2, b2);
    for (std::size_t n = 0; n < 3; ++n) {
        CHECK(ch2.percent_per_layer[n] == doctest::Approx(ch.percent_per_layer[n]));
    }
}

TEST_CASE("analysis report round trip") {
    testutil::TempDir dir;
    LayerImportance imp;
    imp.per_layer = {1.5, 0.25};
    imp.nonlayer = {{"embed", 0.75}};
    imp.calibration_set_id = "00000000000000ab";
    imp.token_count = 12;
    LayerChange ch;
    ch.per_layer = {3.0, 1.0};
    ch.percent_per_layer = {75.0, 25.0};
    ch.nonlayer = {{"embed", 0.5}, {"head", 0.125}};

    emit_analysis_report(imp, ch, dir / "a.csv");
    const std::string csv = slurp(dir / "a.csv");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "layer_index,importance,weight_change,change_percent");
    std::getline(lines, line);
    CHECK(line.rfind("0,", 0) == 0);
    std::size_t nonlayer_rows = 0;
    while (std::getline(lines, line)) {
        nonlayer_rows += line.rfind("NONLAYER:", 0) == 0;
    }
    CHECK(nonlayer_rows >= 1);

    const auto back = load_analysis_report(dir / "a.json");
    REQUIRE(back.importance);
    CHECK(back.importance->per_layer == imp.per_layer);
    CHECK(back.importance->calibration_set_id == imp.calibration_set_id);
    CHECK(back.importance->token_count == 12);
    CHECK(back.change.per_layer == ch.per_layer);
    CHECK(back.change.percent_per_layer == ch.percent_per_layer);
    CHECK(back.change.nonlayer == ch.nonlayer);

    emit_analysis_report(std::nullopt, ch, dir / "b.csv");
    CHECK(slurp(dir / "b.csv").rfind("layer_index,weight_change,change_percent\n", 0) == 0);
    CHECK_FALSE(load_analysis_report(dir / "b.json").importance);

    imp.per_layer.push_back(1.0);
    CHECK_THROWS_AS(emit_analysis_report(imp, ch, dir / "c.csv"), DataError);
}

TEST_CASE("spearman") {
    const std::vector<double> x = {1, 2, 3, 4, 5};
    const std::vector<double> up = {2, 4, 6, 8, 100};
    const std::vector<double> down = {5, 4, 3, 2, 1};
    CHECK(spearman_correlation(x, up) == doctest::Approx(1.0));
    CHECK(spearman_correlation(x, down) == doctest::Approx(-1.0));
    // Ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
    const std::vector<double> t = {1, 1, 2};
    const std::vector<double> s = {1, 2, 3};
    CHECK(spearman_correlation(t, s) == doctest::Approx(0.8660254037844386));
    CHECK_THROWS_AS(spearman_correlation(std::vector<double>{1}, std::vector<double>{1}), DataError);
}
