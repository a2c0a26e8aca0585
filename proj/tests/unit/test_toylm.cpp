#include "../support/toy_fixtures.hpp"
#include "immlab/errors.hpp"
#include "immlab/tasks.hpp"
#include "immlab/toylm.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace immlab;
using namespace immlab::lm;

namespace {

// Tiny model with U(-1, 1) weights: logits spread far enough that argmax
// never hinges on rounding.
Checkpoint wide_model(std::uint64_t seed) {
    auto c = init_params(toyfix::tiny_config(), seed);
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (auto& [name, t] : c.tensors) {
        if (name.find(".g") != std::string::npos) {
            continue;
        }
        for (auto& x : t.values()) {
            x = dist(gen);
        }
    }
    return c;
}

} // namespace

TEST_CASE("analytic gradients match central differences") {
    const auto cfg = toyfix::tiny_config();
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto model = wide_model(seed);
        const auto p = params_from_checkpoint<double>(model);
        const auto batch = toyfix::random_batch(cfg, 3, 8, seed + 100);
        const auto analytic = toyfix::analytic_grads(p, batch);
        const auto fd = toyfix::finite_difference_grads(p, batch, 1e-4);
        REQUIRE(analytic.size() == fd.size());
        CHECK(toyfix::max_relative_error(analytic, fd, 1e-6) < 1e-3);
    }
}

TEST_CASE("float and double passes agree") {
    const auto cfg = toyfix::tiny_config();
    const auto model = wide_model(7);
    const auto batch = toyfix::random_batch(cfg, 4, 8, 9);
    const auto pf = params_from_checkpoint<float>(model);
    const auto pd = params_from_checkpoint<double>(model);
    auto gf = Params<double>::zeros(cfg);
    auto gd = Params<double>::zeros(cfg);
    const double lf = loss_and_grads<float>(pf, batch, 1.0, &gf);
    const double ld = loss_and_grads<double>(pd, batch, 1.0, &gd);
    CHECK(lf == doctest::Approx(ld).epsilon(1e-4));
    CHECK(toyfix::max_relative_error(toyfix::flat_values(gf), toyfix::flat_values(gd), 1e-3) < 1e-2);
}

TEST_CASE("logits are causal") {
    const auto p = params_from_checkpoint<double>(wide_model(4));
    std::vector<TokenId> a = {1, 5, 9, 3, 7, 2};
    auto b = a;
    b[4] = 11;
    const auto la = forward_logits<double>(p, a);
    const auto lb = forward_logits<double>(p, b);
    const std::size_t V = p.cfg.vocab_size;
    for (std::size_t i = 0; i < 4 * V; ++i) {
        REQUIRE(la[i] == lb[i]);
    }
    bool later_differs = false;
    for (std::size_t i = 4 * V; i < la.size(); ++i) {
        later_differs |= la[i] != lb[i];
    }
    CHECK(later_differs);
}

TEST_CASE("initialization") {
    ModelConfig cfg;
    const auto c = init_params(cfg, 0);
    CHECK(c.tensors.size() == 8 * cfg.n_layers + 3);
    CHECK(c.tensors.size() == tensor_names(cfg).size());
    CHECK(ModelConfig::from_checkpoint(c) == cfg);

    const auto& e = c.tensors.at("embed.weight").values();
    double ss = 0.0;
    for (float x : e) {
        ss += static_cast<double>(x) * x;
    }
    CHECK(std::sqrt(ss / static_cast<double>(e.size())) == doctest::Approx(0.02).epsilon(0.25));
    for (float g : c.tensors.at("layers.3.norm2.g").values()) {
        CHECK(g == 1.0f);
    }
    CHECK(init_params(cfg, 0) == c);
    CHECK_FALSE(init_params(cfg, 1) == c);
}

TEST_CASE("fresh model loss is near uniform") {
    ModelConfig cfg;
    const auto p = params_from_checkpoint<float>(init_params(cfg, 3));
    std::vector<Sequence> batch;
    for (std::uint64_t a = 10; a < 20; ++a) {
        const auto ex = tasks::make_example(tasks::TaskKind::Add, a, a * 7);
        batch.push_back(tasks::tokenize_pair(ex.prompt, ex.rationale));
    }
    CHECK(std::abs(mean_loss(p, batch) - std::log(static_cast<double>(cfg.vocab_size))) < 0.2);
}

TEST_CASE("duplicating a batch leaves the mean gradient unchanged") {
    const auto cfg = toyfix::tiny_config();
    const auto model = wide_model(5);
    auto batch = toyfix::random_batch(cfg, 2, 8, 6);
    const auto once = sft_loss_and_grads(model, batch);
    auto twice_batch = batch;
    twice_batch.insert(twice_batch.end(), batch.begin(), batch.end());
    const auto twice = sft_loss_and_grads(model, twice_batch);
    CHECK(once.loss == doctest::Approx(twice.loss).epsilon(1e-9));
    for (const auto& [name, t] : once.grads.tensors) {
        const auto& u = twice.grads.tensors.at(name).values;
        for (std::size_t i = 0; i < u.size(); ++i) {
            REQUIRE(t.values[i] == doctest::Approx(u[i]).epsilon(1e-9).scale(1e-12));
        }
    }
}

TEST_CASE("batch without targets is rejected") {
    const auto model = wide_model(1);
    std::vector<Sequence> batch(1);
    batch[0].tokens = {1, 4, 5};
    batch[0].loss_mask = {0, 0, 0};
    CHECK_THROWS_AS(sft_loss_and_grads(model, batch), DataError);
}

TEST_CASE("overlong and out-of-vocabulary inputs are rejected") {
    const auto p = params_from_checkpoint<float>(wide_model(1));
    std::vector<Sequence> batch(1);
    batch[0].tokens.assign(9, 3);
    batch[0].loss_mask.assign(9, 1);
    CHECK_THROWS_AS(mean_loss(p, batch), DataError);
    batch[0].tokens.assign(4, 40);
    batch[0].loss_mask.assign(4, 1);
    CHECK_THROWS_AS(mean_loss(p, batch), DataError);

    SampleRequest r;
    r.prompt.assign(8, 3);
    CHECK_THROWS_AS(sample_batch(p, std::span<const SampleRequest>(&r, 1)), DataError);
}

TEST_CASE("AdamW") {
    const auto cfg = toyfix::tiny_config();
    TrainConfig t;
    t.learning_rate = 1e-2;
    t.weight_decay = 0.1;
    t.warmup_fraction = 0.0;

    SUBCASE("zero gradient only decays") {
        auto p = params_from_checkpoint<float>(wide_model(2));
        const auto before = toyfix::flat_values(p);
        AdamState st(cfg, 10);
        adamw_step(p, Params<double>::zeros(cfg), st, t, 1);
        const auto after = toyfix::flat_values(p);
        for (std::size_t i = 0; i < before.size(); ++i) {
            REQUIRE(after[i] == doctest::Approx(before[i] * (1.0 - 1e-2 * 0.1)).epsilon(1e-6));
        }
    }
    SUBCASE("without decay a zero gradient is a fixed point") {
        t.weight_decay = 0.0;
        auto p = params_from_checkpoint<float>(wide_model(2));
        const auto before = toyfix::flat_values(p);
        AdamState st(cfg, 10);
        for (std::size_t s = 1; s <= 3; ++s) {
            adamw_step(p, Params<double>::zeros(cfg), st, t, s);
        }
        CHECK(toyfix::flat_values(p) == before);
    }
    SUBCASE("first step moves each weight by about lr against the gradient sign") {
        t.weight_decay = 0.0;
        auto p = params_from_checkpoint<float>(wide_model(2));
        const auto before = toyfix::flat_values(p);
        auto g = Params<double>::zeros(cfg);
        for (double* x : toyfix::flat_refs(g)) {
            *x = 0.5;
        }
        AdamState st(cfg, 10);
        adamw_step(p, g, st, t, 1);
        const auto after = toyfix::flat_values(p);
        for (std::size_t i = 0; i < before.size(); ++i) {
            REQUIRE(after[i] == doctest::Approx(before[i] - 1e-2).epsilon(1e-5).scale(1.0));
        }
    }
    SUBCASE("non-finite gradient") {
        auto p = params_from_checkpoint<float>(wide_model(2));
        auto g = Params<double>::zeros(cfg);
        g.embed[0] = std::nan("");
        AdamState st(cfg, 10);
        CHECK_THROWS_AS(adamw_step(p, g, st, t, 1), NumericError);
    }
    SUBCASE("warmup is linear") {
        t.warmup_fraction = 0.1;
        CHECK(learning_rate_at(t, 1, 100) == doctest::Approx(1e-3));
        CHECK(learning_rate_at(t, 10, 100) == doctest::Approx(1e-2));
        CHECK(learning_rate_at(t, 50, 100) == doctest::Approx(1e-2));
    }
}

TEST_CASE("training is deterministic and lowers the loss") {
    const auto cfg = toyfix::tiny_config();
    const auto data = toyfix::random_batch(cfg, 8, 8, 11);
    TrainConfig t;
    t.learning_rate = 1e-2;
    t.epochs = 30;
    t.batch_size = 4;
    auto a = params_from_checkpoint<float>(init_params(cfg, 1));
    auto b = a;
    const auto ra = train_sft(a, data, t);
    const auto rb = train_sft(b, data, t);
    CHECK(ra.step_losses == rb.step_losses);
    CHECK(toyfix::flat_values(a) == toyfix::flat_values(b));
    CHECK(ra.steps == 60);
    CHECK(ra.step_losses.back() < ra.step_losses.front() * 0.7);
}

TEST_CASE("pick_token") {
    SeededStream s(1);
    const std::vector<float> tie = {0.5f, 2.0f, 2.0f, -1.0f};
    CHECK(pick_token(tie, 0.0, s) == 1);

    // softmax(log p) = p.
    const std::vector<float> logits = {std::log(0.2f), std::log(0.3f), std::log(0.5f)};
    std::array<int, 3> counts{};
    SeededStream mc(2024);
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        ++counts[static_cast<std::size_t>(pick_token(logits, 1.0, mc))];
    }
    const double expect[] = {0.2, 0.3, 0.5};
    for (std::size_t i = 0; i < 3; ++i) {
        const double se = std::sqrt(expect[i] * (1 - expect[i]) / n);
        CHECK(std::abs(counts[i] / double(n) - expect[i]) < 4 * se);
    }
    CHECK_THROWS_AS(pick_token(logits, -1.0, mc), ConfigError);
}

TEST_CASE("sampling") {
    const auto model = wide_model(3);
    const auto p = params_from_checkpoint<float>(model);

    SUBCASE("cached decoding equals greedy full recomputation") {
        std::vector<TokenId> seq = {1, 4, 7};
        SampleRequest r{seq, 0.0, 5, 0};
        const auto got = sample_batch(p, std::span<const SampleRequest>(&r, 1)).front();
        std::vector<TokenId> expect;
        while (expect.size() < 5 && seq.size() < p.cfg.max_seq_len) {
            const auto logits = forward_logits<float>(p, seq);
            const std::span<const float> last(logits.data() + (seq.size() - 1) * p.cfg.vocab_size,
                                              p.cfg.vocab_size);
            SeededStream unused(0);
            const TokenId t = pick_token(last, 0.0, unused);
            if (t == tasks::kEos) {
                break;
            }
            expect.push_back(t);
            seq.push_back(t);
            if (seq.size() >= p.cfg.max_seq_len) {
                break;
            }
        }
        CHECK(got == expect);
    }
    SUBCASE("results do not depend on grouping") {
        std::vector<SampleRequest> reqs;
        for (std::uint64_t i = 0; i < 70; ++i) {
            reqs.push_back({{1, static_cast<TokenId>(3 + i % 10)}, 0.8, 6, 1000 + i});
        }
        const auto all = sample_batch(p, reqs);
        for (std::size_t i : {0u, 33u, 69u}) {
            const auto one = sample_batch(p, std::span<const SampleRequest>(&reqs[i], 1)).front();
            CHECK(one == all[i]);
        }
        CHECK(sample_batch(p, reqs) == all);
    }
    SUBCASE("context limit stops decoding") {
        SampleRequest r{{1, 5, 6, 7, 8, 9}, 0.0, 50, 0};
        const auto out = sample_batch(p, std::span<const SampleRequest>(&r, 1)).front();
        CHECK(r.prompt.size() + out.size() <= p.cfg.max_seq_len);
    }
}
