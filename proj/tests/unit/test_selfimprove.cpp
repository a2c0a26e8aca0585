#include "../support/passk_oracle.hpp"
#include "immlab/errors.hpp"
#include "immlab/selfimprove.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <json.hpp>

#include <set>

using namespace immlab;
using namespace immlab::lab;
using tasks::ReasoningExample;
using tasks::TaskKind;

namespace {

Dataset numbered(std::size_t n, std::uint64_t offset) {
    Dataset d;
    for (std::size_t i = 0; i < n; ++i) {
        d.push_back(tasks::make_example(TaskKind::Add, offset + i, 1));
    }
    return d;
}

std::vector<ReasoningExample> questions(std::size_t n) {
    std::vector<ReasoningExample> q;
    for (std::size_t i = 0; i < n; ++i) {
        q.push_back(tasks::make_example(TaskKind::Add, 10 + i, 25));
    }
    return q;
}

// Answers from a lookup of prompt token sequences to gold rationales.
Generator gold_generator(const std::vector<ReasoningExample>& qs) {
    return [qs](const std::vector<lm::SampleRequest>& reqs) {
        std::vector<std::string> out;
        for (const auto& r : reqs) {
            for (const auto& q : qs) {
                if (tasks::tokenize_prompt(q.prompt) == r.prompt) {
                    out.push_back(q.rationale);
                }
            }
        }
        return out;
    };
}

} // namespace

TEST_CASE("pass@k worked values") {
    CHECK(pass_at_k(std::size_t{3}, 1, 1) == doctest::Approx(1.0 / 3.0));
    CHECK(pass_at_k(std::size_t{4}, 1, 2) == doctest::Approx(0.5));
    CHECK(pass_at_k(std::size_t{4}, 2, 2) == doctest::Approx(5.0 / 6.0));
    CHECK(pass_at_k(std::size_t{8}, 0, 8) == 0.0);
    CHECK(pass_at_k(std::size_t{8}, 8, 1) == 1.0);
    CHECK(pass_at_k(std::size_t{8}, 7, 2) == 1.0);
}

TEST_CASE("pass@k equals subset enumeration and is monotone") {
    for (std::size_t M = 1; M <= 10; ++M) {
        for (std::size_t c = 0; c <= M; ++c) {
            for (std::size_t k = 1; k <= M; ++k) {
                const double v = pass_at_k(M, c, k);
                REQUIRE(v == doctest::Approx(oracle::enumerate_pass_at_k(M, c, k)).epsilon(1e-12));
                if (k > 1) {
                    REQUIRE(v >= pass_at_k(M, c, k - 1));
                }
                if (c > 0) {
                    REQUIRE(v >= pass_at_k(M, c - 1, k));
                }
            }
        }
    }
}

TEST_CASE("pass@k rejects invalid arguments") {
    CHECK_THROWS_AS(pass_at_k(std::size_t{4}, 1, 0), ConfigError);
    CHECK_THROWS_AS(pass_at_k(std::size_t{4}, 1, 5), ConfigError);
    CHECK_THROWS_AS(pass_at_k(std::size_t{4}, 5, 1), DataError);
    CHECK_THROWS_AS(pass_at_k(4LL, -1LL, 1LL), ConfigError);
}

TEST_CASE("training-set policies") {
    const std::vector<Dataset> history = {numbered(100, 0), numbered(80, 1000), numbered(60, 2000)};
    CHECK(assemble_training_set(history, LoopMode::Vanilla, 0.25, 1) == history.back());
    CHECK(assemble_training_set(history, LoopMode::Imm, 0.25, 1) == history.back());
    CHECK(assemble_training_set(history, LoopMode::Accumulate, 0.25, 1).size() == 240);

    const std::vector<Dataset> two = {numbered(80, 0), numbered(50, 1000)};
    const auto mixed = assemble_training_set(two, LoopMode::Mixture, 0.25, 7);
    REQUIRE(mixed.size() == 70);
    CHECK(std::equal(two[1].begin(), two[1].end(), mixed.begin()));
    for (std::size_t i = 50; i < 70; ++i) {
        CHECK(std::find(two[0].begin(), two[0].end(), mixed[i]) != two[0].end());
    }
    CHECK(assemble_training_set(two, LoopMode::Mixture, 0.25, 7) == mixed);
    CHECK(assemble_training_set({numbered(5, 0)}, LoopMode::Mixture, 0.25, 7).size() == 5);
}

TEST_CASE("synthesis keeps verified completions up to the cap") {
    const auto qs = questions(6);
    const auto gold = synthesize_dataset(gold_generator(qs), qs, 4, {0.2, 0.4, 0.6}, 2, 3);
    CHECK(gold.synthesized == 24);
    CHECK(gold.kept.size() == 12);
    for (const auto& e : gold.kept) {
        CHECK(tasks::verify(e.final_answer, e.rationale));
    }
    const auto capped = synthesize_dataset(gold_generator(qs), qs, 1, {0.2}, 2, 3);
    CHECK(capped.kept.size() == 6);

    const Generator silent = [](const std::vector<lm::SampleRequest>& reqs) {
        return std::vector<std::string>(reqs.size(), "1+1=2;");
    };
    const auto none = synthesize_dataset(silent, qs, 4, {0.2}, 2, 3);
    CHECK(none.synthesized == 24);
    CHECK(none.kept.empty());
}

TEST_CASE("synthesis requests cycle temperatures with distinct seeds") {
    const auto qs = questions(3);
    std::vector<lm::SampleRequest> seen;
    const Generator spy = [&](const std::vector<lm::SampleRequest>& reqs) {
        seen = reqs;
        return std::vector<std::string>(reqs.size(), "");
    };
    synthesize_dataset(spy, qs, 4, {0.2, 0.4, 0.6}, 2, 9);
    REQUIRE(seen.size() == 12);
    CHECK(seen[0].temperature == 0.2);
    CHECK(seen[1].temperature == 0.4);
    CHECK(seen[3].temperature == 0.2);
    std::set<std::uint64_t> seeds;
    for (const auto& r : seen) {
        seeds.insert(r.seed);
    }
    CHECK(seeds.size() == 12);
}

TEST_CASE("lab config") {
    LabConfig c;
    c.iterations = 2;
    c.loop_mode = LoopMode::Mixture;
    c.eval_sets = {{TaskKind::Add, 10}, {TaskKind::Mul1, 5}};
    c.merge.importance = std::nullopt;
    const auto back = LabConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(LabConfig{}.hash() != c.hash());

    CHECK_THROWS_AS(LabConfig::from_json(R"({"iterationz": 3})"), ConfigError);
    CHECK_THROWS_AS(LabConfig::from_json(R"({"iterations": "three"})"), ConfigError);
    CHECK_THROWS_AS(LabConfig::from_json(R"({"merge": {"mode": "IMM"}})"), ConfigError);
    CHECK_THROWS_AS(LabConfig::from_json(R"({"eval_samples": 2, "pass_k_values": [1, 4]})"), ConfigError);
    CHECK_THROWS_AS(LabConfig::from_json("{"), ConfigError);
    CHECK(parse_loop_mode("iimm") == LoopMode::Iimm);
    CHECK_THROWS_AS(parse_loop_mode("star"), ConfigError);
}

TEST_CASE("strip_wall_clock removes timing members only") {
    const std::string m = R"({"a": 1, "wall_clock_seconds": 3.5, "b": [{"wall_clock_seconds": 1, "c": 2}]})";
    const auto j = nlohmann::json::parse(strip_wall_clock(m));
    CHECK(j == nlohmann::json::parse(R"({"a": 1, "b": [{"c": 2}]})"));
}

TEST_CASE("evaluation scores every kind on fixed questions") {
    LabConfig c;
    c.model.n_layers = 1;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.d_ff = 8;
    c.eval_sets = {{TaskKind::Add, 3}, {TaskKind::Sub, 2}};
    c.eval_samples = 2;
    c.pass_k_values = {1, 2};
    c.max_new_tokens = 8;
    CHECK(eval_questions(c, TaskKind::Add) == eval_questions(c, TaskKind::Add));
    const auto model = lm::init_params(c.model, 0);
    const auto r = evaluate_model(model, c);
    CHECK(r.kinds.size() == 2);
    CHECK(r.at(TaskKind::Add).correct_counts.size() == 3);
    CHECK(r.at(TaskKind::Sub).pass_at_k.at(2) >= r.at(TaskKind::Sub).pass_at_k.at(1));
    CHECK(strip_wall_clock(to_json(evaluate_model(model, c))) == strip_wall_clock(to_json(r)));
}

TEST_CASE("an untrained model aborts the first iteration") {
    testutil::TempDir dir;
    LabConfig c;
    c.model.n_layers = 1;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.d_ff = 8;
    c.questions_per_iteration = 4;
    c.samples_per_question = 1;
    c.max_new_tokens = 4;
    LabState s;
    s.base = lm::init_params(c.model, 0);
    s.current = s.base;
    CHECK_THROWS_AS(run_iteration(s, c, 0, dir.path), AbortError);
}
