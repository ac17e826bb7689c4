#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "cramf/eval.hpp"
#include "cramf/population.hpp"
#include "cramf/providers.hpp"

using namespace cramf;
using namespace cramf::eval;
using namespace cramf::gateway;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

TemplateCatalog eval_catalog() {
    return TemplateCatalog::from_map({
        {"classify_problem", "Label this problem explicit or implicit: {{statement}}"},
        {"classify_problem_retry",
         "Your reply {{previous_reply}} was malformed. Label again: {{statement}}"},
        {"rewrite_problem", "Rewrite in explicit mathematical language: {{statement}}"},
        {"extract_query_concepts", "List the core concepts of: {{statement}}"},
        {"extract_query_concepts_retry",
         "Your reply {{previous_reply}} was malformed. List concepts of: {{statement}}"},
        {"interpret_concept", "Interpret '{{concept}}' in the context of: {{statement}}"},
        {"generate_keywords", "Give search keywords for '{{concept}}'"},
        {"generate_keywords_retry",
         "Your reply {{previous_reply}} was malformed. Keywords for '{{concept}}'"},
        {"grounding_context", "Relevant formal definitions:\n\n{{definitions}}"},
        {"formalize", "Formalize this statement.\n{{context}}\nStatement: {{statement}}"},
        {"eval_back_translate", "State this formal code in plain language: {{formal_code}}"},
        {"judge_consistency",
         "Does the translation match the statement?\n{{statement}}\n{{back_translation}}"},
        {"judge_consistency_retry",
         "Your reply {{previous_reply}} was malformed. Match?\n{{statement}}\n"
         "{{back_translation}}"},
        {"judge_strong_relevance",
         "Is '{{definition}}' a core ingredient of: {{statement}}"},
        {"judge_strong_relevance_retry",
         "Your reply {{previous_reply}} was malformed. Core ingredient? '{{definition}}' "
         "in: {{statement}}"},
        {"judge_weak_relevance", "Is '{{definition}}' loosely related to: {{statement}}"},
        {"judge_weak_relevance_retry",
         "Your reply {{previous_reply}} was malformed. Loosely related? '{{definition}}' "
         "to: {{statement}}"},
    });
}

struct TestRig {
    std::shared_ptr<ScriptedChatBackend> chat;
    Gateway gw;

    explicit TestRig(std::vector<ScriptRule> rules)
        : chat(std::make_shared<ScriptedChatBackend>(std::move(rules))),
          gw(eval_catalog(), chat, std::make_shared<HashEmbeddingBackend>(),
             std::make_shared<CosineRerankBackend>(),
             GatewayOptions{.max_retries = 0, .backoff_ms = 1}) {}
};

std::string yes() { return json{{"answer", "yes"}}.dump(); }
std::string no() { return json{{"answer", "no"}}.dump(); }

ContributionScore judged(int value) {
    ContributionScore s;
    s.value = value;
    return s;
}

ContributionScore unjudged_score() {
    ContributionScore s;
    s.unjudged = true;
    return s;
}

EvaluationRecord record_with_values(const std::vector<int>& values) {
    EvaluationRecord r;
    for (std::size_t i = 0; i < values.size(); ++i)
        r.retrieved.push_back({"Def" + std::to_string(i), judged(values[i])});
    return r;
}

// compiled / consistent flags per attempt
EvaluationRecord record_with_attempts(const std::vector<std::pair<bool, bool>>& attempts) {
    EvaluationRecord r;
    for (auto [compiled, consistent] : attempts) {
        FormalizationAttempt a;
        a.formal_code = "code";
        a.compiled = compiled;
        if (compiled) a.consistent = consistent;
        r.attempts.push_back(a);
    }
    return r;
}

FormalizationAttempt attempt(std::string code, bool compiled,
                             std::optional<bool> consistent = std::nullopt) {
    FormalizationAttempt a;
    a.formal_code = std::move(code);
    a.compiled = compiled;
    a.consistent = consistent;
    return a;
}

// ── shared fixture for whole-run tests ──────────────────────────
// Three definitions, one concept each, so every retrieval sees the
// same three-element pool and the final context holds all of them.
// Metrics then depend only on scripted replies, not on hash luck.

kb::KnowledgeBase eval_kb() {
    kb::KnowledgeBase kb;
    auto add = [&](const std::string& identifier, const std::string& annotation,
                   const std::string& concept_name, const std::string& explanation) {
        kb.definitions.push_back(
            {identifier, "def " + identifier + " : Prop", "Mathlib.Fixture", kb::DeclKind::Def});
        kb.descriptions.push_back(
            {kb::description_id_for(identifier), identifier, annotation, false});
        kb.concepts.push_back(
            {kb::concept_id_for(concept_name), concept_name, "mathematics", explanation});
        kb.links.push_back(
            {kb::concept_id_for(concept_name), {kb::description_id_for(identifier)}});
    };
    add("Metric.ball", "the open ball of a given radius around a center point",
        "metric ball", "all points within a fixed distance of a center");
    add("nhds", "the filter of neighborhoods of a point", "neighborhood filter",
        "the sets containing an open set around the point");
    add("IsOpen", "a set equal to its own interior", "open set",
        "a set that surrounds each of its points");
    kb.version = 2;
    kb.source_fingerprint = "feed";
    return kb::canonical(std::move(kb));
}

vindex::VectorIndex eval_index(const kb::KnowledgeBase& kb) {
    TestRig rig({});
    auto encoded = population::encode_units(rig.gw, kb);
    return vindex::VectorIndex(std::move(encoded.units), vindex::Side::Concept);
}

std::string concepts_reply(const std::vector<std::string>& names) {
    return json{{"concepts", names}}.dump();
}

std::string keywords_reply(const std::vector<std::string>& words) {
    return json{{"keywords", words}}.dump();
}

std::string explicit_reply() { return json{{"classification", "explicit"}}.dump(); }

// Scripts the retrieval half of one problem: classification, one
// extracted concept, its interpretation, and its keywords.
void script_retrieval(std::vector<ScriptRule>& rules, const std::string& statement,
                      const std::string& concept_name) {
    rules.push_back({"classify_problem", {{"statement", statement}}, {explicit_reply()}});
    rules.push_back(
        {"extract_query_concepts", {{"statement", statement}}, {concepts_reply({concept_name})}});
    rules.push_back({"interpret_concept",
                     {{"concept", concept_name}, {"statement", statement}},
                     {"the usual formal reading of " + concept_name}});
}

}  // namespace

// ── code reference check ────────────────────────────────────────

TEST_CASE("a qualified reference is found as a whole token") {
    CHECK(identifier_appears_in_code("Metric.ball", "x \xe2\x88\x88 Metric.ball c r"));
    CHECK(identifier_appears_in_code("Filter.Tendsto", "exact Filter.Tendsto f atTop l"));
    CHECK(identifier_appears_in_code("Ring", "variable [Ring R]"));
    CHECK(identifier_appears_in_code("nhds", "theorem t : s \xe2\x88\x88 nhds x := h"));
}

TEST_CASE("an open-namespace reference is found through the final segment") {
    CHECK(identifier_appears_in_code("Metric.ball", "open Metric\nx \xe2\x88\x88 ball c r"));
    CHECK(identifier_appears_in_code("Filter.Tendsto", "exact Tendsto f atTop l"));
}

TEST_CASE("the final segment of a qualified occurrence is not a whole token") {
    // "Metric.ball" is one token, so the bare needle "ball" must not
    // match inside it; only the full-name route fires here.
    CHECK(identifier_appears_in_code("Metric.ball", "Metric.ball c r"));
    CHECK_FALSE(identifier_appears_in_code("ball", "Metric.ball c r"));
}

TEST_CASE("substrings of longer identifiers never match") {
    CHECK_FALSE(identifier_appears_in_code("Ring", "cases Ordering.lt"));
    CHECK_FALSE(identifier_appears_in_code("Ring", "variable [Semiring R]"));
    CHECK_FALSE(identifier_appears_in_code("deriv", "fderivWithin k f s x"));
    CHECK(identifier_appears_in_code("deriv", "deriv f x = 0"));
}

TEST_CASE("underscores digits and primes extend a token") {
    CHECK_FALSE(identifier_appears_in_code("nhds", "rw [mem_nhds_iff]"));
    CHECK_FALSE(identifier_appears_in_code("nhds", "exact nhds' x"));
    CHECK_FALSE(identifier_appears_in_code("pow", "pow2 x"));
    CHECK_FALSE(identifier_appears_in_code("le", "exact le_trans h h2"));
    CHECK(identifier_appears_in_code("le", "exact le h h2"));
}

TEST_CASE("the reference check is case sensitive") {
    CHECK_FALSE(identifier_appears_in_code("IsOpen", "exact isOpen_interior"));
    CHECK_FALSE(identifier_appears_in_code("Metric.ball", "metric.ball c r"));
}

TEST_CASE("empty identifier or empty code never matches") {
    CHECK_FALSE(identifier_appears_in_code("", "some code"));
    CHECK_FALSE(identifier_appears_in_code("nhds", ""));
}

// ── metric hand cases ───────────────────────────────────────────

TEST_CASE("average contribution score of a hand-checked mix is 1.5") {
    std::vector<EvaluationRecord> records{record_with_values({3, 2, 0, 1})};
    CHECK(acs(records) == 1.5);
}

TEST_CASE("unjudged definitions leave both sides of the average") {
    EvaluationRecord r;
    r.retrieved.push_back({"A", judged(3)});
    r.retrieved.push_back({"B", unjudged_score()});
    r.retrieved.push_back({"C", judged(0)});
    // 3 and 0 over two judged entries, not three.
    CHECK(acs({r}) == 1.5);
}

TEST_CASE("hit rate of a hand-checked pair is one half") {
    std::vector<EvaluationRecord> records{record_with_values({3, 0, 1}),
                                          record_with_values({1, 1, 0})};
    CHECK(hit_rate_at_k(records, 3) == 0.5);
}

TEST_CASE("hit rate only looks at the first k ranks") {
    std::vector<EvaluationRecord> records{record_with_values({1, 1, 3})};
    CHECK(hit_rate_at_k(records, 2) == 0.0);
    CHECK(hit_rate_at_k(records, 3) == 1.0);
}

TEST_CASE("an unjudged high value is not a hit") {
    EvaluationRecord r;
    auto s = unjudged_score();
    s.value = 3;
    r.retrieved.push_back({"A", s});
    CHECK(hit_rate_at_k({r}, 3) == 0.0);
}

TEST_CASE("compilation pass rate of a hand-checked run is 0.75") {
    std::vector<EvaluationRecord> records{
        record_with_attempts({{true, true}}),
        record_with_attempts({{true, false}}),
        record_with_attempts({{false, false}}),
        record_with_attempts({{true, true}}),
    };
    CHECK(cpr_at_k(records, 1) == 0.75);
    CHECK(far_at_k(records, 1) == 0.5);
}

TEST_CASE("pass rates use at most the first k attempts") {
    std::vector<EvaluationRecord> records{
        record_with_attempts({{false, false}, {true, true}})};
    CHECK(cpr_at_k(records, 1) == 0.0);
    CHECK(cpr_at_k(records, 2) == 1.0);
    // k beyond the attempt list is clamped, not an error
    CHECK(cpr_at_k(records, 10) == 1.0);
    CHECK(far_at_k(records, 10) == 1.0);
}

TEST_CASE("metrics refuse empty denominators") {
    std::vector<EvaluationRecord> none;
    CHECK_THROWS_AS(acs(none), MetricError);
    CHECK_THROWS_AS(hit_rate_at_k(none, 3), MetricError);
    CHECK_THROWS_AS(cpr_at_k(none, 1), MetricError);
    CHECK_THROWS_AS(far_at_k(none, 1), MetricError);

    EvaluationRecord all_unjudged;
    all_unjudged.retrieved.push_back({"A", unjudged_score()});
    CHECK_THROWS_AS(acs({all_unjudged}), MetricError);
    CHECK_THROWS_AS(hit_rate_at_k({all_unjudged}, 0), MetricError);
}

TEST_CASE("relative gain reproduces the spot-checked improvement") {
    // 52.3 → 69.3 is a 32.5 percent gain
    CHECK(relative_gain(69.3, 52.3) == doctest::Approx(0.325).epsilon(1e-3));
    CHECK(relative_gain(0.6, 0.4) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(relative_gain(0.5, 0.0), MetricError);
    CHECK_THROWS_AS(relative_gain(0.5, -0.1), MetricError);
}

// ── metric oracles ──────────────────────────────────────────────

namespace {

std::vector<EvaluationRecord> random_records(std::mt19937& rng, std::size_t count) {
    std::uniform_int_distribution<int> value_of(0, 3);
    std::uniform_int_distribution<int> len_of(0, 6);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<EvaluationRecord> records(count);
    for (std::size_t i = 0; i < count; ++i) {
        records[i].problem_id = "p" + std::to_string(i);
        int len = len_of(rng);
        for (int d = 0; d < len; ++d) {
            ContributionScore s;
            s.value = value_of(rng);
            s.unjudged = coin(rng) < 0.15;
            records[i].retrieved.push_back({"Def" + std::to_string(d), s});
        }
        int attempts = len_of(rng) % 4;
        for (int a = 0; a < attempts; ++a) {
            bool compiled = coin(rng) < 0.6;
            records[i].attempts.push_back(attempt("code", compiled,
                                                  compiled ? std::optional<bool>(coin(rng) < 0.5)
                                                           : std::nullopt));
        }
    }
    return records;
}

}  // namespace

TEST_CASE("average contribution score agrees with a flat recount") {
    std::mt19937 rng(4242);
    auto records = random_records(rng, 50);
    // the recount flattens first and sums as long double
    std::vector<double> values;
    for (const auto& r : records)
        for (const auto& d : r.retrieved)
            if (!d.score.unjudged) values.push_back(static_cast<double>(d.score.value));
    REQUIRE_FALSE(values.empty());
    long double total = std::accumulate(values.begin(), values.end(), 0.0L);
    double expected = static_cast<double>(total / static_cast<long double>(values.size()));
    CHECK(std::abs(acs(records) - expected) < 1e-12);
}

TEST_CASE("average contribution score is invariant under reordering") {
    std::mt19937 rng(77);
    auto records = random_records(rng, 40);
    double before = acs(records);
    std::shuffle(records.begin(), records.end(), rng);
    for (auto& r : records) std::shuffle(r.retrieved.begin(), r.retrieved.end(), rng);
    CHECK(acs(records) == before);
}

TEST_CASE("hit rate agrees with a per-record flag recount") {
    std::mt19937 rng(99);
    auto records = random_records(rng, 100);
    for (std::size_t k = 1; k <= 5; ++k) {
        std::size_t hits = 0;
        for (const auto& r : records) {
            std::vector<bool> good;
            for (const auto& d : r.retrieved)
                good.push_back(!d.score.unjudged && d.score.value >= 2);
            bool hit = false;
            for (std::size_t i = 0; i < good.size() && i < k; ++i) hit = hit || good[i];
            hits += hit ? 1 : 0;
        }
        double expected = static_cast<double>(hits) / static_cast<double>(records.size());
        CHECK(std::abs(hit_rate_at_k(records, k) - expected) < 1e-12);
    }
}

TEST_CASE("hit rate grows monotonically in k") {
    std::mt19937 rng(1234);
    auto records = random_records(rng, 60);
    double previous = 0.0;
    for (std::size_t k = 1; k <= 7; ++k) {
        double hr = hit_rate_at_k(records, k);
        CHECK(hr >= previous);
        previous = hr;
    }
    CHECK(hit_rate_at_k(records, 7) == hit_rate_at_k(records, 100));
}

TEST_CASE("pass rates agree with a recount and accuracy never exceeds compilation") {
    std::mt19937 rng(31337);
    for (int trial = 0; trial < 50; ++trial) {
        auto records = random_records(rng, 20);
        for (std::size_t k = 1; k <= 4; ++k) {
            std::size_t compiled_count = 0, accurate_count = 0;
            for (const auto& r : records) {
                bool any_compiled = false, any_accurate = false;
                for (std::size_t i = 0; i < r.attempts.size() && i < k; ++i) {
                    any_compiled = any_compiled || r.attempts[i].compiled;
                    any_accurate = any_accurate || (r.attempts[i].compiled &&
                                                    r.attempts[i].consistent.value_or(false));
                }
                compiled_count += any_compiled ? 1 : 0;
                accurate_count += any_accurate ? 1 : 0;
            }
            double n = static_cast<double>(records.size());
            double cpr = cpr_at_k(records, k);
            double far = far_at_k(records, k);
            CHECK(std::abs(cpr - static_cast<double>(compiled_count) / n) < 1e-12);
            CHECK(std::abs(far - static_cast<double>(accurate_count) / n) < 1e-12);
            CHECK(far <= cpr);
        }
    }
}

// ── contribution scoring ────────────────────────────────────────

TEST_CASE("a referenced definition in passing code scores three by rule") {
    TestRig rig({});
    auto score = score_definition(rig.gw, "Metric.ball", "statement",
                                  {attempt("x \xe2\x88\x88 Metric.ball c r", true, true)});
    CHECK(score == ContributionScore{3, ScoreBasis::ExactMatch, JudgedBy::RegexRule,
                                     false, false});
    // rule-based, the judge is never consulted
    CHECK(rig.chat->calls() == 0);
}

TEST_CASE("a referenced definition in failing code scores zero by rule") {
    TestRig rig({});
    auto not_compiled = score_definition(rig.gw, "nhds", "statement",
                                         {attempt("s \xe2\x88\x88 nhds x", false)});
    CHECK(not_compiled == ContributionScore{0, ScoreBasis::ErroneousReference,
                                            JudgedBy::RegexRule, false, false});
    auto not_consistent = score_definition(rig.gw, "nhds", "statement",
                                           {attempt("s \xe2\x88\x88 nhds x", true, false)});
    CHECK(not_consistent.value == 0);
    CHECK(rig.chat->calls() == 0);
}

TEST_CASE("one passing reference outweighs other failing attempts") {
    TestRig rig({});
    auto score = score_definition(rig.gw, "nhds", "statement",
                                  {attempt("bad nhds proof", false),
                                   attempt("good nhds proof", true, true)});
    CHECK(score.value == 3);
}

TEST_CASE("the passing attempt must itself contain the reference") {
    TestRig rig({});
    auto score = score_definition(rig.gw, "nhds", "statement",
                                  {attempt("bad nhds proof", false),
                                   attempt("unrelated proof", true, true)});
    CHECK(score.value == 0);
}

TEST_CASE("an absent definition judged strongly relevant scores two") {
    TestRig rig({{"judge_strong_relevance",
                  {{"definition", "nhds"}, {"statement", "about filters"}},
                  {yes()}}});
    auto score = score_definition(rig.gw, "nhds", "about filters",
                                  {attempt("unrelated code", true, true)});
    CHECK(score == ContributionScore{2, ScoreBasis::StrongRelevance, JudgedBy::LlmJudge,
                                     false, false});
    CHECK(rig.chat->calls() == 1);
}

TEST_CASE("an absent definition judged weakly relevant scores one") {
    TestRig rig({{"judge_strong_relevance", {}, {no()}},
                 {"judge_weak_relevance", {}, {yes()}}});
    auto score = score_definition(rig.gw, "nhds", "statement", {});
    CHECK(score == ContributionScore{1, ScoreBasis::WeakRelevance, JudgedBy::LlmJudge,
                                     false, false});
    CHECK(rig.chat->calls() == 2);
}

TEST_CASE("a definition denied twice by the judge is flagged ambiguous") {
    TestRig rig({{"judge_strong_relevance", {}, {no()}},
                 {"judge_weak_relevance", {}, {no()}}});
    auto score = score_definition(rig.gw, "nhds", "statement", {});
    CHECK(score.value == 1);
    CHECK(score.ambiguous);
    CHECK_FALSE(score.unjudged);
}

TEST_CASE("the judge branch never reads compile results") {
    TestRig rig({{"judge_strong_relevance", {}, {yes()}}});
    // every attempt failed, yet the absent definition still scores 2
    auto score = score_definition(rig.gw, "nhds", "statement",
                                  {attempt("bad", false), attempt("worse", false)});
    CHECK(score.value == 2);
}

TEST_CASE("a malformed judge reply is reprompted once with the original") {
    TestRig rig({{"judge_strong_relevance", {}, {"not json at all"}},
                 {"judge_strong_relevance_retry",
                  {{"previous_reply", "not json at all"}},
                  {yes()}}});
    auto score = score_definition(rig.gw, "nhds", "statement", {});
    CHECK(score.value == 2);
    CHECK(rig.chat->calls() == 2);
}

TEST_CASE("two malformed strong replies leave the definition unjudged") {
    TestRig rig({{"judge_strong_relevance", {}, {"junk"}},
                 {"judge_strong_relevance_retry", {}, {"more junk"}}});
    auto score = score_definition(rig.gw, "nhds", "statement", {});
    CHECK(score.unjudged);
    CHECK(score.value == 1);
    CHECK(rig.chat->calls() == 2);
}

TEST_CASE("two malformed weak replies also leave the definition unjudged") {
    TestRig rig({{"judge_strong_relevance", {}, {no()}},
                 {"judge_weak_relevance", {}, {"junk"}},
                 {"judge_weak_relevance_retry", {}, {"{\"answer\": \"maybe\"}"}}});
    auto score = score_definition(rig.gw, "nhds", "statement", {});
    CHECK(score.unjudged);
    // one parsed strong denial plus the weak question and its retry
    CHECK(rig.chat->calls() == 3);
}

TEST_CASE("judge replies may be fenced or oddly cased") {
    TestRig rig({{"judge_strong_relevance", {}, {"```json\n{\"answer\": \"YES\"}\n```"}}});
    auto score = score_definition(rig.gw, "nhds", "statement", {});
    CHECK(score.value == 2);
}

// ── compiler adapters ───────────────────────────────────────────

TEST_CASE("the mock compiler follows its script and its default") {
    MockCompiler strict({{"good", true}});
    CHECK(strict.compile("good").compiled);
    CHECK_FALSE(strict.compile("other").compiled);
    CHECK_FALSE(strict.compile("other").diagnostics.empty());

    MockCompiler lenient({}, true);
    CHECK(lenient.compile("anything").compiled);
}

TEST_CASE("the command compiler requires a file placeholder") {
    CHECK_THROWS_AS(CommandCompiler({"lean --make"}), ConfigError);
}

TEST_CASE("the command compiler judges by exit status and captures output") {
    CommandCompiler ok({.command = "cat {{file}}", .timeout_s = 5});
    auto result = ok.compile("theorem t : 1 = 1 := rfl");
    CHECK(result.compiled);
    CHECK(result.diagnostics == "theorem t : 1 = 1 := rfl");

    CommandCompiler grep_good({.command = "grep -q GOOD {{file}}", .timeout_s = 0});
    CHECK(grep_good.compile("GOOD theorem").compiled);
    CHECK_FALSE(grep_good.compile("BAD theorem").compiled);
}

TEST_CASE("the command compiler honors custom success codes") {
    // grep exits 1 on no match; treating 1 as success inverts it
    CommandCompiler inverted(
        {.command = "grep -q ABSENT {{file}}", .timeout_s = 5, .success_exit_codes = {1}});
    CHECK(inverted.compile("plain code").compiled);
    CHECK_FALSE(inverted.compile("ABSENT code").compiled);
}

// ── problems file ───────────────────────────────────────────────

TEST_CASE("problems load from line-delimited records in file order") {
    auto dir = fs::temp_directory_path() / "cramf-eval-problems";
    fs::create_directories(dir);
    auto path = dir / "problems.jsonl";
    std::ofstream out(path);
    out << json{{"problem_id", "p2"}, {"statement", "second"}}.dump() << "\n";
    out << "\n";
    out << json{{"problem_id", "p1"}, {"statement", "first"}}.dump() << "\n";
    out.close();

    auto problems = load_problems(path);
    REQUIRE(problems.size() == 2);
    CHECK(problems[0].problem_id == "p2");
    CHECK(problems[1].statement == "first");
}

TEST_CASE("malformed problem lines are rejected with their line number") {
    auto dir = fs::temp_directory_path() / "cramf-eval-problems-bad";
    fs::create_directories(dir);

    auto write_lines = [&](const std::string& name, const std::vector<std::string>& lines) {
        auto path = dir / name;
        std::ofstream out(path);
        for (const auto& l : lines) out << l << "\n";
        return path;
    };

    auto not_json = write_lines("a.jsonl", {json{{"problem_id", "p"}, {"statement", "s"}}.dump(),
                                            "{ nope"});
    CHECK_THROWS_WITH_AS(load_problems(not_json), doctest::Contains("line 2"), ParseError);

    auto missing = write_lines("b.jsonl", {json{{"problem_id", "p"}}.dump()});
    CHECK_THROWS_AS(load_problems(missing), ParseError);

    auto blank = write_lines("c.jsonl", {json{{"problem_id", "p"}, {"statement", "  "}}.dump()});
    CHECK_THROWS_AS(load_problems(blank), ParseError);

    auto dup = write_lines("d.jsonl", {json{{"problem_id", "p"}, {"statement", "s"}}.dump(),
                                       json{{"problem_id", "p"}, {"statement", "t"}}.dump()});
    CHECK_THROWS_WITH_AS(load_problems(dup), doctest::Contains("duplicate"), ParseError);
}

// ── whole-run golden ────────────────────────────────────────────

namespace {

// Statements, scripted formal codes, and scripted judgments for the
// five-problem golden run. Hand-derived outcome per problem:
//   p1  compiles, consistent, cites Metric.ball   scores 3/2/1
//   p2  fails,            cites ball (bare)       scores 0/unjudged/1*
//   p3  compiles, inconsistent, cites IsOpen      scores 0/2/1
//   p4  compiles, consistent, cites nhds          scores 3/2/1
//   p5  fails,             cites nothing          scores 1/1/1
// (* flagged ambiguous)
struct GoldenFixture {
    std::vector<Problem> problems;
    std::vector<ScriptRule> rules;
    std::map<std::string, bool> compile_verdicts;
};

GoldenFixture golden_fixture() {
    GoldenFixture fx;
    const std::string s1 = "Every metric ball is contained in the closure of itself.";
    const std::string s2 = "The ball around a point lies inside the interior of an enclosing set.";
    const std::string s3 = "The interior of any set is an open set.";
    const std::string s4 = "A set in the neighborhood filter contains an open set around the point.";
    const std::string s5 = "One plus one equals two.";
    fx.problems = {{"p1", s1}, {"p2", s2}, {"p3", s3}, {"p4", s4}, {"p5", s5}};

    const std::string aug1 = "theorem t1 : Metric.ball x r \xe2\x8a\x86 closure (Metric.ball x r)";
    const std::string aug2 = "theorem t2 : ball x r \xe2\x8a\x86 interior s := sorry";
    const std::string aug3 = "theorem t3 : IsOpen (interior s) := isOpen_interior";
    const std::string aug4 = "theorem t4 : s \xe2\x88\x88 nhds x := mem_nhds_iff.mpr h";
    const std::string aug5 = "theorem t5 : 1 + 1 = 2 := sorry";
    const std::string base1 = "theorem t1 : False := trivial";
    const std::string base2 = "theorem t2 : False := sorry";
    const std::string base3 = "theorem t3 : 2 = 2 := rfl";
    const std::string base4 = "theorem t4 : 3 = 3 := rfl";
    const std::string base5 = "theorem t5 : False := id";
    fx.compile_verdicts = {{aug1, true}, {aug3, true}, {aug4, true},
                           {base3, true}, {base4, true}};

    const std::string bt_a1 = "a ball is contained in its closure";
    const std::string bt_a3 = "every interior is closed";  // wrong on purpose
    const std::string bt_a4 = "a neighborhood contains the point";
    const std::string bt_b3 = "two equals two";
    const std::string bt_b4 = "three equals three";

    auto& r = fx.rules;
    script_retrieval(r, s1, "metric ball");
    script_retrieval(r, s2, "metric ball");
    script_retrieval(r, s3, "open set");
    script_retrieval(r, s4, "neighborhood filter");
    script_retrieval(r, s5, "arithmetic");
    r.push_back({"generate_keywords", {{"concept", "metric ball"}},
                 {keywords_reply({"ball"})}});
    r.push_back({"generate_keywords", {{"concept", "open set"}},
                 {keywords_reply({"IsOpen"})}});
    r.push_back({"generate_keywords", {{"concept", "neighborhood filter"}},
                 {keywords_reply({"nhds"})}});
    r.push_back({"generate_keywords", {{"concept", "arithmetic"}},
                 {keywords_reply({"plus"})}});

    // control rules pin the empty context and must come first; the
    // augmented rules then catch the non-empty context by subset match
    auto formalize = [&](const std::string& s, const std::string& base,
                         const std::string& aug) {
        r.push_back({"formalize", {{"statement", s}, {"context", ""}}, {base}});
        r.push_back({"formalize", {{"statement", s}}, {aug}});
    };
    formalize(s1, base1, aug1);
    formalize(s2, base2, aug2);
    formalize(s3, base3, aug3);
    formalize(s4, base4, aug4);
    formalize(s5, base5, aug5);

    r.push_back({"eval_back_translate", {{"formal_code", aug1}}, {bt_a1}});
    r.push_back({"eval_back_translate", {{"formal_code", aug3}}, {bt_a3}});
    r.push_back({"eval_back_translate", {{"formal_code", aug4}}, {bt_a4}});
    r.push_back({"eval_back_translate", {{"formal_code", base3}}, {bt_b3}});
    r.push_back({"eval_back_translate", {{"formal_code", base4}}, {bt_b4}});
    r.push_back({"judge_consistency", {{"back_translation", bt_a1}}, {yes()}});
    r.push_back({"judge_consistency", {{"back_translation", bt_a3}}, {no()}});
    r.push_back({"judge_consistency", {{"back_translation", bt_a4}}, {yes()}});
    r.push_back({"judge_consistency", {{"back_translation", bt_b3}}, {yes()}});
    r.push_back({"judge_consistency", {{"back_translation", bt_b4}}, {yes()}});

    auto strong = [&](const std::string& def, const std::string& s, const std::string& reply) {
        r.push_back({"judge_strong_relevance", {{"definition", def}, {"statement", s}}, {reply}});
    };
    auto weak = [&](const std::string& def, const std::string& s, const std::string& reply) {
        r.push_back({"judge_weak_relevance", {{"definition", def}, {"statement", s}}, {reply}});
    };
    // p1: ball by rule, nhds strong, IsOpen weak
    strong("nhds", s1, yes());
    strong("IsOpen", s1, no());
    weak("IsOpen", s1, yes());
    // p2: ball by rule, nhds unjudged, IsOpen denied twice
    strong("nhds", s2, "garbled");
    r.push_back({"judge_strong_relevance_retry",
                 {{"definition", "nhds"}, {"statement", s2}},
                 {"still garbled"}});
    strong("IsOpen", s2, no());
    weak("IsOpen", s2, no());
    // p3: IsOpen by rule, nhds strong, ball weak
    strong("nhds", s3, yes());
    strong("Metric.ball", s3, no());
    weak("Metric.ball", s3, yes());
    // p4: nhds by rule, ball strong, IsOpen weak
    strong("Metric.ball", s4, yes());
    strong("IsOpen", s4, no());
    weak("IsOpen", s4, yes());
    // p5: nothing cited, everything weakly relevant
    for (const auto& def : {"Metric.ball", "nhds", "IsOpen"}) {
        strong(def, s5, no());
        weak(def, s5, yes());
    }
    return fx;
}

const ContributionScore* score_of(const EvaluationRecord& record, const std::string& id) {
    for (const auto& d : record.retrieved)
        if (d.definition_identifier == id) return &d.score;
    return nullptr;
}

}  // namespace

TEST_CASE("a five-problem run reproduces the hand-computed report for both arms") {
    auto fx = golden_fixture();
    TestRig rig(fx.rules);
    auto kb = eval_kb();
    auto index = eval_index(kb);
    MockCompiler compiler(fx.compile_verdicts);

    EvalOptions options;
    options.k = 1;
    options.hit_k = 3;
    options.control = true;
    options.jobs = 2;
    auto outcome = run_eval(rig.gw, fx.problems, kb, index, compiler, options);

    // augmented arm, judged scores summed by hand:
    //   p1 3+2+1, p2 0+1 (one unjudged), p3 0+2+1, p4 3+2+1, p5 1+1+1
    MetricsReport expected;
    expected.acs = 19.0 / 14.0;
    expected.hit_rate_at_k = 3.0 / 5.0;
    expected.cpr_at_k = 3.0 / 5.0;
    expected.far_at_k = 2.0 / 5.0;
    expected.n = 5;
    expected.k = 1;
    expected.hit_k = 3;
    expected.unjudged = 1;
    expected.ambiguous = 1;
    CHECK(outcome.augmented.metrics == expected);
    CHECK(outcome.augmented.failed_problems == 0);
    CHECK(outcome.augmented.warnings.empty());

    // every problem saw the same three-definition pool
    REQUIRE(outcome.augmented.records.size() == 5);
    for (const auto& record : outcome.augmented.records) {
        std::vector<std::string> ids;
        for (const auto& d : record.retrieved) ids.push_back(d.definition_identifier);
        std::sort(ids.begin(), ids.end());
        CHECK(ids == std::vector<std::string>{"IsOpen", "Metric.ball", "nhds"});
    }

    // spot-check the per-definition scores behind the averages
    const auto& p1 = outcome.augmented.records[0];
    CHECK(*score_of(p1, "Metric.ball") ==
          ContributionScore{3, ScoreBasis::ExactMatch, JudgedBy::RegexRule, false, false});
    CHECK(*score_of(p1, "nhds") ==
          ContributionScore{2, ScoreBasis::StrongRelevance, JudgedBy::LlmJudge, false, false});
    CHECK(score_of(p1, "IsOpen")->value == 1);

    const auto& p2 = outcome.augmented.records[1];
    CHECK(score_of(p2, "Metric.ball")->value == 0);
    CHECK(score_of(p2, "Metric.ball")->basis == ScoreBasis::ErroneousReference);
    CHECK(score_of(p2, "nhds")->unjudged);
    CHECK(score_of(p2, "IsOpen")->ambiguous);

    const auto& p3 = outcome.augmented.records[2];
    CHECK(score_of(p3, "IsOpen")->value == 0);
    CHECK(score_of(p3, "nhds")->value == 2);

    const auto& p4 = outcome.augmented.records[3];
    CHECK(score_of(p4, "nhds")->value == 3);
    CHECK(score_of(p4, "Metric.ball")->value == 2);

    for (const auto& def : {"Metric.ball", "nhds", "IsOpen"})
        CHECK(score_of(outcome.augmented.records[4], def)->value == 1);

    // control arm: no retrieval, so contribution metrics degenerate
    REQUIRE(outcome.control.has_value());
    const auto& control = outcome.control->metrics;
    CHECK(std::isnan(control.acs));
    CHECK(control.hit_rate_at_k == 0.0);
    CHECK(control.cpr_at_k == 2.0 / 5.0);
    CHECK(control.far_at_k == 2.0 / 5.0);
    CHECK(control.n == 5);
    CHECK(control.unjudged == 0);
    REQUIRE(outcome.control->warnings.size() == 1);
    CHECK(outcome.control->warnings[0].find("undefined") != std::string::npos);
    for (const auto& record : outcome.control->records) CHECK(record.retrieved.empty());

    // accuracy can never exceed compilation in either arm
    CHECK(outcome.augmented.metrics.far_at_k <= outcome.augmented.metrics.cpr_at_k);
    CHECK(control.far_at_k <= control.cpr_at_k);

    // gains: CPR +50%, FAR exactly flat, the rest undefined
    REQUIRE(outcome.gains.cpr.has_value());
    CHECK(*outcome.gains.cpr == relative_gain(3.0 / 5.0, 2.0 / 5.0));
    CHECK(*outcome.gains.cpr == doctest::Approx(0.5).epsilon(1e-12));
    REQUIRE(outcome.gains.far.has_value());
    CHECK(*outcome.gains.far == 0.0);
    CHECK_FALSE(outcome.gains.acs.has_value());      // control ACS undefined
    CHECK_FALSE(outcome.gains.hit_rate.has_value()); // control hit rate is zero

    // reports render both arms
    auto table = render_table(outcome);
    CHECK(table.find("RG") != std::string::npos);
    CHECK(table.find("+50.0%") != std::string::npos);
    CHECK(table.find("n/a") != std::string::npos);

    json report = json::parse(report_json(outcome));
    CHECK(report["augmented"]["metrics"]["acs"].get<double>() ==
          doctest::Approx(19.0 / 14.0).epsilon(1e-12));
    CHECK(report["control"]["metrics"]["acs"].is_null());
    CHECK(report["relative_gain"]["far"].get<double>() == 0.0);
    CHECK(report["relative_gain"]["acs"].is_null());
    CHECK(report["augmented"]["records"].size() == 5);
}

TEST_CASE("the golden run is reproducible call for call") {
    auto fx = golden_fixture();
    auto kb = eval_kb();
    auto index = eval_index(kb);
    EvalOptions options;
    options.control = true;
    options.jobs = 2;

    auto run_once = [&] {
        TestRig rig(fx.rules);
        MockCompiler compiler(fx.compile_verdicts);
        return report_json(run_eval(rig.gw, fx.problems, kb, index, compiler, options));
    };
    CHECK(run_once() == run_once());
}

// ── whole-run edges ─────────────────────────────────────────────

TEST_CASE("a later attempt can rescue compilation within the same budget") {
    const std::string s = "The ball is open.";
    const std::string bad = "theorem bad : Metric.ball x r = \xe2\x88\x85 := rfl";
    const std::string good = "theorem good : IsOpen (Metric.ball x r) := isOpen_ball";
    const std::string bt = "the ball is open";

    std::vector<ScriptRule> rules;
    script_retrieval(rules, s, "metric ball");
    rules.push_back({"generate_keywords", {{"concept", "metric ball"}},
                     {keywords_reply({"ball"})}});
    // two attempts drain the reply list in order
    rules.push_back({"formalize", {{"statement", s}}, {bad, good}});
    rules.push_back({"eval_back_translate", {{"formal_code", good}}, {bt}});
    rules.push_back({"judge_consistency", {{"back_translation", bt}}, {yes()}});
    rules.push_back({"judge_strong_relevance", {{"definition", "nhds"}}, {yes()}});

    TestRig rig(rules);
    auto kb = eval_kb();
    auto index = eval_index(kb);
    MockCompiler compiler({{good, true}});

    EvalOptions options;
    options.k = 2;
    auto outcome = run_eval(rig.gw, {{"p1", s}}, kb, index, compiler, options);

    const auto& record = outcome.augmented.records.at(0);
    REQUIRE(record.attempts.size() == 2);
    CHECK_FALSE(record.attempts[0].compiled);
    CHECK(record.attempts[1].compiled);
    CHECK(record.attempts[1].consistent == std::optional<bool>(true));

    // the ball appears in both attempts and IsOpen in the passing
    // one; both are rule-scored 3, the unused nhds is judged 2
    CHECK(score_of(record, "Metric.ball")->value == 3);
    CHECK(score_of(record, "IsOpen")->basis == ScoreBasis::ExactMatch);
    MetricsReport expected;
    expected.acs = 8.0 / 3.0;
    expected.hit_rate_at_k = 1.0;
    expected.cpr_at_k = 1.0;
    expected.far_at_k = 1.0;
    expected.n = 1;
    expected.k = 2;
    expected.hit_k = 3;
    CHECK(outcome.augmented.metrics == expected);
}

TEST_CASE("an unparseable consistency judgment counts as inconsistent") {
    const std::string s = "The ball is open.";
    const std::string code = "theorem t : IsOpen (Metric.ball x r) := isOpen_ball";
    const std::string bt = "something about balls";

    std::vector<ScriptRule> rules;
    script_retrieval(rules, s, "metric ball");
    rules.push_back({"generate_keywords", {{"concept", "metric ball"}},
                     {keywords_reply({"ball"})}});
    rules.push_back({"formalize", {{"statement", s}}, {code}});
    rules.push_back({"eval_back_translate", {{"formal_code", code}}, {bt}});
    rules.push_back({"judge_consistency", {{"back_translation", bt}}, {"mumble"}});
    rules.push_back({"judge_consistency_retry", {{"back_translation", bt}}, {"mumble again"}});
    rules.push_back({"judge_strong_relevance", {{"definition", "nhds"}}, {no()}});
    rules.push_back({"judge_weak_relevance", {{"definition", "nhds"}}, {no()}});

    TestRig rig(rules);
    auto kb = eval_kb();
    auto index = eval_index(kb);
    MockCompiler compiler({{code, true}});

    auto outcome = run_eval(rig.gw, {{"p1", s}}, kb, index, compiler, EvalOptions{});
    const auto& record = outcome.augmented.records.at(0);
    CHECK(record.attempts.at(0).compiled);
    CHECK(record.attempts.at(0).consistent == std::optional<bool>(false));
    REQUIRE_FALSE(outcome.augmented.warnings.empty());
    CHECK(outcome.augmented.warnings[0].find("unparseable") != std::string::npos);

    // compiled but unconfirmed: counts for CPR, never for FAR, and the
    // cited definitions score zero
    CHECK(outcome.augmented.metrics.cpr_at_k == 1.0);
    CHECK(outcome.augmented.metrics.far_at_k == 0.0);
    CHECK(score_of(record, "Metric.ball")->value == 0);
    CHECK(score_of(record, "IsOpen")->value == 0);
    CHECK(outcome.augmented.metrics.ambiguous == 1);
}

TEST_CASE("a problem that cannot be processed is excluded and reported") {
    const std::string good_s = "The ball is round.";
    const std::string bad_s = "Unprocessable statement.";
    const std::string code = "theorem t : True := trivial";

    std::vector<ScriptRule> rules;
    script_retrieval(rules, good_s, "metric ball");
    rules.push_back({"generate_keywords", {{"concept", "metric ball"}},
                     {keywords_reply({"ball"})}});
    rules.push_back({"formalize", {{"statement", good_s}}, {code}});
    for (const auto& def : {"Metric.ball", "nhds", "IsOpen"}) {
        rules.push_back({"judge_strong_relevance", {{"definition", def}}, {no()}});
        rules.push_back({"judge_weak_relevance", {{"definition", def}}, {yes()}});
    }
    // the bad problem classifies fine but concept extraction collapses
    rules.push_back({"classify_problem", {{"statement", bad_s}}, {explicit_reply()}});
    rules.push_back({"extract_query_concepts", {{"statement", bad_s}}, {"junk"}});
    rules.push_back({"extract_query_concepts_retry", {{"statement", bad_s}}, {"more junk"}});

    TestRig rig(rules);
    auto kb = eval_kb();
    auto index = eval_index(kb);
    MockCompiler compiler;

    auto outcome = run_eval(rig.gw, {{"p-good", good_s}, {"p-bad", bad_s}}, kb, index,
                            compiler, EvalOptions{});
    CHECK(outcome.augmented.failed_problems == 1);
    REQUIRE(outcome.augmented.records.size() == 1);
    CHECK(outcome.augmented.records[0].problem_id == "p-good");
    CHECK(outcome.augmented.metrics.n == 1);
    CHECK(outcome.augmented.metrics.acs == 1.0);
    CHECK(outcome.augmented.metrics.cpr_at_k == 0.0);
    bool mentioned = false;
    for (const auto& w : outcome.augmented.warnings)
        mentioned = mentioned || w.find("p-bad") != std::string::npos;
    CHECK(mentioned);
}

TEST_CASE("a run without a control arm reports no gains") {
    auto fx = golden_fixture();
    TestRig rig(fx.rules);
    auto kb = eval_kb();
    auto index = eval_index(kb);
    MockCompiler compiler(fx.compile_verdicts);

    auto outcome = run_eval(rig.gw, fx.problems, kb, index, compiler, EvalOptions{});
    CHECK_FALSE(outcome.control.has_value());
    CHECK_FALSE(outcome.gains.cpr.has_value());
    auto table = render_table(outcome);
    CHECK(table.find("RG") == std::string::npos);
    CHECK(table.find("ACS") != std::string::npos);
    json report = json::parse(report_json(outcome));
    CHECK_FALSE(report.contains("control"));
}

TEST_CASE("an interrupted run keeps finished work and skips the rest") {
    auto fx = golden_fixture();
    auto kb = eval_kb();
    auto index = eval_index(kb);

    SUBCASE("a stop raised before the run skips every problem") {
        TestRig rig(fx.rules);
        MockCompiler compiler(fx.compile_verdicts);
        EvalOptions options;
        options.stop = [] { return true; };
        auto outcome = run_eval(rig.gw, fx.problems, kb, index, compiler, options);
        CHECK(outcome.augmented.skipped_problems == 5);
        CHECK(outcome.augmented.records.empty());
        CHECK(outcome.augmented.failed_problems == 0);
        CHECK(std::isnan(outcome.augmented.metrics.acs));
        CHECK(rig.chat->calls() == 0);
        bool mentioned = false;
        for (const auto& w : outcome.augmented.warnings)
            mentioned = mentioned || w.find("interrupted") != std::string::npos;
        CHECK(mentioned);
    }

    SUBCASE("a stop raised mid-run reports the finished prefix") {
        TestRig rig(fx.rules);
        MockCompiler compiler(fx.compile_verdicts);
        EvalOptions options;
        options.jobs = 1;
        // trip after the first problem has been picked up
        auto started = std::make_shared<std::atomic<int>>(0);
        options.stop = [started] { return started->fetch_add(1) >= 1; };
        auto outcome = run_eval(rig.gw, fx.problems, kb, index, compiler, options);
        CHECK(outcome.augmented.records.size() == 1);
        CHECK(outcome.augmented.skipped_problems == 4);
        CHECK(outcome.augmented.metrics.n == 1);
    }
}

TEST_CASE("an empty problem list or a zero budget is rejected up front") {
    TestRig rig({});
    auto kb = eval_kb();
    auto index = eval_index(kb);
    MockCompiler compiler;
    CHECK_THROWS_AS(run_eval(rig.gw, {}, kb, index, compiler, EvalOptions{}), InputError);
    EvalOptions zero;
    zero.k = 0;
    CHECK_THROWS_AS(run_eval(rig.gw, {{"p1", "s"}}, kb, index, compiler, zero), InputError);
}
