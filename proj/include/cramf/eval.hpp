#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cramf/gateway.hpp"
#include "cramf/kb.hpp"
#include "cramf/retrieval.hpp"
#include "cramf/vindex.hpp"

namespace cramf::eval {

// ── contribution scoring ────────────────────────────────────────

enum class ScoreBasis { ExactMatch, StrongRelevance, WeakRelevance, ErroneousReference };
enum class JudgedBy { RegexRule, LlmJudge };

// How much one retrieved definition contributed to one problem.
// 3 = used in code that compiled and stayed consistent, 0 = used in
// code that did not, 2/1 = judged relevance of an unused definition.
struct ContributionScore {
    int value = 1;  // 0..3
    ScoreBasis basis = ScoreBasis::WeakRelevance;
    JudgedBy judged_by = JudgedBy::LlmJudge;
    // The judge denied both strong and weak relevance: the rubric has
    // no value for that, so 1 is assigned and the case is flagged.
    bool ambiguous = false;
    // The judge never produced a usable reply: excluded from the
    // average entirely rather than defaulted.
    bool unjudged = false;

    bool operator==(const ContributionScore&) const = default;
};

struct FormalizationAttempt {
    std::string formal_code;
    bool compiled = false;
    std::optional<std::string> back_translation;
    std::optional<bool> consistent;  // present ⇒ compiled
};

struct ScoredDefinition {
    std::string definition_identifier;
    ContributionScore score;
};

struct EvaluationRecord {
    std::string problem_id;
    std::string statement;
    std::vector<ScoredDefinition> retrieved;  // final rerank order
    std::vector<FormalizationAttempt> attempts;
};

struct MetricsReport {
    double acs = 0.0;
    double hit_rate_at_k = 0.0;
    double cpr_at_k = 0.0;
    double far_at_k = 0.0;
    std::size_t n = 0;      // problems measured
    std::size_t k = 0;      // attempts per problem (CPR/FAR cutoff)
    std::size_t hit_k = 3;  // rank cutoff for the hit rate
    std::size_t unjudged = 0;
    std::size_t ambiguous = 0;

    bool operator==(const MetricsReport&) const = default;
};

// Whether the definition is referenced by the formal code: either the
// full dotted name or its final segment occurs as a whole token
// (boundary = any non-identifier character). Both routes are checked;
// either suffices.
bool identifier_appears_in_code(const std::string& identifier, const std::string& code);

// Scores one retrieved definition against all attempts. Definitions
// referenced by any attempt are scored 3/0 by rule (compiled and
// consistent vs. not) without consulting the judge; unreferenced
// definitions are judged for strong (2) then weak (1) relevance
// without consulting compile results.
ContributionScore score_definition(gateway::Gateway& gw, const std::string& definition_identifier,
                                   const std::string& statement,
                                   const std::vector<FormalizationAttempt>& attempts);

// ── metrics ─────────────────────────────────────────────────────
// All four throw MetricError on an empty denominator instead of
// inventing a 0.

// Mean contribution score over every judged retrieved definition.
double acs(const std::vector<EvaluationRecord>& records);

// Fraction of problems whose top-k retrieved definitions include a
// score of 2 or higher.
double hit_rate_at_k(const std::vector<EvaluationRecord>& records, std::size_t k = 3);

// Fraction of problems with at least one compiling attempt among the
// first k.
double cpr_at_k(const std::vector<EvaluationRecord>& records, std::size_t k);

// Fraction with at least one attempt that compiled and passed the
// consistency check.
double far_at_k(const std::vector<EvaluationRecord>& records, std::size_t k);

// (augmented − base) / base; base must be positive.
double relative_gain(double augmented, double base);

// ── compiler adapters ───────────────────────────────────────────

struct CompileResult {
    bool compiled = false;
    std::string diagnostics;
};

class Compiler {
public:
    virtual ~Compiler() = default;
    virtual CompileResult compile(const std::string& formal_code) = 0;
};

// Scripted map from exact formal code to a verdict; unknown code gets
// the default. Keeps the Lean toolchain out of tests entirely.
class MockCompiler : public Compiler {
public:
    explicit MockCompiler(std::map<std::string, bool> by_code = {}, bool default_compiled = false)
        : by_code_(std::move(by_code)), default_compiled_(default_compiled) {}

    CompileResult compile(const std::string& formal_code) override;

private:
    std::map<std::string, bool> by_code_;
    bool default_compiled_;
};

// Shells out to a configured command with the code written to a temp
// file ({{file}} placeholder); exit status decides the verdict.
struct CommandCompilerConfig {
    std::string command;  // e.g. "lean {{file}}"
    int timeout_s = 60;   // 0 = no limit
    std::vector<int> success_exit_codes = {0};
};

class CommandCompiler : public Compiler {
public:
    explicit CommandCompiler(CommandCompilerConfig config);
    CompileResult compile(const std::string& formal_code) override;

private:
    CommandCompilerConfig config_;
};

// ── whole-run harness ───────────────────────────────────────────

struct Problem {
    std::string problem_id;
    std::string statement;
};

// Line-delimited {"problem_id", "statement"} records.
std::vector<Problem> load_problems(const std::filesystem::path& path);

struct EvalOptions {
    std::size_t k = 1;      // formalization attempts per problem
    std::size_t hit_k = 3;  // hit-rate rank cutoff
    bool control = false;   // also run the no-retrieval arm
    int jobs = 4;
    double temperature = 0.7;  // attempt diversity
    retrieval::RetrievalOptions retrieval;
    // Cooperative interruption: once this returns true, problems not
    // yet started are skipped; finished work is still reported.
    std::function<bool()> stop;
};

struct ArmReport {
    MetricsReport metrics;
    std::vector<EvaluationRecord> records;  // problem_id order
    std::vector<std::string> warnings;
    std::size_t failed_problems = 0;
    std::size_t skipped_problems = 0;  // not started before an interrupt
};

// Relative gains are only defined where the control metric is defined
// and positive.
struct RelativeGains {
    std::optional<double> cpr, far, acs, hit_rate;
};

struct EvalOutcome {
    ArmReport augmented;
    std::optional<ArmReport> control;
    RelativeGains gains;
};

// Per problem: retrieve a grounding context (augmented arm only) → k
// formalization attempts with the context in the prompt → compile →
// back-translate compiled code → judge consistency → score the
// retrieved definitions → fold the four metrics.
EvalOutcome run_eval(gateway::Gateway& gw, const std::vector<Problem>& problems,
                     const kb::KnowledgeBase& kb, const vindex::VectorIndex& index,
                     Compiler& compiler, const EvalOptions& options = {});

// Human-readable metric table (base / augmented / relative gain
// columns when the control arm ran).
std::string render_table(const EvalOutcome& outcome);

// Structured report for files and downstream tooling.
std::string report_json(const EvalOutcome& outcome);

}  // namespace cramf::eval
