#include "cramf/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <sys/wait.h>
#include <unordered_set>

#include <json.hpp>

#include "cramf/common.hpp"

namespace cramf::eval {

using gateway::ChatRequest;
using gateway::Gateway;
using nlohmann::json;
namespace fs = std::filesystem;

// ── code reference check ────────────────────────────────────────

namespace {

bool identifier_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '\'';
}

bool whole_token_occurs(const std::string& needle, const std::string& haystack) {
    if (needle.empty()) return false;
    std::size_t pos = 0;
    while ((pos = haystack.find(needle, pos)) != std::string::npos) {
        bool left_ok = pos == 0 || !identifier_char(haystack[pos - 1]);
        std::size_t after = pos + needle.size();
        bool right_ok = after >= haystack.size() || !identifier_char(haystack[after]);
        if (left_ok && right_ok) return true;
        pos += 1;
    }
    return false;
}

}  // namespace

bool identifier_appears_in_code(const std::string& identifier, const std::string& code) {
    if (identifier.empty()) return false;
    // Route one: the full dotted name, as qualified references spell it.
    bool qualified = whole_token_occurs(identifier, code);
    // Route two: the final segment alone, as open-namespace code spells
    // it. Both routes stay separate on purpose; either one suffices.
    std::size_t dot = identifier.rfind('.');
    std::string last_segment = dot == std::string::npos ? identifier : identifier.substr(dot + 1);
    bool bare = whole_token_occurs(last_segment, code);
    return qualified || bare;
}

// ── contribution scoring ────────────────────────────────────────

namespace {

std::optional<bool> parse_yes_no(const std::string& reply) {
    json j = json::parse(gateway::strip_reply_fences(reply), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    auto it = j.find("answer");
    if (it == j.end() || !it->is_string()) return std::nullopt;
    std::string answer = to_lower(trim(it->get<std::string>()));
    if (answer == "yes") return true;
    if (answer == "no") return false;
    return std::nullopt;
}

// Asks a fielded yes/no question with one reprompt; nullopt when both
// replies are unusable.
std::optional<bool> ask_judge(Gateway& gw, const std::string& template_id,
                              std::map<std::string, std::string> variables) {
    std::string first = gw.chat({template_id, variables, 0.0, 256});
    if (auto v = parse_yes_no(first)) return v;
    variables["previous_reply"] = first;
    std::string second = gw.chat({template_id + "_retry", std::move(variables), 0.0, 256});
    return parse_yes_no(second);
}

}  // namespace

ContributionScore score_definition(Gateway& gw, const std::string& definition_identifier,
                                   const std::string& statement,
                                   const std::vector<FormalizationAttempt>& attempts) {
    bool appeared = false;
    bool appeared_and_passed = false;
    for (const auto& attempt : attempts) {
        if (!identifier_appears_in_code(definition_identifier, attempt.formal_code)) continue;
        appeared = true;
        if (attempt.compiled && attempt.consistent.value_or(false)) appeared_and_passed = true;
    }
    if (appeared) {
        // Rule-based half of the rubric; the judge is never consulted.
        if (appeared_and_passed)
            return {3, ScoreBasis::ExactMatch, JudgedBy::RegexRule, false, false};
        return {0, ScoreBasis::ErroneousReference, JudgedBy::RegexRule, false, false};
    }

    // Judged half; compile results are never consulted.
    std::map<std::string, std::string> vars = {{"definition", definition_identifier},
                                               {"statement", statement}};
    auto strong = ask_judge(gw, "judge_strong_relevance", vars);
    if (!strong) return {1, ScoreBasis::WeakRelevance, JudgedBy::LlmJudge, false, true};
    if (*strong) return {2, ScoreBasis::StrongRelevance, JudgedBy::LlmJudge, false, false};

    auto weak = ask_judge(gw, "judge_weak_relevance", vars);
    if (!weak) return {1, ScoreBasis::WeakRelevance, JudgedBy::LlmJudge, false, true};
    if (*weak) return {1, ScoreBasis::WeakRelevance, JudgedBy::LlmJudge, false, false};
    // Denied twice: the rubric has no value for "absent and irrelevant",
    // so this defaults to 1 and is flagged for reporting.
    return {1, ScoreBasis::WeakRelevance, JudgedBy::LlmJudge, true, false};
}

// ── metrics ─────────────────────────────────────────────────────

double acs(const std::vector<EvaluationRecord>& records) {
    long long total = 0;
    std::size_t count = 0;
    for (const auto& r : records)
        for (const auto& d : r.retrieved) {
            if (d.score.unjudged) continue;
            total += d.score.value;
            ++count;
        }
    if (count == 0)
        throw MetricError("average contribution score is undefined: no judged definitions");
    return static_cast<double>(total) / static_cast<double>(count);
}

double hit_rate_at_k(const std::vector<EvaluationRecord>& records, std::size_t k) {
    if (records.empty()) throw MetricError("hit rate is undefined: no problems");
    if (k == 0) throw MetricError("hit rate needs k >= 1");
    std::size_t hits = 0;
    for (const auto& r : records) {
        std::size_t upto = std::min(k, r.retrieved.size());
        for (std::size_t i = 0; i < upto; ++i) {
            if (!r.retrieved[i].score.unjudged && r.retrieved[i].score.value >= 2) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

double cpr_at_k(const std::vector<EvaluationRecord>& records, std::size_t k) {
    if (records.empty()) throw MetricError("compilation pass rate is undefined: no problems");
    std::size_t passed = 0;
    for (const auto& r : records) {
        std::size_t upto = std::min(k, r.attempts.size());
        for (std::size_t i = 0; i < upto; ++i)
            if (r.attempts[i].compiled) {
                ++passed;
                break;
            }
    }
    return static_cast<double>(passed) / static_cast<double>(records.size());
}

double far_at_k(const std::vector<EvaluationRecord>& records, std::size_t k) {
    if (records.empty()) throw MetricError("formalization accuracy is undefined: no problems");
    std::size_t passed = 0;
    for (const auto& r : records) {
        std::size_t upto = std::min(k, r.attempts.size());
        for (std::size_t i = 0; i < upto; ++i)
            if (r.attempts[i].compiled && r.attempts[i].consistent.value_or(false)) {
                ++passed;
                break;
            }
    }
    return static_cast<double>(passed) / static_cast<double>(records.size());
}

double relative_gain(double augmented, double base) {
    if (!(base > 0)) throw MetricError("relative gain is undefined for a non-positive baseline");
    return (augmented - base) / base;
}

// ── compiler adapters ───────────────────────────────────────────

CompileResult MockCompiler::compile(const std::string& formal_code) {
    auto it = by_code_.find(formal_code);
    bool ok = it == by_code_.end() ? default_compiled_ : it->second;
    return {ok, ok ? "" : "mock compiler: rejected"};
}

CommandCompiler::CommandCompiler(CommandCompilerConfig config) : config_(std::move(config)) {
    if (config_.command.find("{{file}}") == std::string::npos)
        throw ConfigError("compiler command needs a {{file}} placeholder: " + config_.command);
}

CompileResult CommandCompiler::compile(const std::string& formal_code) {
    static std::atomic<std::uint64_t> counter{0};
    fs::path file = fs::temp_directory_path() /
                    ("cramf-compile-" + std::to_string(counter.fetch_add(1)) + ".lean");
    write_file_atomic(file, formal_code);

    std::string command = config_.command;
    command.replace(command.find("{{file}}"), 8, "'" + file.string() + "'");
    if (config_.timeout_s > 0)
        command = "timeout " + std::to_string(config_.timeout_s) + " " + command;
    command += " 2>&1";

    CompileResult result;
    FILE* pipe = popen(command.c_str(), "r");
    if (!pipe) {
        std::error_code ec;
        fs::remove(file, ec);
        throw IoError("could not run compiler command: " + command);
    }
    char buffer[4096];
    while (std::size_t n = fread(buffer, 1, sizeof(buffer), pipe))
        result.diagnostics.append(buffer, n);
    int status = pclose(pipe);
    std::error_code ec;
    fs::remove(file, ec);

    int exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    result.compiled = std::find(config_.success_exit_codes.begin(),
                                config_.success_exit_codes.end(),
                                exit_code) != config_.success_exit_codes.end();
    return result;
}

// ── problems file ───────────────────────────────────────────────

std::vector<Problem> load_problems(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::vector<Problem> problems;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) continue;
        json j = json::parse(line, nullptr, false);
        std::string where = path.string() + " line " + std::to_string(line_no);
        if (j.is_discarded() || !j.is_object())
            throw ParseError("problem record is not a JSON object: " + where);
        if (!j.contains("problem_id") || !j["problem_id"].is_string() ||
            !j.contains("statement") || !j["statement"].is_string())
            throw ParseError("problem record needs string problem_id and statement: " + where);
        Problem p{j["problem_id"].get<std::string>(), j["statement"].get<std::string>()};
        if (is_blank(p.problem_id) || is_blank(p.statement))
            throw ParseError("problem record has a blank field: " + where);
        if (!seen.insert(p.problem_id).second)
            throw ParseError("duplicate problem_id '" + p.problem_id + "': " + where);
        problems.push_back(std::move(p));
    }
    return problems;
}

// ── whole-run harness ───────────────────────────────────────────

namespace {

constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

struct ProblemOutcome {
    EvaluationRecord record;
    std::vector<std::string> warnings;
    bool failed = false;
    bool skipped = false;
    std::string failure;
};

ProblemOutcome eval_problem(Gateway& gw, const Problem& problem, const kb::KnowledgeBase& kb,
                            const vindex::VectorIndex& index, Compiler& compiler,
                            const EvalOptions& options, bool with_retrieval) {
    ProblemOutcome out;
    out.record.problem_id = problem.problem_id;
    out.record.statement = problem.statement;
    if (options.stop && options.stop()) {
        out.skipped = true;
        return out;
    }
    try {
        std::string context_prompt;
        std::vector<std::string> retrieved_ids;
        if (with_retrieval) {
            auto r = retrieval::retrieve(gw, problem.statement, kb, index, options.retrieval);
            context_prompt = r.context.rendered_prompt;
            for (const auto& e : r.context.entries)
                retrieved_ids.push_back(e.definition.identifier);
            for (const auto& w : r.context.warnings)
                out.warnings.push_back(problem.problem_id + ": " + w);
        }

        for (std::size_t a = 0; a < options.k; ++a) {
            FormalizationAttempt attempt;
            attempt.formal_code = trim(gw.chat({"formalize",
                                                {{"statement", problem.statement},
                                                 {"context", context_prompt}},
                                                options.temperature,
                                                2048}));
            auto verdict = compiler.compile(attempt.formal_code);
            attempt.compiled = verdict.compiled;
            if (attempt.compiled) {
                std::string back = trim(gw.chat({"eval_back_translate",
                                                 {{"formal_code", attempt.formal_code}},
                                                 0.0,
                                                 1024}));
                attempt.back_translation = back;
                auto consistent = ask_judge(gw, "judge_consistency",
                                            {{"statement", problem.statement},
                                             {"back_translation", back}});
                if (!consistent) {
                    out.warnings.push_back(problem.problem_id +
                                           ": consistency judgment was unparseable twice; "
                                           "treated as inconsistent");
                    attempt.consistent = false;
                } else {
                    attempt.consistent = *consistent;
                }
            }
            out.record.attempts.push_back(std::move(attempt));
        }

        for (const auto& id : retrieved_ids)
            out.record.retrieved.push_back(
                {id, score_definition(gw, id, problem.statement, out.record.attempts)});
    } catch (const CramfError& e) {
        out.failed = true;
        out.failure = e.what();
    }
    return out;
}

ArmReport run_arm(Gateway& gw, const std::vector<Problem>& problems,
                  const kb::KnowledgeBase& kb, const vindex::VectorIndex& index,
                  Compiler& compiler, const EvalOptions& options, bool with_retrieval) {
    auto outcomes = parallel_map(
        problems,
        [&](const Problem& p) {
            return eval_problem(gw, p, kb, index, compiler, options, with_retrieval);
        },
        options.jobs);

    ArmReport arm;
    for (auto& out : outcomes) {
        arm.warnings.insert(arm.warnings.end(), out.warnings.begin(), out.warnings.end());
        if (out.skipped) {
            ++arm.skipped_problems;
            continue;
        }
        if (out.failed) {
            ++arm.failed_problems;
            arm.warnings.push_back(out.record.problem_id + " failed and is excluded: " +
                                   out.failure);
            continue;
        }
        arm.records.push_back(std::move(out.record));
    }
    if (arm.skipped_problems > 0)
        arm.warnings.push_back("interrupted: " + std::to_string(arm.skipped_problems) + " of " +
                               std::to_string(problems.size()) + " problems were never started");
    std::sort(arm.records.begin(), arm.records.end(),
              [](const EvaluationRecord& a, const EvaluationRecord& b) {
                  return a.problem_id < b.problem_id;
              });

    arm.metrics.n = arm.records.size();
    arm.metrics.k = options.k;
    arm.metrics.hit_k = options.hit_k;
    for (const auto& r : arm.records)
        for (const auto& d : r.retrieved) {
            if (d.score.unjudged) ++arm.metrics.unjudged;
            if (d.score.ambiguous) ++arm.metrics.ambiguous;
        }

    auto compute = [&](auto&& fn, const char* name) {
        try {
            return fn();
        } catch (const MetricError& e) {
            arm.warnings.push_back(std::string(name) + " is undefined: " + e.what());
            return kUndefined;
        }
    };
    arm.metrics.acs = compute([&] { return acs(arm.records); }, "ACS");
    arm.metrics.hit_rate_at_k =
        compute([&] { return hit_rate_at_k(arm.records, options.hit_k); }, "HitRate");
    arm.metrics.cpr_at_k = compute([&] { return cpr_at_k(arm.records, options.k); }, "CPR");
    arm.metrics.far_at_k = compute([&] { return far_at_k(arm.records, options.k); }, "FAR");
    return arm;
}

std::optional<double> gain_of(double augmented, double base) {
    if (std::isnan(augmented) || std::isnan(base) || !(base > 0)) return std::nullopt;
    return relative_gain(augmented, base);
}

}  // namespace

EvalOutcome run_eval(Gateway& gw, const std::vector<Problem>& problems,
                     const kb::KnowledgeBase& kb, const vindex::VectorIndex& index,
                     Compiler& compiler, const EvalOptions& options) {
    if (problems.empty()) throw InputError("evaluation needs at least one problem");
    if (options.k == 0) throw InputError("evaluation needs at least one attempt per problem");

    // Sorted once so every fold below is a deterministic reduction.
    std::vector<Problem> ordered = problems;
    std::sort(ordered.begin(), ordered.end(),
              [](const Problem& a, const Problem& b) { return a.problem_id < b.problem_id; });

    EvalOutcome outcome;
    outcome.augmented = run_arm(gw, ordered, kb, index, compiler, options, true);
    if (options.control) {
        outcome.control = run_arm(gw, ordered, kb, index, compiler, options, false);
        const auto& base = outcome.control->metrics;
        const auto& aug = outcome.augmented.metrics;
        outcome.gains.cpr = gain_of(aug.cpr_at_k, base.cpr_at_k);
        outcome.gains.far = gain_of(aug.far_at_k, base.far_at_k);
        outcome.gains.acs = gain_of(aug.acs, base.acs);
        outcome.gains.hit_rate = gain_of(aug.hit_rate_at_k, base.hit_rate_at_k);
    }
    return outcome;
}

// ── reporting ───────────────────────────────────────────────────

namespace {

std::string fixed3(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

std::string percent(const std::optional<double>& v) {
    if (!v) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+.1f%%", *v * 100.0);
    return buf;
}

json metrics_json(const MetricsReport& m) {
    auto number_or_null = [](double v) { return std::isnan(v) ? json() : json(v); };
    return {{"acs", number_or_null(m.acs)},
            {"hit_rate_at_k", number_or_null(m.hit_rate_at_k)},
            {"cpr_at_k", number_or_null(m.cpr_at_k)},
            {"far_at_k", number_or_null(m.far_at_k)},
            {"n", m.n},
            {"k", m.k},
            {"hit_k", m.hit_k},
            {"unjudged", m.unjudged},
            {"ambiguous", m.ambiguous}};
}

json arm_json(const ArmReport& arm) {
    json records = json::array();
    for (const auto& r : arm.records) {
        json scores = json::array();
        for (const auto& d : r.retrieved)
            scores.push_back({{"definition", d.definition_identifier},
                              {"value", d.score.value},
                              {"unjudged", d.score.unjudged},
                              {"ambiguous", d.score.ambiguous}});
        bool compiled_any = std::any_of(r.attempts.begin(), r.attempts.end(),
                                        [](const FormalizationAttempt& a) { return a.compiled; });
        bool consistent_any =
            std::any_of(r.attempts.begin(), r.attempts.end(), [](const FormalizationAttempt& a) {
                return a.compiled && a.consistent.value_or(false);
            });
        records.push_back({{"problem_id", r.problem_id},
                           {"scores", scores},
                           {"compiled_any", compiled_any},
                           {"consistent_any", consistent_any}});
    }
    return {{"metrics", metrics_json(arm.metrics)},
            {"records", records},
            {"failed_problems", arm.failed_problems},
            {"skipped_problems", arm.skipped_problems},
            {"warnings", arm.warnings}};
}

}  // namespace

std::string render_table(const EvalOutcome& outcome) {
    const auto& aug = outcome.augmented.metrics;
    std::ostringstream out;
    std::string k = std::to_string(aug.k);
    std::string hk = std::to_string(aug.hit_k);
    if (!outcome.control) {
        out << "metric         value\n";
        out << "ACS            " << fixed3(aug.acs) << "\n";
        out << "HitRate@" << hk << "      " << fixed3(aug.hit_rate_at_k) << "\n";
        out << "CPR@" << k << "          " << fixed3(aug.cpr_at_k) << "\n";
        out << "FAR@" << k << "          " << fixed3(aug.far_at_k) << "\n";
        out << "problems       " << aug.n << "\n";
        return out.str();
    }
    const auto& base = outcome.control->metrics;
    auto row = [&](const std::string& name, double b, double a,
                   const std::optional<double>& gain) {
        out << name;
        for (std::size_t i = name.size(); i < 15; ++i) out << ' ';
        std::string bs = fixed3(b), as = fixed3(a);
        out << bs;
        for (std::size_t i = bs.size(); i < 10; ++i) out << ' ';
        out << as;
        for (std::size_t i = as.size(); i < 10; ++i) out << ' ';
        out << percent(gain) << "\n";
    };
    out << "metric         base      augmented RG\n";
    row("ACS", base.acs, aug.acs, outcome.gains.acs);
    row("HitRate@" + hk, base.hit_rate_at_k, aug.hit_rate_at_k, outcome.gains.hit_rate);
    row("CPR@" + k, base.cpr_at_k, aug.cpr_at_k, outcome.gains.cpr);
    row("FAR@" + k, base.far_at_k, aug.far_at_k, outcome.gains.far);
    out << "problems       " << aug.n << "\n";
    return out.str();
}

std::string report_json(const EvalOutcome& outcome) {
    json j;
    j["augmented"] = arm_json(outcome.augmented);
    if (outcome.control) {
        j["control"] = arm_json(*outcome.control);
        auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
        j["relative_gain"] = {{"cpr", opt(outcome.gains.cpr)},
                              {"far", opt(outcome.gains.far)},
                              {"acs", opt(outcome.gains.acs)},
                              {"hit_rate", opt(outcome.gains.hit_rate)}};
    }
    return j.dump(2) + "\n";
}

}  // namespace cramf::eval
