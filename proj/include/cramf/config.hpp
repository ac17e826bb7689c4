#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cramf/gateway.hpp"
#include "cramf/providers.hpp"

namespace cramf::config {

// ── effective configuration ─────────────────────────────────────
// One struct the whole binary runs from, assembled from four layers:
// built-in defaults, then the config file, then CRAMF_* environment
// variables, then command-line flags. Later layers win per knob.

struct ProviderChoice {
    std::string kind = "mock";  // "mock" or "http"
    gateway::HttpProviderConfig http;
    std::filesystem::path script;  // chat mock: scripted-replies file
    std::size_t dim = 64;          // embedding/rerank mock dimension
    std::uint64_t seed = 0;
};

struct PipelineCaps {
    std::size_t concepts = 5;     // query concepts per statement
    std::size_t keywords = 8;     // keywords per concept
    std::size_t recall_top = 10;  // semantic recall depth
    std::size_t rerank_top = 5;   // concepts kept after reranking
    std::size_t context_top = 3;  // definitions in the final context
    std::size_t attempts = 1;     // formalization attempts per problem
    std::size_t hit_k = 3;        // hit-rate rank cutoff
    int candidates = 3;           // back-translations per definition
    double success_ratio = 0.9;   // populate completion threshold
    std::size_t checkpoint_every = 100;
};

struct CompilerChoice {
    std::string command;  // {{file}} command; empty = nothing compiles
    int timeout_s = 60;
    std::vector<int> success_exit_codes = {0};
};

struct Config {
    std::filesystem::path templates = "templates";
    int jobs = 4;
    PipelineCaps pipeline;
    gateway::GatewayOptions gateway;
    ProviderChoice chat;
    ProviderChoice embedding;
    ProviderChoice rerank;
    CompilerChoice compiler;
};

// ── layering ────────────────────────────────────────────────────

// One optional per overridable knob; unset means "not given here".
struct Overrides {
    std::optional<std::filesystem::path> templates;
    std::optional<int> jobs;
    std::optional<std::size_t> concepts, keywords, recall_top, rerank_top, context_top;
    std::optional<std::size_t> attempts, hit_k, checkpoint_every;
    std::optional<int> candidates;
    std::optional<double> success_ratio;
    std::optional<std::filesystem::path> chat_script;
    std::optional<std::size_t> embed_dim;
    std::optional<std::string> compiler_command;
};

// Structured-text (JSON) config file; unknown keys are rejected so
// typos fail loudly instead of silently keeping a default.
Config load_file(const std::filesystem::path& path);

// Reads CRAMF_TEMPLATES, CRAMF_JOBS, CRAMF_CONCEPTS, ... from the
// given lookup (injectable for tests); malformed values → ConfigError
// naming the variable.
Overrides from_env(const std::function<const char*(const char*)>& lookup);

void apply(Config& config, const Overrides& overrides);

// defaults → file (when given) → env → flags, then structural checks.
Config resolve(const std::optional<std::filesystem::path>& file, const Overrides& env,
               const Overrides& flags);

// Every template id the pipeline can request.
const std::vector<std::string>& required_templates();

// Value invariants: caps at least 1, context ≤ rerank ≤ recall, ratio
// in (0, 1], provider kinds known.
void check_structure(const Config& config);
// The templates directory exists and covers required_templates().
void check_templates(const Config& config);

// The fully layered result, printable by `config show --effective`.
std::string effective_json(const Config& config);

}  // namespace cramf::config
