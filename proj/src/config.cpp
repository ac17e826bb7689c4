#include "cramf/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <type_traits>

#include <json.hpp>

#include "cramf/common.hpp"

namespace cramf::config {

using nlohmann::json;

// ── file layer ──────────────────────────────────────────────────

namespace {

[[noreturn]] void bad_key(const std::string& section, const std::string& key) {
    throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) +
                      "'");
}

// Pulls typed values out of one config section and rejects leftovers.
struct Section {
    const json& j;
    std::string name;

    Section(const json& j, std::string name) : j(j), name(std::move(name)) {
        if (!j.is_object()) throw ConfigError("config section '" + this->name + "' must be an object");
        for (auto it = j.begin(); it != j.end(); ++it)
            if (std::find(seen_candidates.begin(), seen_candidates.end(), it.key()) ==
                seen_candidates.end())
                seen_candidates.push_back(it.key());
    }

    std::vector<std::string> seen_candidates;  // keys present in the file
    std::vector<std::string> consumed;

    void take(const char* key) { consumed.emplace_back(key); }

    template <typename T>
    void number(const char* key, T& out) {
        take(key);
        auto it = j.find(key);
        if (it == j.end()) return;
        if (!it->is_number())
            throw ConfigError("config key '" + name + "." + key + "' must be a number");
        double v = it->get<double>();
        if constexpr (std::is_unsigned_v<T>) {
            if (v < 0) throw ConfigError("config key '" + name + "." + key + "' must not be negative");
        }
        out = static_cast<T>(v);
    }

    void string(const char* key, std::string& out) {
        take(key);
        auto it = j.find(key);
        if (it == j.end()) return;
        if (!it->is_string())
            throw ConfigError("config key '" + name + "." + key + "' must be a string");
        out = it->get<std::string>();
    }

    void path(const char* key, std::filesystem::path& out) {
        std::string s = out.string();
        string(key, s);
        out = s;
    }

    void int_list(const char* key, std::vector<int>& out) {
        take(key);
        auto it = j.find(key);
        if (it == j.end()) return;
        if (!it->is_array())
            throw ConfigError("config key '" + name + "." + key + "' must be an array");
        out.clear();
        for (const auto& v : *it) {
            if (!v.is_number_integer())
                throw ConfigError("config key '" + name + "." + key + "' must hold integers");
            out.push_back(v.get<int>());
        }
    }

    const json* object(const char* key) {
        take(key);
        auto it = j.find(key);
        if (it == j.end()) return nullptr;
        return &*it;
    }

    void finish() const {
        for (const auto& key : seen_candidates)
            if (std::find(consumed.begin(), consumed.end(), key) == consumed.end())
                bad_key(name, key);
    }
};

void load_provider(const json& j, const std::string& name, ProviderChoice& out) {
    Section s(j, name);
    s.string("kind", out.kind);
    s.path("script", out.script);
    s.number("dim", out.dim);
    s.number("seed", out.seed);
    s.string("base_url", out.http.base_url);
    s.string("path", out.http.path);
    s.string("model", out.http.model);
    s.string("api_key_env", out.http.api_key_env);
    s.number("timeout_s", out.http.timeout_s);
    s.string("reply_path", out.http.reply_path);
    s.string("embedding_list_path", out.http.embedding_list_path);
    s.string("embedding_values_path", out.http.embedding_values_path);
    s.string("rerank_list_path", out.http.rerank_list_path);
    s.string("rerank_index_path", out.http.rerank_index_path);
    s.string("rerank_score_path", out.http.rerank_score_path);
    s.string("model_tag", out.http.model_tag);
    s.finish();
}

}  // namespace

Config load_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw ConfigError("config file not found: " + path.string());
    json root = json::parse(read_file(path), nullptr, false);
    if (root.is_discarded() || !root.is_object())
        throw ConfigError("config file is not a JSON object: " + path.string());

    Config config;
    Section top(root, "");
    top.path("templates", config.templates);
    top.number("jobs", config.jobs);

    if (const json* p = top.object("pipeline")) {
        Section s(*p, "pipeline");
        s.number("concepts", config.pipeline.concepts);
        s.number("keywords", config.pipeline.keywords);
        s.number("recall_top", config.pipeline.recall_top);
        s.number("rerank_top", config.pipeline.rerank_top);
        s.number("context_top", config.pipeline.context_top);
        s.number("attempts", config.pipeline.attempts);
        s.number("hit_k", config.pipeline.hit_k);
        s.number("candidates", config.pipeline.candidates);
        s.number("success_ratio", config.pipeline.success_ratio);
        s.number("checkpoint_every", config.pipeline.checkpoint_every);
        s.finish();
    }
    if (const json* p = top.object("gateway")) {
        Section s(*p, "gateway");
        s.number("max_retries", config.gateway.max_retries);
        s.number("backoff_ms", config.gateway.backoff_ms);
        s.number("max_concurrent", config.gateway.max_concurrent);
        s.number("min_interval_ms", config.gateway.min_interval_ms);
        s.finish();
    }
    if (const json* p = top.object("providers")) {
        Section s(*p, "providers");
        if (const json* q = s.object("chat")) load_provider(*q, "providers.chat", config.chat);
        if (const json* q = s.object("embedding"))
            load_provider(*q, "providers.embedding", config.embedding);
        if (const json* q = s.object("rerank"))
            load_provider(*q, "providers.rerank", config.rerank);
        s.finish();
    }
    if (const json* p = top.object("compiler")) {
        Section s(*p, "compiler");
        s.string("command", config.compiler.command);
        s.number("timeout_s", config.compiler.timeout_s);
        s.int_list("success_exit_codes", config.compiler.success_exit_codes);
        s.finish();
    }
    top.finish();
    return config;
}

// ── environment layer ───────────────────────────────────────────

namespace {

template <typename T>
std::optional<T> env_number(const std::function<const char*(const char*)>& lookup,
                            const char* var) {
    const char* raw = lookup(var);
    if (!raw || !*raw) return std::nullopt;
    char* end = nullptr;
    errno = 0;
    double v = std::strtod(raw, &end);
    if (errno != 0 || end == raw || *end != '\0')
        throw ConfigError(std::string(var) + " is not a number: '" + raw + "'");
    if constexpr (std::is_integral_v<T>) {
        if (v != static_cast<double>(static_cast<long long>(v)))
            throw ConfigError(std::string(var) + " must be an integer: '" + raw + "'");
        if (std::is_unsigned_v<T> && v < 0)
            throw ConfigError(std::string(var) + " must not be negative: '" + raw + "'");
    }
    return static_cast<T>(v);
}

std::optional<std::string> env_string(const std::function<const char*(const char*)>& lookup,
                                      const char* var) {
    const char* raw = lookup(var);
    if (!raw || !*raw) return std::nullopt;
    return std::string(raw);
}

}  // namespace

Overrides from_env(const std::function<const char*(const char*)>& lookup) {
    Overrides env;
    if (auto v = env_string(lookup, "CRAMF_TEMPLATES")) env.templates = *v;
    env.jobs = env_number<int>(lookup, "CRAMF_JOBS");
    env.concepts = env_number<std::size_t>(lookup, "CRAMF_CONCEPTS");
    env.keywords = env_number<std::size_t>(lookup, "CRAMF_KEYWORDS");
    env.recall_top = env_number<std::size_t>(lookup, "CRAMF_RECALL_TOP");
    env.rerank_top = env_number<std::size_t>(lookup, "CRAMF_RERANK_TOP");
    env.context_top = env_number<std::size_t>(lookup, "CRAMF_CONTEXT_TOP");
    env.attempts = env_number<std::size_t>(lookup, "CRAMF_ATTEMPTS");
    env.hit_k = env_number<std::size_t>(lookup, "CRAMF_HIT_K");
    env.checkpoint_every = env_number<std::size_t>(lookup, "CRAMF_CHECKPOINT_EVERY");
    env.candidates = env_number<int>(lookup, "CRAMF_CANDIDATES");
    env.success_ratio = env_number<double>(lookup, "CRAMF_SUCCESS_RATIO");
    if (auto v = env_string(lookup, "CRAMF_CHAT_SCRIPT")) env.chat_script = *v;
    env.embed_dim = env_number<std::size_t>(lookup, "CRAMF_EMBED_DIM");
    env.compiler_command = env_string(lookup, "CRAMF_COMPILER_COMMAND");
    return env;
}

void apply(Config& config, const Overrides& overrides) {
    if (overrides.templates) config.templates = *overrides.templates;
    if (overrides.jobs) config.jobs = *overrides.jobs;
    if (overrides.concepts) config.pipeline.concepts = *overrides.concepts;
    if (overrides.keywords) config.pipeline.keywords = *overrides.keywords;
    if (overrides.recall_top) config.pipeline.recall_top = *overrides.recall_top;
    if (overrides.rerank_top) config.pipeline.rerank_top = *overrides.rerank_top;
    if (overrides.context_top) config.pipeline.context_top = *overrides.context_top;
    if (overrides.attempts) config.pipeline.attempts = *overrides.attempts;
    if (overrides.hit_k) config.pipeline.hit_k = *overrides.hit_k;
    if (overrides.checkpoint_every) config.pipeline.checkpoint_every = *overrides.checkpoint_every;
    if (overrides.candidates) config.pipeline.candidates = *overrides.candidates;
    if (overrides.success_ratio) config.pipeline.success_ratio = *overrides.success_ratio;
    if (overrides.chat_script) config.chat.script = *overrides.chat_script;
    if (overrides.embed_dim) {
        config.embedding.dim = *overrides.embed_dim;
        config.rerank.dim = *overrides.embed_dim;
    }
    if (overrides.compiler_command) config.compiler.command = *overrides.compiler_command;
}

Config resolve(const std::optional<std::filesystem::path>& file, const Overrides& env,
               const Overrides& flags) {
    Config config;
    if (file) config = load_file(*file);
    apply(config, env);
    apply(config, flags);
    check_structure(config);
    return config;
}

// ── invariants ──────────────────────────────────────────────────

const std::vector<std::string>& required_templates() {
    static const std::vector<std::string> ids = {
        "back_translate",
        "extract_concept",
        "extract_concept_retry",
        "classify_problem",
        "classify_problem_retry",
        "rewrite_problem",
        "extract_query_concepts",
        "extract_query_concepts_retry",
        "interpret_concept",
        "generate_keywords",
        "generate_keywords_retry",
        "grounding_context",
        "formalize",
        "eval_back_translate",
        "judge_consistency",
        "judge_consistency_retry",
        "judge_strong_relevance",
        "judge_strong_relevance_retry",
        "judge_weak_relevance",
        "judge_weak_relevance_retry",
    };
    return ids;
}

void check_structure(const Config& config) {
    auto at_least_one = [](std::size_t v, const char* what) {
        if (v < 1) throw ConfigError(std::string(what) + " must be at least 1");
    };
    at_least_one(config.pipeline.concepts, "pipeline.concepts");
    at_least_one(config.pipeline.keywords, "pipeline.keywords");
    at_least_one(config.pipeline.recall_top, "pipeline.recall_top");
    at_least_one(config.pipeline.rerank_top, "pipeline.rerank_top");
    at_least_one(config.pipeline.context_top, "pipeline.context_top");
    at_least_one(config.pipeline.attempts, "pipeline.attempts");
    at_least_one(config.pipeline.hit_k, "pipeline.hit_k");
    at_least_one(config.pipeline.checkpoint_every, "pipeline.checkpoint_every");
    if (config.pipeline.candidates < 1) throw ConfigError("pipeline.candidates must be at least 1");
    if (config.jobs < 1) throw ConfigError("jobs must be at least 1");
    if (!(config.pipeline.success_ratio > 0.0) || config.pipeline.success_ratio > 1.0)
        throw ConfigError("pipeline.success_ratio must be in (0, 1]");
    if (config.pipeline.context_top > config.pipeline.rerank_top ||
        config.pipeline.rerank_top > config.pipeline.recall_top)
        throw ConfigError("pipeline caps must be ordered: context_top <= rerank_top <= recall_top");
    if (config.embedding.dim < 1 || config.rerank.dim < 1)
        throw ConfigError("embedding dimension must be at least 1");
    for (const auto* p : {&config.chat, &config.embedding, &config.rerank}) {
        if (p->kind != "mock" && p->kind != "http")
            throw ConfigError("unknown provider kind '" + p->kind + "' (use mock or http)");
        if (p->kind == "http" && p->http.base_url.empty())
            throw ConfigError("http providers need a base_url");
    }
    if (config.compiler.timeout_s < 0) throw ConfigError("compiler.timeout_s must not be negative");
}

void check_templates(const Config& config) {
    if (!std::filesystem::is_directory(config.templates))
        throw ConfigError("template directory not found: " + config.templates.string());
    auto catalog = gateway::TemplateCatalog::from_directory(config.templates);
    std::vector<std::string> missing;
    for (const auto& id : required_templates())
        if (!catalog.has(id)) missing.push_back(id);
    if (!missing.empty()) {
        std::string joined;
        for (const auto& id : missing) joined += (joined.empty() ? "" : ", ") + id;
        throw ConfigError("template directory " + config.templates.string() +
                          " is missing: " + joined);
    }
}

// ── reporting ───────────────────────────────────────────────────

namespace {

json provider_json(const ProviderChoice& p) {
    json j{{"kind", p.kind}, {"dim", p.dim}, {"seed", p.seed}};
    if (!p.script.empty()) j["script"] = p.script.string();
    if (p.kind == "http") {
        j["base_url"] = p.http.base_url;
        j["path"] = p.http.path;
        j["model"] = p.http.model;
        j["api_key_env"] = p.http.api_key_env;  // the name only, never the key
        j["timeout_s"] = p.http.timeout_s;
        j["reply_path"] = p.http.reply_path;
        j["embedding_list_path"] = p.http.embedding_list_path;
        j["embedding_values_path"] = p.http.embedding_values_path;
        j["rerank_list_path"] = p.http.rerank_list_path;
        j["rerank_index_path"] = p.http.rerank_index_path;
        j["rerank_score_path"] = p.http.rerank_score_path;
        j["model_tag"] = p.http.model_tag;
    }
    return j;
}

}  // namespace

std::string effective_json(const Config& config) {
    json j{
        {"templates", config.templates.string()},
        {"jobs", config.jobs},
        {"pipeline",
         {{"concepts", config.pipeline.concepts},
          {"keywords", config.pipeline.keywords},
          {"recall_top", config.pipeline.recall_top},
          {"rerank_top", config.pipeline.rerank_top},
          {"context_top", config.pipeline.context_top},
          {"attempts", config.pipeline.attempts},
          {"hit_k", config.pipeline.hit_k},
          {"candidates", config.pipeline.candidates},
          {"success_ratio", config.pipeline.success_ratio},
          {"checkpoint_every", config.pipeline.checkpoint_every}}},
        {"gateway",
         {{"max_retries", config.gateway.max_retries},
          {"backoff_ms", config.gateway.backoff_ms},
          {"max_concurrent", config.gateway.max_concurrent},
          {"min_interval_ms", config.gateway.min_interval_ms}}},
        {"providers",
         {{"chat", provider_json(config.chat)},
          {"embedding", provider_json(config.embedding)},
          {"rerank", provider_json(config.rerank)}}},
        {"compiler",
         {{"command", config.compiler.command},
          {"timeout_s", config.compiler.timeout_s},
          {"success_exit_codes", config.compiler.success_exit_codes}}},
    };
    return j.dump(2) + "\n";
}

}  // namespace cramf::config
