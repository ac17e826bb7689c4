#include "cramf/providers.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "cramf/vec.hpp"

namespace cramf::gateway {

using nlohmann::json;
namespace fs = std::filesystem;

// ── hash embedder ───────────────────────────────────────────────

HashEmbeddingBackend::HashEmbeddingBackend(std::size_t dim, std::uint64_t seed)
    : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
}

EmbeddingVector HashEmbeddingBackend::embed_one(const std::string& text) const {
    EmbeddingVector v;
    v.model_tag = "mock-hash-" + std::to_string(dim_);
    v.values.resize(dim_);
    std::uint64_t h0 = fnv1a(text) ^ seed_;
    for (std::size_t j = 0; j < dim_; ++j) {
        std::uint64_t u = splitmix64(h0 + 0x9E3779B97F4A7C15ULL * (j + 1));
        // Top 53 bits -> [0,1) exactly representable, then shift to [-1,1).
        double unit = static_cast<double>(u >> 11) * (1.0 / 9007199254740992.0);
        v.values[j] = static_cast<float>(2.0 * unit - 1.0);
    }
    if (!normalize(v.values)) v.values[0] = 1.0f;
    return v;
}

std::vector<EmbeddingVector> HashEmbeddingBackend::embed(const std::vector<std::string>& texts) {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

// ── scripted chat ───────────────────────────────────────────────

ScriptedChatBackend::ScriptedChatBackend(std::vector<ScriptRule> rules,
                                         std::optional<std::string> fallback)
    : rules_(std::move(rules)), cursors_(rules_.size(), 0), fallback_(std::move(fallback)) {
    for (const auto& r : rules_)
        if (r.replies.empty())
            throw ConfigError("script rule for template '" + r.template_id + "' has no replies");
}

std::shared_ptr<ScriptedChatBackend> ScriptedChatBackend::from_json_file(const fs::path& path) {
    json root;
    try {
        root = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ParseError("chat script " + path.string() + ": " + e.what());
    }
    std::vector<ScriptRule> rules;
    const json rule_list = root.value("rules", json::array());
    for (const auto& r : rule_list) {
        ScriptRule rule;
        rule.template_id = r.value("template", "");
        if (rule.template_id.empty())
            throw ParseError("chat script " + path.string() + ": rule without a template");
        const json where = r.value("where", json::object());
        for (const auto& [k, v] : where.items()) rule.where[k] = v.get<std::string>();
        const json replies = r.value("replies", json::array());
        for (const auto& reply : replies) rule.replies.push_back(reply.get<std::string>());
        rules.push_back(std::move(rule));
    }
    std::optional<std::string> fallback;
    if (root.contains("fallback")) fallback = root["fallback"].get<std::string>();
    return std::make_shared<ScriptedChatBackend>(std::move(rules), std::move(fallback));
}

std::string ScriptedChatBackend::complete(const ChatRequest& req, const std::string&) {
    calls_.fetch_add(1);
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < rules_.size(); ++i) {
        const auto& rule = rules_[i];
        if (rule.template_id != req.template_id) continue;
        bool match = std::all_of(rule.where.begin(), rule.where.end(), [&](const auto& kv) {
            auto it = req.variables.find(kv.first);
            return it != req.variables.end() && it->second == kv.second;
        });
        if (!match) continue;
        std::size_t at = std::min(cursors_[i], rule.replies.size() - 1);
        ++cursors_[i];
        return rule.replies[at];
    }
    if (fallback_) return *fallback_;

    std::ostringstream vars;
    for (const auto& [k, v] : req.variables)
        vars << ' ' << k << '=' << (v.size() > 40 ? v.substr(0, 40) + "..." : v);
    throw ProviderError("no script rule matches template '" + req.template_id + "' with" +
                        (req.variables.empty() ? " no variables" : vars.str()));
}

// ── cosine reranker ─────────────────────────────────────────────

CosineRerankBackend::CosineRerankBackend(std::size_t dim, std::uint64_t seed)
    : embedder_(dim, seed) {}

std::vector<double> CosineRerankBackend::score(const std::string& query,
                                               const std::vector<std::string>& candidates) {
    auto q = embedder_.embed_one(query);
    std::vector<double> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates)
        out.push_back((cosine(q.values, embedder_.embed_one(c).values) + 1.0) / 2.0);
    return out;
}

// ── HTTP plumbing ───────────────────────────────────────────────

namespace {

const json* at_pointer(const json& root, const std::string& pointer) {
    try {
        return &root.at(json::json_pointer(pointer));
    } catch (const json::exception&) {
        return nullptr;
    }
}

struct HttpCaller {
    HttpProviderConfig config;
    std::optional<std::string> api_key;

    explicit HttpCaller(HttpProviderConfig cfg) : config(std::move(cfg)) {
        if (!config.api_key_env.empty()) {
            const char* key = std::getenv(config.api_key_env.c_str());
            if (!key || !*key)
                throw ConfigError("environment variable " + config.api_key_env +
                                  " is not set (provider API key)");
            api_key = key;
        }
        if (config.base_url.empty()) throw ConfigError("provider base_url is empty");
    }

    json post(const json& body) const {
        httplib::Client client(config.base_url);
        client.set_connection_timeout(config.timeout_s, 0);
        client.set_read_timeout(config.timeout_s, 0);
        httplib::Headers headers;
        if (api_key) headers.emplace("Authorization", "Bearer " + *api_key);

        auto res = client.Post(config.path, headers, body.dump(), "application/json");
        if (!res)
            throw TransportError("POST " + config.base_url + config.path + " failed: " +
                                 httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw TransportError("POST " + config.path + " returned status " +
                                 std::to_string(res->status));
        if (res->status != 200)
            throw ProviderError("POST " + config.path + " returned status " +
                                std::to_string(res->status) + ": " + res->body);
        json parsed = json::parse(res->body, nullptr, false);
        if (parsed.is_discarded())
            throw ProviderError("provider returned non-JSON body for " + config.path);
        return parsed;
    }
};

class HttpChatBackend : public ChatBackend {
public:
    explicit HttpChatBackend(HttpProviderConfig cfg) : caller_(std::move(cfg)) {}

    std::string complete(const ChatRequest& req, const std::string& rendered_prompt) override {
        json body{{"model", caller_.config.model},
                  {"messages", json::array({{{"role", "user"}, {"content", rendered_prompt}}})},
                  {"temperature", req.temperature},
                  {"max_tokens", req.max_output}};
        json res = caller_.post(body);
        const json* reply = at_pointer(res, caller_.config.reply_path);
        if (!reply || !reply->is_string())
            throw ProviderError("chat response lacks text at " + caller_.config.reply_path);
        return reply->get<std::string>();
    }

private:
    HttpCaller caller_;
};

class HttpEmbeddingBackend : public EmbeddingBackend {
public:
    explicit HttpEmbeddingBackend(HttpProviderConfig cfg) : caller_(std::move(cfg)) {}

    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
        json res = caller_.post(json{{"model", caller_.config.model}, {"input", texts}});
        const json* list = at_pointer(res, caller_.config.embedding_list_path);
        if (!list || !list->is_array())
            throw ProviderError("embedding response lacks a list at " +
                                caller_.config.embedding_list_path);
        std::string tag =
            caller_.config.model_tag.empty() ? caller_.config.model : caller_.config.model_tag;
        std::vector<EmbeddingVector> out;
        for (const auto& item : *list) {
            const json* values = at_pointer(item, caller_.config.embedding_values_path);
            if (!values || !values->is_array())
                throw ProviderError("embedding item lacks values at " +
                                    caller_.config.embedding_values_path);
            EmbeddingVector v;
            v.model_tag = tag;
            v.values.reserve(values->size());
            for (const auto& x : *values) v.values.push_back(x.get<float>());
            out.push_back(std::move(v));
        }
        return out;
    }

private:
    HttpCaller caller_;
};

class HttpRerankBackend : public RerankBackend {
public:
    explicit HttpRerankBackend(HttpProviderConfig cfg) : caller_(std::move(cfg)) {}

    std::vector<double> score(const std::string& query,
                              const std::vector<std::string>& candidates) override {
        json res = caller_.post(json{{"model", caller_.config.model},
                                     {"query", query},
                                     {"documents", candidates}});
        const json* list = at_pointer(res, caller_.config.rerank_list_path);
        if (!list || !list->is_array())
            throw ProviderError("rerank response lacks a list at " +
                                caller_.config.rerank_list_path);
        std::vector<double> out(candidates.size(), 0.0);
        std::vector<bool> seen(candidates.size(), false);
        for (const auto& item : *list) {
            const json* idx = at_pointer(item, caller_.config.rerank_index_path);
            const json* score = at_pointer(item, caller_.config.rerank_score_path);
            if (!idx || !idx->is_number_integer() || !score || !score->is_number())
                throw ProviderError("rerank item lacks index/score fields");
            auto i = idx->get<std::int64_t>();
            if (i < 0 || static_cast<std::size_t>(i) >= candidates.size())
                throw ProviderError("rerank index " + std::to_string(i) + " out of range");
            out[static_cast<std::size_t>(i)] = score->get<double>();
            seen[static_cast<std::size_t>(i)] = true;
        }
        if (std::find(seen.begin(), seen.end(), false) != seen.end())
            throw ProviderError("rerank response does not cover every candidate");
        return out;
    }

private:
    HttpCaller caller_;
};

}  // namespace

std::shared_ptr<ChatBackend> make_http_chat(HttpProviderConfig config) {
    return std::make_shared<HttpChatBackend>(std::move(config));
}
std::shared_ptr<EmbeddingBackend> make_http_embedding(HttpProviderConfig config) {
    return std::make_shared<HttpEmbeddingBackend>(std::move(config));
}
std::shared_ptr<RerankBackend> make_http_rerank(HttpProviderConfig config) {
    return std::make_shared<HttpRerankBackend>(std::move(config));
}

// ── record / replay ─────────────────────────────────────────────

namespace {

json chat_request_json(const ChatRequest& req) {
    return json{{"template_id", req.template_id},
                {"variables", req.variables},
                {"temperature", req.temperature},
                {"max_output", req.max_output}};
}

}  // namespace

std::string chat_request_key(const ChatRequest& req) {
    return content_hash("chat|" + chat_request_json(req).dump());
}

std::string embed_request_key(const std::vector<std::string>& texts) {
    return content_hash("embed|" + json(texts).dump());
}

std::string rerank_request_key(const std::string& query,
                               const std::vector<std::string>& candidates) {
    return content_hash("rerank|" + json{{"query", query}, {"candidates", candidates}}.dump());
}

TrafficLog::TrafficLog(const fs::path& path, bool truncate) : path_(path) {
    if (!path_.parent_path().empty()) {
        std::error_code ec;
        fs::create_directories(path_.parent_path(), ec);
    }
    std::ofstream out(path_, truncate ? std::ios::trunc : std::ios::app);
    if (!out) throw IoError("cannot open traffic log for writing: " + path_.string());
}

void TrafficLog::append(const std::string& kind, const std::string& key,
                        const std::string& request_json, const std::string& response_json) {
    std::lock_guard lock(mutex_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to traffic log: " + path_.string());
    out << json{{"key", key},
                {"kind", kind},
                {"request", json::parse(request_json)},
                {"response", json::parse(response_json)}}
               .dump()
        << '\n';
}

namespace {

class RecordingChat : public ChatBackend {
public:
    RecordingChat(std::shared_ptr<ChatBackend> inner, std::shared_ptr<TrafficLog> log)
        : inner_(std::move(inner)), log_(std::move(log)) {}

    std::string complete(const ChatRequest& req, const std::string& prompt) override {
        std::string reply = inner_->complete(req, prompt);
        log_->append("chat", chat_request_key(req), chat_request_json(req).dump(),
                     json{{"text", reply}}.dump());
        return reply;
    }

private:
    std::shared_ptr<ChatBackend> inner_;
    std::shared_ptr<TrafficLog> log_;
};

class RecordingEmbedding : public EmbeddingBackend {
public:
    RecordingEmbedding(std::shared_ptr<EmbeddingBackend> inner, std::shared_ptr<TrafficLog> log)
        : inner_(std::move(inner)), log_(std::move(log)) {}

    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
        auto vectors = inner_->embed(texts);
        json values = json::array();
        for (const auto& v : vectors) values.push_back(v.values);
        std::string tag = vectors.empty() ? "" : vectors[0].model_tag;
        log_->append("embed", embed_request_key(texts), json{{"texts", texts}}.dump(),
                     json{{"model_tag", tag}, {"vectors", values}}.dump());
        return vectors;
    }

private:
    std::shared_ptr<EmbeddingBackend> inner_;
    std::shared_ptr<TrafficLog> log_;
};

class RecordingRerank : public RerankBackend {
public:
    RecordingRerank(std::shared_ptr<RerankBackend> inner, std::shared_ptr<TrafficLog> log)
        : inner_(std::move(inner)), log_(std::move(log)) {}

    std::vector<double> score(const std::string& query,
                              const std::vector<std::string>& candidates) override {
        auto scores = inner_->score(query, candidates);
        log_->append("rerank", rerank_request_key(query, candidates),
                     json{{"query", query}, {"candidates", candidates}}.dump(),
                     json{{"scores", scores}}.dump());
        return scores;
    }

private:
    std::shared_ptr<RerankBackend> inner_;
    std::shared_ptr<TrafficLog> log_;
};

}  // namespace

std::shared_ptr<ChatBackend> record_chat(std::shared_ptr<ChatBackend> inner,
                                         std::shared_ptr<TrafficLog> log) {
    return std::make_shared<RecordingChat>(std::move(inner), std::move(log));
}
std::shared_ptr<EmbeddingBackend> record_embedding(std::shared_ptr<EmbeddingBackend> inner,
                                                   std::shared_ptr<TrafficLog> log) {
    return std::make_shared<RecordingEmbedding>(std::move(inner), std::move(log));
}
std::shared_ptr<RerankBackend> record_rerank(std::shared_ptr<RerankBackend> inner,
                                             std::shared_ptr<TrafficLog> log) {
    return std::make_shared<RecordingRerank>(std::move(inner), std::move(log));
}

std::shared_ptr<ReplayArchive> ReplayArchive::load(const fs::path& path) {
    auto archive = std::make_shared<ReplayArchive>();
    std::istringstream in(read_file(path));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("key") || !j.contains("kind") ||
            !j.contains("response"))
            throw ParseError("replay file " + path.string() + " line " +
                             std::to_string(line_no) + ": malformed record");
        archive->by_key_[j["kind"].get<std::string>() + "|" + j["key"].get<std::string>()] =
            j["response"].dump();
    }
    return archive;
}

std::optional<std::string> ReplayArchive::response_for(const std::string& kind,
                                                       const std::string& key) const {
    auto it = by_key_.find(kind + "|" + key);
    if (it == by_key_.end()) return std::nullopt;
    return it->second;
}

namespace {

[[noreturn]] void replay_miss(const std::string& kind, const std::string& key) {
    throw ProviderError("replay miss: no recorded " + kind + " response for request " + key);
}

class ReplayChat : public ChatBackend {
public:
    explicit ReplayChat(std::shared_ptr<ReplayArchive> archive) : archive_(std::move(archive)) {}

    std::string complete(const ChatRequest& req, const std::string&) override {
        auto key = chat_request_key(req);
        auto payload = archive_->response_for("chat", key);
        if (!payload) replay_miss("chat", key);
        return json::parse(*payload).at("text").get<std::string>();
    }

private:
    std::shared_ptr<ReplayArchive> archive_;
};

class ReplayEmbedding : public EmbeddingBackend {
public:
    explicit ReplayEmbedding(std::shared_ptr<ReplayArchive> archive)
        : archive_(std::move(archive)) {}

    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
        auto key = embed_request_key(texts);
        auto payload = archive_->response_for("embed", key);
        if (!payload) replay_miss("embed", key);
        json j = json::parse(*payload);
        std::vector<EmbeddingVector> out;
        for (const auto& values : j.at("vectors")) {
            EmbeddingVector v;
            v.model_tag = j.at("model_tag").get<std::string>();
            for (const auto& x : values) v.values.push_back(x.get<float>());
            out.push_back(std::move(v));
        }
        return out;
    }

private:
    std::shared_ptr<ReplayArchive> archive_;
};

class ReplayRerank : public RerankBackend {
public:
    explicit ReplayRerank(std::shared_ptr<ReplayArchive> archive) : archive_(std::move(archive)) {}

    std::vector<double> score(const std::string& query,
                              const std::vector<std::string>& candidates) override {
        auto key = rerank_request_key(query, candidates);
        auto payload = archive_->response_for("rerank", key);
        if (!payload) replay_miss("rerank", key);
        return json::parse(*payload).at("scores").get<std::vector<double>>();
    }

private:
    std::shared_ptr<ReplayArchive> archive_;
};

}  // namespace

std::shared_ptr<ChatBackend> replay_chat(std::shared_ptr<ReplayArchive> archive) {
    return std::make_shared<ReplayChat>(std::move(archive));
}
std::shared_ptr<EmbeddingBackend> replay_embedding(std::shared_ptr<ReplayArchive> archive) {
    return std::make_shared<ReplayEmbedding>(std::move(archive));
}
std::shared_ptr<RerankBackend> replay_rerank(std::shared_ptr<ReplayArchive> archive) {
    return std::make_shared<ReplayRerank>(std::move(archive));
}

}  // namespace cramf::gateway
