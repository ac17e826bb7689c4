#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cramf/gateway.hpp"

namespace cramf::gateway {

// ── deterministic offline mocks ─────────────────────────────────

// Each coordinate is a keyed hash of (text, coordinate index) mapped to
// [-1, 1), then the vector is normalized; bit-identical everywhere.
class HashEmbeddingBackend : public EmbeddingBackend {
public:
    explicit HashEmbeddingBackend(std::size_t dim = 64, std::uint64_t seed = 0);

    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override;
    EmbeddingVector embed_one(const std::string& text) const;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

// First rule whose template matches and whose `where` entries all equal
// the request's variables wins; its replies are served in order and the
// last one repeats. No match falls back, else errors.
struct ScriptRule {
    std::string template_id;
    std::map<std::string, std::string> where;
    std::vector<std::string> replies;
};

class ScriptedChatBackend : public ChatBackend {
public:
    explicit ScriptedChatBackend(std::vector<ScriptRule> rules,
                                 std::optional<std::string> fallback = std::nullopt);
    // {"rules": [{"template": ..., "where": {...}, "replies": [...]}],
    //  "fallback": optional string}
    static std::shared_ptr<ScriptedChatBackend> from_json_file(const std::filesystem::path& path);

    std::string complete(const ChatRequest& req, const std::string& rendered_prompt) override;
    std::uint64_t calls() const { return calls_.load(); }

private:
    std::vector<ScriptRule> rules_;
    std::vector<std::size_t> cursors_;
    std::optional<std::string> fallback_;
    std::atomic<std::uint64_t> calls_{0};
    std::mutex mutex_;
};

// Scores (cosine + 1) / 2 over hash embeddings of query and candidate,
// so identical text scores 1 and scores stay in [0, 1].
class CosineRerankBackend : public RerankBackend {
public:
    explicit CosineRerankBackend(std::size_t dim = 64, std::uint64_t seed = 0);
    std::vector<double> score(const std::string& query,
                              const std::vector<std::string>& candidates) override;

private:
    HashEmbeddingBackend embedder_;
};

// ── HTTP adapters ───────────────────────────────────────────────
// De-facto chat-completions / embeddings / rerank JSON conventions;
// response extraction paths are JSON pointers so heterogeneous provider
// APIs can be mapped from config without code changes.

struct HttpProviderConfig {
    std::string base_url;  // e.g. "http://127.0.0.1:8089"
    std::string path;      // e.g. "/v1/chat/completions"
    std::string model;
    std::string api_key_env;  // name of the env var; key itself never in config
    int timeout_s = 30;

    std::string reply_path = "/choices/0/message/content";
    std::string embedding_list_path = "/data";
    std::string embedding_values_path = "/embedding";
    std::string rerank_list_path = "/results";
    std::string rerank_index_path = "/index";
    std::string rerank_score_path = "/relevance_score";
    std::string model_tag;  // defaults to model
};

std::shared_ptr<ChatBackend> make_http_chat(HttpProviderConfig config);
std::shared_ptr<EmbeddingBackend> make_http_embedding(HttpProviderConfig config);
std::shared_ptr<RerankBackend> make_http_rerank(HttpProviderConfig config);

// ── record / replay ─────────────────────────────────────────────
// Line-delimited {key, kind, request, response} records keyed by a
// content hash of the canonical request, so a recorded session replays
// bit-identically with no providers reachable.

std::string chat_request_key(const ChatRequest& req);
std::string embed_request_key(const std::vector<std::string>& texts);
std::string rerank_request_key(const std::string& query,
                               const std::vector<std::string>& candidates);

class TrafficLog {
public:
    explicit TrafficLog(const std::filesystem::path& path, bool truncate = true);
    void append(const std::string& kind, const std::string& key, const std::string& request_json,
                const std::string& response_json);

private:
    std::filesystem::path path_;
    std::mutex mutex_;
};

std::shared_ptr<ChatBackend> record_chat(std::shared_ptr<ChatBackend> inner,
                                         std::shared_ptr<TrafficLog> log);
std::shared_ptr<EmbeddingBackend> record_embedding(std::shared_ptr<EmbeddingBackend> inner,
                                                   std::shared_ptr<TrafficLog> log);
std::shared_ptr<RerankBackend> record_rerank(std::shared_ptr<RerankBackend> inner,
                                             std::shared_ptr<TrafficLog> log);

class ReplayArchive {
public:
    static std::shared_ptr<ReplayArchive> load(const std::filesystem::path& path);

    // Response payload for a key, or nullopt. Thread-safe (read-only).
    std::optional<std::string> response_for(const std::string& kind,
                                            const std::string& key) const;

private:
    std::unordered_map<std::string, std::string> by_key_;  // "kind|key" -> response json
};

std::shared_ptr<ChatBackend> replay_chat(std::shared_ptr<ReplayArchive> archive);
std::shared_ptr<EmbeddingBackend> replay_embedding(std::shared_ptr<ReplayArchive> archive);
std::shared_ptr<RerankBackend> replay_rerank(std::shared_ptr<ReplayArchive> archive);

}  // namespace cramf::gateway
