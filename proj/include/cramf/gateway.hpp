#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "cramf/common.hpp"

namespace cramf::gateway {

// ── requests & results ──────────────────────────────────────────

struct ChatRequest {
    std::string template_id;
    std::map<std::string, std::string> variables;
    double temperature = 0.0;
    int max_output = 1024;
};

struct EmbeddingVector {
    std::vector<float> values;
    std::string model_tag;

    std::size_t dim() const { return values.size(); }
};

struct RerankEntry {
    std::size_t index;  // position in the input candidate list
    double score;
};
using RerankResult = std::vector<RerankEntry>;  // scores non-increasing

// ── prompt templates ────────────────────────────────────────────
// Plain text files with {{variable}} placeholders; the file stem is the
// template id.

class TemplateCatalog {
public:
    static TemplateCatalog from_directory(const std::filesystem::path& dir);
    static TemplateCatalog from_map(std::map<std::string, std::string> templates);

    bool has(std::string_view template_id) const;
    // Unknown template or unbound placeholder → ConfigError. Variables
    // without a matching placeholder are ignored.
    std::string render(const std::string& template_id,
                       const std::map<std::string, std::string>& variables) const;

private:
    std::map<std::string, std::string, std::less<>> templates_;
};

// ── capability backends ─────────────────────────────────────────
// One implementation per transport (HTTP, scripted mock, replay file).
// Backends must be safe for concurrent calls.

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string complete(const ChatRequest& req, const std::string& rendered_prompt) = 0;
};

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) = 0;
};

class RerankBackend {
public:
    virtual ~RerankBackend() = default;
    // Raw relevance scores, one per candidate, input order.
    virtual std::vector<double> score(const std::string& query,
                                      const std::vector<std::string>& candidates) = 0;
};

// ── gateway ─────────────────────────────────────────────────────

struct TraceEvent {
    std::uint64_t request_id;
    std::string kind;    // "chat", "embed", "rerank", "retry"
    std::string detail;  // template id, batch size, attempt number
};

struct GatewayOptions {
    int max_retries = 2;       // extra attempts after the first, transport errors only
    int backoff_ms = 50;       // doubles per retry
    int max_concurrent = 4;    // global in-flight cap
    int min_interval_ms = 0;   // per-call spacing, 0 = unlimited
};

// Trims markdown code fences and surrounding chatter off a model reply
// so a fielded (JSON) payload can be parsed.
std::string strip_reply_fences(std::string_view reply);

class Gateway {
public:
    Gateway(TemplateCatalog catalog, std::shared_ptr<ChatBackend> chat,
            std::shared_ptr<EmbeddingBackend> embed, std::shared_ptr<RerankBackend> rerank,
            GatewayOptions options = {});
    ~Gateway();

    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    const TemplateCatalog& templates() const;

    // Renders the template and runs the chat backend with retry/backoff on
    // transport errors; exhausted retries → ProviderUnavailable.
    std::string chat(const ChatRequest& req);

    // One vector per text, uniform dim and model tag enforced. Empty batch
    // is a no-op; an empty text is an InputError naming its index.
    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts);

    // Scores all candidates and returns a full permutation ordered by
    // score descending, ties by original index ascending.
    RerankResult rerank(const std::string& query, const std::vector<std::string>& candidates);

    // Observer for request logging; called synchronously.
    void set_observer(std::function<void(const TraceEvent&)> observer);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cramf::gateway
