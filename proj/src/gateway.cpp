#include "cramf/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <mutex>
#include <thread>

namespace cramf::gateway {

namespace fs = std::filesystem;

// ── templates ───────────────────────────────────────────────────

TemplateCatalog TemplateCatalog::from_directory(const fs::path& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec))
        throw ConfigError("template directory does not exist: " + dir.string());
    TemplateCatalog catalog;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
        catalog.templates_[entry.path().stem().string()] = read_file(entry.path());
    }
    if (catalog.templates_.empty())
        throw ConfigError("template directory holds no .txt templates: " + dir.string());
    return catalog;
}

TemplateCatalog TemplateCatalog::from_map(std::map<std::string, std::string> templates) {
    TemplateCatalog catalog;
    for (auto& [id, body] : templates) catalog.templates_[id] = std::move(body);
    return catalog;
}

bool TemplateCatalog::has(std::string_view template_id) const {
    return templates_.find(template_id) != templates_.end();
}

std::string TemplateCatalog::render(const std::string& template_id,
                                    const std::map<std::string, std::string>& variables) const {
    auto it = templates_.find(template_id);
    if (it == templates_.end()) throw ConfigError("unknown template: " + template_id);
    const std::string& body = it->second;

    std::string out;
    out.reserve(body.size());
    std::size_t pos = 0;
    while (pos < body.size()) {
        std::size_t open = body.find("{{", pos);
        if (open == std::string::npos) {
            out.append(body, pos, std::string::npos);
            break;
        }
        out.append(body, pos, open - pos);
        std::size_t close = body.find("}}", open + 2);
        if (close == std::string::npos)
            throw ConfigError("template '" + template_id + "' has an unterminated placeholder");
        std::string name = body.substr(open + 2, close - open - 2);
        auto var = variables.find(name);
        if (var == variables.end())
            throw ConfigError("template '" + template_id + "' placeholder '" + name +
                              "' is unbound");
        out += var->second;
        pos = close + 2;
    }
    return out;
}

std::string strip_reply_fences(std::string_view reply) {
    std::string text = trim(reply);
    if (text.starts_with("```")) {
        std::size_t first_line_end = text.find('\n');
        if (first_line_end != std::string::npos) {
            std::size_t closing = text.rfind("```");
            if (closing > first_line_end)
                text = trim(text.substr(first_line_end + 1, closing - first_line_end - 1));
        }
    }
    // Models sometimes wrap the payload in prose; cut to the outermost
    // JSON object when one is present.
    if (!text.starts_with("{")) {
        std::size_t open = text.find('{');
        std::size_t close = text.rfind('}');
        if (open != std::string::npos && close != std::string::npos && close > open)
            text = text.substr(open, close - open + 1);
    }
    return text;
}

// ── gateway ─────────────────────────────────────────────────────

namespace {

// Runtime-capacity semaphore (std::counting_semaphore fixes the cap at
// compile time).
class Gate {
public:
    explicit Gate(int slots) : slots_(slots < 1 ? 1 : slots) {}

    void acquire() {
        std::unique_lock lock(m_);
        cv_.wait(lock, [&] { return slots_ > 0; });
        --slots_;
    }
    void release() {
        {
            std::lock_guard lock(m_);
            ++slots_;
        }
        cv_.notify_one();
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    int slots_;
};

struct GateHold {
    Gate& gate;
    explicit GateHold(Gate& g) : gate(g) { gate.acquire(); }
    ~GateHold() { gate.release(); }
};

}  // namespace

struct Gateway::Impl {
    TemplateCatalog catalog;
    std::shared_ptr<ChatBackend> chat;
    std::shared_ptr<EmbeddingBackend> embed;
    std::shared_ptr<RerankBackend> rerank;
    GatewayOptions options;
    Gate gate;
    std::atomic<std::uint64_t> next_request_id{1};

    std::mutex observer_mutex;
    std::function<void(const TraceEvent&)> observer;

    std::mutex pace_mutex;
    std::chrono::steady_clock::time_point next_slot = std::chrono::steady_clock::now();

    Impl(TemplateCatalog c, std::shared_ptr<ChatBackend> ch, std::shared_ptr<EmbeddingBackend> em,
         std::shared_ptr<RerankBackend> rr, GatewayOptions opt)
        : catalog(std::move(c)),
          chat(std::move(ch)),
          embed(std::move(em)),
          rerank(std::move(rr)),
          options(opt),
          gate(opt.max_concurrent) {}

    void notify(std::uint64_t id, std::string kind, std::string detail) {
        std::function<void(const TraceEvent&)> fn;
        {
            std::lock_guard lock(observer_mutex);
            fn = observer;
        }
        if (fn) fn(TraceEvent{id, std::move(kind), std::move(detail)});
    }

    void pace() {
        if (options.min_interval_ms <= 0) return;
        std::chrono::steady_clock::time_point wake;
        {
            std::lock_guard lock(pace_mutex);
            auto now = std::chrono::steady_clock::now();
            if (next_slot < now) next_slot = now;
            wake = next_slot;
            next_slot += std::chrono::milliseconds(options.min_interval_ms);
        }
        std::this_thread::sleep_until(wake);
    }

    // Runs fn with retry/backoff on TransportError; other errors pass through.
    template <typename Fn>
    auto with_retries(std::uint64_t id, Fn fn) -> decltype(fn()) {
        int backoff = options.backoff_ms;
        for (int attempt = 0;; ++attempt) {
            try {
                GateHold hold(gate);
                pace();
                return fn();
            } catch (const TransportError& e) {
                if (attempt >= options.max_retries)
                    throw ProviderUnavailable("provider unavailable after " +
                                              std::to_string(attempt + 1) +
                                              " attempts: " + e.what());
                notify(id, "retry",
                       "attempt " + std::to_string(attempt + 1) + " failed: " + e.what());
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
        }
    }
};

Gateway::Gateway(TemplateCatalog catalog, std::shared_ptr<ChatBackend> chat,
                 std::shared_ptr<EmbeddingBackend> embed, std::shared_ptr<RerankBackend> rerank,
                 GatewayOptions options)
    : impl_(std::make_unique<Impl>(std::move(catalog), std::move(chat), std::move(embed),
                                   std::move(rerank), options)) {}

Gateway::~Gateway() = default;

const TemplateCatalog& Gateway::templates() const { return impl_->catalog; }

void Gateway::set_observer(std::function<void(const TraceEvent&)> observer) {
    std::lock_guard lock(impl_->observer_mutex);
    impl_->observer = std::move(observer);
}

std::string Gateway::chat(const ChatRequest& req) {
    if (!impl_->chat) throw ConfigError("no chat backend configured");
    std::string prompt = impl_->catalog.render(req.template_id, req.variables);
    auto id = impl_->next_request_id.fetch_add(1);
    impl_->notify(id, "chat", req.template_id);
    return impl_->with_retries(id, [&] { return impl_->chat->complete(req, prompt); });
}

std::vector<EmbeddingVector> Gateway::embed(const std::vector<std::string>& texts) {
    if (!impl_->embed) throw ConfigError("no embedding backend configured");
    if (texts.empty()) return {};
    for (std::size_t i = 0; i < texts.size(); ++i)
        if (is_blank(texts[i]))
            throw InputError("embed: text at index " + std::to_string(i) + " is empty");

    auto id = impl_->next_request_id.fetch_add(1);
    impl_->notify(id, "embed", "batch of " + std::to_string(texts.size()));
    auto vectors = impl_->with_retries(id, [&] { return impl_->embed->embed(texts); });

    if (vectors.size() != texts.size())
        throw ProviderError("embedding backend returned " + std::to_string(vectors.size()) +
                            " vectors for " + std::to_string(texts.size()) + " texts");
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        const auto& v = vectors[i];
        if (v.dim() == 0 || v.dim() != vectors[0].dim() || v.model_tag != vectors[0].model_tag)
            throw ProviderError("embedding batch is not uniform at index " + std::to_string(i));
        bool all_zero = std::all_of(v.values.begin(), v.values.end(),
                                    [](float x) { return x == 0.0f; });
        if (all_zero)
            throw ProviderError("embedding at index " + std::to_string(i) + " is all-zero");
    }
    return vectors;
}

RerankResult Gateway::rerank(const std::string& query, const std::vector<std::string>& candidates) {
    if (!impl_->rerank) throw ConfigError("no rerank backend configured");
    if (candidates.empty()) throw InputError("rerank: candidate list is empty");

    auto id = impl_->next_request_id.fetch_add(1);
    impl_->notify(id, "rerank", std::to_string(candidates.size()) + " candidates");
    auto scores = impl_->with_retries(id, [&] { return impl_->rerank->score(query, candidates); });

    if (scores.size() != candidates.size())
        throw ProviderError("rerank backend returned " + std::to_string(scores.size()) +
                            " scores for " + std::to_string(candidates.size()) + " candidates");
    RerankResult out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {i, scores[i]};
    std::stable_sort(out.begin(), out.end(), [](const RerankEntry& a, const RerankEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    });
    return out;
}

}  // namespace cramf::gateway
