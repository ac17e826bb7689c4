#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace cramf {

// ── error hierarchy ─────────────────────────────────────────────

class CramfError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public CramfError {
public:
    using CramfError::CramfError;
};

// Malformed persisted data; the message names the offending line/record.
class ParseError : public CramfError {
public:
    using CramfError::CramfError;
};

class ConfigError : public CramfError {
public:
    using CramfError::CramfError;
};

class InputError : public CramfError {
public:
    using CramfError::CramfError;
};

class MetricError : public CramfError {
public:
    using CramfError::CramfError;
};

class ExtractionError : public CramfError {
public:
    using CramfError::CramfError;
};

class RetrievalError : public CramfError {
public:
    using CramfError::CramfError;
};

class ProviderError : public CramfError {
public:
    using CramfError::CramfError;
};

// Transient transport failure; the gateway retries these.
class TransportError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

class ProviderUnavailable : public ProviderError {
public:
    using ProviderError::ProviderError;
};

// ── stable hashing ──────────────────────────────────────────────
// FNV-1a / splitmix64 so ids, fingerprints and mock embeddings are
// bit-identical across platforms and runs.

constexpr std::uint64_t fnv1a(std::string_view s,
                              std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::string hex64(std::uint64_t v);

// 16-hex-char content hash of a tagged string.
inline std::string content_hash(std::string_view tagged) {
    return hex64(fnv1a(tagged));
}

// ── small string helpers ────────────────────────────────────────

std::string trim(std::string_view s);
bool is_blank(std::string_view s);
std::string to_lower(std::string_view s);

// ── file helpers ────────────────────────────────────────────────

std::string read_file(const std::filesystem::path& path);
// Writes via temp file + rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// ── bounded order-preserving parallel map ───────────────────────
// Results come back in input order; exceptions are rethrown from the
// first failing item. jobs <= 1 degenerates to a plain loop.

template <typename In, typename Fn>
auto parallel_map(const std::vector<In>& items, Fn fn, int jobs)
    -> std::vector<decltype(fn(items.front()))> {
    using Out = decltype(fn(items.front()));
    std::vector<Out> out(items.size());
    if (items.empty()) return out;
    if (jobs <= 1 || items.size() == 1) {
        for (std::size_t i = 0; i < items.size(); ++i) out[i] = fn(items[i]);
        return out;
    }
    std::vector<std::exception_ptr> errors(items.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= items.size()) break;
            try {
                out[i] = fn(items[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(jobs), items.size());
    std::vector<std::thread> pool;
    pool.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace cramf
