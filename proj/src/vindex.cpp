#include "cramf/vindex.hpp"

#include <algorithm>
#include <bit>
#include <queue>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "cramf/vec.hpp"

namespace cramf::vindex {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Side side) {
    return side == Side::Concept ? "concept" : "description";
}

Side side_from_string(std::string_view s) {
    if (s == "concept") return Side::Concept;
    if (s == "description") return Side::Description;
    throw InputError("unknown index side: '" + std::string(s) + "' (use concept|description)");
}

namespace {

const std::vector<float>& side_vector(const KnowledgeUnit& u, Side side) {
    return side == Side::Concept ? u.concept_vector.values : u.description_vector.values;
}

// Exact tie-break shared by both backends: score descending, then
// definition identifier, then concept name.
bool hit_before(const std::vector<KnowledgeUnit>& units, const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    const auto& ua = units[a.unit];
    const auto& ub = units[b.unit];
    if (ua.definition_identifier != ub.definition_identifier)
        return ua.definition_identifier < ub.definition_identifier;
    return ua.concept_name < ub.concept_name;
}

}  // namespace

VectorIndex::VectorIndex(std::vector<KnowledgeUnit> units, Side side)
    : units_(std::move(units)), side_(side) {
    if (units_.empty()) throw InputError("vector index needs at least one knowledge unit");
    dim_ = units_[0].concept_vector.dim();
    model_tag_ = units_[0].concept_vector.model_tag;
    for (auto& u : units_) {
        if (u.concept_vector.dim() != dim_ || u.description_vector.dim() != dim_)
            throw InputError("knowledge unit '" + u.definition_identifier +
                             "' has mismatched vector dimensions");
        if (u.concept_vector.model_tag != model_tag_ || u.description_vector.model_tag != model_tag_)
            throw InputError("knowledge unit '" + u.definition_identifier +
                             "' has a mismatched embedding model tag");
        if (!normalize(u.concept_vector.values) || !normalize(u.description_vector.values))
            throw InputError("knowledge unit '" + u.definition_identifier +
                             "' carries a zero vector");
    }
}

std::vector<SearchHit> VectorIndex::search(const gateway::EmbeddingVector& query,
                                           std::size_t k) const {
    if (k == 0) throw InputError("search needs k >= 1");
    if (query.dim() != dim_)
        throw InputError("query dimension " + std::to_string(query.dim()) +
                         " does not match index dimension " + std::to_string(dim_));
    if (query.model_tag != model_tag_)
        throw InputError("query embedding model '" + query.model_tag +
                         "' does not match index model '" + model_tag_ + "'");
    std::vector<float> q = query.values;
    if (!normalize(q)) throw InputError("query vector has zero norm");

    std::vector<SearchHit> hits;
    hits.reserve(units_.size());
    for (std::size_t i = 0; i < units_.size(); ++i)
        hits.push_back({i, dot(q, side_vector(units_[i], side_))});

    std::size_t take = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(),
                      [&](const SearchHit& a, const SearchHit& b) {
                          return hit_before(units_, a, b);
                      });
    hits.resize(take);
    return hits;
}

// ── persistence ─────────────────────────────────────────────────

namespace {

void append_le_f32(std::string& out, float x) {
    auto bits = std::bit_cast<std::uint32_t>(x);
    out.push_back(static_cast<char>(bits & 0xFF));
    out.push_back(static_cast<char>((bits >> 8) & 0xFF));
    out.push_back(static_cast<char>((bits >> 16) & 0xFF));
    out.push_back(static_cast<char>((bits >> 24) & 0xFF));
}

float read_le_f32(const std::string& data, std::size_t offset) {
    std::uint32_t bits = static_cast<std::uint8_t>(data[offset]) |
                         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[offset + 1]))
                          << 8) |
                         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[offset + 2]))
                          << 16) |
                         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[offset + 3]))
                          << 24);
    return std::bit_cast<float>(bits);
}

fs::path meta_path(const fs::path& path) { return fs::path(path.string() + ".meta.jsonl"); }

}  // namespace

void VectorIndex::save(const fs::path& path) const {
    std::string out = json{{"count", units_.size()},
                           {"dim", dim_},
                           {"metric", "cosine"},
                           {"model_tag", model_tag_},
                           {"side", to_string(side_)}}
                          .dump() +
                      "\n";
    out.reserve(out.size() + units_.size() * dim_ * 8);
    for (const auto& u : units_)
        for (float x : u.concept_vector.values) append_le_f32(out, x);
    for (const auto& u : units_)
        for (float x : u.description_vector.values) append_le_f32(out, x);
    write_file_atomic(path, out);

    std::string meta;
    for (const auto& u : units_)
        meta += json{{"concept_name", u.concept_name},
                     {"definition_identifier", u.definition_identifier}}
                    .dump() +
                "\n";
    write_file_atomic(meta_path(path), meta);
}

VectorIndex VectorIndex::load(const fs::path& path) {
    std::string data = read_file(path);
    std::size_t newline = data.find('\n');
    if (newline == std::string::npos) throw ParseError("index file has no header: " + path.string());
    json header = json::parse(data.substr(0, newline), nullptr, false);
    if (header.is_discarded() || !header.contains("count") || !header.contains("dim") ||
        !header.contains("side") || !header.contains("model_tag"))
        throw ParseError("index file header is malformed: " + path.string());

    std::size_t count = header["count"].get<std::size_t>();
    std::size_t dim = header["dim"].get<std::size_t>();
    Side side = side_from_string(header["side"].get<std::string>());
    std::string tag = header["model_tag"].get<std::string>();

    std::size_t expected = (newline + 1) + 2 * count * dim * 4;
    if (data.size() != expected)
        throw ParseError("index file is truncated or padded: " + path.string() + " (expected " +
                         std::to_string(expected) + " bytes, have " +
                         std::to_string(data.size()) + ")");

    std::istringstream meta(read_file(meta_path(path)));
    std::vector<KnowledgeUnit> units(count);
    std::string line;
    std::size_t row = 0;
    while (std::getline(meta, line)) {
        if (is_blank(line)) continue;
        if (row >= count)
            throw ParseError("index sidecar has more records than the header count: " +
                             meta_path(path).string());
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ParseError("index sidecar line " + std::to_string(row + 1) + " is malformed");
        units[row].concept_name = j.at("concept_name").get<std::string>();
        units[row].definition_identifier = j.at("definition_identifier").get<std::string>();
        ++row;
    }
    if (row != count)
        throw ParseError("index sidecar holds " + std::to_string(row) + " records, header says " +
                         std::to_string(count));

    std::size_t offset = newline + 1;
    for (auto& u : units) {
        u.concept_vector.model_tag = tag;
        u.concept_vector.values.resize(dim);
        for (std::size_t j = 0; j < dim; ++j, offset += 4)
            u.concept_vector.values[j] = read_le_f32(data, offset);
    }
    for (auto& u : units) {
        u.description_vector.model_tag = tag;
        u.description_vector.values.resize(dim);
        for (std::size_t j = 0; j < dim; ++j, offset += 4)
            u.description_vector.values[j] = read_le_f32(data, offset);
    }
    return VectorIndex(std::move(units), side);
}

// ── approximate graph backend ───────────────────────────────────

namespace {

struct Scored {
    double score;
    std::uint32_t node;
};

}  // namespace

GraphIndex::GraphIndex(const VectorIndex& base, std::size_t max_neighbors,
                       std::size_t ef_construction)
    : base_(&base) {
    const auto& units = base.units();
    Side side = base.side();
    neighbors_.resize(units.size());
    if (units.size() <= 1) return;

    auto score_of = [&](std::size_t a, std::size_t b) {
        return dot(side_vector(units[a], side), side_vector(units[b], side));
    };

    auto beam_from = [&](std::size_t upto, const std::vector<float>& q, std::size_t ef) {
        // Best-first over the partial graph [0, upto).
        std::vector<Scored> result;
        std::vector<char> visited(upto, 0);
        auto better = [](const Scored& a, const Scored& b) { return a.score < b.score; };
        std::priority_queue<Scored, std::vector<Scored>, decltype(better)> frontier(better);
        auto push = [&](std::uint32_t node) {
            if (visited[node]) return;
            visited[node] = 1;
            double s = dot(q, side_vector(units[node], side));
            frontier.push({s, node});
        };
        push(0);
        while (!frontier.empty()) {
            Scored current = frontier.top();
            frontier.pop();
            if (result.size() >= ef && current.score <= result.front().score) break;
            result.push_back(current);
            std::push_heap(result.begin(), result.end(),
                           [](const Scored& a, const Scored& b) { return a.score > b.score; });
            if (result.size() > ef) {
                std::pop_heap(result.begin(), result.end(),
                              [](const Scored& a, const Scored& b) { return a.score > b.score; });
                result.pop_back();
            }
            for (std::uint32_t n : neighbors_[current.node]) push(n);
        }
        std::sort(result.begin(), result.end(),
                  [](const Scored& a, const Scored& b) { return a.score > b.score; });
        return result;
    };

    for (std::uint32_t i = 1; i < units.size(); ++i) {
        auto found = beam_from(i, side_vector(units[i], side), ef_construction);
        std::size_t links = std::min(max_neighbors, found.size());
        for (std::size_t j = 0; j < links; ++j) {
            std::uint32_t n = found[j].node;
            neighbors_[i].push_back(n);
            neighbors_[n].push_back(i);
            if (neighbors_[n].size() > max_neighbors) {
                // Keep the closest neighbors of n.
                auto& list = neighbors_[n];
                std::sort(list.begin(), list.end(), [&](std::uint32_t a, std::uint32_t b) {
                    double sa = score_of(n, a), sb = score_of(n, b);
                    if (sa != sb) return sa > sb;
                    return a < b;
                });
                list.resize(max_neighbors);
            }
        }
    }
}

std::vector<SearchHit> GraphIndex::search(const gateway::EmbeddingVector& query, std::size_t k,
                                          std::size_t ef_search) const {
    if (k == 0) throw InputError("search needs k >= 1");
    const auto& units = base_->units();
    if (query.dim() != base_->dim())
        throw InputError("query dimension does not match index dimension");
    if (query.model_tag != base_->model_tag())
        throw InputError("query embedding model does not match index model");
    std::vector<float> q = query.values;
    if (!normalize(q)) throw InputError("query vector has zero norm");

    Side side = base_->side();
    std::size_t ef = std::max(ef_search, k);
    std::vector<char> visited(units.size(), 0);
    auto lower = [](const Scored& a, const Scored& b) { return a.score < b.score; };
    std::priority_queue<Scored, std::vector<Scored>, decltype(lower)> frontier(lower);
    std::vector<Scored> best;  // min-heap on score, capped at ef

    auto visit = [&](std::uint32_t node) {
        if (visited[node]) return;
        visited[node] = 1;
        double s = dot(q, side_vector(units[node], side));
        frontier.push({s, node});
    };
    visit(0);
    while (!frontier.empty()) {
        Scored current = frontier.top();
        frontier.pop();
        if (best.size() >= ef && current.score <= best.front().score) break;
        best.push_back(current);
        std::push_heap(best.begin(), best.end(),
                       [](const Scored& a, const Scored& b) { return a.score > b.score; });
        if (best.size() > ef) {
            std::pop_heap(best.begin(), best.end(),
                          [](const Scored& a, const Scored& b) { return a.score > b.score; });
            best.pop_back();
        }
        for (std::uint32_t n : neighbors_[current.node]) visit(n);
    }

    std::vector<SearchHit> hits;
    hits.reserve(best.size());
    for (const auto& s : best) hits.push_back({s.node, s.score});
    std::sort(hits.begin(), hits.end(), [&](const SearchHit& a, const SearchHit& b) {
        if (a.score != b.score) return a.score > b.score;
        const auto& ua = units[a.unit];
        const auto& ub = units[b.unit];
        if (ua.definition_identifier != ub.definition_identifier)
            return ua.definition_identifier < ub.definition_identifier;
        return ua.concept_name < ub.concept_name;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
}

}  // namespace cramf::vindex
