#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cramf/gateway.hpp"

namespace cramf::vindex {

// (concept name, definition identifier, concept vector, description
// vector): the unit the retrieval channels search over.
struct KnowledgeUnit {
    std::string concept_name;
    std::string definition_identifier;
    gateway::EmbeddingVector concept_vector;      // embed(concept explanation)
    gateway::EmbeddingVector description_vector;  // embed(description annotation)
};

enum class Side { Concept, Description };

std::string to_string(Side side);
Side side_from_string(std::string_view s);  // throws InputError

struct SearchHit {
    std::size_t unit;  // position in units()
    double score;      // cosine, descending
};

// Exact cosine top-k over one vector side. Vectors are unit-normalized
// at construction so cosine reduces to a dot product.
class VectorIndex {
public:
    VectorIndex(std::vector<KnowledgeUnit> units, Side side);

    const std::vector<KnowledgeUnit>& units() const { return units_; }
    Side side() const { return side_; }
    std::size_t dim() const { return dim_; }
    const std::string& model_tag() const { return model_tag_; }

    // Top-k by score descending, ties by definition_identifier then
    // concept_name ascending; k > |units| returns the full ranking.
    std::vector<SearchHit> search(const gateway::EmbeddingVector& query, std::size_t k) const;

    // Header line + two contiguous little-endian f32 blocks (concept
    // side then description side) + a .meta.jsonl sidecar of unit names.
    void save(const std::filesystem::path& path) const;
    static VectorIndex load(const std::filesystem::path& path);

private:
    std::vector<KnowledgeUnit> units_;
    Side side_;
    std::size_t dim_ = 0;
    std::string model_tag_;
};

// Approximate neighborhood-graph backend over the same units; trades
// exactness for sublinear scans on large KBs. Same search contract as
// VectorIndex. The base index must outlive the graph.
class GraphIndex {
public:
    explicit GraphIndex(const VectorIndex& base, std::size_t max_neighbors = 16,
                        std::size_t ef_construction = 64);

    std::vector<SearchHit> search(const gateway::EmbeddingVector& query, std::size_t k,
                                  std::size_t ef_search = 64) const;

private:
    const VectorIndex* base_;
    std::vector<std::vector<std::uint32_t>> neighbors_;
};

}  // namespace cramf::vindex
