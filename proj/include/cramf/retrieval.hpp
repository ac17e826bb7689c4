#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cramf/gateway.hpp"
#include "cramf/kb.hpp"
#include "cramf/vindex.hpp"

namespace cramf::retrieval {

// ── query-side types ────────────────────────────────────────────

enum class Classification { Explicit, Implicit };

std::string to_string(Classification c);

// A problem statement after classification. Implicitly-stated problems
// get rewritten into explicit mathematical language first; the rewrite
// is what the rest of the pipeline sees.
struct ProblemStatement {
    std::string text;
    std::optional<std::string> rewritten_text;  // present ⇒ Implicit
    Classification classification = Classification::Explicit;

    const std::string& effective_text() const {
        return rewritten_text ? *rewritten_text : text;
    }
};

// One extracted concept enhanced for retrieval: the name concatenated
// with its terminological interpretation, plus exact-match keywords.
struct AugmentedQuery {
    std::string concept_name;
    std::string interpretation;
    std::string query_text;  // concept_name + ": " + interpretation
    std::vector<std::string> keywords;
};

// ── candidates ──────────────────────────────────────────────────

struct Candidate {
    std::string definition_identifier;
    bool from_keyword = false;
    bool from_semantic = false;

    bool operator==(const Candidate&) const = default;
};

// Deduplicated by identifier, kept sorted by identifier so merges and
// downstream reranker input order are deterministic.
struct CandidateSet {
    std::vector<Candidate> entries;

    bool operator==(const CandidateSet&) const = default;
};

CandidateSet merge_candidates(const CandidateSet& a, const CandidateSet& b);

// ── grounding context ───────────────────────────────────────────

struct ContextEntry {
    kb::Definition definition;
    kb::Description description;
    double score = 0.0;
};

struct GroundingContext {
    std::vector<ContextEntry> entries;  // scores non-increasing, ties by identifier
    std::string rendered_prompt;        // empty when entries is empty
    bool degraded = false;              // reranker fell back to embedding cosine
    std::vector<std::string> warnings;
};

// ── knobs ───────────────────────────────────────────────────────

struct RetrievalOptions {
    std::size_t max_concepts = 5;   // query concepts kept per statement
    std::size_t max_keywords = 8;   // exact-match keywords per concept
    std::size_t recall_top = 10;    // semantic channel first-stage recall
    std::size_t rerank_top = 5;     // concepts kept after the first rerank
    std::size_t context_top = 3;    // definitions in the final context
    int jobs = 4;                   // concurrent per-concept sub-pipelines
};

// ── pipeline stages ─────────────────────────────────────────────

// Labels the problem explicit/implicit; implicit problems get a second
// prompt that models and rewrites them. Two unparseable classifier
// replies default to explicit (no rewrite) with a warning.
ProblemStatement classify_and_rewrite(gateway::Gateway& gw, const std::string& text,
                                      std::vector<std::string>* warnings = nullptr);

// 1..max_concepts core concept names from a fielded reply, deduplicated
// in reply order; one reprompt, then ExtractionError.
std::vector<std::string> extract_query_concepts(gateway::Gateway& gw,
                                                const ProblemStatement& statement,
                                                std::size_t max_concepts = 5,
                                                std::vector<std::string>* warnings = nullptr);

// Terminological interpretation of one concept in the context of the
// statement. Two empty replies fall back to the bare concept name.
std::string interpret_concept(gateway::Gateway& gw, const std::string& concept_name,
                              const ProblemStatement& statement,
                              std::vector<std::string>* warnings = nullptr);

// 1..max_keywords exact-match keywords for one concept; generation
// failure degrades to an empty list with a warning.
std::vector<std::string> generate_keywords(gateway::Gateway& gw, const std::string& concept_name,
                                           std::size_t max_keywords = 8,
                                           std::vector<std::string>* warnings = nullptr);

// Splits a Lean-style identifier at dots, underscores, and lower-to-
// upper case transitions: "Filter.fderivWithin_le" → ["Filter",
// "fderiv", "Within", "le"].
std::vector<std::string> tokenize_identifier(const std::string& identifier);

// Whole-token keyword match: the keyword case-insensitively equals a
// contiguous token run, where the run's first token may shed one
// leading character (Mathlib prefixes single-letter markers, so
// "deriv" should hit "fderivWithin" but "Ring" must not hit
// "Ordering").
bool keyword_matches_identifier(const std::string& keyword, const std::string& identifier);

// Exact-match channel: generated keywords against every definition
// identifier; provenance flag keyword.
CandidateSet keyword_channel(const std::vector<std::string>& keywords,
                             const kb::KnowledgeBase& kb);

// Meaning-match channel: embeds query_text, recalls the recall_top
// nearest concept units, reranks the distinct concept explanations,
// keeps rerank_top concepts and collects every definition they link
// to; provenance flag semantic.
CandidateSet semantic_channel(gateway::Gateway& gw, const AugmentedQuery& query,
                              const vindex::VectorIndex& index, const kb::KnowledgeBase& kb,
                              const RetrievalOptions& options = {});

// Scores every candidate's annotation against the query interpretation
// and keeps the context_top best as the grounding context. A reranker
// failure falls back to embedding cosine and flags the context
// degraded.
GroundingContext final_rerank(gateway::Gateway& gw, const AugmentedQuery& query,
                              const CandidateSet& candidates, const kb::KnowledgeBase& kb,
                              const RetrievalOptions& options = {});

// ── end-to-end composition ──────────────────────────────────────

struct RetrieveResult {
    ProblemStatement statement;
    std::vector<AugmentedQuery> queries;  // one per extracted concept
    CandidateSet candidates;              // union across concepts
    GroundingContext context;
};

// classify/rewrite → concept extraction → per-concept channel pair →
// union → final rerank. Deterministic given deterministic providers.
RetrieveResult retrieve(gateway::Gateway& gw, const std::string& statement_text,
                        const kb::KnowledgeBase& kb, const vindex::VectorIndex& index,
                        const RetrievalOptions& options = {});

// ── lexical baseline ────────────────────────────────────────────

// Okapi BM25 (k1 = 1.2, b = 0.75) over annotation + identifier
// documents, raw statement as the query. Zero-score documents never
// enter the context.
GroundingContext baseline_bm25(const std::string& statement_text, const kb::KnowledgeBase& kb,
                               const gateway::TemplateCatalog& templates, std::size_t k = 3);

// Renders the grounding prompt for scored entries via the
// "grounding_context" template ({{definitions}} variable).
std::string render_grounding(const gateway::TemplateCatalog& templates,
                             const std::vector<ContextEntry>& entries);

}  // namespace cramf::retrieval
