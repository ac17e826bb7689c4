#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cramf/gateway.hpp"
#include "cramf/kb.hpp"
#include "cramf/vindex.hpp"

namespace cramf::population {

// ── back-translation ────────────────────────────────────────────

struct BackTranslationCandidate {
    std::string text;
    // Cosine against the original annotation; absent when none exists.
    std::optional<double> similarity_to_annotation;
};

struct BackTranslationResult {
    std::vector<BackTranslationCandidate> candidates;  // request order
    std::size_t dropped = 0;  // replies still empty after one retry
};

// Asks the chat provider for n candidate descriptions of the definition
// (temperature kept above zero for diversity). Provider unavailability
// is rethrown with the definition identifier attached.
BackTranslationResult back_translate(gateway::Gateway& gw, const kb::Definition& def, int n = 3,
                                     double temperature = 0.7);

struct Selection {
    BackTranslationCandidate chosen;
    std::size_t chosen_index = 0;
    // True when no original annotation existed and the first candidate
    // was taken without the similarity check.
    bool annotation_fallback = false;
};

// Picks the candidate most aligned with the original annotation by
// embedding cosine; ties go to the lowest index.
Selection select_consistent(gateway::Gateway& gw, std::vector<BackTranslationCandidate> candidates,
                            const std::optional<std::string>& original_annotation);

// Extracts (name, domain, explanation) from a fielded chat reply, with
// one reprompt on a malformed reply. Two failures → ExtractionError.
kb::Concept extract_concept(gateway::Gateway& gw, const std::string& description);

// ── whole-KB population ─────────────────────────────────────────

struct SkipRecord {
    std::string definition_identifier;
    std::string stage;  // "back_translate" or "extract_concept"
    std::string reason;

    bool operator==(const SkipRecord&) const = default;
};

struct PopulateOptions {
    int candidates = 3;
    double temperature = 0.7;
    int jobs = 4;
    std::size_t checkpoint_every = 100;
    double success_ratio = 0.9;  // completed/total required to succeed
    // When set, the KB (and a .skips.json sidecar) is flushed here after
    // every batch so an interrupted run resumes without repeat calls.
    std::filesystem::path checkpoint_path;
    // Called between batches; returning false stops the run cleanly.
    std::function<bool(std::size_t done, std::size_t total)> progress;
};

struct PopulateResult {
    kb::KnowledgeBase kb;
    std::vector<SkipRecord> skips;
    std::size_t total_definitions = 0;
    std::size_t completed = 0;             // definitions complete afterwards
    std::size_t back_translation_drops = 0;
    bool interrupted = false;

    std::string skips_json() const;
};

// Raised when fewer than success_ratio of the definitions completed;
// carries the partial result so callers can still checkpoint it.
class PopulateFailure : public CramfError {
public:
    PopulateFailure(std::string what, PopulateResult partial)
        : CramfError(std::move(what)), partial(std::move(partial)) {}
    PopulateResult partial;
};

// Completes every definition: pending placeholder descriptions are
// replaced by a selected back-translation, every final description runs
// concept extraction, and concepts with identical names merge while
// accumulating links. Already-complete definitions cost no provider
// calls, so re-running on a populated KB is the identity.
PopulateResult populate(gateway::Gateway& gw, const kb::KnowledgeBase& input,
                        const PopulateOptions& options = {});

// ── encoding ────────────────────────────────────────────────────

struct EncodeResult {
    std::vector<vindex::KnowledgeUnit> units;  // sorted by (concept, identifier)
    std::vector<SkipRecord> skips;
};

// One knowledge unit per (link, description) pair; vectors come from
// one batched embed call and are unit-normalized.
EncodeResult encode_units(gateway::Gateway& gw, const kb::KnowledgeBase& kb);

}  // namespace cramf::population
