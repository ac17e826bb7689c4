#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cramf/common.hpp"

namespace cramf::kb {

// ── entity types ────────────────────────────────────────────────

enum class DeclKind { Def, Class, Structure };

std::string to_string(DeclKind kind);
DeclKind decl_kind_from_string(std::string_view s);  // throws ParseError
bool is_definitional_kind(std::string_view raw_kind);

/// Named abstract mathematical concept; the query-side anchor.
struct Concept {
    std::string id;           // artifact-assigned, content-addressed
    std::string name;
    std::string domain;       // e.g. "topology"; "unknown" when unstated
    std::string explanation;

    bool operator==(const Concept&) const = default;
};

/// Formal library definition.
struct Definition {
    std::string identifier;         // full dotted name, unique in a KB
    std::string formal_expression;  // pretty-printed declaration text
    std::string module_path;
    DeclKind kind = DeclKind::Def;

    bool operator==(const Definition&) const = default;
};

/// Natural-language annotation bound one-to-one to a Definition.
/// pending=true marks an ingest placeholder awaiting back-translation.
struct Description {
    std::string id;
    std::string definition_id;  // Definition.identifier
    std::string annotation;
    bool pending = false;

    bool operator==(const Description&) const = default;
};

/// One concept fanning out to the descriptions (and thus definitions)
/// it covers.
struct ConceptLink {
    std::string concept_id;
    std::vector<std::string> description_ids;  // sorted, unique

    bool operator==(const ConceptLink&) const = default;
};

struct KnowledgeBase {
    std::vector<Concept> concepts;
    std::vector<Definition> definitions;
    std::vector<Description> descriptions;
    std::vector<ConceptLink> links;
    std::uint64_t version = 0;
    std::string source_fingerprint;

    bool operator==(const KnowledgeBase&) const = default;
};

// Content-addressed ids, stable across re-ingests of unchanged sources.
std::string concept_id_for(std::string_view concept_name);
std::string description_id_for(std::string_view definition_identifier);

// ── validation ──────────────────────────────────────────────────

struct Violation {
    std::string code;     // e.g. "dangling-r2", "r2-multiplicity"
    std::string subject;  // offending id/identifier
    std::string message;

    auto operator<=>(const Violation&) const = default;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const { return violations.empty(); }
    std::string summary() const;
};

// Lists every dangling reference, duplicate definition identifier,
// definition with zero or multiple descriptions, and empty required
// field. Order-independent: output is sorted.
ValidationReport validate(const KnowledgeBase& kb);

class ValidationError : public CramfError {
public:
    ValidationError(std::string what, ValidationReport report)
        : CramfError(std::move(what)), report(std::move(report)) {}
    ValidationReport report;
};

// ── persistence ─────────────────────────────────────────────────
// Line-delimited self-describing JSON records; the canonical form
// sorts by id so round-trip equality is byte-checkable.

KnowledgeBase canonical(KnowledgeBase kb);
std::string serialize(const KnowledgeBase& kb);           // canonical bytes
KnowledgeBase deserialize(const std::string& text);       // parse only
void save(const KnowledgeBase& kb, const std::filesystem::path& path);
KnowledgeBase load(const std::filesystem::path& path);

// Newest-wins reconciliation of two snapshots of the same KB.
struct SnapshotChoice {
    KnowledgeBase kb;
    std::vector<std::string> warnings;
};
SnapshotChoice choose_newest(KnowledgeBase current, KnowledgeBase incoming);

// ── mutation ────────────────────────────────────────────────────

struct UpsertBatch {
    std::vector<Concept> concepts;
    std::vector<Definition> definitions;
    std::vector<Description> descriptions;
    std::vector<ConceptLink> links;
};

// Merge by id/identifier (replace-on-match), version incremented.
// Rejected atomically (ValidationError) if the result would not
// validate; the input KB is never modified.
KnowledgeBase upsert_entities(const KnowledgeBase& kb, const UpsertBatch& batch);

// ── lookup ──────────────────────────────────────────────────────
// Hash-indexed views over a KB that must outlive the Lookup.

class Lookup {
public:
    explicit Lookup(const KnowledgeBase& kb);

    const Concept* concept_by_id(std::string_view id) const;
    const Concept* concept_by_name(std::string_view name) const;
    const Definition* definition(std::string_view identifier) const;
    const Description* description_by_id(std::string_view id) const;
    const Description* description_of_definition(std::string_view identifier) const;
    const ConceptLink* link_of_concept(std::string_view concept_id) const;

private:
    template <typename T>
    using Map = std::unordered_map<std::string_view, const T*>;
    Map<Concept> concept_by_id_, concept_by_name_;
    Map<Definition> definition_;
    Map<Description> description_by_id_, description_by_definition_;
    Map<ConceptLink> link_by_concept_;
};

}  // namespace cramf::kb
