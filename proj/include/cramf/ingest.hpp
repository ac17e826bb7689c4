#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cramf/kb.hpp"

namespace cramf::ingest {

/// One declaration record from a documentation export, any kind.
struct RawDeclaration {
    std::string name;        // full dotted identifier
    std::string kind;        // raw, e.g. "def", "theorem", "instance"
    std::string signature;   // pretty-printed declaration text
    std::string module_path;
    std::optional<std::string> doc_string;
    std::uint64_t source_line = 0;

    bool operator==(const RawDeclaration&) const = default;
};

struct IngestReport {
    std::size_t total_declarations = 0;
    std::size_t kept = 0;  // definitional kinds (def/class/structure)
    std::map<std::string, std::size_t> skipped_by_kind;
    std::size_t missing_doc = 0;  // kept declarations with no doc string
    std::size_t parse_errors = 0;

    std::string table() const;    // human-readable summary
    std::string to_json() const;  // structured summary file

    bool operator==(const IngestReport&) const = default;
};

struct ParsedExport {
    std::vector<RawDeclaration> declarations;  // sorted by (module_path, name)
    IngestReport report;
    std::string fingerprint;  // content hash over the parsed declarations
};

// Accepts a single .json/.jsonl file or a directory tree of them.
// A file is either {"name": <module>, "declarations": [...]} or a bare
// array of declaration objects; .jsonl holds one object per line.
// Malformed records count as parse errors and are skipped; files parse
// in parallel (jobs) but the merged output is order-normalized.
ParsedExport parse_export(const std::filesystem::path& path, int jobs = 1);

// Keeps exactly the kinds def/class/structure, order preserved.
std::vector<RawDeclaration> filter_definitional(std::vector<RawDeclaration> decls);

struct EntityBatch {
    std::vector<kb::Definition> definitions;
    std::vector<kb::Description> descriptions;
    // Identifiers seen more than once; the first declaration wins, except
    // that the longest available doc annotation is kept.
    std::vector<std::string> duplicate_identifiers;
};

// decls must already be filtered to definitional kinds. Declarations
// without a usable doc string get a pending placeholder whose annotation
// is the formal expression (back-translation replaces it later).
EntityBatch to_kb_entities(const std::vector<RawDeclaration>& decls);

struct IngestOutcome {
    kb::KnowledgeBase kb;
    IngestReport report;
    std::vector<std::string> duplicate_identifiers;
};

// parse → filter → entities → fresh version-1 KB (no concepts yet).
IngestOutcome build_kb(const std::filesystem::path& export_path, int jobs = 1);

}  // namespace cramf::ingest
