#include "cramf/kb.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cramf::kb {

using nlohmann::json;

std::string to_string(DeclKind kind) {
    switch (kind) {
        case DeclKind::Def: return "def";
        case DeclKind::Class: return "class";
        case DeclKind::Structure: return "structure";
    }
    return "def";
}

DeclKind decl_kind_from_string(std::string_view s) {
    if (s == "def") return DeclKind::Def;
    if (s == "class") return DeclKind::Class;
    if (s == "structure") return DeclKind::Structure;
    throw ParseError("unknown declaration kind: " + std::string(s));
}

bool is_definitional_kind(std::string_view raw_kind) {
    return raw_kind == "def" || raw_kind == "class" || raw_kind == "structure";
}

std::string concept_id_for(std::string_view concept_name) {
    return content_hash("concept|" + std::string(concept_name));
}

std::string description_id_for(std::string_view definition_identifier) {
    return content_hash("description|" + std::string(definition_identifier));
}

// ── validation ──────────────────────────────────────────────────

std::string ValidationReport::summary() const {
    if (violations.empty()) return "0 violations";
    std::ostringstream ss;
    ss << violations.size() << " violation" << (violations.size() == 1 ? "" : "s");
    for (const auto& v : violations) ss << "\n  [" << v.code << "] " << v.subject << ": " << v.message;
    return ss.str();
}

ValidationReport validate(const KnowledgeBase& kb) {
    ValidationReport report;
    auto add = [&](std::string code, std::string subject, std::string message) {
        report.violations.push_back({std::move(code), std::move(subject), std::move(message)});
    };

    std::set<std::string_view> concept_ids, definition_ids, description_ids;

    for (const auto& c : kb.concepts) {
        if (is_blank(c.id)) add("empty-field", c.name, "concept id is empty");
        else if (!concept_ids.insert(c.id).second)
            add("duplicate-concept", c.id, "duplicate concept id");
        if (is_blank(c.name)) add("empty-field", c.id, "concept name is empty");
        if (is_blank(c.explanation)) add("empty-field", c.id, "concept explanation is empty");
    }

    for (const auto& d : kb.definitions) {
        if (is_blank(d.identifier)) add("empty-field", d.module_path, "definition identifier is empty");
        else if (!definition_ids.insert(d.identifier).second)
            add("duplicate-definition", d.identifier, "duplicate definition identifier");
    }

    // R2: every description points at exactly one existing definition,
    // and no definition carries more than one description.
    std::map<std::string_view, std::size_t> descriptions_per_definition;
    for (const auto& d : kb.descriptions) {
        if (is_blank(d.id)) add("empty-field", d.definition_id, "description id is empty");
        else if (!description_ids.insert(d.id).second)
            add("duplicate-description", d.id, "duplicate description id");
        if (is_blank(d.annotation)) add("empty-field", d.id, "description annotation is empty");
        if (!definition_ids.contains(d.definition_id))
            add("dangling-r2", d.id, "description references unknown definition '" + d.definition_id + "'");
        else
            ++descriptions_per_definition[d.definition_id];
    }
    for (const auto& d : kb.definitions) {
        if (is_blank(d.identifier)) continue;
        auto it = descriptions_per_definition.find(d.identifier);
        std::size_t n = it == descriptions_per_definition.end() ? 0 : it->second;
        if (n == 0)
            add("definition-without-description", d.identifier, "definition has no description");
        else if (n > 1)
            add("r2-multiplicity", d.identifier,
                std::to_string(n) + " descriptions reference the same definition");
    }

    // R1: links resolve and are non-empty.
    std::set<std::string_view> linked_concepts;
    for (const auto& l : kb.links) {
        if (!concept_ids.contains(l.concept_id))
            add("dangling-link-concept", l.concept_id, "link references unknown concept");
        else if (!linked_concepts.insert(l.concept_id).second)
            add("duplicate-link", l.concept_id, "multiple links for the same concept");
        if (l.description_ids.empty())
            add("empty-link", l.concept_id, "link has no descriptions");
        for (const auto& did : l.description_ids)
            if (!description_ids.contains(did))
                add("dangling-link-description", l.concept_id,
                    "link references unknown description '" + did + "'");
    }

    std::sort(report.violations.begin(), report.violations.end());
    return report;
}

// ── canonical form & serialization ──────────────────────────────

KnowledgeBase canonical(KnowledgeBase kb) {
    std::sort(kb.concepts.begin(), kb.concepts.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    std::sort(kb.definitions.begin(), kb.definitions.end(),
              [](const auto& a, const auto& b) { return a.identifier < b.identifier; });
    std::sort(kb.descriptions.begin(), kb.descriptions.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    std::sort(kb.links.begin(), kb.links.end(),
              [](const auto& a, const auto& b) { return a.concept_id < b.concept_id; });
    for (auto& l : kb.links) {
        std::sort(l.description_ids.begin(), l.description_ids.end());
        l.description_ids.erase(std::unique(l.description_ids.begin(), l.description_ids.end()),
                                l.description_ids.end());
    }
    return kb;
}

std::string serialize(const KnowledgeBase& raw) {
    KnowledgeBase kb = canonical(raw);
    std::ostringstream out;
    out << json{{"record", "header"},
                {"version", kb.version},
                {"source_fingerprint", kb.source_fingerprint}}
               .dump()
        << '\n';
    for (const auto& c : kb.concepts)
        out << json{{"record", "concept"},
                    {"id", c.id},
                    {"name", c.name},
                    {"domain", c.domain},
                    {"explanation", c.explanation}}
                   .dump()
            << '\n';
    for (const auto& d : kb.definitions)
        out << json{{"record", "definition"},
                    {"identifier", d.identifier},
                    {"formal_expression", d.formal_expression},
                    {"module_path", d.module_path},
                    {"kind", to_string(d.kind)}}
                   .dump()
            << '\n';
    for (const auto& d : kb.descriptions)
        out << json{{"record", "description"},
                    {"id", d.id},
                    {"definition_id", d.definition_id},
                    {"annotation", d.annotation},
                    {"pending", d.pending}}
                   .dump()
            << '\n';
    for (const auto& l : kb.links)
        out << json{{"record", "link"},
                    {"concept_id", l.concept_id},
                    {"description_ids", l.description_ids}}
                   .dump()
            << '\n';
    return out.str();
}

namespace {

std::string require_string(const json& j, const char* field, std::size_t line) {
    auto it = j.find(field);
    if (it == j.end() || !it->is_string())
        throw ParseError("line " + std::to_string(line) + ": missing or non-string field '" +
                         field + "'");
    return it->get<std::string>();
}

}  // namespace

KnowledgeBase deserialize(const std::string& text) {
    KnowledgeBase kb;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object())
            throw ParseError("line " + std::to_string(line_no) + ": expected a JSON object record");
        std::string record = require_string(j, "record", line_no);
        if (record == "header") {
            if (saw_header)
                throw ParseError("line " + std::to_string(line_no) + ": duplicate header record");
            if (line_no != 1)
                throw ParseError("line " + std::to_string(line_no) + ": header must be the first record");
            saw_header = true;
            if (!j.contains("version") || !j["version"].is_number_unsigned())
                throw ParseError("line 1: header is missing a non-negative 'version'");
            kb.version = j["version"].get<std::uint64_t>();
            kb.source_fingerprint = require_string(j, "source_fingerprint", line_no);
        } else if (record == "concept") {
            kb.concepts.push_back({require_string(j, "id", line_no),
                                   require_string(j, "name", line_no),
                                   require_string(j, "domain", line_no),
                                   require_string(j, "explanation", line_no)});
        } else if (record == "definition") {
            Definition d;
            d.identifier = require_string(j, "identifier", line_no);
            d.formal_expression = require_string(j, "formal_expression", line_no);
            d.module_path = require_string(j, "module_path", line_no);
            try {
                d.kind = decl_kind_from_string(require_string(j, "kind", line_no));
            } catch (const ParseError& e) {
                throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
            }
            kb.definitions.push_back(std::move(d));
        } else if (record == "description") {
            Description d;
            d.id = require_string(j, "id", line_no);
            d.definition_id = require_string(j, "definition_id", line_no);
            d.annotation = require_string(j, "annotation", line_no);
            if (!j.contains("pending") || !j["pending"].is_boolean())
                throw ParseError("line " + std::to_string(line_no) +
                                 ": missing or non-boolean field 'pending'");
            d.pending = j["pending"].get<bool>();
            kb.descriptions.push_back(std::move(d));
        } else if (record == "link") {
            ConceptLink l;
            l.concept_id = require_string(j, "concept_id", line_no);
            auto it = j.find("description_ids");
            if (it == j.end() || !it->is_array())
                throw ParseError("line " + std::to_string(line_no) +
                                 ": missing or non-array field 'description_ids'");
            for (const auto& e : *it) {
                if (!e.is_string())
                    throw ParseError("line " + std::to_string(line_no) +
                                     ": non-string entry in 'description_ids'");
                l.description_ids.push_back(e.get<std::string>());
            }
            kb.links.push_back(std::move(l));
        } else {
            throw ParseError("line " + std::to_string(line_no) + ": unknown record kind '" +
                             record + "'");
        }
    }
    if (!saw_header) throw ParseError("line 1: expected header record");
    return kb;
}

void save(const KnowledgeBase& kb, const std::filesystem::path& path) {
    ValidationReport report = validate(kb);
    if (!report.ok())
        throw ValidationError("refusing to save an invalid knowledge base: " + report.summary(),
                              std::move(report));
    write_file_atomic(path, serialize(kb));
}

KnowledgeBase load(const std::filesystem::path& path) {
    KnowledgeBase kb = deserialize(read_file(path));
    ValidationReport report = validate(kb);
    if (!report.ok())
        throw ValidationError("loaded knowledge base is invalid (" + path.string() +
                                  "): " + report.summary(),
                              std::move(report));
    return canonical(std::move(kb));
}

SnapshotChoice choose_newest(KnowledgeBase current, KnowledgeBase incoming) {
    SnapshotChoice choice;
    if (incoming.version < current.version) {
        choice.warnings.push_back("incoming snapshot version " + std::to_string(incoming.version) +
                                  " is older than current version " +
                                  std::to_string(current.version) + "; keeping current");
        choice.kb = std::move(current);
    } else {
        choice.kb = std::move(incoming);
    }
    return choice;
}

// ── mutation ────────────────────────────────────────────────────

namespace {

template <typename T, typename Key>
void merge_by_key(std::vector<T>& into, const std::vector<T>& add, Key key) {
    for (const auto& item : add) {
        auto it = std::find_if(into.begin(), into.end(),
                               [&](const T& x) { return key(x) == key(item); });
        if (it != into.end())
            *it = item;
        else
            into.push_back(item);
    }
}

}  // namespace

KnowledgeBase upsert_entities(const KnowledgeBase& kb, const UpsertBatch& batch) {
    KnowledgeBase out = kb;
    merge_by_key(out.concepts, batch.concepts, [](const Concept& c) -> const std::string& { return c.id; });
    merge_by_key(out.definitions, batch.definitions,
                 [](const Definition& d) -> const std::string& { return d.identifier; });
    merge_by_key(out.descriptions, batch.descriptions,
                 [](const Description& d) -> const std::string& { return d.id; });
    merge_by_key(out.links, batch.links,
                 [](const ConceptLink& l) -> const std::string& { return l.concept_id; });
    out.version = kb.version + 1;
    out = canonical(std::move(out));
    ValidationReport report = validate(out);
    if (!report.ok())
        throw ValidationError("upsert rejected: " + report.summary(), std::move(report));
    return out;
}

// ── lookup ──────────────────────────────────────────────────────

Lookup::Lookup(const KnowledgeBase& kb) {
    for (const auto& c : kb.concepts) {
        concept_by_id_.emplace(c.id, &c);
        concept_by_name_.emplace(c.name, &c);
    }
    for (const auto& d : kb.definitions) definition_.emplace(d.identifier, &d);
    for (const auto& d : kb.descriptions) {
        description_by_id_.emplace(d.id, &d);
        description_by_definition_.emplace(d.definition_id, &d);
    }
    for (const auto& l : kb.links) link_by_concept_.emplace(l.concept_id, &l);
}

namespace {
template <typename T>
const T* find_in(const std::unordered_map<std::string_view, const T*>& m, std::string_view k) {
    auto it = m.find(k);
    return it == m.end() ? nullptr : it->second;
}
}  // namespace

const Concept* Lookup::concept_by_id(std::string_view id) const { return find_in(concept_by_id_, id); }
const Concept* Lookup::concept_by_name(std::string_view name) const { return find_in(concept_by_name_, name); }
const Definition* Lookup::definition(std::string_view identifier) const { return find_in(definition_, identifier); }
const Description* Lookup::description_by_id(std::string_view id) const { return find_in(description_by_id_, id); }
const Description* Lookup::description_of_definition(std::string_view identifier) const {
    return find_in(description_by_definition_, identifier);
}
const ConceptLink* Lookup::link_of_concept(std::string_view concept_id) const {
    return find_in(link_by_concept_, concept_id);
}

}  // namespace cramf::kb
