#include "cramf/ingest.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "cramf/common.hpp"

namespace cramf::ingest {

using nlohmann::json;
namespace fs = std::filesystem;

std::string IngestReport::table() const {
    std::ostringstream out;
    out << "declarations  " << total_declarations << '\n'
        << "kept          " << kept << '\n'
        << "missing doc   " << missing_doc << '\n'
        << "parse errors  " << parse_errors << '\n';
    for (const auto& [kind, count] : skipped_by_kind)
        out << "skipped " << kind << (kind.size() < 6 ? std::string(6 - kind.size(), ' ') : " ")
            << count << '\n';
    return out.str();
}

std::string IngestReport::to_json() const {
    json j{{"total_declarations", total_declarations},
           {"kept", kept},
           {"missing_doc", missing_doc},
           {"parse_errors", parse_errors},
           {"skipped_by_kind", skipped_by_kind}};
    return j.dump(2) + "\n";
}

namespace {

struct FileResult {
    std::vector<RawDeclaration> declarations;
    std::size_t total = 0;
    std::size_t parse_errors = 0;
};

std::string module_from_relative_path(fs::path rel) {
    rel.replace_extension();
    std::string out;
    for (const auto& part : rel) {
        if (!out.empty()) out += '.';
        out += part.string();
    }
    return out;
}

// One declaration object from an export file. Returns nullopt for a
// malformed record (missing/empty name or kind, bad line number).
std::optional<RawDeclaration> parse_declaration(const json& j, const std::string& file_module) {
    if (!j.is_object()) return std::nullopt;
    RawDeclaration d;

    auto str = [&](const char* field) -> std::optional<std::string> {
        auto it = j.find(field);
        if (it == j.end() || !it->is_string()) return std::nullopt;
        return it->get<std::string>();
    };

    auto name = str("name");
    auto kind = str("kind");
    if (!name || !kind || is_blank(*name) || is_blank(*kind)) return std::nullopt;
    d.name = trim(*name);
    d.kind = trim(*kind);

    if (auto sig = str("signature")) {
        d.signature = trim(*sig);
    } else if (auto it = j.find("args"); it != j.end() && it->is_array()) {
        std::string joined;
        for (const auto& a : *it) {
            if (!a.is_string()) return std::nullopt;
            if (!joined.empty()) joined += ' ';
            joined += a.get<std::string>();
        }
        d.signature = trim(joined);
    } else if (auto type = str("type")) {
        d.signature = trim(*type);
    }

    if (auto doc = str("doc"); doc && !is_blank(*doc)) d.doc_string = trim(*doc);

    if (auto it = j.find("line"); it != j.end()) {
        if (!it->is_number_integer() || it->get<std::int64_t>() < 0) return std::nullopt;
        d.source_line = it->get<std::uint64_t>();
    }

    if (auto mod = str("module"); mod && !is_blank(*mod))
        d.module_path = trim(*mod);
    else
        d.module_path = file_module;
    if (d.module_path.empty()) return std::nullopt;
    return d;
}

void parse_declaration_list(const json& list, const std::string& file_module, FileResult& out) {
    for (const auto& entry : list) {
        ++out.total;
        if (auto d = parse_declaration(entry, file_module))
            out.declarations.push_back(std::move(*d));
        else
            ++out.parse_errors;
    }
}

FileResult parse_file(const fs::path& file, const std::string& derived_module) {
    FileResult out;
    std::string text = read_file(file);

    if (file.extension() == ".jsonl") {
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (is_blank(line)) continue;
            ++out.total;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                ++out.parse_errors;
                continue;
            }
            if (auto d = parse_declaration(j, derived_module))
                out.declarations.push_back(std::move(*d));
            else
                ++out.parse_errors;
        }
        return out;
    }

    json root = json::parse(text, nullptr, false);
    if (root.is_discarded()) {
        // Whole file unusable: count it as one unreadable record.
        out.total = 1;
        out.parse_errors = 1;
        return out;
    }
    if (root.is_array()) {
        parse_declaration_list(root, derived_module, out);
        return out;
    }
    if (root.is_object()) {
        std::string file_module = derived_module;
        for (const char* field : {"module", "name"}) {
            auto it = root.find(field);
            if (it != root.end() && it->is_string() && !is_blank(it->get<std::string>())) {
                file_module = trim(it->get<std::string>());
                break;
            }
        }
        auto decls = root.find("declarations");
        if (decls == root.end() || !decls->is_array()) {
            out.total = 1;
            out.parse_errors = 1;
            return out;
        }
        parse_declaration_list(*decls, file_module, out);
        return out;
    }
    out.total = 1;
    out.parse_errors = 1;
    return out;
}

bool is_export_file(const fs::path& p) {
    return p.extension() == ".json" || p.extension() == ".jsonl";
}

std::string fingerprint_of(const std::vector<RawDeclaration>& decls) {
    std::uint64_t h = fnv1a("export");
    for (const auto& d : decls) {
        h = fnv1a(d.name, h);
        h = fnv1a("|", h);
        h = fnv1a(d.kind, h);
        h = fnv1a("|", h);
        h = fnv1a(d.signature, h);
        h = fnv1a("|", h);
        h = fnv1a(d.module_path, h);
        h = fnv1a("|", h);
        h = fnv1a(d.doc_string.value_or(""), h);
        h = fnv1a("|" + std::to_string(d.source_line) + "\n", h);
    }
    return hex64(h);
}

}  // namespace

ParsedExport parse_export(const fs::path& path, int jobs) {
    std::error_code ec;
    auto status = fs::status(path, ec);
    if (ec || !fs::exists(status)) throw IoError("export path does not exist: " + path.string());

    // (file, module name derived from the relative path)
    std::vector<std::pair<fs::path, std::string>> files;
    if (fs::is_directory(status)) {
        for (auto it = fs::recursive_directory_iterator(path, ec);
             !ec && it != fs::recursive_directory_iterator(); ++it) {
            if (it->is_regular_file() && is_export_file(it->path()))
                files.emplace_back(it->path(),
                                   module_from_relative_path(fs::relative(it->path(), path)));
        }
        if (ec) throw IoError("cannot walk export directory " + path.string() + ": " + ec.message());
    } else if (fs::is_regular_file(status)) {
        if (!is_export_file(path))
            throw InputError("unsupported export file type: " + path.string());
        files.emplace_back(path, module_from_relative_path(path.filename()));
    } else {
        throw IoError("export path is neither file nor directory: " + path.string());
    }
    std::sort(files.begin(), files.end());

    auto results = parallel_map(
        files, [](const auto& f) { return parse_file(f.first, f.second); }, jobs);

    ParsedExport out;
    for (auto& r : results) {
        out.report.total_declarations += r.total;
        out.report.parse_errors += r.parse_errors;
        std::move(r.declarations.begin(), r.declarations.end(),
                  std::back_inserter(out.declarations));
    }
    if (out.declarations.empty())
        throw InputError("empty export: no parsable declaration records under " + path.string());

    std::sort(out.declarations.begin(), out.declarations.end(),
              [](const RawDeclaration& a, const RawDeclaration& b) {
                  return std::tie(a.module_path, a.name, a.source_line, a.kind) <
                         std::tie(b.module_path, b.name, b.source_line, b.kind);
              });

    for (const auto& d : out.declarations) {
        if (kb::is_definitional_kind(d.kind)) {
            ++out.report.kept;
            if (!d.doc_string) ++out.report.missing_doc;
        } else {
            ++out.report.skipped_by_kind[d.kind];
        }
    }
    out.fingerprint = fingerprint_of(out.declarations);
    return out;
}

std::vector<RawDeclaration> filter_definitional(std::vector<RawDeclaration> decls) {
    std::erase_if(decls, [](const RawDeclaration& d) { return !kb::is_definitional_kind(d.kind); });
    return decls;
}

EntityBatch to_kb_entities(const std::vector<RawDeclaration>& decls) {
    EntityBatch out;
    // identifier -> index into out.definitions (keep-first on duplicates)
    std::map<std::string_view, std::size_t> seen;
    std::vector<std::optional<std::string>> best_doc;  // longest doc per kept definition

    for (const auto& d : decls) {
        auto it = seen.find(d.name);
        if (it == seen.end()) {
            seen.emplace(d.name, out.definitions.size());
            out.definitions.push_back({d.name, d.signature, d.module_path,
                                       kb::decl_kind_from_string(d.kind)});
            best_doc.push_back(d.doc_string);
        } else {
            out.duplicate_identifiers.push_back(d.name);
            // First declaration wins, but the longest annotation is kept.
            auto& doc = best_doc[it->second];
            if (d.doc_string && (!doc || d.doc_string->size() > doc->size()))
                doc = d.doc_string;
        }
    }

    for (std::size_t i = 0; i < out.definitions.size(); ++i) {
        const auto& def = out.definitions[i];
        kb::Description desc;
        desc.id = kb::description_id_for(def.identifier);
        desc.definition_id = def.identifier;
        if (best_doc[i]) {
            desc.annotation = *best_doc[i];
            desc.pending = false;
        } else {
            desc.annotation =
                def.formal_expression.empty() ? def.identifier : def.formal_expression;
            desc.pending = true;
        }
        out.descriptions.push_back(std::move(desc));
    }
    return out;
}

IngestOutcome build_kb(const fs::path& export_path, int jobs) {
    ParsedExport parsed = parse_export(export_path, jobs);
    EntityBatch entities = to_kb_entities(filter_definitional(std::move(parsed.declarations)));

    IngestOutcome out;
    out.report = parsed.report;
    out.duplicate_identifiers = std::move(entities.duplicate_identifiers);
    out.kb.definitions = std::move(entities.definitions);
    out.kb.descriptions = std::move(entities.descriptions);
    out.kb.version = 1;
    out.kb.source_fingerprint = parsed.fingerprint;
    out.kb = kb::canonical(std::move(out.kb));
    return out;
}

}  // namespace cramf::ingest
