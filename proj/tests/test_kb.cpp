#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "cramf/kb.hpp"

using namespace cramf;
using namespace cramf::kb;
namespace fs = std::filesystem;

namespace {

Concept make_concept(const std::string& name, const std::string& domain = "topology") {
    return {concept_id_for(name), name, domain, "explanation of " + name};
}

Definition make_definition(const std::string& identifier) {
    return {identifier, "def " + identifier + " : Prop", "Mathlib.Topology.Basic", DeclKind::Def};
}

Description make_description(const std::string& definition_identifier, bool pending = false) {
    return {description_id_for(definition_identifier), definition_identifier,
            "annotation for " + definition_identifier, pending};
}

// Small valid KB: two concepts, three definitions, full R1/R2 wiring.
KnowledgeBase sample_kb() {
    KnowledgeBase kb;
    kb.concepts = {make_concept("neighborhood"), make_concept("open set")};
    kb.definitions = {make_definition("nhds"), make_definition("Metric.ball"),
                      make_definition("IsOpen")};
    kb.descriptions = {make_description("nhds"), make_description("Metric.ball"),
                       make_description("IsOpen")};
    kb.links = {{concept_id_for("neighborhood"),
                 {description_id_for("nhds"), description_id_for("Metric.ball")}},
                {concept_id_for("open set"), {description_id_for("IsOpen")}}};
    kb.version = 3;
    kb.source_fingerprint = "feedfacefeedface";
    return kb;
}

std::size_t count_code(const ValidationReport& r, std::string_view code) {
    return static_cast<std::size_t>(
        std::count_if(r.violations.begin(), r.violations.end(),
                      [&](const Violation& v) { return v.code == code; }));
}

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "cramf-kb-test";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("content-addressed ids are deterministic and distinct per entity kind") {
    CHECK(concept_id_for("neighborhood") == concept_id_for("neighborhood"));
    CHECK(concept_id_for("neighborhood") != concept_id_for("open set"));
    // Same seed string through different tags must not collide.
    CHECK(concept_id_for("x") != description_id_for("x"));
    CHECK(concept_id_for("x").size() == 16);
}

TEST_CASE("definitional kind filter accepts exactly def/class/structure") {
    CHECK(is_definitional_kind("def"));
    CHECK(is_definitional_kind("class"));
    CHECK(is_definitional_kind("structure"));
    CHECK_FALSE(is_definitional_kind("theorem"));
    CHECK_FALSE(is_definitional_kind("lemma"));
    CHECK_FALSE(is_definitional_kind("instance"));
    CHECK_FALSE(is_definitional_kind(""));
    CHECK_FALSE(is_definitional_kind("Def"));
}

TEST_CASE("decl kind round-trips through its string form") {
    for (DeclKind k : {DeclKind::Def, DeclKind::Class, DeclKind::Structure})
        CHECK(decl_kind_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(decl_kind_from_string("axiom"), ParseError);
}

TEST_CASE("empty KB validates clean") {
    KnowledgeBase kb;
    auto report = validate(kb);
    CHECK(report.ok());
    CHECK(report.violations.empty());
    CHECK(report.summary() == "0 violations");
}

TEST_CASE("well-formed KB validates clean") {
    auto report = validate(sample_kb());
    CHECK(report.ok());
}

TEST_CASE("description referencing a missing definition is a dangling-r2 violation") {
    auto kb = sample_kb();
    kb.descriptions.push_back(make_description("Filter.Tendsto"));
    auto report = validate(kb);
    REQUIRE_FALSE(report.ok());
    CHECK(count_code(report, "dangling-r2") == 1);
    // The message names the missing definition so the operator can act on it.
    auto it = std::find_if(report.violations.begin(), report.violations.end(),
                           [](const Violation& v) { return v.code == "dangling-r2"; });
    REQUIRE(it != report.violations.end());
    CHECK(it->message.find("Filter.Tendsto") != std::string::npos);
}

TEST_CASE("two descriptions on one definition produce exactly one multiplicity violation") {
    auto kb = sample_kb();
    Description extra = make_description("nhds");
    extra.id = "0000000000000001";  // distinct id, same target definition
    kb.descriptions.push_back(extra);
    auto report = validate(kb);
    REQUIRE_FALSE(report.ok());
    // One violation per offending definition, not per extra description.
    CHECK(count_code(report, "r2-multiplicity") == 1);
    CHECK(report.violations.size() == 1);
}

TEST_CASE("three descriptions on one definition still produce one multiplicity violation") {
    auto kb = sample_kb();
    Description a = make_description("nhds");
    a.id = "0000000000000001";
    Description b = make_description("nhds");
    b.id = "0000000000000002";
    kb.descriptions.push_back(a);
    kb.descriptions.push_back(b);
    auto report = validate(kb);
    CHECK(count_code(report, "r2-multiplicity") == 1);
}

TEST_CASE("definition with no description is flagged") {
    auto kb = sample_kb();
    kb.definitions.push_back(make_definition("Interior"));
    auto report = validate(kb);
    CHECK(count_code(report, "definition-without-description") == 1);
}

TEST_CASE("pending placeholder descriptions are not violations") {
    auto kb = sample_kb();
    kb.definitions.push_back(make_definition("Interior"));
    kb.descriptions.push_back(make_description("Interior", /*pending=*/true));
    CHECK(validate(kb).ok());
}

TEST_CASE("duplicate identifiers and ids are flagged") {
    auto kb = sample_kb();
    kb.definitions.push_back(kb.definitions.front());
    kb.concepts.push_back(kb.concepts.front());
    auto report = validate(kb);
    CHECK(count_code(report, "duplicate-definition") == 1);
    CHECK(count_code(report, "duplicate-concept") == 1);
}

TEST_CASE("links must resolve on both ends and be non-empty") {
    auto kb = sample_kb();
    kb.links.push_back({concept_id_for("compactness"), {description_id_for("nhds")}});
    kb.links.push_back({concept_id_for("neighborhood"), {}});  // duplicate + empty
    kb.links.push_back({concept_id_for("open set"), {"ffffffffffffffff"}});
    auto report = validate(kb);
    CHECK(count_code(report, "dangling-link-concept") == 1);
    CHECK(count_code(report, "duplicate-link") >= 1);
    CHECK(count_code(report, "empty-link") == 1);
    CHECK(count_code(report, "dangling-link-description") == 1);
}

TEST_CASE("empty required fields are flagged") {
    auto kb = sample_kb();
    kb.concepts[0].explanation = "  ";
    kb.descriptions[0].annotation = "";
    auto report = validate(kb);
    CHECK(count_code(report, "empty-field") == 2);
}

TEST_CASE("validation output is independent of input order") {
    auto kb = sample_kb();
    kb.descriptions.push_back(make_description("Filter.Tendsto"));  // dangling
    kb.definitions.push_back(make_definition("Interior"));          // no description
    auto baseline = validate(kb).violations;

    std::mt19937 rng(7);
    for (int round = 0; round < 10; ++round) {
        auto shuffled = kb;
        std::shuffle(shuffled.concepts.begin(), shuffled.concepts.end(), rng);
        std::shuffle(shuffled.definitions.begin(), shuffled.definitions.end(), rng);
        std::shuffle(shuffled.descriptions.begin(), shuffled.descriptions.end(), rng);
        std::shuffle(shuffled.links.begin(), shuffled.links.end(), rng);
        CHECK(validate(shuffled).violations == baseline);
    }
}

TEST_CASE("serialize is canonical: permuted inputs give identical bytes") {
    auto kb = sample_kb();
    auto baseline = serialize(kb);
    REQUIRE_FALSE(baseline.empty());

    std::mt19937 rng(13);
    for (int round = 0; round < 10; ++round) {
        auto shuffled = kb;
        std::shuffle(shuffled.concepts.begin(), shuffled.concepts.end(), rng);
        std::shuffle(shuffled.definitions.begin(), shuffled.definitions.end(), rng);
        std::shuffle(shuffled.descriptions.begin(), shuffled.descriptions.end(), rng);
        std::shuffle(shuffled.links.begin(), shuffled.links.end(), rng);
        for (auto& l : shuffled.links)
            std::shuffle(l.description_ids.begin(), l.description_ids.end(), rng);
        CHECK(serialize(shuffled) == baseline);
    }
}

TEST_CASE("serialize/deserialize round-trip is the identity on canonical KBs") {
    auto kb = canonical(sample_kb());
    auto text = serialize(kb);
    auto back = deserialize(text);
    CHECK(back == kb);
    // Second hop must be byte-identical: the format has one canonical rendering.
    CHECK(serialize(back) == text);
}

TEST_CASE("round-trip preserves unicode and embedded quotes in annotations") {
    auto kb = sample_kb();
    kb.descriptions[0].annotation = "the \"ε-ball\" around x: {y | dist y x < ε}";
    kb.concepts[0].explanation = "café ∀ε>0 — newline\nand tab\t.";
    auto back = deserialize(serialize(kb));
    CHECK(back == canonical(kb));
}

TEST_CASE("deserialize reports the offending line number") {
    auto text = serialize(sample_kb());
    // Corrupt the third line.
    std::size_t pos = 0;
    for (int i = 0; i < 2; ++i) pos = text.find('\n', pos) + 1;
    text.insert(pos, "{broken");
    try {
        deserialize(text);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("deserialize rejects missing header, duplicate header, unknown records") {
    CHECK_THROWS_AS(deserialize(""), ParseError);
    CHECK_THROWS_AS(deserialize("{\"record\":\"concept\",\"id\":\"a\",\"name\":\"n\","
                                "\"domain\":\"d\",\"explanation\":\"e\"}\n"),
                    ParseError);
    auto text = serialize(sample_kb());
    CHECK_THROWS_AS(deserialize(text + text), ParseError);  // second header mid-file
    std::string header = text.substr(0, text.find('\n') + 1);
    CHECK_THROWS_AS(deserialize(header + "{\"record\":\"mystery\"}\n"), ParseError);
}

TEST_CASE("deserialize rejects records with missing or mistyped fields") {
    std::string header =
        "{\"record\":\"header\",\"source_fingerprint\":\"\",\"version\":0}\n";
    CHECK_THROWS_AS(deserialize(header + "{\"record\":\"definition\",\"identifier\":\"x\"}\n"),
                    ParseError);
    CHECK_THROWS_AS(deserialize(header + "{\"record\":\"description\",\"id\":\"a\","
                                         "\"definition_id\":\"x\",\"annotation\":\"t\","
                                         "\"pending\":\"yes\"}\n"),
                    ParseError);
    CHECK_THROWS_AS(deserialize("{\"record\":\"header\",\"source_fingerprint\":\"\","
                                "\"version\":-1}\n"),
                    ParseError);
}

TEST_CASE("save then load is the identity") {
    auto kb = canonical(sample_kb());
    auto path = temp_dir() / "roundtrip.kb.jsonl";
    save(kb, path);
    CHECK(load(path) == kb);
    fs::remove(path);
}

TEST_CASE("save refuses an invalid KB and leaves no file behind") {
    auto kb = sample_kb();
    kb.descriptions.push_back(make_description("Filter.Tendsto"));  // dangling
    auto path = temp_dir() / "invalid.kb.jsonl";
    fs::remove(path);
    CHECK_THROWS_AS(save(kb, path), ValidationError);
    CHECK_FALSE(fs::exists(path));
}

TEST_CASE("load rejects a truncated file with a parse error, not garbage data") {
    auto kb = sample_kb();
    auto path = temp_dir() / "truncated.kb.jsonl";
    auto text = serialize(kb);
    {
        std::ofstream out(path, std::ios::binary);
        out << text.substr(0, text.size() - 25);  // cut mid-record
    }
    CHECK_THROWS_AS(load(path), ParseError);
    fs::remove(path);
}

TEST_CASE("load surfaces semantic violations as ValidationError with the report attached") {
    auto kb = sample_kb();
    kb.descriptions.push_back(make_description("Filter.Tendsto"));
    auto path = temp_dir() / "dangling.kb.jsonl";
    write_file_atomic(path, serialize(kb));
    try {
        load(path);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(count_code(e.report, "dangling-r2") == 1);
    }
    fs::remove(path);
}

TEST_CASE("choose_newest keeps the higher version and warns on a stale incoming") {
    auto older = sample_kb();
    auto newer = sample_kb();
    newer.version = older.version + 2;
    newer.concepts[0].explanation = "revised";

    auto pick = choose_newest(older, newer);
    CHECK(pick.kb == newer);
    CHECK(pick.warnings.empty());

    auto keep = choose_newest(newer, older);
    CHECK(keep.kb == newer);
    REQUIRE(keep.warnings.size() == 1);
    CHECK(keep.warnings[0].find("older") != std::string::npos);

    // Equal versions: incoming wins (idempotent re-apply).
    auto tie = choose_newest(older, older);
    CHECK(tie.warnings.empty());
}

TEST_CASE("upsert inserts new entities and bumps the version once") {
    auto kb = canonical(sample_kb());
    UpsertBatch batch;
    batch.concepts = {make_concept("compactness")};
    batch.definitions = {make_definition("IsCompact")};
    batch.descriptions = {make_description("IsCompact")};
    batch.links = {{concept_id_for("compactness"), {description_id_for("IsCompact")}}};

    auto out = upsert_entities(kb, batch);
    CHECK(out.version == kb.version + 1);
    CHECK(out.concepts.size() == kb.concepts.size() + 1);
    Lookup look(out);
    CHECK(look.definition("IsCompact") != nullptr);
    // Input untouched (value semantics).
    CHECK(kb.version == 3);
    CHECK(kb.definitions.size() == 3);
}

TEST_CASE("upsert replaces entities that share a key") {
    auto kb = canonical(sample_kb());
    UpsertBatch batch;
    Description revised = make_description("nhds");
    revised.annotation = "the neighborhood filter of a point";
    revised.pending = false;
    batch.descriptions = {revised};

    auto out = upsert_entities(kb, batch);
    CHECK(out.descriptions.size() == kb.descriptions.size());
    Lookup look(out);
    REQUIRE(look.description_of_definition("nhds") != nullptr);
    CHECK(look.description_of_definition("nhds")->annotation ==
          "the neighborhood filter of a point");
}

TEST_CASE("upsert that would break an invariant is rejected and changes nothing") {
    auto kb = canonical(sample_kb());
    UpsertBatch batch;
    batch.descriptions = {make_description("NotARealDefinition")};
    auto before = serialize(kb);
    CHECK_THROWS_AS(upsert_entities(kb, batch), ValidationError);
    CHECK(serialize(kb) == before);
}

TEST_CASE("lookup resolves every entity of a KB and misses return null") {
    auto kb = sample_kb();
    Lookup look(kb);
    REQUIRE(look.concept_by_name("neighborhood") != nullptr);
    CHECK(look.concept_by_name("neighborhood")->id == concept_id_for("neighborhood"));
    CHECK(look.concept_by_id(concept_id_for("open set")) != nullptr);
    CHECK(look.definition("Metric.ball") != nullptr);
    CHECK(look.description_by_id(description_id_for("IsOpen")) != nullptr);
    REQUIRE(look.link_of_concept(concept_id_for("neighborhood")) != nullptr);
    CHECK(look.link_of_concept(concept_id_for("neighborhood"))->description_ids.size() == 2);
    CHECK(look.concept_by_name("banach space") == nullptr);
    CHECK(look.definition("Missing.Name") == nullptr);
    CHECK(look.description_of_definition("Missing.Name") == nullptr);
    CHECK(look.link_of_concept("ffffffffffffffff") == nullptr);
}
