#include "cramf/population.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "cramf/vec.hpp"

namespace cramf::population {

using gateway::ChatRequest;
using gateway::Gateway;
using nlohmann::json;

// ── back-translation ────────────────────────────────────────────

BackTranslationResult back_translate(Gateway& gw, const kb::Definition& def, int n,
                                     double temperature) {
    if (is_blank(def.formal_expression))
        throw InputError("back-translation needs a formal expression for " + def.identifier);
    if (n < 1) throw InputError("back-translation needs at least one candidate");

    BackTranslationResult out;
    for (int i = 0; i < n; ++i) {
        ChatRequest req{"back_translate",
                        {{"identifier", def.identifier},
                         {"formal_expression", def.formal_expression},
                         {"module_path", def.module_path},
                         {"candidate", std::to_string(i + 1)}},
                        temperature,
                        1024};
        try {
            std::string reply = trim(gw.chat(req));
            if (reply.empty()) reply = trim(gw.chat(req));  // one retry on empty text
            if (reply.empty()) {
                ++out.dropped;
                continue;
            }
            out.candidates.push_back({std::move(reply), std::nullopt});
        } catch (const ProviderUnavailable& e) {
            throw ProviderUnavailable(def.identifier + ": " + e.what());
        }
    }
    return out;
}

Selection select_consistent(Gateway& gw, std::vector<BackTranslationCandidate> candidates,
                            const std::optional<std::string>& original_annotation) {
    if (candidates.empty()) throw InputError("select_consistent needs at least one candidate");

    Selection sel;
    if (!original_annotation || is_blank(*original_annotation)) {
        sel.chosen = std::move(candidates.front());
        sel.chosen_index = 0;
        sel.annotation_fallback = true;
        return sel;
    }

    std::vector<std::string> texts;
    texts.reserve(candidates.size() + 1);
    texts.push_back(*original_annotation);
    for (const auto& c : candidates) texts.push_back(c.text);
    auto vectors = gw.embed(texts);

    std::size_t best = 0;
    double best_score = -2.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double s = cosine(vectors[0].values, vectors[i + 1].values);
        candidates[i].similarity_to_annotation = s;
        if (s > best_score) {  // strict: ties keep the lowest index
            best_score = s;
            best = i;
        }
    }
    sel.chosen = std::move(candidates[best]);
    sel.chosen_index = best;
    return sel;
}

// ── concept extraction ──────────────────────────────────────────

namespace {

std::optional<kb::Concept> parse_concept_reply(const std::string& reply) {
    json j = json::parse(gateway::strip_reply_fences(reply), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    auto it = j.find("name");
    if (it == j.end() || !it->is_string() || is_blank(it->get<std::string>())) return std::nullopt;
    auto ex = j.find("explanation");
    if (ex == j.end() || !ex->is_string() || is_blank(ex->get<std::string>())) return std::nullopt;

    kb::Concept c;
    c.name = trim(it->get<std::string>());
    c.explanation = trim(ex->get<std::string>());
    c.domain = "unknown";
    if (auto d = j.find("domain"); d != j.end() && d->is_string() && !is_blank(d->get<std::string>()))
        c.domain = trim(d->get<std::string>());
    c.id = kb::concept_id_for(c.name);
    return c;
}

std::string snippet(const std::string& s) {
    return s.size() <= 120 ? s : s.substr(0, 120) + "...";
}

}  // namespace

kb::Concept extract_concept(Gateway& gw, const std::string& description) {
    if (is_blank(description)) throw InputError("concept extraction needs a description");

    std::string first = gw.chat({"extract_concept", {{"description", description}}, 0.0, 1024});
    if (auto c = parse_concept_reply(first)) return *c;

    std::string second = gw.chat({"extract_concept_retry",
                                  {{"description", description}, {"previous_reply", first}},
                                  0.0,
                                  1024});
    if (auto c = parse_concept_reply(second)) return *c;

    throw ExtractionError("concept extraction got two unparseable replies: \"" + snippet(first) +
                          "\" and \"" + snippet(second) + "\"");
}

// ── populate ────────────────────────────────────────────────────

std::string PopulateResult::skips_json() const {
    json arr = json::array();
    for (const auto& s : skips)
        arr.push_back({{"definition_identifier", s.definition_identifier},
                       {"stage", s.stage},
                       {"reason", s.reason}});
    return json{{"skips", arr},
                {"total_definitions", total_definitions},
                {"completed", completed},
                {"back_translation_drops", back_translation_drops},
                {"interrupted", interrupted}}
               .dump(2) +
           "\n";
}

namespace {

struct WorkItem {
    kb::Definition def;
    std::optional<kb::Description> existing;  // current description, if any
};

struct TaskOutcome {
    std::optional<kb::Description> description;  // final, non-pending
    std::optional<kb::Concept> extracted;
    std::size_t drops = 0;
    std::optional<SkipRecord> skip;
};

TaskOutcome run_item(Gateway& gw, const WorkItem& item, const PopulateOptions& options) {
    TaskOutcome out;
    std::string annotation;

    bool needs_back_translation = !item.existing || item.existing->pending;
    if (needs_back_translation) {
        auto bt = back_translate(gw, item.def, options.candidates, options.temperature);
        out.drops = bt.dropped;
        if (bt.candidates.empty()) {
            out.skip = SkipRecord{item.def.identifier, "back_translate",
                                  "every candidate reply was empty"};
            return out;
        }
        // Ingest placeholders have no original annotation to align with,
        // so this takes the first candidate and flags the fallback.
        auto sel = select_consistent(gw, std::move(bt.candidates), std::nullopt);
        annotation = sel.chosen.text;
        out.description = kb::Description{kb::description_id_for(item.def.identifier),
                                          item.def.identifier, annotation, false};
    } else {
        annotation = item.existing->annotation;  // original annotation kept as-is
    }

    try {
        out.extracted = extract_concept(gw, annotation);
    } catch (const ExtractionError& e) {
        out.skip = SkipRecord{item.def.identifier, "extract_concept", e.what()};
    }
    return out;
}

}  // namespace

PopulateResult populate(Gateway& gw, const kb::KnowledgeBase& input,
                        const PopulateOptions& options) {
    PopulateResult result;
    result.kb = kb::canonical(input);
    result.total_definitions = result.kb.definitions.size();

    // A definition is complete when its description is final (not a
    // pending placeholder) and some concept links to it.
    std::vector<WorkItem> work;
    {
        std::set<std::string_view> linked;
        for (const auto& l : result.kb.links)
            for (const auto& id : l.description_ids) linked.insert(id);
        kb::Lookup look(result.kb);
        for (const auto& def : result.kb.definitions) {
            const kb::Description* desc = look.description_of_definition(def.identifier);
            bool complete = desc && !desc->pending && linked.contains(desc->id);
            if (complete)
                ++result.completed;
            else
                work.push_back({def, desc ? std::optional(*desc) : std::nullopt});
        }
    }
    if (work.empty()) return result;  // idempotent: no provider calls, identical KB

    auto flush_checkpoint = [&] {
        if (options.checkpoint_path.empty()) return;
        kb::save(result.kb, options.checkpoint_path);
        write_file_atomic(options.checkpoint_path.string() + ".skips.json", result.skips_json());
    };

    std::size_t batch = options.checkpoint_every == 0 ? work.size() : options.checkpoint_every;
    for (std::size_t start = 0; start < work.size(); start += batch) {
        std::size_t end = std::min(start + batch, work.size());
        std::vector<WorkItem> slice(work.begin() + static_cast<std::ptrdiff_t>(start),
                                    work.begin() + static_cast<std::ptrdiff_t>(end));
        auto outcomes = parallel_map(
            slice, [&](const WorkItem& item) { return run_item(gw, item, options); },
            options.jobs);

        // Deterministic single-threaded merge in identifier order.
        std::unordered_map<std::string, std::size_t> desc_at, concept_at, link_at;
        for (std::size_t i = 0; i < result.kb.descriptions.size(); ++i)
            desc_at[result.kb.descriptions[i].id] = i;
        for (std::size_t i = 0; i < result.kb.concepts.size(); ++i)
            concept_at[result.kb.concepts[i].id] = i;
        for (std::size_t i = 0; i < result.kb.links.size(); ++i)
            link_at[result.kb.links[i].concept_id] = i;

        for (std::size_t i = 0; i < outcomes.size(); ++i) {
            auto& oc = outcomes[i];
            result.back_translation_drops += oc.drops;
            if (oc.description) {
                auto it = desc_at.find(oc.description->id);
                if (it != desc_at.end())
                    result.kb.descriptions[it->second] = *oc.description;
                else {
                    desc_at[oc.description->id] = result.kb.descriptions.size();
                    result.kb.descriptions.push_back(*oc.description);
                }
            }
            if (oc.skip) {
                result.skips.push_back(*oc.skip);
                continue;
            }
            // Concepts merge by name; links accumulate the fan-out.
            const kb::Concept& c = *oc.extracted;
            if (!concept_at.contains(c.id)) {
                concept_at[c.id] = result.kb.concepts.size();
                result.kb.concepts.push_back(c);
            }
            std::string desc_id = kb::description_id_for(slice[i].def.identifier);
            auto lit = link_at.find(c.id);
            if (lit == link_at.end()) {
                link_at[c.id] = result.kb.links.size();
                result.kb.links.push_back({c.id, {desc_id}});
            } else {
                auto& ids = result.kb.links[lit->second].description_ids;
                if (std::find(ids.begin(), ids.end(), desc_id) == ids.end())
                    ids.push_back(desc_id);
            }
            ++result.completed;
        }

        result.kb = kb::canonical(std::move(result.kb));
        flush_checkpoint();
        if (options.progress && !options.progress(end, work.size())) {
            result.interrupted = true;
            return result;
        }
    }

    auto report = kb::validate(result.kb);
    if (!report.ok())
        throw kb::ValidationError("populate produced an invalid knowledge base: " +
                                      report.summary(),
                                  std::move(report));

    double ratio = result.total_definitions == 0
                       ? 1.0
                       : static_cast<double>(result.completed) /
                             static_cast<double>(result.total_definitions);
    if (ratio < options.success_ratio)
        throw PopulateFailure("populate completed " + std::to_string(result.completed) + " of " +
                                  std::to_string(result.total_definitions) +
                                  " definitions, below the required ratio",
                              std::move(result));

    result.kb.version = input.version + 1;
    result.kb = kb::canonical(std::move(result.kb));
    flush_checkpoint();
    return result;
}

// ── encoding ────────────────────────────────────────────────────

EncodeResult encode_units(Gateway& gw, const kb::KnowledgeBase& input) {
    kb::KnowledgeBase canon = kb::canonical(input);
    kb::Lookup look(canon);
    EncodeResult out;

    struct Pair {
        const kb::Concept* concept_entry;
        const kb::Description* description;
    };
    std::vector<Pair> pairs;
    for (const auto& link : canon.links) {
        const kb::Concept* concept_entry = look.concept_by_id(link.concept_id);
        if (!concept_entry) {
            out.skips.push_back({link.concept_id, "encode", "link names an unknown concept"});
            continue;
        }
        for (const auto& desc_id : link.description_ids) {
            const kb::Description* desc = look.description_by_id(desc_id);
            if (!desc) {
                out.skips.push_back({desc_id, "encode", "link names an unknown description"});
                continue;
            }
            if (desc->pending) {
                out.skips.push_back(
                    {desc->definition_id, "encode", "description is still a pending placeholder"});
                continue;
            }
            pairs.push_back({concept_entry, desc});
        }
    }
    if (pairs.empty()) return out;

    std::vector<std::string> texts;
    std::map<std::string, std::size_t> text_at;
    auto intern = [&](const std::string& t) {
        auto [it, fresh] = text_at.try_emplace(t, texts.size());
        if (fresh) texts.push_back(t);
        return it->second;
    };
    for (const auto& p : pairs) {
        intern(p.concept_entry->explanation);
        intern(p.description->annotation);
    }

    // One batched call; individual texts are retried solo if the batch
    // fails so one bad text cannot sink the whole encoding.
    std::vector<std::optional<gateway::EmbeddingVector>> vectors(texts.size());
    try {
        auto batch = gw.embed(texts);
        for (std::size_t i = 0; i < batch.size(); ++i) vectors[i] = std::move(batch[i]);
    } catch (const ProviderError&) {
        for (std::size_t i = 0; i < texts.size(); ++i) {
            try {
                vectors[i] = gw.embed({texts[i]}).at(0);
            } catch (const ProviderError&) {
                vectors[i] = std::nullopt;
            }
        }
    }

    for (const auto& p : pairs) {
        auto& vc = vectors[text_at[p.concept_entry->explanation]];
        auto& vd = vectors[text_at[p.description->annotation]];
        if (!vc || !vd) {
            out.skips.push_back(
                {p.description->definition_id, "encode", "embedding the texts failed"});
            continue;
        }
        vindex::KnowledgeUnit unit;
        unit.concept_name = p.concept_entry->name;
        unit.definition_identifier = p.description->definition_id;
        unit.concept_vector = *vc;
        unit.description_vector = *vd;
        normalize(unit.concept_vector.values);
        normalize(unit.description_vector.values);
        out.units.push_back(std::move(unit));
    }

    std::sort(out.units.begin(), out.units.end(),
              [](const vindex::KnowledgeUnit& a, const vindex::KnowledgeUnit& b) {
                  return std::tie(a.concept_name, a.definition_identifier) <
                         std::tie(b.concept_name, b.definition_identifier);
              });
    return out;
}

}  // namespace cramf::population
