#include "cramf/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <future>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "cramf/vec.hpp"

namespace cramf::retrieval {

using gateway::ChatRequest;
using gateway::Gateway;
using nlohmann::json;

std::string to_string(Classification c) {
    return c == Classification::Explicit ? "explicit" : "implicit";
}

namespace {

void warn(std::vector<std::string>* warnings, std::string message) {
    if (warnings) warnings->push_back(std::move(message));
}

json parse_fielded(const std::string& reply) {
    json j = json::parse(gateway::strip_reply_fences(reply), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return json();
    return j;
}

// Trimmed, non-blank, first-occurrence-deduplicated strings under the
// given field; nullopt when the reply is not shaped that way.
std::optional<std::vector<std::string>> parse_string_list(const std::string& reply,
                                                          const std::string& field) {
    json j = parse_fielded(reply);
    auto it = j.find(field);
    if (it == j.end() || !it->is_array()) return std::nullopt;
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& entry : *it) {
        if (!entry.is_string()) return std::nullopt;
        std::string s = trim(entry.get<std::string>());
        if (s.empty()) continue;
        if (seen.insert(s).second) out.push_back(std::move(s));
    }
    if (out.empty()) return std::nullopt;
    return out;
}

std::string snippet(const std::string& s) {
    return s.size() <= 120 ? s : s.substr(0, 120) + "...";
}

}  // namespace

// ── classification & rewriting ──────────────────────────────────

ProblemStatement classify_and_rewrite(Gateway& gw, const std::string& text,
                                      std::vector<std::string>* warnings) {
    if (is_blank(text)) throw InputError("cannot retrieve for an empty problem statement");

    ProblemStatement out;
    out.text = text;

    auto parse_label = [](const std::string& reply) -> std::optional<Classification> {
        json j = parse_fielded(reply);
        auto it = j.find("classification");
        if (it == j.end() || !it->is_string()) return std::nullopt;
        std::string label = to_lower(trim(it->get<std::string>()));
        if (label == "explicit") return Classification::Explicit;
        if (label == "implicit") return Classification::Implicit;
        return std::nullopt;
    };

    std::string first = gw.chat({"classify_problem", {{"statement", text}}, 0.0, 256});
    auto label = parse_label(first);
    if (!label) {
        std::string second = gw.chat({"classify_problem_retry",
                                      {{"statement", text}, {"previous_reply", first}},
                                      0.0,
                                      256});
        label = parse_label(second);
    }
    if (!label) {
        // Conservative default: treat as explicit and skip rewriting.
        warn(warnings, "classifier replies were unparseable twice; treating the problem as "
                       "explicitly stated");
        out.classification = Classification::Explicit;
        return out;
    }

    out.classification = *label;
    if (out.classification == Classification::Explicit) return out;

    std::string rewritten = trim(gw.chat({"rewrite_problem", {{"statement", text}}, 0.0, 1024}));
    if (rewritten.empty())
        rewritten = trim(gw.chat({"rewrite_problem", {{"statement", text}}, 0.0, 1024}));
    if (rewritten.empty()) {
        warn(warnings, "rewrite replies were empty twice; continuing with the original text");
        return out;
    }
    out.rewritten_text = std::move(rewritten);
    return out;
}

// ── concept extraction & enhancement ────────────────────────────

std::vector<std::string> extract_query_concepts(Gateway& gw, const ProblemStatement& statement,
                                                std::size_t max_concepts,
                                                std::vector<std::string>* warnings) {
    const std::string& text = statement.effective_text();
    std::string first = gw.chat({"extract_query_concepts", {{"statement", text}}, 0.0, 512});
    auto names = parse_string_list(first, "concepts");
    if (!names) {
        std::string second = gw.chat({"extract_query_concepts_retry",
                                      {{"statement", text}, {"previous_reply", first}},
                                      0.0,
                                      512});
        names = parse_string_list(second, "concepts");
        if (!names)
            throw ExtractionError("query concept extraction got two unparseable replies: \"" +
                                  snippet(first) + "\" and \"" + snippet(second) + "\"");
    }
    if (names->size() > max_concepts) {
        warn(warnings, "reply named " + std::to_string(names->size()) +
                           " concepts; keeping the first " + std::to_string(max_concepts));
        names->resize(max_concepts);
    }
    return *names;
}

std::string interpret_concept(Gateway& gw, const std::string& concept_name,
                              const ProblemStatement& statement,
                              std::vector<std::string>* warnings) {
    ChatRequest req{"interpret_concept",
                    {{"concept", concept_name}, {"statement", statement.effective_text()}},
                    0.0,
                    512};
    std::string reply = trim(gw.chat(req));
    if (reply.empty()) reply = trim(gw.chat(req));
    if (reply.empty()) {
        warn(warnings, "interpretation replies for '" + concept_name +
                           "' were empty twice; querying with the bare name");
        return concept_name;
    }
    return reply;
}

std::vector<std::string> generate_keywords(Gateway& gw, const std::string& concept_name,
                                           std::size_t max_keywords,
                                           std::vector<std::string>* warnings) {
    std::string first = gw.chat({"generate_keywords", {{"concept", concept_name}}, 0.0, 256});
    auto keywords = parse_string_list(first, "keywords");
    if (!keywords) {
        std::string second = gw.chat({"generate_keywords_retry",
                                      {{"concept", concept_name}, {"previous_reply", first}},
                                      0.0,
                                      256});
        keywords = parse_string_list(second, "keywords");
    }
    if (!keywords) {
        // The exact-match channel degrades to empty; the meaning-match
        // channel still runs.
        warn(warnings, "keyword generation for '" + concept_name +
                           "' failed twice; exact-match channel is empty");
        return {};
    }
    if (keywords->size() > max_keywords) {
        warn(warnings, "reply named " + std::to_string(keywords->size()) +
                           " keywords; keeping the first " + std::to_string(max_keywords));
        keywords->resize(max_keywords);
    }
    return *keywords;
}

// ── exact-match channel ─────────────────────────────────────────

std::vector<std::string> tokenize_identifier(const std::string& identifier) {
    std::vector<std::string> tokens;
    std::string current;
    char previous = '\0';
    for (char c : identifier) {
        if (c == '.' || c == '_') {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
            previous = '\0';
            continue;
        }
        if (std::islower(static_cast<unsigned char>(previous)) &&
            std::isupper(static_cast<unsigned char>(c)) && !current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
        current.push_back(c);
        previous = c;
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

bool keyword_matches_identifier(const std::string& keyword, const std::string& identifier) {
    std::string k = to_lower(trim(keyword));
    if (k.empty()) return false;
    std::vector<std::string> tokens;
    for (auto& t : tokenize_identifier(identifier)) tokens.push_back(to_lower(t));

    for (std::size_t start = 0; start < tokens.size(); ++start) {
        // Two run spellings: the tokens as-is, and the first token with
        // its leading character shed (single-letter Mathlib prefixes:
        // fderiv, eVariance, ...).
        std::string full = tokens[start];
        std::string shed = tokens[start].size() >= 2 ? tokens[start].substr(1) : "";
        for (std::size_t end = start; end < tokens.size(); ++end) {
            if (end > start) {
                full += tokens[end];
                if (!shed.empty()) shed += tokens[end];
            }
            if (k == full || (!shed.empty() && k == shed)) return true;
            if (full.size() > k.size()) break;
        }
    }
    return false;
}

CandidateSet keyword_channel(const std::vector<std::string>& keywords,
                             const kb::KnowledgeBase& kb) {
    CandidateSet out;
    for (const auto& def : kb.definitions) {
        bool hit = std::any_of(keywords.begin(), keywords.end(), [&](const std::string& k) {
            return keyword_matches_identifier(k, def.identifier);
        });
        if (hit) out.entries.push_back({def.identifier, true, false});
    }
    std::sort(out.entries.begin(), out.entries.end(),
              [](const Candidate& a, const Candidate& b) {
                  return a.definition_identifier < b.definition_identifier;
              });
    out.entries.erase(std::unique(out.entries.begin(), out.entries.end(),
                                  [](const Candidate& a, const Candidate& b) {
                                      return a.definition_identifier == b.definition_identifier;
                                  }),
                      out.entries.end());
    return out;
}

// ── meaning-match channel ───────────────────────────────────────

CandidateSet semantic_channel(Gateway& gw, const AugmentedQuery& query,
                              const vindex::VectorIndex& index, const kb::KnowledgeBase& kb,
                              const RetrievalOptions& options) {
    auto query_vector = gw.embed({query.query_text}).at(0);
    auto hits = index.search(query_vector, options.recall_top);

    // Units sharing a concept carry the same concept vector, so the
    // recall list can repeat names; keep the first (best-ranked) one.
    kb::Lookup look(kb);
    std::vector<const kb::Concept*> recalled;
    std::unordered_set<std::string_view> seen;
    for (const auto& h : hits) {
        const auto& name = index.units()[h.unit].concept_name;
        if (!seen.insert(name).second) continue;
        if (const kb::Concept* c = look.concept_by_name(name)) recalled.push_back(c);
    }

    CandidateSet out;
    if (recalled.empty()) return out;

    std::vector<std::string> explanations;
    explanations.reserve(recalled.size());
    for (const auto* c : recalled) explanations.push_back(c->explanation);
    auto ranking = gw.rerank(query.query_text, explanations);

    std::size_t keep = std::min(options.rerank_top, ranking.size());
    for (std::size_t i = 0; i < keep; ++i) {
        const kb::Concept* c = recalled[ranking[i].index];
        const kb::ConceptLink* link = look.link_of_concept(c->id);
        if (!link) continue;
        for (const auto& desc_id : link->description_ids)
            if (const kb::Description* d = look.description_by_id(desc_id))
                out.entries.push_back({d->definition_id, false, true});
    }
    std::sort(out.entries.begin(), out.entries.end(),
              [](const Candidate& a, const Candidate& b) {
                  return a.definition_identifier < b.definition_identifier;
              });
    out.entries.erase(std::unique(out.entries.begin(), out.entries.end(),
                                  [](const Candidate& a, const Candidate& b) {
                                      return a.definition_identifier == b.definition_identifier;
                                  }),
                      out.entries.end());
    return out;
}

// ── merge ───────────────────────────────────────────────────────

CandidateSet merge_candidates(const CandidateSet& a, const CandidateSet& b) {
    CandidateSet out;
    std::size_t i = 0, j = 0;
    while (i < a.entries.size() || j < b.entries.size()) {
        if (j == b.entries.size() ||
            (i < a.entries.size() &&
             a.entries[i].definition_identifier < b.entries[j].definition_identifier)) {
            out.entries.push_back(a.entries[i++]);
        } else if (i == a.entries.size() ||
                   b.entries[j].definition_identifier < a.entries[i].definition_identifier) {
            out.entries.push_back(b.entries[j++]);
        } else {
            Candidate merged = a.entries[i];
            merged.from_keyword |= b.entries[j].from_keyword;
            merged.from_semantic |= b.entries[j].from_semantic;
            out.entries.push_back(merged);
            ++i;
            ++j;
        }
    }
    return out;
}

// ── final rerank & rendering ────────────────────────────────────

std::string render_grounding(const gateway::TemplateCatalog& templates,
                             const std::vector<ContextEntry>& entries) {
    std::string blocks;
    for (const auto& e : entries) {
        if (!blocks.empty()) blocks += "\n";
        blocks += e.definition.identifier + "  (" + e.definition.module_path + ")\n" +
                  e.definition.formal_expression + "\n-- " + e.description.annotation + "\n";
    }
    return templates.render("grounding_context", {{"definitions", blocks}});
}

GroundingContext final_rerank(Gateway& gw, const AugmentedQuery& query,
                              const CandidateSet& candidates, const kb::KnowledgeBase& kb,
                              const RetrievalOptions& options) {
    GroundingContext out;
    if (candidates.entries.empty()) {
        out.warnings.push_back("no candidates reached the final rerank; context is empty");
        return out;
    }

    kb::Lookup look(kb);
    struct Scored {
        const kb::Definition* def;
        const kb::Description* desc;
    };
    std::vector<Scored> pool;
    std::vector<std::string> annotations;
    for (const auto& c : candidates.entries) {  // already identifier-sorted
        const kb::Definition* def = look.definition(c.definition_identifier);
        const kb::Description* desc = look.description_of_definition(c.definition_identifier);
        if (!def || !desc) {
            out.warnings.push_back("candidate '" + c.definition_identifier +
                                   "' is missing from the knowledge base; dropped");
            continue;
        }
        pool.push_back({def, desc});
        annotations.push_back(desc->annotation);
    }
    if (pool.empty()) {
        out.warnings.push_back("no candidates reached the final rerank; context is empty");
        return out;
    }

    // (index, score) pairs, score non-increasing, ties by input order
    // which is identifier order.
    std::vector<gateway::RerankEntry> ranking;
    try {
        ranking = gw.rerank(query.interpretation, annotations);
    } catch (const ProviderError& e) {
        // Degraded mode: embedding cosine stands in for the reranker.
        out.degraded = true;
        out.warnings.push_back(std::string("reranker failed (") + e.what() +
                               "); scores fall back to embedding cosine");
        std::vector<std::string> texts;
        texts.push_back(query.interpretation);
        texts.insert(texts.end(), annotations.begin(), annotations.end());
        auto vectors = gw.embed(texts);
        for (std::size_t i = 0; i < annotations.size(); ++i)
            ranking.push_back({i, cosine(vectors[0].values, vectors[i + 1].values)});
        std::stable_sort(ranking.begin(), ranking.end(),
                         [](const gateway::RerankEntry& a, const gateway::RerankEntry& b) {
                             if (a.score != b.score) return a.score > b.score;
                             return a.index < b.index;
                         });
    }

    std::size_t keep = std::min(options.context_top, ranking.size());
    for (std::size_t i = 0; i < keep; ++i)
        out.entries.push_back(
            {*pool[ranking[i].index].def, *pool[ranking[i].index].desc, ranking[i].score});
    out.rendered_prompt = render_grounding(gw.templates(), out.entries);
    return out;
}

// ── end-to-end ──────────────────────────────────────────────────

RetrieveResult retrieve(Gateway& gw, const std::string& statement_text,
                        const kb::KnowledgeBase& kb, const vindex::VectorIndex& index,
                        const RetrievalOptions& options) {
    RetrieveResult result;
    std::vector<std::string> warnings;
    result.statement = classify_and_rewrite(gw, statement_text, &warnings);
    auto names =
        extract_query_concepts(gw, result.statement, options.max_concepts, &warnings);

    struct PerConcept {
        AugmentedQuery query;
        CandidateSet merged;
        std::vector<std::string> warnings;
        bool keyword_failed = false;
        bool semantic_failed = false;
    };

    auto sub_pipeline = [&](const std::string& name) {
        PerConcept pc;
        pc.query.concept_name = name;
        pc.query.interpretation = interpret_concept(gw, name, result.statement, &pc.warnings);
        pc.query.query_text = name + ": " + pc.query.interpretation;
        pc.query.keywords = generate_keywords(gw, name, options.max_keywords, &pc.warnings);
        pc.keyword_failed = pc.query.keywords.empty();

        // Channel pair runs concurrently; the merge below is
        // deterministic regardless of completion order.
        auto semantic = std::async(std::launch::async, [&] {
            return semantic_channel(gw, pc.query, index, kb, options);
        });
        CandidateSet keyword_hits = keyword_channel(pc.query.keywords, kb);
        CandidateSet semantic_hits;
        try {
            semantic_hits = semantic.get();
        } catch (const ProviderError& e) {
            pc.semantic_failed = true;
            pc.warnings.push_back("meaning-match channel failed for '" + name + "': " + e.what());
        }
        pc.merged = merge_candidates(keyword_hits, semantic_hits);
        return pc;
    };

    auto per_concept = parallel_map(names, sub_pipeline, options.jobs);

    bool all_failed = !per_concept.empty();
    for (auto& pc : per_concept) {
        result.queries.push_back(pc.query);
        result.candidates = merge_candidates(result.candidates, pc.merged);
        warnings.insert(warnings.end(), pc.warnings.begin(), pc.warnings.end());
        if (!(pc.keyword_failed && pc.semantic_failed)) all_failed = false;
    }
    if (all_failed) throw RetrievalError("every retrieval channel failed for every concept");

    // The final rerank sees all concepts at once: names and
    // interpretations joined in extraction order.
    AugmentedQuery combined;
    for (const auto& q : result.queries) {
        if (!combined.concept_name.empty()) combined.concept_name += ", ";
        combined.concept_name += q.concept_name;
        if (!combined.interpretation.empty()) combined.interpretation += "\n";
        combined.interpretation += q.interpretation;
        if (!combined.query_text.empty()) combined.query_text += "\n";
        combined.query_text += q.query_text;
        combined.keywords.insert(combined.keywords.end(), q.keywords.begin(),
                                 q.keywords.end());
    }

    result.context = final_rerank(gw, combined, result.candidates, kb, options);
    result.context.warnings.insert(result.context.warnings.begin(), warnings.begin(),
                                   warnings.end());
    return result;
}

// ── BM25 baseline ───────────────────────────────────────────────

namespace {

std::vector<std::string> bm25_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

}  // namespace

GroundingContext baseline_bm25(const std::string& statement_text, const kb::KnowledgeBase& kb,
                               const gateway::TemplateCatalog& templates, std::size_t k) {
    constexpr double k1 = 1.2;
    constexpr double b = 0.75;

    struct Doc {
        const kb::Definition* def;
        const kb::Description* desc;
        std::unordered_map<std::string, std::size_t> tf;
        std::size_t length = 0;
    };

    kb::Lookup look(kb);
    std::vector<Doc> docs;
    for (const auto& def : kb.definitions) {
        const kb::Description* desc = look.description_of_definition(def.identifier);
        if (!desc) continue;
        Doc d{&def, desc, {}, 0};
        for (auto& t : bm25_tokens(desc->annotation + " " + def.identifier)) {
            ++d.tf[t];
            ++d.length;
        }
        docs.push_back(std::move(d));
    }
    std::sort(docs.begin(), docs.end(),
              [](const Doc& a, const Doc& b2) { return a.def->identifier < b2.def->identifier; });

    GroundingContext out;
    if (docs.empty()) {
        out.warnings.push_back("knowledge base has no documents; context is empty");
        return out;
    }

    double total_length = 0;
    std::unordered_map<std::string, std::size_t> df;
    for (const auto& d : docs) {
        total_length += static_cast<double>(d.length);
        for (const auto& [term, _] : d.tf) ++df[term];
    }
    double avgdl = total_length / static_cast<double>(docs.size());

    // Each distinct query term contributes once.
    auto query_terms = bm25_tokens(statement_text);
    std::sort(query_terms.begin(), query_terms.end());
    query_terms.erase(std::unique(query_terms.begin(), query_terms.end()), query_terms.end());

    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        double score = 0;
        for (const auto& term : query_terms) {
            auto tf_it = docs[i].tf.find(term);
            if (tf_it == docs[i].tf.end()) continue;
            double n = static_cast<double>(df[term]);
            double N = static_cast<double>(docs.size());
            double idf = std::log(1.0 + (N - n + 0.5) / (n + 0.5));
            double tf = static_cast<double>(tf_it->second);
            double dl = static_cast<double>(docs[i].length);
            score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if (score > 0) scored.emplace_back(score, i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b2) {
        if (a.first != b2.first) return a.first > b2.first;
        return docs[a.second].def->identifier < docs[b2.second].def->identifier;
    });
    if (scored.size() > k) scored.resize(k);

    for (const auto& [score, i] : scored)
        out.entries.push_back({*docs[i].def, *docs[i].desc, score});
    if (out.entries.empty())
        out.warnings.push_back("no document shares a term with the query; context is empty");
    else
        out.rendered_prompt = render_grounding(templates, out.entries);
    return out;
}

}  // namespace cramf::retrieval
