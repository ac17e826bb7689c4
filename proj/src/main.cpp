#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cramf/config.hpp"
#include "cramf/eval.hpp"
#include "cramf/ingest.hpp"
#include "cramf/kb.hpp"
#include "cramf/population.hpp"
#include "cramf/providers.hpp"
#include "cramf/retrieval.hpp"
#include "cramf/vindex.hpp"

using namespace cramf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

volatile std::sig_atomic_t g_interrupted = 0;

void handle_interrupt(int) { g_interrupted = 1; }

void arm_interrupt_handler() { std::signal(SIGINT, handle_interrupt); }

// ── wiring ──────────────────────────────────────────────────────

// The gateway plus everything that must stay alive beside it.
struct Services {
    std::unique_ptr<gateway::Gateway> gw;
    std::function<void(const json&)> trace;  // null when --trace is off

    gateway::Gateway& gateway() { return *gw; }
};

std::shared_ptr<gateway::ChatBackend> make_chat(const config::ProviderChoice& p) {
    if (p.kind == "http") return gateway::make_http_chat(p.http);
    if (!p.script.empty()) return gateway::ScriptedChatBackend::from_json_file(p.script);
    // inert mock: any chat call reports that no script was configured
    return std::make_shared<gateway::ScriptedChatBackend>(std::vector<gateway::ScriptRule>{});
}

Services make_services(const config::Config& cfg, const std::optional<fs::path>& replay,
                       const std::optional<fs::path>& record,
                       const std::optional<fs::path>& trace) {
    auto catalog = gateway::TemplateCatalog::from_directory(cfg.templates);

    std::shared_ptr<gateway::ChatBackend> chat;
    std::shared_ptr<gateway::EmbeddingBackend> embed;
    std::shared_ptr<gateway::RerankBackend> rerank;
    if (replay) {
        auto archive = gateway::ReplayArchive::load(*replay);
        chat = gateway::replay_chat(archive);
        embed = gateway::replay_embedding(archive);
        rerank = gateway::replay_rerank(archive);
    } else {
        chat = make_chat(cfg.chat);
        embed = cfg.embedding.kind == "http"
                    ? gateway::make_http_embedding(cfg.embedding.http)
                    : std::make_shared<gateway::HashEmbeddingBackend>(cfg.embedding.dim,
                                                                      cfg.embedding.seed);
        rerank = cfg.rerank.kind == "http"
                     ? gateway::make_http_rerank(cfg.rerank.http)
                     : std::make_shared<gateway::CosineRerankBackend>(cfg.rerank.dim,
                                                                      cfg.rerank.seed);
    }
    if (record) {
        auto log = std::make_shared<gateway::TrafficLog>(*record);
        chat = gateway::record_chat(std::move(chat), log);
        embed = gateway::record_embedding(std::move(embed), log);
        rerank = gateway::record_rerank(std::move(rerank), log);
    }

    Services services;
    services.gw = std::make_unique<gateway::Gateway>(
        std::move(catalog), std::move(chat), std::move(embed), std::move(rerank),
        gateway::GatewayOptions{.max_retries = cfg.gateway.max_retries,
                                .backoff_ms = cfg.gateway.backoff_ms,
                                .max_concurrent = cfg.gateway.max_concurrent,
                                .min_interval_ms = cfg.gateway.min_interval_ms});

    if (trace) {
        auto out = std::make_shared<std::ofstream>(*trace, std::ios::trunc);
        if (!*out) throw IoError("cannot open trace file: " + trace->string());
        auto mutex = std::make_shared<std::mutex>();
        services.trace = [out, mutex](const json& line) {
            std::lock_guard<std::mutex> lock(*mutex);
            *out << line.dump() << "\n" << std::flush;
        };
        services.gw->set_observer([trace_fn = services.trace](const gateway::TraceEvent& e) {
            trace_fn(json{{"kind", e.kind}, {"request_id", e.request_id}, {"detail", e.detail}});
        });
    }
    return services;
}

retrieval::RetrievalOptions retrieval_options(const config::Config& cfg) {
    retrieval::RetrievalOptions options;
    options.max_concepts = cfg.pipeline.concepts;
    options.max_keywords = cfg.pipeline.keywords;
    options.recall_top = cfg.pipeline.recall_top;
    options.rerank_top = cfg.pipeline.rerank_top;
    options.context_top = cfg.pipeline.context_top;
    options.jobs = cfg.jobs;
    return options;
}

std::unique_ptr<eval::Compiler> make_compiler(const config::Config& cfg) {
    if (cfg.compiler.command.empty()) return std::make_unique<eval::MockCompiler>();
    return std::make_unique<eval::CommandCompiler>(eval::CommandCompilerConfig{
        cfg.compiler.command, cfg.compiler.timeout_s, cfg.compiler.success_exit_codes});
}

// ── subcommands ─────────────────────────────────────────────────

int run_ingest(const config::Config& cfg, const fs::path& export_path, const fs::path& out,
               const std::optional<fs::path>& report_path) {
    auto outcome = ingest::build_kb(export_path, cfg.jobs);
    std::cout << outcome.report.table();
    if (!outcome.duplicate_identifiers.empty())
        std::cout << "duplicates    " << outcome.duplicate_identifiers.size()
                  << " (longest doc kept)\n";
    kb::save(outcome.kb, out);
    std::cout << "kb written to " << out.string() << " (version " << outcome.kb.version << ", "
              << outcome.kb.definitions.size() << " definitions)\n";
    if (report_path) write_file_atomic(*report_path, outcome.report.to_json());
    return 0;
}

int run_validate(const fs::path& kb_path) {
    try {
        auto kb = kb::load(kb_path);
        std::cout << kb::validate(kb).summary() << "\n";
        return 0;
    } catch (const kb::ValidationError& e) {
        std::cout << e.report.summary() << "\n";
        return 1;
    }
}

int run_populate(Services& services, const config::Config& cfg, const fs::path& kb_path,
                 const fs::path& out, bool resume) {
    arm_interrupt_handler();
    fs::path checkpoint = out;
    checkpoint += ".checkpoint";
    fs::path checkpoint_skips = checkpoint;
    checkpoint_skips += ".skips.json";

    kb::KnowledgeBase input;
    if (resume && fs::exists(checkpoint)) {
        std::cout << "resuming from checkpoint " << checkpoint.string() << "\n";
        input = kb::load(checkpoint);
    } else {
        input = kb::load(kb_path);
    }

    population::PopulateOptions options;
    options.candidates = cfg.pipeline.candidates;
    options.jobs = cfg.jobs;
    options.checkpoint_every = cfg.pipeline.checkpoint_every;
    options.success_ratio = cfg.pipeline.success_ratio;
    options.checkpoint_path = checkpoint;
    options.progress = [](std::size_t done, std::size_t total) {
        std::cout << "populated " << done << "/" << total << " definitions\n";
        return g_interrupted == 0;
    };

    try {
        auto result = population::populate(services.gateway(), input, options);
        if (result.interrupted) {
            std::cout << "interrupted; progress checkpointed at " << checkpoint.string()
                      << " (rerun with --resume)\n";
            return 1;
        }
        kb::save(result.kb, out);
        fs::path skips = out;
        skips += ".skips.json";
        write_file_atomic(skips, result.skips_json());
        std::error_code ec;
        fs::remove(checkpoint, ec);
        fs::remove(checkpoint_skips, ec);
        std::cout << "populate complete: " << result.completed << "/" << result.total_definitions
                  << " definitions, " << result.skips.size() << " skipped, kb version "
                  << result.kb.version << " written to " << out.string() << "\n";
        return 0;
    } catch (const population::PopulateFailure& e) {
        // the engine already checkpointed the partial result
        std::cerr << "populate failed: " << e.what() << "\n";
        if (!e.partial.skips.empty()) {
            std::cerr << "skipped definitions:\n";
            for (const auto& s : e.partial.skips)
                std::cerr << "  " << s.definition_identifier << " (" << s.stage << "): "
                          << s.reason << "\n";
        }
        return 1;
    }
}

int run_index(Services& services, const config::Config& cfg, const fs::path& kb_path,
              const std::string& side_name, const fs::path& out) {
    auto side = vindex::side_from_string(side_name);
    auto kb = kb::load(kb_path);
    auto encoded = population::encode_units(services.gateway(), kb);
    if (encoded.units.empty())
        throw InputError("knowledge base has no linked, described definitions to index");
    vindex::VectorIndex index(std::move(encoded.units), side);
    index.save(out);
    std::cout << "indexed " << index.units().size() << " units (dim " << index.dim()
              << ", model " << index.model_tag() << ", side " << to_string(index.side())
              << ") to " << out.string() << "\n";
    if (!encoded.skips.empty())
        std::cerr << encoded.skips.size() << " definitions were skipped (not yet populated)\n";
    (void)cfg;
    return 0;
}

void print_context(const retrieval::GroundingContext& context) {
    if (context.entries.empty()) {
        std::cout << "no definitions retrieved\n";
    } else {
        std::cout << "retrieved definitions:\n";
        for (const auto& e : context.entries) {
            char score[32];
            std::snprintf(score, sizeof(score), "%.4f", e.score);
            std::cout << "  " << score << "  " << e.definition.identifier << "\n";
        }
    }
    if (context.degraded)
        std::cerr << "note: reranker unavailable, ranked by embedding similarity\n";
    for (const auto& w : context.warnings) std::cerr << "warning: " << w << "\n";
}

int emit_prompt_or_print(const retrieval::GroundingContext& context,
                         const std::optional<fs::path>& emit_prompt) {
    if (emit_prompt) {
        write_file_atomic(*emit_prompt, context.rendered_prompt);
        std::cout << "prompt written to " << emit_prompt->string() << "\n";
    } else if (!context.rendered_prompt.empty()) {
        std::cout << "---\n" << context.rendered_prompt << "\n";
    }
    return 0;
}

int run_retrieve(Services& services, const config::Config& cfg, const fs::path& kb_path,
                 const fs::path& index_path, const std::string& statement_arg,
                 const std::string& baseline, const std::optional<fs::path>& emit_prompt) {
    std::string statement =
        fs::exists(statement_arg) ? trim(read_file(statement_arg)) : statement_arg;
    if (is_blank(statement)) throw InputError("the problem statement is empty");
    auto kb = kb::load(kb_path);

    if (baseline == "bm25") {
        auto context = retrieval::baseline_bm25(statement, kb, services.gateway().templates(),
                                                cfg.pipeline.context_top);
        print_context(context);
        return emit_prompt_or_print(context, emit_prompt);
    }

    auto index = vindex::VectorIndex::load(index_path);
    auto result =
        retrieval::retrieve(services.gateway(), statement, kb, index, retrieval_options(cfg));

    std::cout << "classification: " << to_string(result.statement.classification) << "\n";
    if (result.statement.rewritten_text)
        std::cout << "rewritten: " << *result.statement.rewritten_text << "\n";
    for (const auto& q : result.queries) {
        std::cout << "concept: " << q.concept_name << "\n";
        std::cout << "  interpretation: " << q.interpretation << "\n";
        std::cout << "  keywords:";
        for (const auto& k : q.keywords) std::cout << " " << k;
        std::cout << "\n";
    }
    std::cout << result.candidates.entries.size() << " candidate definitions\n";
    print_context(result.context);

    if (services.trace) {
        json candidates = json::array();
        for (const auto& c : result.candidates.entries)
            candidates.push_back({{"definition", c.definition_identifier},
                                  {"from_keyword", c.from_keyword},
                                  {"from_semantic", c.from_semantic}});
        services.trace(json{{"kind", "candidates"}, {"entries", candidates}});
        json context = json::array();
        for (const auto& e : result.context.entries)
            context.push_back({{"definition", e.definition.identifier}, {"score", e.score}});
        services.trace(json{{"kind", "context"},
                            {"entries", context},
                            {"degraded", result.context.degraded}});
    }
    return emit_prompt_or_print(result.context, emit_prompt);
}

int run_eval(Services& services, const config::Config& cfg, const fs::path& kb_path,
             const fs::path& index_path, const fs::path& problems_path,
             std::optional<std::size_t> k, bool control,
             const std::optional<fs::path>& report_path) {
    arm_interrupt_handler();
    auto problems = eval::load_problems(problems_path);
    auto kb = kb::load(kb_path);
    auto index = vindex::VectorIndex::load(index_path);
    auto compiler = make_compiler(cfg);

    eval::EvalOptions options;
    options.k = k.value_or(cfg.pipeline.attempts);
    options.hit_k = cfg.pipeline.hit_k;
    options.control = control;
    options.jobs = cfg.jobs;
    options.retrieval = retrieval_options(cfg);
    options.stop = [] { return g_interrupted != 0; };

    auto outcome = eval::run_eval(services.gateway(), problems, kb, index, *compiler, options);
    std::cout << eval::render_table(outcome);
    for (const auto& w : outcome.augmented.warnings) std::cerr << "warning: " << w << "\n";
    if (outcome.control)
        for (const auto& w : outcome.control->warnings) std::cerr << "warning: " << w << "\n";
    if (report_path) {
        write_file_atomic(*report_path, eval::report_json(outcome));
        std::cout << "report written to " << report_path->string() << "\n";
    }

    std::size_t skipped = outcome.augmented.skipped_problems +
                          (outcome.control ? outcome.control->skipped_problems : 0);
    if (skipped > 0) {
        std::cerr << "interrupted; the report covers the finished problems only\n";
        return 1;
    }
    if (outcome.augmented.records.empty()) {
        std::cerr << "no problem could be evaluated\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CRAMF: concept-grounded retrieval for statement autoformalization"};
    app.require_subcommand(1);
    app.fallthrough();

    // global layering flags
    std::string config_path, templates, trace, record, replay;
    std::string chat_script, compiler_command;
    int jobs = 0, candidates = 0;
    std::size_t concepts = 0, keywords = 0, recall_top = 0, rerank_top = 0, context_top = 0;
    std::size_t attempts = 0, hit_k = 0, checkpoint_every = 0, embed_dim = 0;
    double success_ratio = 0.0;

    auto* o_config = app.add_option("--config", config_path, "config file (JSON)");
    auto* o_templates = app.add_option("--templates", templates, "prompt template directory");
    auto* o_jobs = app.add_option("--jobs", jobs, "worker budget for all stages");
    auto* o_trace = app.add_option("--trace", trace, "write a provider-call trace (JSONL)");
    auto* o_record = app.add_option("--record", record, "record provider traffic for replay");
    auto* o_replay = app.add_option("--replay", replay, "serve provider calls from a recording");
    auto* o_concepts = app.add_option("--concepts", concepts, "query concepts per statement");
    auto* o_keywords = app.add_option("--keywords", keywords, "keywords per concept");
    auto* o_recall = app.add_option("--recall-top", recall_top, "semantic recall depth");
    auto* o_rerank = app.add_option("--rerank-top", rerank_top, "concepts kept after rerank");
    auto* o_context = app.add_option("--context-top", context_top, "definitions in the context");
    auto* o_attempts = app.add_option("--attempts", attempts, "formalization attempts per problem");
    auto* o_hit_k = app.add_option("--hit-k", hit_k, "hit-rate rank cutoff");
    auto* o_checkpoint =
        app.add_option("--checkpoint-every", checkpoint_every, "populate checkpoint batch size");
    auto* o_candidates =
        app.add_option("--candidates", candidates, "back-translations per definition");
    auto* o_ratio =
        app.add_option("--success-ratio", success_ratio, "populate completion threshold");
    auto* o_script = app.add_option("--chat-script", chat_script, "scripted chat replies (JSON)");
    auto* o_dim = app.add_option("--embed-dim", embed_dim, "mock embedding dimension");
    auto* o_compiler =
        app.add_option("--compiler-command", compiler_command, "compile command ({{file}})");

    // ingest
    std::string ingest_export, ingest_out, ingest_report;
    auto* cmd_ingest = app.add_subcommand("ingest", "build a knowledge base from a doc export");
    cmd_ingest->add_option("--export", ingest_export, "export directory or file")->required();
    cmd_ingest->add_option("--out", ingest_out, "knowledge base output path")->required();
    auto* o_ingest_report = cmd_ingest->add_option("--report", ingest_report, "summary JSON path");

    // populate
    std::string populate_kb, populate_out;
    bool populate_resume = false;
    auto* cmd_populate =
        app.add_subcommand("populate", "fill in descriptions and concepts via providers");
    cmd_populate->add_option("--kb", populate_kb, "input knowledge base")->required();
    cmd_populate->add_option("--out", populate_out, "populated knowledge base path")->required();
    cmd_populate->add_flag("--resume", populate_resume, "continue from a checkpoint");

    // index
    std::string index_kb, index_side = "concept", index_out;
    auto* cmd_index = app.add_subcommand("index", "encode knowledge units into a vector index");
    cmd_index->add_option("--kb", index_kb, "populated knowledge base")->required();
    cmd_index->add_option("--side", index_side, "search side: concept or description");
    cmd_index->add_option("--out", index_out, "index output path")->required();

    // retrieve
    std::string retrieve_kb, retrieve_index, retrieve_statement, retrieve_baseline;
    std::string retrieve_emit;
    auto* cmd_retrieve =
        app.add_subcommand("retrieve", "ground a problem statement in retrieved definitions");
    cmd_retrieve->add_option("--kb", retrieve_kb, "populated knowledge base")->required();
    auto* o_retrieve_index = cmd_retrieve->add_option("--index", retrieve_index, "vector index");
    cmd_retrieve->add_option("--statement", retrieve_statement, "statement text or file")
        ->required();
    cmd_retrieve->add_option("--baseline", retrieve_baseline, "bypass the pipeline: bm25")
        ->check(CLI::IsMember({"bm25"}));
    auto* o_retrieve_emit =
        cmd_retrieve->add_option("--emit-prompt", retrieve_emit, "write the prompt to a file");

    // eval
    std::string eval_kb, eval_index, eval_problems, eval_report;
    std::size_t eval_k = 0;
    bool eval_control = false;
    auto* cmd_eval = app.add_subcommand("eval", "run the formalization benchmark");
    cmd_eval->add_option("--kb", eval_kb, "populated knowledge base")->required();
    cmd_eval->add_option("--index", eval_index, "vector index")->required();
    cmd_eval->add_option("--problems", eval_problems, "problems file (JSONL)")->required();
    auto* o_eval_k = cmd_eval->add_option("--k", eval_k, "attempts per problem");
    cmd_eval->add_flag("--control", eval_control, "also run the no-retrieval arm");
    auto* o_eval_report = cmd_eval->add_option("--report", eval_report, "structured report path");

    // validate
    std::string validate_kb;
    auto* cmd_validate = app.add_subcommand("validate", "check a knowledge base file");
    cmd_validate->add_option("--kb", validate_kb, "knowledge base path")->required();

    // config
    auto* cmd_config = app.add_subcommand("config", "inspect the layered configuration");
    auto* cmd_config_show = cmd_config->add_subcommand("show", "print the effective config");
    bool config_effective = false;
    cmd_config_show->add_flag("--effective", config_effective,
                              "after defaults, file, environment, and flags");
    cmd_config->require_subcommand(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        config::Overrides env = config::from_env([](const char* v) { return std::getenv(v); });

        std::optional<fs::path> config_file;
        if (o_config->count())
            config_file = config_path;
        else if (const char* v = std::getenv("CRAMF_CONFIG"); v && *v)
            config_file = v;

        config::Overrides flags;
        if (o_templates->count()) flags.templates = templates;
        if (o_jobs->count()) flags.jobs = jobs;
        if (o_concepts->count()) flags.concepts = concepts;
        if (o_keywords->count()) flags.keywords = keywords;
        if (o_recall->count()) flags.recall_top = recall_top;
        if (o_rerank->count()) flags.rerank_top = rerank_top;
        if (o_context->count()) flags.context_top = context_top;
        if (o_attempts->count()) flags.attempts = attempts;
        if (o_hit_k->count()) flags.hit_k = hit_k;
        if (o_checkpoint->count()) flags.checkpoint_every = checkpoint_every;
        if (o_candidates->count()) flags.candidates = candidates;
        if (o_ratio->count()) flags.success_ratio = success_ratio;
        if (o_script->count()) flags.chat_script = chat_script;
        if (o_dim->count()) flags.embed_dim = embed_dim;
        if (o_compiler->count()) flags.compiler_command = compiler_command;

        config::Config cfg = config::resolve(config_file, env, flags);

        auto opt_path = [](const CLI::Option* o, const std::string& v) {
            return o->count() ? std::optional<fs::path>(v) : std::nullopt;
        };
        std::optional<fs::path> trace_path = opt_path(o_trace, trace);
        std::optional<fs::path> record_path = opt_path(o_record, record);
        std::optional<fs::path> replay_path = opt_path(o_replay, replay);

        if (*cmd_config) {
            (void)config_effective;
            std::cout << config::effective_json(cfg);
            return 0;
        }
        if (*cmd_validate) return run_validate(validate_kb);
        if (*cmd_ingest)
            return run_ingest(cfg, ingest_export, ingest_out,
                              opt_path(o_ingest_report, ingest_report));

        // everything below talks to providers
        config::check_templates(cfg);
        Services services = make_services(cfg, replay_path, record_path, trace_path);

        if (*cmd_populate)
            return run_populate(services, cfg, populate_kb, populate_out, populate_resume);
        if (*cmd_index) return run_index(services, cfg, index_kb, index_side, index_out);
        if (*cmd_retrieve) {
            if (retrieve_baseline.empty() && !o_retrieve_index->count())
                throw InputError("retrieve needs --index (or --baseline bm25)");
            return run_retrieve(services, cfg, retrieve_kb, retrieve_index, retrieve_statement,
                                retrieve_baseline, opt_path(o_retrieve_emit, retrieve_emit));
        }
        if (*cmd_eval)
            return run_eval(services, cfg, eval_kb, eval_index, eval_problems,
                            o_eval_k->count() ? std::optional<std::size_t>(eval_k) : std::nullopt,
                            eval_control, opt_path(o_eval_report, eval_report));

        std::cerr << app.help();
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const CramfError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
