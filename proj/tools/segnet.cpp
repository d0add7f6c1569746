// segnet command-line tool: preprocess, train-selector, train-extgen,
// score-sentences, predict, evaluate.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "segnet/config.hpp"
#include "segnet/corpus.hpp"
#include "segnet/decode.hpp"
#include "segnet/evalkit.hpp"
#include "segnet/objective.hpp"
#include "segnet/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segnet;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string profile = "full";
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_path, "flat key=value config file");
    cmd->add_option("--profile", c.profile, "base profile: full or desk")
        ->check(CLI::IsMember({"full", "desk"}));
    cmd->add_option("--set", c.sets, "config override key=value (repeatable)");
    cmd->add_option("--seed", c.seed, "deterministic seed")->each([&c](const std::string&) {
        c.seed_given = true;
    });
    cmd->add_option("--threads", c.threads, "worker threads (never affects results)")
        ->check(CLI::PositiveNumber);
}

// precedence: profile defaults < SEGNET_SEED env < config file < --set < --seed
ModelConfig make_config(const CommonOpts& c) {
    ModelConfig cfg = ModelConfig::profile(c.profile);
    if (const char* env = std::getenv("SEGNET_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("SEGNET_SEED is not an integer: " + std::string(env));
        }
    }
    if (!c.config_path.empty()) {
        std::ifstream is(c.config_path);
        if (!is) throw ConfigError("cannot read config file: " + c.config_path);
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        cfg.apply_text(text);
    }
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed_given) cfg.seed = c.seed;
    cfg.finalize();
    return cfg;
}

void write_effective_config(const ModelConfig& cfg, const std::string& next_to) {
    std::ofstream os(next_to + ".config");
    if (!os) throw DataError("cannot write effective config next to " + next_to);
    os << cfg.serialize();
}

std::vector<Document> load_documents(const std::string& path, std::size_t threads) {
    if (jsonl::looks_processed(path)) return jsonl::read_documents(path);
    RuleTagger tagger;
    auto raws = jsonl::read_raw(path);
    std::vector<Document> docs(raws.size());
    std::string error;
    std::mutex error_mu;
    parallel_for(raws.size(), threads, [&](std::size_t i) {
        try {
            docs[i] = preprocess(raws[i], tagger);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(error_mu);
            if (error.empty()) error = e.what();
        }
    });
    if (!error.empty()) throw DataError(error);
    return docs;
}

Vocab obtain_vocab(const std::string& path, const std::vector<Document>& docs,
                   const ModelConfig& cfg) {
    if (!path.empty() && fs::exists(path)) return Vocab::load(path);
    Vocab v = Vocab::build(docs, cfg.vocab_size);
    if (!path.empty()) v.save(path);
    return v;
}

std::string join_tokens(const std::vector<std::string>& toks) {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

std::string salience_line(const Document& doc) {
    std::string s;
    for (std::size_t i = 0; i < doc.salience.size(); ++i) {
        if (i) s += ' ';
        s += doc.salience[i] ? '1' : '0';
    }
    return s;
}

// ----------------------------------------------------------- subcommands

int run_preprocess(const CommonOpts& common, const std::string& input,
                   const std::string& output, const std::string& vocab_path) {
    ModelConfig cfg = make_config(common);
    auto docs = load_documents(input, common.threads);
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    for (const auto& doc : docs)
        std::cout << "id=" << doc.id << " salience=" << salience_line(doc) << "\n";
    jsonl::write_documents(output, docs);
    if (!vocab_path.empty()) vocab.save(vocab_path);
    write_effective_config(cfg, output);
    std::cout << "[segnet] cmd=preprocess docs=" << docs.size() << " vocab=" << vocab.size()
              << " output=" << output << "\n";
    return 0;
}

int run_train_selector(const CommonOpts& common, const std::string& data,
                       const std::string& val_path, const std::string& vocab_path,
                       const std::string& out, const std::string& metrics) {
    ModelConfig cfg = make_config(common);
    auto train_docs = load_documents(data, common.threads);
    auto val_docs = val_path.empty() ? train_docs : load_documents(val_path, common.threads);
    Vocab vocab = obtain_vocab(vocab_path, train_docs, cfg);
    cfg.vocab_size = vocab.size();

    SelectorModel model(cfg);
    auto result = train_selector(model, train_docs, val_docs, vocab);
    ckpt::save(out, model.cfg.serialize(), model.params);
    if (!metrics.empty()) write_selector_csv(metrics, result);
    write_effective_config(model.cfg, out);
    if (result.aborted) {
        std::cerr << "training aborted on non-finite loss; best checkpoint kept\n";
        throw NumericError("selector training diverged");
    }
    std::cout << "[segnet] cmd=train-selector epochs=" << result.log.size()
              << " best_val_f1=" << ModelConfig::num(result.best_val)
              << " checkpoint=" << out << "\n";
    return 0;
}

int run_train_extgen(const CommonOpts& common, const std::string& data,
                     const std::string& val_path, const std::string& vocab_path,
                     const std::string& out, const std::string& metrics, double target_loss) {
    ModelConfig cfg = make_config(common);
    auto train_docs = load_documents(data, common.threads);
    auto val_docs = val_path.empty() ? train_docs : load_documents(val_path, common.threads);
    Vocab vocab = obtain_vocab(vocab_path, train_docs, cfg);
    cfg.vocab_size = vocab.size();

    ExtGenModel model(cfg);
    RuleTagger tagger;
    auto result = train_extgen(model, train_docs, val_docs, vocab, tagger, target_loss);
    ckpt::save(out, model.cfg.serialize(), model.params);
    if (!metrics.empty()) write_extgen_csv(metrics, result);
    write_effective_config(model.cfg, out);
    if (result.aborted) {
        std::cerr << "training aborted on non-finite loss; best checkpoint kept\n";
        throw NumericError("extractor-generator training diverged");
    }
    const double final_loss = result.log.empty() ? 0.0 : result.log.back().l_eg;
    if (!result.log.empty() && result.log.back().clamped > 0)
        std::cerr << "warning: " << result.log.back().clamped
                  << " target probabilities hit the clamping floor in the final epoch\n";
    std::cout << "[segnet] cmd=train-extgen epochs=" << result.log.size()
              << " final_l_eg=" << ModelConfig::num(final_loss) << " checkpoint=" << out << "\n";
    return 0;
}

int run_score_sentences(const CommonOpts& common, const std::string& ckpt_path,
                        const std::string& vocab_path, const std::string& input,
                        const std::string& output, std::size_t budget, double threshold) {
    auto loaded = ckpt::load(ckpt_path);
    ModelConfig cfg = ModelConfig::parse(loaded.config_text);
    SelectorModel model(cfg);
    ckpt::restore(model.params, loaded);
    Vocab vocab = Vocab::load(vocab_path);

    auto docs = load_documents(input, common.threads);
    std::vector<json> lines(docs.size());
    parallel_for(docs.size(), common.threads, [&](std::size_t i) {
        auto probs = model.score_document(docs[i], vocab);
        auto selected = select_sentences(docs[i], probs, budget, threshold);
        json j;
        j["id"] = docs[i].id;
        j["probs"] = probs;
        j["selected"] = selected;
        lines[i] = std::move(j);
    });
    std::ofstream os(output);
    if (!os) throw DataError("cannot write: " + output);
    for (const auto& j : lines) os << j.dump() << "\n";
    write_effective_config(cfg, output);
    std::cout << "[segnet] cmd=score-sentences docs=" << docs.size() << " output=" << output
              << "\n";
    return 0;
}

int run_predict(const CommonOpts& common, const std::string& selector_ckpt,
                const std::string& extgen_ckpt, const std::string& vocab_path,
                const std::string& input, const std::string& output, std::size_t budget,
                double threshold, std::size_t max_len, bool keep_cross_duplicates,
                bool gate_trace) {
    auto sel_loaded = ckpt::load(selector_ckpt);
    SelectorModel selector(ModelConfig::parse(sel_loaded.config_text));
    ckpt::restore(selector.params, sel_loaded);

    auto gen_loaded = ckpt::load(extgen_ckpt);
    ExtGenModel extgen(ModelConfig::parse(gen_loaded.config_text));
    ckpt::restore(extgen.params, gen_loaded);

    Vocab vocab = Vocab::load(vocab_path);
    auto docs = load_documents(input, common.threads);

    PredictOptions opt;
    opt.budget = budget;
    opt.select_threshold = threshold;
    opt.max_len = max_len;
    opt.drop_absent_duplicating_present = !keep_cross_duplicates;

    std::vector<json> lines(docs.size());
    std::size_t warnings = 0;
    parallel_for(docs.size(), common.threads, [&](std::size_t i) {
        auto pred = predict(docs[i], selector, extgen, vocab, opt);
        json j;
        j["id"] = pred.id;
        json present = json::array(), absent = json::array(), tags = json::array();
        for (const auto& ph : pred.present) present.push_back(join_tokens(ph));
        for (const auto& ph : pred.absent) absent.push_back(join_tokens(ph));
        for (const auto& tg : pred.absent_tags) tags.push_back(tg);
        j["present"] = present;
        j["absent"] = absent;
        j["absent_tags"] = tags;
        if (gate_trace) {
            j["gate_trace"] = pred.gate_trace;
            j["decoder_trace"] = pred.decoder_trace;
        }
        if (pred.empty_input) j["warning"] = "empty document";
        lines[i] = std::move(j);
    });
    for (const auto& l : lines)
        if (l.contains("warning")) ++warnings;
    std::ofstream os(output);
    if (!os) throw DataError("cannot write: " + output);
    for (const auto& j : lines) os << j.dump() << "\n";
    write_effective_config(extgen.cfg, output);
    std::cout << "[segnet] cmd=predict docs=" << docs.size() << " warnings=" << warnings
              << " output=" << output << "\n";
    return 0;
}

struct PredLine {
    std::vector<std::vector<std::string>> present, absent;
};

int run_evaluate(const CommonOpts& common, const std::string& pred_path,
                 const std::string& gold_path, const std::string& split, const std::string& k,
                 const std::string& recall_denom, const std::string& report_path) {
    if (k != "m,5" && k != "m" && k != "5")
        throw ConfigError("--k accepts m,5 or m or 5");
    const bool recall_min5 = recall_denom == "min5";

    std::map<std::string, PredLine> preds;
    {
        std::ifstream is(pred_path);
        if (!is) throw DataError("cannot open predictions: " + pred_path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            PredLine p;
            auto read_list = [&](const char* key, std::vector<std::vector<std::string>>& out) {
                if (!j.contains(key)) return;
                std::set<std::string> seen;
                for (const auto& s : j[key]) {
                    auto toks = normalize_phrase(s.get<std::string>());
                    if (toks.empty()) continue;
                    if (seen.insert(stem_key(toks)).second) out.push_back(std::move(toks));
                }
            };
            read_list("present", p.present);
            read_list("absent", p.absent);
            preds[j.at("id").get<std::string>()] = std::move(p);
        }
    }

    auto gold_docs = load_documents(gold_path, common.threads);
    std::vector<DocPhrases> present_docs, absent_docs;
    for (const auto& doc : gold_docs) {
        const PredLine* p = nullptr;
        if (auto it = preds.find(doc.id); it != preds.end()) p = &it->second;
        DocPhrases dp;
        for (const auto& pp : doc.present) dp.gold.push_back(pp.tokens);
        if (p) dp.predicted = p->present;
        present_docs.push_back(dp);
        DocPhrases da;
        da.gold = doc.absent;
        if (p) da.predicted = p->absent;
        absent_docs.push_back(da);
    }

    EvalReport report;
    if (split == "present" || split == "both") {
        report.present = score_split(present_docs, recall_min5);
        report.has_present = true;
    }
    if (split == "absent" || split == "both") {
        report.absent = score_split(absent_docs, recall_min5);
        report.has_absent = true;
    }

    std::cout << report.table();
    auto fixed3 = [](double v) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(3) << v;
        return os.str();
    };
    auto summary = [&](const char* name, const SplitScores& s) {
        std::cout << "[segnet] cmd=evaluate split=" << name << " F1@M=" << fixed3(s.at_m.f1)
                  << " F1@5=" << fixed3(s.at_5.f1) << " MAE=" << fixed3(s.count_mae)
                  << " avg_pred=" << fixed3(s.avg_predicted) << " docs=" << s.documents << "\n";
    };
    if (report.has_present) summary("present", report.present);
    if (report.has_absent) summary("absent", report.absent);

    if (!report_path.empty()) {
        json j;
        auto fill = [](const SplitScores& s) {
            json o;
            o["f1_at_m"] = s.at_m.f1;
            o["p_at_m"] = s.at_m.precision;
            o["r_at_m"] = s.at_m.recall;
            o["f1_at_5"] = s.at_5.f1;
            o["p_at_5"] = s.at_5.precision;
            o["r_at_5"] = s.at_5.recall;
            o["count_mae"] = s.count_mae;
            o["avg_predicted"] = s.avg_predicted;
            o["documents"] = s.documents;
            return o;
        };
        if (report.has_present) j["present"] = fill(report.present);
        if (report.has_absent) j["absent"] = fill(report.absent);
        std::ofstream os(report_path);
        if (!os) throw DataError("cannot write report: " + report_path);
        os << j.dump(2) << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"select-extract-generate keyphrase pipeline"};
    app.require_subcommand(1);

    CommonOpts common;

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "tokenize, label and serialize a corpus");
    std::string pre_in, pre_out, pre_vocab;
    std::size_t max_src_len = 200;
    std::size_t vocab_size_flag = 0;
    pre->add_option("--input", pre_in, "raw JSON-lines corpus")->required();
    pre->add_option("--output", pre_out, "processed dataset path")->required();
    pre->add_option("--vocab", pre_vocab, "write the vocabulary word list here");
    pre->add_option("--max-src-len", max_src_len, "selected-sentence word budget");
    pre->add_option("--vocab-size", vocab_size_flag, "vocabulary cap");
    add_common(pre, common);

    // train-selector
    auto* tsel = app.add_subcommand("train-selector", "train the sentence selector");
    std::string tsel_data, tsel_val, tsel_vocab, tsel_out, tsel_metrics;
    tsel->add_option("--data", tsel_data, "training corpus (raw or processed)")->required();
    tsel->add_option("--val", tsel_val, "validation corpus (defaults to --data)");
    tsel->add_option("--vocab", tsel_vocab, "vocabulary path (built if missing)");
    tsel->add_option("--out", tsel_out, "checkpoint output")->required();
    tsel->add_option("--metrics", tsel_metrics, "CSV metrics log");
    add_common(tsel, common);

    // train-extgen
    auto* tgen = app.add_subcommand("train-extgen", "train the extractor-generator");
    std::string tgen_data, tgen_val, tgen_vocab, tgen_out, tgen_metrics;
    double tgen_target = -1.0;
    tgen->add_option("--data", tgen_data, "training corpus (raw or processed)")->required();
    tgen->add_option("--val", tgen_val, "validation corpus (defaults to --data)");
    tgen->add_option("--vocab", tgen_vocab, "vocabulary path (built if missing)");
    tgen->add_option("--out", tgen_out, "checkpoint output")->required();
    tgen->add_option("--metrics", tgen_metrics, "CSV metrics log");
    tgen->add_option("--target-loss", tgen_target, "stop once training loss falls below");
    add_common(tgen, common);

    // score-sentences
    auto* score = app.add_subcommand("score-sentences", "salience probabilities per sentence");
    std::string sc_ckpt, sc_vocab, sc_in, sc_out;
    std::size_t sc_budget = 200;
    double sc_threshold = 0.5;
    score->add_option("--ckpt", sc_ckpt, "selector checkpoint")->required();
    score->add_option("--vocab", sc_vocab, "vocabulary path")->required();
    score->add_option("--input", sc_in, "corpus to score")->required();
    score->add_option("--output", sc_out, "scored JSON-lines output")->required();
    score->add_option("--budget", sc_budget, "selection word budget");
    score->add_option("--threshold", sc_threshold, "selection threshold");
    add_common(score, common);

    // predict
    auto* prd = app.add_subcommand("predict", "run the full keyphrase pipeline");
    std::string pr_sel, pr_gen, pr_vocab, pr_in, pr_out;
    std::size_t pr_budget = 200, pr_maxlen = 40;
    double pr_threshold = 0.5;
    bool pr_keep_dup = false, pr_gate_trace = false;
    prd->add_option("--selector-ckpt", pr_sel, "selector checkpoint")->required();
    prd->add_option("--extgen-ckpt", pr_gen, "extractor-generator checkpoint")->required();
    prd->add_option("--vocab", pr_vocab, "vocabulary path")->required();
    prd->add_option("--input", pr_in, "raw or processed corpus")->required();
    prd->add_option("--output", pr_out, "prediction JSON-lines output")->required();
    prd->add_option("--budget", pr_budget, "selection word budget");
    prd->add_option("--threshold", pr_threshold, "selection threshold");
    prd->add_option("--max-len", pr_maxlen, "decoder length limit");
    prd->add_flag("--keep-cross-duplicates", pr_keep_dup,
                  "keep absent phrases that duplicate an extracted present phrase");
    prd->add_flag("--gate-trace", pr_gate_trace, "emit copy-gate and token traces");
    add_common(prd, common);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score predictions against gold keyphrases");
    std::string ev_pred, ev_gold, ev_split = "both", ev_k = "m,5", ev_rdenom = "gold",
                ev_report;
    ev->add_option("--pred", ev_pred, "prediction JSON-lines")->required();
    ev->add_option("--gold", ev_gold, "gold corpus (raw or processed)")->required();
    ev->add_option("--split", ev_split, "present|absent|both")
        ->check(CLI::IsMember({"present", "absent", "both"}));
    ev->add_option("--k", ev_k, "cutoffs to report (m,5)");
    ev->add_option("--recall-denom", ev_rdenom, "recall denominator at k=5: gold|min5")
        ->check(CLI::IsMember({"gold", "min5"}));
    ev->add_option("--report", ev_report, "also write a JSON report here");
    add_common(ev, common);

    try {
        app.parse(argc, argv);
        if (pre->parsed()) {
            if (vocab_size_flag)
                common.sets.push_back("vocab_size=" + std::to_string(vocab_size_flag));
            if (pre->count("--max-src-len"))
                common.sets.push_back("src_budget=" + std::to_string(max_src_len));
            return run_preprocess(common, pre_in, pre_out, pre_vocab);
        }
        if (tsel->parsed())
            return run_train_selector(common, tsel_data, tsel_val, tsel_vocab, tsel_out,
                                      tsel_metrics);
        if (tgen->parsed())
            return run_train_extgen(common, tgen_data, tgen_val, tgen_vocab, tgen_out,
                                    tgen_metrics, tgen_target);
        if (score->parsed())
            return run_score_sentences(common, sc_ckpt, sc_vocab, sc_in, sc_out, sc_budget,
                                       sc_threshold);
        if (prd->parsed())
            return run_predict(common, pr_sel, pr_gen, pr_vocab, pr_in, pr_out, pr_budget,
                               pr_threshold, pr_maxlen, pr_keep_dup, pr_gate_trace);
        if (ev->parsed())
            return run_evaluate(common, ev_pred, ev_gold, ev_split, ev_k, ev_rdenom, ev_report);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 5;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
