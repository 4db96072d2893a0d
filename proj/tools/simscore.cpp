#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "simscore/checkpoint.hpp"
#include "simscore/config.hpp"
#include "simscore/data.hpp"
#include "simscore/ensemble.hpp"
#include "simscore/errors.hpp"
#include "simscore/fixtures.hpp"
#include "simscore/gradcheck.hpp"
#include "simscore/model.hpp"
#include "simscore/objectives.hpp"
#include "simscore/rng.hpp"
#include "simscore/training.hpp"

namespace fs = std::filesystem;
using namespace simscore;
using nlohmann::json;

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

// every run directory gets the exact config that produced it, first thing
void write_config_json(const fs::path& dir, const json& j) {
    fs::create_directories(dir);
    write_text(dir / "config.json", j.dump(2) + "\n");
}

json mirror_with_command(const RunConfig& cfg, const std::string& command) {
    json j = json::parse(run_config_to_json(cfg));
    j["command"] = command;
    return j;
}

json metrics_json(const MetricReport& m) {
    json j;
    j["n"] = m.n;
    j["pearson_defined"] = m.pearson_defined;
    j["pearson"] = m.pearson_defined ? json(m.pearson) : json(nullptr);
    j["mse"] = m.mse;
    j["f1"] = m.f1;
    j["auc_defined"] = m.auc_defined;
    j["auc"] = m.auc_defined ? json(m.auc) : json(nullptr);
    return j;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets) {
    RunConfig cfg = parse_run_config(path);
    for (const std::string& s : sets) apply_override(cfg, s);
    return cfg;
}

void require_path(const std::string& value, const std::string& key) {
    if (value.empty()) throw DataError(key + " must be set in the config");
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        const std::size_t b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const std::size_t e = item.find_last_not_of(" \t");
        out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

std::string pred_csv(const std::vector<Record>& records, const std::vector<double>& preds) {
    std::ostringstream os;
    os << "id,prediction\n";
    for (std::size_t i = 0; i < records.size(); ++i)
        os << records[i].id << ',' << fmt17(preds[i]) << '\n';
    return os.str();
}

// ---------------------------------------------------------------- commands

void cmd_prepare_folds(const std::string& data, const std::string& out, std::size_t k,
                       std::size_t bins, std::uint64_t seed) {
    const fs::path od(out);
    write_config_json(od, {{"command", "prepare-folds"},
                           {"data", data},
                           {"out", out},
                           {"k", k},
                           {"bins", bins},
                           {"seed", seed}});
    IngestResult ing = ingest(data);
    FoldAssignment folds = make_folds(ing.records, k, bins, seed);
    FoldAudit audit = audit_folds(ing.records, folds);
    write_text(od / "audit.txt", audit.text() + "\n");
    if (!audit.pass()) throw DataError("fold audit failed: " + audit.text());
    save_folds(folds, (od / "folds.csv").string());
    std::cout << audit.text() << "\n"
              << "wrote " << (od / "folds.csv").string() << "\n";
}

std::string train_report_json(const TrainReport& r) {
    json j;
    j["best_epoch"] = r.best_epoch;
    j["epochs"] = json::array();
    for (const EpochStats& e : r.epochs) {
        json ej = metrics_json(e.val);
        ej["train_loss"] = e.train_loss;
        j["epochs"].push_back(ej);
    }
    return j.dump(2) + "\n";
}

std::string series_csv(const TrainReport& r) {
    std::ostringstream os;
    os << "step,loss,val_pearson,val_mse,val_f1,val_auc\n";
    for (const StepPoint& sp : r.series) {
        os << sp.step << ',' << fmt17(sp.loss) << ',';
        if (sp.val.n > 0) {
            if (sp.val.pearson_defined) os << fmt17(sp.val.pearson);
            os << ',' << fmt17(sp.val.mse) << ',' << fmt17(sp.val.f1) << ',';
            if (sp.val.auc_defined) os << fmt17(sp.val.auc);
        } else {
            os << ",,,";
        }
        os << '\n';
    }
    return os.str();
}

void cmd_train(const RunConfig& cfg) {
    require_path(cfg.out_dir, "run.out");
    require_path(cfg.data_path, "run.data");
    require_path(cfg.folds_path, "run.folds");
    write_config_json(cfg.out_dir, mirror_with_command(cfg, "train"));

    IngestResult ing = ingest(cfg.data_path);
    FoldAssignment folds = load_folds(cfg.folds_path);
    TrainResult tr = train(cfg.model, cfg.trainer, ing.records, folds, cfg.fold_index);

    const fs::path fd = fs::path(cfg.out_dir) / ("fold" + std::to_string(cfg.fold_index));
    fs::create_directories(fd);
    ModelConfig resolved = cfg.model;
    if (resolved.vocab_size == 0) resolved.vocab_size = tr.vocab.size();
    save_checkpoint((fd / "best.ckpt").string(), resolved, tr.vocab, tr.best_params);
    write_text(fd / "report.json", train_report_json(tr.report));
    write_text(fd / "series.csv", series_csv(tr.report));

    std::cout << tr.report.text() << "checkpoint: " << (fd / "best.ckpt").string() << "\n";
}

void cmd_predict(const std::string& checkpoint, const std::string& data, const std::string& out,
                 std::size_t max_len, std::size_t batch) {
    write_text(out + ".config.json", json{{"command", "predict"},
                                          {"checkpoint", checkpoint},
                                          {"data", data},
                                          {"out", out},
                                          {"max_len", max_len},
                                          {"batch", batch}}
                                         .dump(2) +
                                        "\n");
    Checkpoint ck = load_checkpoint(checkpoint);
    IngestResult ing = ingest(data);
    Vocabulary vocab = Vocabulary::from_tokens(ck.vocab_tokens);
    EvalResult ev = evaluate(ck.config, ck.params, vocab, ing.records, max_len, batch);
    write_text(out, pred_csv(ing.records, ev.clamped));
    std::cout << "wrote " << ing.records.size() << " predictions to " << out << "\n";
}

void cmd_evaluate(const std::string& checkpoint, const std::string& data, const std::string& out,
                  std::size_t max_len, std::size_t batch, double threshold) {
    const fs::path od(out);
    write_config_json(od, {{"command", "evaluate"},
                           {"checkpoint", checkpoint},
                           {"data", data},
                           {"out", out},
                           {"max_len", max_len},
                           {"batch", batch},
                           {"f1_threshold", threshold}});
    Checkpoint ck = load_checkpoint(checkpoint);
    IngestResult ing = ingest(data);
    Vocabulary vocab = Vocabulary::from_tokens(ck.vocab_tokens);
    EvalResult ev = evaluate(ck.config, ck.params, vocab, ing.records, max_len, batch, threshold);
    write_text(od / "metrics.json", metrics_json(ev.metrics).dump(2) + "\n");
    std::cout << ev.metrics.text() << "\n";
}

void cmd_gradcheck(std::size_t seeds, double eps, double tol, const std::string& out) {
    if (!out.empty())
        write_config_json(out, {{"command", "gradcheck"},
                                {"seeds", seeds},
                                {"eps", eps},
                                {"tol", tol},
                                {"out", out}});

    // desk-scale end-to-end regime: token batch through the full stack into
    // the pearson loss, weights scaled up so true gradients clear the
    // finite-difference noise floor
    std::vector<Record> recs{{"a", "x", "y", "A01", 0.5}, {"b", "u", "w", "B02", 0.5}};
    Vocabulary vocab = Vocabulary::build(recs, 1);
    double max_err = 0.0;
    bool all_pass = true;
    for (std::size_t si = 0; si < seeds; ++si) {
        const std::uint64_t seed = 101 + si;
        ModelConfig cfg;
        cfg.vocab_size = vocab.size();
        cfg.embed_dim = 8;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.ffn_dim = 16;
        cfg.lstm_hidden = 4;
        cfg.lstm_layers = 2;
        cfg.max_seq_len = 10;
        cfg.sector_hidden = 3;
        cfg.freeze_embeddings = false;
        cfg.head_variant = si % 3 == 2 ? HeadVariant::sector : HeadVariant::standard;

        ParamStore p = init_params(cfg, seed);
        for (auto& [name, t] : p.items())
            for (double& x : t.impl()->data) x *= 8.0;

        Rng rng(seed);
        const std::size_t bsz = 4, seq = 8;
        BatchInput b;
        b.token_ids.resize(bsz);
        std::vector<double> mask(bsz * seq, 0.0);
        for (std::size_t r = 0; r < bsz; ++r) {
            const std::size_t real = 1 + rng.next_u64() % seq;
            for (std::size_t t = 0; t < seq; ++t) {
                const bool live = t < real;
                b.token_ids[r].push_back(live ? static_cast<int>(rng.next_u64() % cfg.vocab_size)
                                              : 0);
                mask[r * seq + t] = live ? 1.0 : 0.0;
            }
        }
        b.mask = Tensor({bsz, seq}, mask);
        BatchInput sb = make_sector_batch(vocab, {recs[0], recs[1], recs[0], recs[1]});
        Rng trng(seed + 500);
        Tensor target = Tensor::uniform({bsz}, 0.0, 1.0, trng);

        std::vector<std::pair<std::string, Tensor>> params;
        for (auto& [name, t] : p.items()) params.emplace_back(name, t);
        auto f = [&] {
            const BatchInput* sp = cfg.head_variant == HeadVariant::sector ? &sb : nullptr;
            return pearson_loss(forward(cfg, p, b, sp).pred, target);
        };
        GradcheckReport rep = gradcheck(f, params, eps, tol, 3, seed, 1e-5);
        max_err = std::max(max_err, rep.max_rel_err);
        if (!rep.pass()) {
            all_pass = false;
            std::cerr << "seed " << seed << ":\n" << rep.summary();
        }
    }

    std::cout << "gradcheck: " << seeds << " seeds, max rel err " << fmt17(max_err) << " (tol "
              << tol << "): " << (all_pass ? "pass" : "FAIL") << "\n";
    if (!out.empty()) {
        json j{{"seeds", seeds}, {"eps", eps}, {"tol", tol}, {"max_rel_err", max_err},
               {"pass", all_pass}};
        write_text(fs::path(out) / "report.json", j.dump(2) + "\n");
    }
    if (!all_pass)
        throw NumericError("gradient check failed: max rel err " + fmt17(max_err) +
                           " exceeds tol " + fmt17(tol));
}

void cmd_ensemble(const std::string& manifest_path, const std::string& data,
                  const std::string& out, std::size_t max_len, std::size_t batch,
                  double threshold) {
    const fs::path od(out);
    write_config_json(od, {{"command", "ensemble"},
                           {"manifest", manifest_path},
                           {"data", data},
                           {"out", out},
                           {"max_len", max_len},
                           {"batch", batch},
                           {"f1_threshold", threshold}});
    EnsembleManifest manifest = load_manifest(manifest_path);
    IngestResult ing = ingest(data);
    EnsembleReport rep = ensemble_evaluate(manifest.members, ing.records, max_len, batch,
                                           threshold, manifest.rank_average);

    write_text(od / "blended.csv", pred_csv(ing.records, rep.output.blended));
    for (std::size_t m = 0; m < rep.output.member_preds.size(); ++m)
        write_text(od / ("member" + std::to_string(m) + ".csv"),
                   pred_csv(ing.records, rep.output.member_preds[m]));

    json j;
    j["weights"] = rep.output.weights;
    j["blended"] = metrics_json(rep.blended);
    j["members"] = json::array();
    for (const MetricReport& m : rep.members) j["members"].push_back(metrics_json(m));
    write_text(od / "report.json", j.dump(2) + "\n");
    std::cout << "blend of " << rep.members.size() << " members: " << rep.blended.text() << "\n";
}

void cmd_pretrain_rtd(const RunConfig& cfg) {
    require_path(cfg.out_dir, "run.out");
    require_path(cfg.data_path, "run.data");
    write_config_json(cfg.out_dir, mirror_with_command(cfg, "pretrain-rtd"));

    IngestResult ing = ingest(cfg.data_path);
    Vocabulary vocab = Vocabulary::build(ing.records, 1);
    ModelConfig resolved = cfg.model;
    if (resolved.vocab_size == 0)
        resolved.vocab_size = vocab.size();
    else if (resolved.vocab_size < vocab.size())
        throw ConfigError("vocab_size " + std::to_string(resolved.vocab_size) +
                          " does not cover the corpus vocabulary (" +
                          std::to_string(vocab.size()) + " tokens)");
    ParamStore params = init_params(resolved, derive_seed(cfg.trainer.seed, "model"));
    RtdReport rep = rtd_pretrain(resolved, params, vocab, ing.records, cfg.rtd_steps,
                                 cfg.rtd_replace_prob, cfg.trainer);

    const fs::path od(cfg.out_dir);
    save_checkpoint((od / "rtd.ckpt").string(), resolved, vocab, params);
    std::ostringstream os;
    os << "step,loss\n";
    for (std::size_t i = 0; i < rep.losses.size(); ++i)
        os << (i + 1) << ',' << fmt17(rep.losses[i]) << '\n';
    write_text(od / "losses.csv", os.str());
    json j{{"steps", cfg.rtd_steps},
           {"replace_prob", cfg.rtd_replace_prob},
           {"initial_loss", rep.initial_loss},
           {"final_loss", rep.final_loss}};
    write_text(od / "report.json", j.dump(2) + "\n");
    std::cout << "rtd loss: " << rep.initial_loss << " -> " << rep.final_loss << " over "
              << cfg.rtd_steps << " steps\n";
}

void cmd_ablation(const RunConfig& cfg, const std::string& stages_arg) {
    require_path(cfg.out_dir, "run.out");
    require_path(cfg.data_path, "run.data");
    require_path(cfg.folds_path, "run.folds");
    write_config_json(cfg.out_dir, mirror_with_command(cfg, "ablation"));

    IngestResult ing = ingest(cfg.data_path);
    FoldAssignment folds = load_folds(cfg.folds_path);
    AblationTable table = run_ablation(cfg.model, cfg.trainer, ing.records, folds, cfg.fold_index,
                                       split_csv_list(stages_arg));

    const fs::path od(cfg.out_dir);
    write_text(od / "ablation.txt", table.text());
    json j;
    j["rows"] = json::array();
    for (const AblationRow& row : table.rows) {
        json rj = metrics_json(row.metrics);
        rj["label"] = row.label;
        rj["failed"] = row.failed;
        rj["error"] = row.error;
        j["rows"].push_back(rj);
    }
    write_text(od / "ablation.json", j.dump(2) + "\n");
    std::cout << table.text();
}

void cmd_make_fixture(const std::string& kind, const std::string& out, std::uint64_t seed) {
    const fs::path od(out);
    write_config_json(od,
                      {{"command", "make-fixture"}, {"kind", kind}, {"out", out}, {"seed", seed}});
    if (kind == "fold") {
        write_csv(make_fold_fixture(seed), (od / "data.csv").string());
        std::cout << "wrote " << (od / "data.csv").string() << "\n";
    } else if (kind == "learnability") {
        LearnabilityFixture fx = make_learnability_fixture(seed);
        std::vector<Record> all = fx.train;
        all.insert(all.end(), fx.eval.begin(), fx.eval.end());
        write_csv(all, (od / "data.csv").string());
        FoldAssignment folds;
        folds.k = 2;
        for (const Record& r : fx.train) folds.fold_of[r.id] = 0;
        for (const Record& r : fx.eval) folds.fold_of[r.id] = 1;
        save_folds(folds, (od / "folds.csv").string());
        std::cout << "wrote " << (od / "data.csv").string() << " and "
                  << (od / "folds.csv").string() << "\n";
    } else if (kind == "rtd") {
        write_csv(make_rtd_corpus(seed), (od / "corpus.csv").string());
        std::cout << "wrote " << (od / "corpus.csv").string() << "\n";
    } else {
        throw DataError("unknown fixture kind '" + kind + "' (fold, learnability, rtd)");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semantic similarity scoring pipeline"};
    app.require_subcommand(1);

    // prepare-folds
    std::string pf_data, pf_out;
    std::size_t pf_k = 5, pf_bins = 10;
    std::uint64_t pf_seed = 42;
    CLI::App* pf = app.add_subcommand("prepare-folds", "grouped stratified fold assignment");
    pf->add_option("--data", pf_data, "input CSV")->required();
    pf->add_option("--out", pf_out, "output directory")->required();
    pf->add_option("--k", pf_k, "fold count");
    pf->add_option("--bins", pf_bins, "score bins for stratification");
    pf->add_option("--seed", pf_seed, "assignment seed");

    // train
    std::string tr_config;
    std::size_t tr_fold = 0;
    std::vector<std::string> tr_sets;
    CLI::App* tr = app.add_subcommand("train", "train one fold from a run config");
    tr->add_option("--config", tr_config, "run config file")->required();
    CLI::Option* tr_fold_opt = tr->add_option("--fold", tr_fold, "validation fold override");
    tr->add_option("--set", tr_sets, "key=value config override");

    // predict
    std::string pr_ckpt, pr_data, pr_out;
    std::size_t pr_max_len = 32, pr_batch = 16;
    CLI::App* pr = app.add_subcommand("predict", "score records with a checkpoint");
    pr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
    pr->add_option("--data", pr_data, "input CSV")->required();
    pr->add_option("--out", pr_out, "predictions CSV path")->required();
    pr->add_option("--max-len", pr_max_len, "tokenizer pad length");
    pr->add_option("--batch", pr_batch, "batch size");

    // evaluate
    std::string ev_ckpt, ev_data, ev_out;
    std::size_t ev_max_len = 32, ev_batch = 16;
    double ev_threshold = 0.5;
    CLI::App* ev = app.add_subcommand("evaluate", "metrics for a checkpoint on labeled data");
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--data", ev_data, "input CSV")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--max-len", ev_max_len, "tokenizer pad length");
    ev->add_option("--batch", ev_batch, "batch size");
    ev->add_option("--threshold", ev_threshold, "F1 threshold");

    // gradcheck
    std::size_t gc_seeds = 20;
    double gc_eps = 1e-5, gc_tol = 1e-4;
    std::string gc_out;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of the full stack");
    gc->add_option("--seeds", gc_seeds, "random model/batch seeds");
    gc->add_option("--eps", gc_eps, "central-difference step");
    gc->add_option("--tol", gc_tol, "relative error tolerance");
    gc->add_option("--out", gc_out, "optional report directory");

    // ensemble
    std::string en_manifest, en_data, en_out;
    std::size_t en_max_len = 32, en_batch = 16;
    double en_threshold = 0.5;
    CLI::App* en = app.add_subcommand("ensemble", "blend member checkpoints over a dataset");
    en->add_option("--manifest", en_manifest, "ensemble manifest JSON")->required();
    en->add_option("--data", en_data, "input CSV")->required();
    en->add_option("--out", en_out, "output directory")->required();
    en->add_option("--max-len", en_max_len, "tokenizer pad length");
    en->add_option("--batch", en_batch, "batch size");
    en->add_option("--threshold", en_threshold, "F1 threshold");

    // pretrain-rtd
    std::string rt_config;
    std::vector<std::string> rt_sets;
    CLI::App* rt = app.add_subcommand("pretrain-rtd", "replaced-token-detection pretraining");
    rt->add_option("--config", rt_config, "run config file")->required();
    rt->add_option("--set", rt_sets, "key=value config override");

    // ablation
    std::string ab_config, ab_stages;
    std::size_t ab_fold = 0;
    std::vector<std::string> ab_sets;
    CLI::App* ab = app.add_subcommand("ablation", "staged architecture comparison table");
    ab->add_option("--config", ab_config, "run config file")->required();
    CLI::Option* ab_fold_opt = ab->add_option("--fold", ab_fold, "validation fold override");
    ab->add_option("--stages", ab_stages, "comma-separated row filter");
    ab->add_option("--set", ab_sets, "key=value config override");

    // make-fixture
    std::string mf_kind, mf_out;
    std::uint64_t mf_seed = 1;
    CLI::App* mf = app.add_subcommand("make-fixture", "generate a synthetic dataset");
    mf->add_option("--kind", mf_kind, "fold | learnability | rtd")->required();
    mf->add_option("--out", mf_out, "output directory")->required();
    mf->add_option("--seed", mf_seed, "fixture seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (pf->parsed()) {
            cmd_prepare_folds(pf_data, pf_out, pf_k, pf_bins, pf_seed);
        } else if (tr->parsed()) {
            RunConfig cfg = load_run_config(tr_config, tr_sets);
            if (tr_fold_opt->count() > 0) cfg.fold_index = tr_fold;
            cmd_train(cfg);
        } else if (pr->parsed()) {
            cmd_predict(pr_ckpt, pr_data, pr_out, pr_max_len, pr_batch);
        } else if (ev->parsed()) {
            cmd_evaluate(ev_ckpt, ev_data, ev_out, ev_max_len, ev_batch, ev_threshold);
        } else if (gc->parsed()) {
            cmd_gradcheck(gc_seeds, gc_eps, gc_tol, gc_out);
        } else if (en->parsed()) {
            cmd_ensemble(en_manifest, en_data, en_out, en_max_len, en_batch, en_threshold);
        } else if (rt->parsed()) {
            cmd_pretrain_rtd(load_run_config(rt_config, rt_sets));
        } else if (ab->parsed()) {
            RunConfig cfg = load_run_config(ab_config, ab_sets);
            if (ab_fold_opt->count() > 0) cfg.fold_index = ab_fold;
            cmd_ablation(cfg, ab_stages);
        } else if (mf->parsed()) {
            cmd_make_fixture(mf_kind, mf_out, mf_seed);
        }
        return 0;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
