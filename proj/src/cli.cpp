#include "embedkit/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <stdexcept>

#include "embedkit/datastore.hpp"
#include "embedkit/metric_model.hpp"
#include "embedkit/reduce.hpp"
#include "embedkit/retrieval.hpp"
#include "embedkit/trainer.hpp"

namespace embedkit::cli {

namespace {

using nlohmann::json;

// one manifest per artifact, next to it
void write_run_manifest(const std::string& subcommand, const json& flags,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs) {
    json doc;
    doc["tool"] = kToolName;
    doc["version"] = kToolVersion;
    doc["subcommand"] = subcommand;
    doc["flags"] = flags;
    doc["inputs"] = inputs;
    doc["outputs"] = outputs;
    std::string text = doc.dump(2);
    text.push_back('\n');
    for (const auto& out : outputs) {
        std::ofstream os(out + ".run.json", std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write run manifest for '" + out + "'");
        os << text;
    }
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + out_path + "' for writing");
    os << text;
}

std::vector<std::string> read_id_list(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open id list '" + path + "'");
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    return ids;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t classes = 20;
    std::size_t per_class = 10;
    std::size_t min_per_class = 0;  // 0 = use per_class for every class
    std::size_t max_per_class = 0;
    std::size_t dim = 64;
    double sigma = 0.1;
    std::size_t verticals = 4;
    std::uint64_t seed = 1;
    std::string out_bank;
    std::string out_manifest;
};

int cmd_synth(const SynthArgs& a) {
    RngStream rng(a.seed);
    std::vector<std::size_t> counts;
    if (a.min_per_class > 0 && a.max_per_class > 0)
        counts = draw_class_counts(a.classes, a.min_per_class, a.max_per_class, rng);
    else
        counts.assign(a.classes, a.per_class);
    SynthDataset d = synth_dataset(counts, a.dim, a.sigma, a.verticals, a.seed);
    save_feature_bank(d.bank, a.out_bank);
    save_manifest(d.manifest, a.out_manifest);

    json flags{{"classes", a.classes},       {"per_class", a.per_class},
               {"min_per_class", a.min_per_class}, {"max_per_class", a.max_per_class},
               {"dim", a.dim},               {"sigma", a.sigma},
               {"verticals", a.verticals},   {"seed", a.seed},
               {"out_bank", a.out_bank},     {"out_manifest", a.out_manifest}};
    write_run_manifest("synth", flags, {}, {a.out_bank, a.out_manifest});
    std::cerr << "synth: wrote " << d.bank.count() << " vectors of dim " << a.dim << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string bank;
    std::string manifest;
    std::string out;
    std::string log;  // defaults to <out>.log
    std::string out_split;
    double val_fraction = 0.2;
    std::size_t min_samples = 3;
    std::uint64_t seed = 0;
    TrainConfig cfg;
    bool no_adapter = false;
};

int cmd_train(const TrainArgs& a) {
    FeatureBank bank = load_feature_bank(a.bank);
    DatasetManifest manifest = load_manifest(a.manifest);
    DatasetManifest filtered = filter_min_samples(manifest, a.min_samples);
    if (filtered.entries.empty())
        throw std::runtime_error("train: no classes with at least " +
                                 std::to_string(a.min_samples) + " samples");

    Split split = split_unseen_classes(filtered, a.val_fraction, a.seed);

    TrainConfig cfg = a.cfg;
    cfg.seed = a.seed;
    cfg.model.use_adapter = !a.no_adapter;
    TrainResult result = train(bank, filtered, split, cfg);

    save_checkpoint(result.model, a.out);
    std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
    write_train_log(result.report, log_path);
    if (!a.out_split.empty()) {
        std::ofstream os(a.out_split, std::ios::trunc);
        if (!os) throw std::runtime_error("train: cannot open '" + a.out_split + "'");
        os << "id,side\n";
        for (const auto& id : split.train_ids) os << id << ",train\n";
        for (const auto& id : split.validation_ids) os << id << ",validation\n";
    }

    json flags{{"bank", a.bank},
               {"manifest", a.manifest},
               {"out", a.out},
               {"log", log_path},
               {"out_split", a.out_split},
               {"val_fraction", a.val_fraction},
               {"min_samples", a.min_samples},
               {"seed", a.seed},
               {"batch_size", cfg.batch_size},
               {"epochs_head_only", cfg.epochs_head_only},
               {"epochs_joint", cfg.epochs_joint},
               {"lr_head", cfg.lr_head},
               {"lr_backbone", cfg.lr_backbone},
               {"emb_dim", cfg.model.emb_dim},
               {"subcenters", cfg.model.n_subcenters},
               {"scale", cfg.model.scale},
               {"dropout", cfg.model.dropout_rate},
               {"m_min", cfg.model.m_min},
               {"m_max", cfg.model.m_max},
               {"lambda", cfg.model.margin_lambda},
               {"use_adapter", cfg.model.use_adapter}};
    std::vector<std::string> outputs{a.out};
    if (!a.out_split.empty()) outputs.push_back(a.out_split);
    write_run_manifest("train", flags, {a.bank, a.manifest}, outputs);

    for (const auto& e : result.report.epochs)
        std::cerr << "epoch " << e.epoch << " phase " << e.phase << " loss " << e.mean_loss
                  << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

struct EmbedArgs {
    std::string bank;
    std::string ckpt;
    std::string out;
    std::string ids;
};

int cmd_embed(const EmbedArgs& a) {
    FeatureBank bank = load_feature_bank(a.bank);
    if (!a.ids.empty()) bank = subset_bank(bank, read_id_list(a.ids));
    MetricModel model = load_checkpoint(a.ckpt);

    FeatureBank out;
    out.dim = model.head.emb_dim;
    out.ids = bank.ids;
    out.features = embed(bank.features, model);
    save_feature_bank(out, a.out);

    json flags{{"bank", a.bank}, {"ckpt", a.ckpt}, {"out", a.out}, {"ids", a.ids}};
    write_run_manifest("embed", flags, {a.bank, a.ckpt}, {a.out});
    std::cerr << "embed: wrote " << out.count() << " embeddings of dim " << out.dim << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// fit-reduce / reduce
// ---------------------------------------------------------------------------

struct FitReduceArgs {
    std::string fit_bank;
    std::string out;
    std::size_t dim = 64;
    bool whiten = false;
};

int cmd_fit_reduce(const FitReduceArgs& a) {
    FeatureBank bank = load_feature_bank(a.fit_bank);
    PcaModel model = pca_fit(bank.features, a.dim, a.whiten);
    save_pca_model(model, a.out);

    json flags{{"fit_bank", a.fit_bank}, {"out", a.out}, {"dim", a.dim}, {"whiten", a.whiten}};
    write_run_manifest("fit-reduce", flags, {a.fit_bank}, {a.out});
    std::cerr << "fit-reduce: " << bank.count() << " samples, " << bank.dim << " -> " << a.dim
              << " dims\n";
    return 0;
}

struct ReduceArgs {
    std::string bank;
    std::string method = "pca";
    std::string pca_path;
    std::string out;
    std::size_t dim = 64;
    bool no_renormalize = false;
};

int cmd_reduce(const ReduceArgs& a) {
    FeatureBank bank = load_feature_bank(a.bank);
    FeatureBank out;
    out.ids = bank.ids;
    if (a.method == "pca") {
        if (a.pca_path.empty()) throw std::runtime_error("reduce: --method pca needs --pca");
        PcaModel model = load_pca_model(a.pca_path);
        out.features = pca_transform(model, bank.features, !a.no_renormalize);
    } else if (a.method == "avgpool") {
        out.features = avgpool_reduce(bank.features, a.dim, !a.no_renormalize);
    } else {
        throw std::runtime_error("reduce: unknown method '" + a.method + "'");
    }
    out.dim = out.features.cols();
    save_feature_bank(out, a.out);

    json flags{{"bank", a.bank},          {"method", a.method}, {"pca", a.pca_path},
               {"out", a.out},            {"dim", a.dim},       {"renormalize", !a.no_renormalize}};
    std::vector<std::string> inputs{a.bank};
    if (!a.pca_path.empty()) inputs.push_back(a.pca_path);
    write_run_manifest("reduce", flags, inputs, {a.out});
    std::cerr << "reduce: " << a.method << " " << bank.dim << " -> " << out.dim << " dims\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string bank;
    std::string manifest;
    std::string query_bank;
    std::string query_manifest;
    std::size_t k = 100;
    std::string out;
    std::string per_query;
    bool exclude_self = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
    FeatureBank gallery = load_feature_bank(a.bank);
    DatasetManifest gmanifest = load_manifest(a.manifest);
    Index index = build_index(gallery, gmanifest);

    bool self_mode = a.query_bank.empty();
    FeatureBank queries = self_mode ? gallery : load_feature_bank(a.query_bank);
    DatasetManifest qmanifest =
        self_mode ? gmanifest
                  : (a.query_manifest.empty() ? gmanifest : load_manifest(a.query_manifest));
    // self retrieval must not score the query against its own gallery copy
    bool exclude = self_mode ? true : a.exclude_self;

    EvalReport report = evaluate(index, queries, qmanifest, a.k, exclude);
    emit(format_eval_report(report), a.out);
    if (!a.per_query.empty()) write_per_query_ap(report, a.per_query);

    json flags{{"bank", a.bank},
               {"manifest", a.manifest},
               {"query_bank", a.query_bank},
               {"query_manifest", a.query_manifest},
               {"k", a.k},
               {"out", a.out},
               {"per_query", a.per_query},
               {"exclude_self", exclude}};
    std::vector<std::string> inputs{a.bank, a.manifest};
    if (!a.query_bank.empty()) inputs.push_back(a.query_bank);
    if (!a.query_manifest.empty()) inputs.push_back(a.query_manifest);
    std::vector<std::string> outputs;
    if (!a.out.empty()) outputs.push_back(a.out);
    if (!a.per_query.empty()) outputs.push_back(a.per_query);
    if (!outputs.empty()) write_run_manifest("evaluate", flags, inputs, outputs);
    std::cerr << "evaluate: mAP " << report.map << " over " << report.n_queries << " queries ("
              << report.n_skipped << " skipped)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradCheckArgs {
    std::uint64_t seed = 1;
    std::size_t batch = 8;
    std::size_t dim = 64;
    std::size_t emb_dim = 32;
    std::size_t classes = 5;
    std::size_t subcenters = 3;
    double epsilon = 1e-5;
    std::size_t coords = 20;
    double tolerance = 1e-4;
    std::string out;
};

int cmd_gradcheck(const GradCheckArgs& a) {
    RngStream rng(a.seed);
    std::vector<std::size_t> counts = draw_class_counts(a.classes, 3, 40, rng);
    ModelConfig mcfg;
    mcfg.in_dim = a.dim;
    mcfg.emb_dim = a.emb_dim;
    mcfg.n_subcenters = a.subcenters;
    MetricModel model = init_metric_model(mcfg, counts, rng);

    Matrix batch = rng.gaussian_matrix(a.batch, a.dim);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < a.batch; ++i)
        labels.push_back(static_cast<std::size_t>(rng.uniform_below(a.classes)));

    GradCheckReport report = grad_check(model, batch, labels, a.epsilon, a.coords, a.seed);

    char buf[128];
    std::string text;
    for (const auto& t : report.tensors) {
        std::snprintf(buf, sizeof(buf), "tensor,%s,%.3e\n", t.tensor.c_str(), t.max_rel_err);
        text += buf;
    }
    std::snprintf(buf, sizeof(buf), "worst,%.3e\ntolerance,%.3e\n", report.worst(), a.tolerance);
    text += buf;
    bool ok = report.worst() <= a.tolerance;
    text += ok ? "status,pass\n" : "status,fail\n";
    emit(text, a.out);

    if (!a.out.empty()) {
        json flags{{"seed", a.seed},     {"batch", a.batch},     {"dim", a.dim},
                   {"emb_dim", a.emb_dim}, {"classes", a.classes}, {"subcenters", a.subcenters},
                   {"epsilon", a.epsilon}, {"coords", a.coords},   {"tolerance", a.tolerance},
                   {"out", a.out}};
        write_run_manifest("gradcheck", flags, {}, {a.out});
    }
    if (!ok) {
        std::cerr << "gradcheck: worst relative error " << report.worst() << " exceeds "
                  << a.tolerance << "\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// margins
// ---------------------------------------------------------------------------

struct MarginsArgs {
    std::string manifest;
    double m_min = 0.005;
    double m_max = 0.45;
    double lambda = 0.25;
    std::string out;
};

int cmd_margins(const MarginsArgs& a) {
    DatasetManifest manifest = load_manifest(a.manifest);
    ClassStats stats = class_stats(manifest);

    std::vector<std::pair<std::string, std::size_t>> by_count(stats.counts.begin(),
                                                              stats.counts.end());
    std::sort(by_count.begin(), by_count.end(), [](const auto& x, const auto& y) {
        if (x.second != y.second) return x.second < y.second;
        return x.first < y.first;
    });
    std::vector<std::size_t> counts;
    for (const auto& [cls, n] : by_count) counts.push_back(n);
    MarginSchedule sched = compute_dynamic_margins(counts, a.m_min, a.m_max, a.lambda);

    std::string text = "class,count,margin\n";
    char buf[160];
    for (std::size_t i = 0; i < by_count.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%s,%zu,%.9f\n", by_count[i].first.c_str(),
                      by_count[i].second, sched.per_class[i]);
        text += buf;
    }
    emit(text, a.out);

    if (!a.out.empty()) {
        json flags{{"manifest", a.manifest}, {"m_min", a.m_min},  {"m_max", a.m_max},
                   {"lambda", a.lambda},     {"out", a.out}};
        write_run_manifest("margins", flags, {a.manifest}, {a.out});
    }
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"metric-learning embedding toolkit: SubCenter ArcFace training on precomputed "
                 "features, PCA/avgpool reduction and kNN retrieval evaluation"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic clustered dataset");
    s->add_option("--classes", synth.classes, "number of classes")->check(CLI::Range(2, 1000000));
    s->add_option("--per-class", synth.per_class, "samples per class")->check(CLI::Range(1, 1000000));
    s->add_option("--min-per-class", synth.min_per_class, "lower bound for drawn class sizes");
    s->add_option("--max-per-class", synth.max_per_class, "upper bound for drawn class sizes");
    s->add_option("--dim", synth.dim, "feature dimension")->check(CLI::Range(2, 1000000));
    s->add_option("--sigma", synth.sigma, "within-class spread")->check(CLI::NonNegativeNumber);
    s->add_option("--verticals", synth.verticals, "number of verticals")->check(CLI::Range(1, 1000000));
    s->add_option("--seed", synth.seed, "rng seed");
    s->add_option("--out-bank", synth.out_bank, "output feature bank")->required();
    s->add_option("--out-manifest", synth.out_manifest, "output manifest csv")->required();

    TrainArgs train_args;
    auto* t = app.add_subcommand("train", "train the embedding head");
    t->add_option("--bank", train_args.bank, "input feature bank")->required();
    t->add_option("--manifest", train_args.manifest, "dataset manifest")->required();
    t->add_option("--out", train_args.out, "output checkpoint")->required();
    t->add_option("--log", train_args.log, "epoch log path (default <out>.log)");
    t->add_option("--out-split", train_args.out_split, "write the train/validation id split");
    t->add_option("--val-fraction", train_args.val_fraction,
                  "fraction of classes held out for validation");
    t->add_option("--min-samples", train_args.min_samples, "drop classes with fewer samples");
    t->add_option("--seed", train_args.seed, "rng seed");
    t->add_option("--batch", train_args.cfg.batch_size, "batch size")->check(CLI::Range(2, 1000000));
    t->add_option("--epochs-head", train_args.cfg.epochs_head_only, "phase-1 epochs (head only)");
    t->add_option("--epochs-joint", train_args.cfg.epochs_joint, "phase-2 epochs (joint)");
    t->add_option("--lr-head", train_args.cfg.lr_head, "head learning rate");
    t->add_option("--lr-backbone", train_args.cfg.lr_backbone, "backbone-group learning rate");
    t->add_option("--emb-dim", train_args.cfg.model.emb_dim, "embedding dimension");
    t->add_option("--subcenters", train_args.cfg.model.n_subcenters, "subcenters per class");
    t->add_option("--scale", train_args.cfg.model.scale, "logit scale");
    t->add_option("--dropout", train_args.cfg.model.dropout_rate, "dropout rate");
    t->add_option("--m-min", train_args.cfg.model.m_min, "margin lower bound");
    t->add_option("--m-max", train_args.cfg.model.m_max, "margin upper bound");
    t->add_option("--lambda", train_args.cfg.model.margin_lambda, "margin exponent");
    t->add_flag("--no-adapter", train_args.no_adapter, "train without the adapter block");

    EmbedArgs embed_args;
    auto* e = app.add_subcommand("embed", "embed a feature bank with a trained checkpoint");
    e->add_option("--bank", embed_args.bank, "input feature bank")->required();
    e->add_option("--ckpt", embed_args.ckpt, "model checkpoint")->required();
    e->add_option("--out", embed_args.out, "output embedding bank")->required();
    e->add_option("--ids", embed_args.ids, "only embed ids listed in this file");

    FitReduceArgs fit_args;
    auto* f = app.add_subcommand("fit-reduce", "fit a PCA reduction on a bank");
    f->add_option("--fit-bank", fit_args.fit_bank, "bank to fit the reduction on")->required();
    f->add_option("--out", fit_args.out, "output PCA model")->required();
    f->add_option("--dim", fit_args.dim, "output dimension")->check(CLI::Range(1, 1000000));
    f->add_flag("--whiten", fit_args.whiten, "scale components to unit variance");

    ReduceArgs reduce_args;
    auto* r = app.add_subcommand("reduce", "reduce a bank to the output dimension");
    r->add_option("--bank", reduce_args.bank, "input bank")->required();
    r->add_option("--method", reduce_args.method, "pca or avgpool")
        ->check(CLI::IsMember({"pca", "avgpool"}));
    r->add_option("--pca", reduce_args.pca_path, "PCA model (for --method pca)");
    r->add_option("--out", reduce_args.out, "output bank")->required();
    r->add_option("--dim", reduce_args.dim, "output dimension (avgpool)");
    r->add_flag("--no-renormalize", reduce_args.no_renormalize,
                "skip the L2 renormalization after reduction");

    EvaluateArgs eval_args;
    auto* v = app.add_subcommand("evaluate", "kNN retrieval evaluation with mAP");
    v->add_option("--bank", eval_args.bank, "gallery feature bank")->required();
    v->add_option("--manifest", eval_args.manifest, "gallery manifest")->required();
    v->add_option("--query-bank", eval_args.query_bank,
                  "query bank (defaults to self-retrieval on the gallery)");
    v->add_option("--query-manifest", eval_args.query_manifest,
                  "query manifest (defaults to the gallery manifest)");
    v->add_option("--k", eval_args.k, "retrieval depth")->check(CLI::Range(1, 1000000));
    v->add_option("--out", eval_args.out, "report path (default stdout)");
    v->add_option("--per-query", eval_args.per_query, "write per-query AP csv");
    v->add_flag("--exclude-self", eval_args.exclude_self,
                "drop gallery entries whose id equals the query id");

    GradCheckArgs grad_args;
    auto* g = app.add_subcommand("gradcheck", "finite-difference check of the model gradients");
    g->add_option("--seed", grad_args.seed, "rng seed");
    g->add_option("--batch", grad_args.batch, "batch size")->check(CLI::Range(2, 10000));
    g->add_option("--dim", grad_args.dim, "input dimension");
    g->add_option("--emb-dim", grad_args.emb_dim, "embedding dimension");
    g->add_option("--classes", grad_args.classes, "number of classes")->check(CLI::Range(2, 10000));
    g->add_option("--subcenters", grad_args.subcenters, "subcenters per class");
    g->add_option("--epsilon", grad_args.epsilon, "finite-difference step");
    g->add_option("--coords", grad_args.coords, "sampled coordinates per tensor");
    g->add_option("--tolerance", grad_args.tolerance, "max allowed relative error");
    g->add_option("--out", grad_args.out, "report path (default stdout)");

    MarginsArgs margin_args;
    auto* m = app.add_subcommand("margins", "per-class dynamic margin table");
    m->add_option("--manifest", margin_args.manifest, "dataset manifest")->required();
    m->add_option("--m-min", margin_args.m_min, "margin lower bound");
    m->add_option("--m-max", margin_args.m_max, "margin upper bound");
    m->add_option("--lambda", margin_args.lambda, "margin exponent");
    m->add_option("--out", margin_args.out, "table path (default stdout)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& err) {
        if (err.get_exit_code() == 0) return app.exit(err);  // --help / --version
        std::cerr << err.what() << "\nRun with --help for usage.\n";
        return 2;
    }

    if (s->parsed() && (synth.min_per_class > 0) != (synth.max_per_class > 0)) {
        std::cerr << "synth: --min-per-class and --max-per-class must be given together\n";
        return 2;
    }

    try {
        if (s->parsed()) return cmd_synth(synth);
        if (t->parsed()) return cmd_train(train_args);
        if (e->parsed()) return cmd_embed(embed_args);
        if (f->parsed()) return cmd_fit_reduce(fit_args);
        if (r->parsed()) return cmd_reduce(reduce_args);
        if (v->parsed()) return cmd_evaluate(eval_args);
        if (g->parsed()) return cmd_gradcheck(grad_args);
        if (m->parsed()) return cmd_margins(margin_args);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace embedkit::cli
