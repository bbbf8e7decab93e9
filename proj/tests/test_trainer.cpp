#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "embedkit/trainer.hpp"

using namespace embedkit;

namespace {

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.model.in_dim = 16;
    cfg.model.emb_dim = 12;
    cfg.model.n_subcenters = 3;
    cfg.batch_size = 16;
    cfg.seed = 1;
    return cfg;
}

Split full_train_split(const DatasetManifest& manifest) {
    Split s;
    for (const auto& e : manifest.entries) s.train_ids.push_back(e.id);
    return s;
}

}  // namespace

TEST_CASE("adam zero gradients are a fixed point") {
    ModelConfig mcfg;
    mcfg.in_dim = 4;
    mcfg.emb_dim = 3;
    MetricModel model = init_metric_model(mcfg, {3, 3}, 7);
    Matrix fc_before = model.head.fc_w;
    Matrix ad_before = model.head.adapter_w;

    auto params = trainable_params(model);
    AdamState state = make_adam_state(model);
    Gradients zeros;
    zeros.adapter_w = Matrix(4, 4);
    zeros.adapter_b = Matrix(1, 4);
    zeros.bn_gamma = Matrix(1, 4);
    zeros.bn_beta = Matrix(1, 4);
    zeros.fc_w = Matrix(3, 4);
    zeros.fc_b = Matrix(1, 3);
    zeros.arc_w = Matrix(6, 3);

    TrainConfig cfg;
    std::map<ParamGroup, double> lrs{{ParamGroup::backbone, 1e-3}, {ParamGroup::head, 1e-3}};
    adam_step(params, gradient_ptrs(zeros, model), state, lrs, cfg);
    CHECK(state.t == 1);
    CHECK(model.head.fc_w == fc_before);
    CHECK(model.head.adapter_w == ad_before);
}

TEST_CASE("adam first step moves by lr in the gradient sign direction") {
    ModelConfig mcfg;
    mcfg.in_dim = 4;
    mcfg.emb_dim = 3;
    mcfg.use_adapter = false;
    MetricModel model = init_metric_model(mcfg, {3, 3}, 7);
    Matrix before = model.head.fc_w;

    RngStream rng(3);
    Gradients g;
    g.bn_gamma = rng.gaussian_matrix(1, 4);
    g.bn_beta = rng.gaussian_matrix(1, 4);
    g.fc_w = rng.gaussian_matrix(3, 4);
    g.fc_b = rng.gaussian_matrix(1, 3);
    g.arc_w = rng.gaussian_matrix(6, 3);
    // keep coordinates away from zero so |g|/( |g| + eps ) ~ 1
    for (Matrix* m : {&g.bn_gamma, &g.bn_beta, &g.fc_w, &g.fc_b, &g.arc_w})
        for (std::size_t i = 0; i < m->size(); ++i)
            m->data()[i] += (m->data()[i] >= 0 ? 1.0 : -1.0);

    auto params = trainable_params(model);
    AdamState state = make_adam_state(model);
    TrainConfig cfg;
    double lr = 1e-3;
    std::map<ParamGroup, double> lrs{{ParamGroup::backbone, lr}, {ParamGroup::head, lr}};
    adam_step(params, gradient_ptrs(g, model), state, lrs, cfg);

    for (std::size_t i = 0; i < model.head.fc_w.size(); ++i) {
        double delta = model.head.fc_w.data()[i] - before.data()[i];
        double expect = -lr * (g.fc_w.data()[i] >= 0 ? 1.0 : -1.0);
        CHECK(std::abs(delta - expect) <= 1e-6);
    }
}

TEST_CASE("adam rejects NaN gradients naming the tensor") {
    ModelConfig mcfg;
    mcfg.in_dim = 4;
    mcfg.emb_dim = 3;
    mcfg.use_adapter = false;
    MetricModel model = init_metric_model(mcfg, {3, 3}, 7);
    Gradients g;
    g.bn_gamma = Matrix(1, 4);
    g.bn_beta = Matrix(1, 4);
    g.fc_w = Matrix(3, 4);
    g.fc_b = Matrix(1, 3);
    g.arc_w = Matrix(6, 3);
    g.fc_w(1, 1) = std::nan("");

    auto params = trainable_params(model);
    AdamState state = make_adam_state(model);
    TrainConfig cfg;
    std::map<ParamGroup, double> lrs{{ParamGroup::backbone, 0.0}, {ParamGroup::head, 1e-3}};
    CHECK_THROWS_WITH_AS(adam_step(params, gradient_ptrs(g, model), state, lrs, cfg),
                         doctest::Contains("fc_w"), std::invalid_argument);
}

TEST_CASE("zero learning rate freezes a group exactly") {
    ModelConfig mcfg;
    mcfg.in_dim = 6;
    mcfg.emb_dim = 4;
    MetricModel model = init_metric_model(mcfg, {3, 3, 3}, 11);
    Matrix adapter_before = model.head.adapter_w;
    Matrix fc_before = model.head.fc_w;

    RngStream rng(5);
    Gradients g;
    g.adapter_w = rng.gaussian_matrix(6, 6);
    g.adapter_b = rng.gaussian_matrix(1, 6);
    g.bn_gamma = rng.gaussian_matrix(1, 6);
    g.bn_beta = rng.gaussian_matrix(1, 6);
    g.fc_w = rng.gaussian_matrix(4, 6);
    g.fc_b = rng.gaussian_matrix(1, 4);
    g.arc_w = rng.gaussian_matrix(9, 4);

    auto params = trainable_params(model);
    AdamState state = make_adam_state(model);
    TrainConfig cfg;
    std::map<ParamGroup, double> lrs{{ParamGroup::backbone, 0.0}, {ParamGroup::head, 1e-3}};
    for (int i = 0; i < 3; ++i) adam_step(params, gradient_ptrs(g, model), state, lrs, cfg);

    CHECK(model.head.adapter_w == adapter_before);  // bit-identical
    CHECK(!(model.head.fc_w == fc_before));
}

TEST_CASE("param group audit covers every tensor once") {
    ModelConfig mcfg;
    mcfg.in_dim = 4;
    mcfg.emb_dim = 3;
    MetricModel model = init_metric_model(mcfg, {3, 3}, 7);
    CHECK_NOTHROW(audit_param_groups(model));
    auto params = trainable_params(model);
    CHECK(params.size() == 7);
    std::size_t backbone = 0;
    for (const auto& p : params)
        if (p.group == ParamGroup::backbone) ++backbone;
    CHECK(backbone == 2);

    mcfg.use_adapter = false;
    MetricModel no_adapter = init_metric_model(mcfg, {3, 3}, 7);
    CHECK(trainable_params(no_adapter).size() == 5);
    CHECK_NOTHROW(audit_param_groups(no_adapter));
}

TEST_CASE("train with zero epochs returns the fresh init") {
    SynthDataset d = synth_dataset(std::vector<std::size_t>(6, 6), 16, 0.1, 2, 4);
    TrainConfig cfg = small_config();
    cfg.epochs_head_only = 0;
    cfg.epochs_joint = 0;
    cfg.seed = 9;

    TrainResult r = train(d.bank, d.manifest, full_train_split(d.manifest), cfg);
    CHECK(r.report.epochs.empty());

    ClassStats stats = class_stats(d.manifest);
    std::vector<std::size_t> counts;
    for (const auto& [cls, n] : stats.counts) counts.push_back(n);
    ModelConfig mcfg = cfg.model;
    RngStream rng(cfg.seed);
    MetricModel fresh = init_metric_model(mcfg, counts, rng);
    CHECK(r.model.head.fc_w == fresh.head.fc_w);
    CHECK(r.model.arc.weights == fresh.arc.weights);
    CHECK(r.model.head.adapter_w == fresh.head.adapter_w);
}

TEST_CASE("training is deterministic per seed") {
    namespace fs = std::filesystem;
    SynthDataset d = synth_dataset(std::vector<std::size_t>(8, 8), 16, 0.2, 2, 13);
    TrainConfig cfg = small_config();
    cfg.epochs_head_only = 2;
    cfg.epochs_joint = 1;
    cfg.seed = 4;

    Split split = full_train_split(d.manifest);
    TrainResult a = train(d.bank, d.manifest, split, cfg);
    TrainResult b = train(d.bank, d.manifest, split, cfg);

    fs::path pa = fs::temp_directory_path() / "embedkit_ckpt_a.guet";
    fs::path pb = fs::temp_directory_path() / "embedkit_ckpt_b.guet";
    save_checkpoint(a.model, pa.string());
    save_checkpoint(b.model, pb.string());
    std::ifstream fa(pa, std::ios::binary), fb(pb, std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    fs::remove(pa);
    fs::remove(pb);
    CHECK(ba == bb);
    CHECK(!ba.empty());

    for (std::size_t i = 0; i < a.report.epochs.size(); ++i)
        CHECK(a.report.epochs[i].mean_loss == b.report.epochs[i].mean_loss);
}

TEST_CASE("phase 1 leaves the adapter untouched, phase 2 moves it") {
    SynthDataset d = synth_dataset(std::vector<std::size_t>(8, 8), 16, 0.2, 2, 13);
    TrainConfig cfg = small_config();
    cfg.seed = 6;
    Split split = full_train_split(d.manifest);

    cfg.epochs_head_only = 2;
    cfg.epochs_joint = 0;
    TrainResult head_only = train(d.bank, d.manifest, split, cfg);
    CHECK(head_only.model.head.adapter_w == Matrix::identity(16));
    CHECK(head_only.model.head.adapter_b == Matrix(1, 16));

    cfg.epochs_joint = 2;
    cfg.lr_backbone = 1e-3;  // exaggerated so the movement is visible
    TrainResult joint = train(d.bank, d.manifest, split, cfg);
    CHECK(!(joint.model.head.adapter_w == Matrix::identity(16)));
    for (const auto& e : joint.report.epochs) CHECK(e.phase == (e.epoch <= 2 ? 1 : 2));
}

TEST_CASE("loss decreases over the first three epochs on synthetic clusters") {
    RngStream count_rng(1);
    auto counts = draw_class_counts(20, 6, 14, count_rng);
    SynthDataset d = synth_dataset(counts, 16, 0.2, 4, 1);
    TrainConfig cfg = small_config();
    cfg.epochs_head_only = 3;
    cfg.epochs_joint = 0;
    cfg.seed = 1;

    TrainResult r = train(d.bank, d.manifest, full_train_split(d.manifest), cfg);
    REQUIRE(r.report.epochs.size() == 3);
    CHECK(r.report.epochs[0].mean_loss > r.report.epochs[1].mean_loss);
    CHECK(r.report.epochs[1].mean_loss > r.report.epochs[2].mean_loss);
    for (const auto& e : r.report.epochs) CHECK(std::isfinite(e.mean_loss));
}

TEST_CASE("train log format") {
    namespace fs = std::filesystem;
    TrainReport report;
    report.epochs.push_back({1, 1, 2.5, 0.01});
    report.epochs.push_back({2, 2, 1.25, 0.02});
    fs::path path = fs::temp_directory_path() / "embedkit_log_test.csv";
    write_train_log(report, path.string());
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line == "epoch,phase,mean_loss,seconds");
    std::getline(is, line);
    CHECK(line.substr(0, 16) == "1,1,2.500000000,");
    std::getline(is, line);
    CHECK(line.substr(0, 16) == "2,2,1.250000000,");
    fs::remove(path);
}

TEST_CASE("grad_check passes on a fresh model and is step-size robust") {
    ModelConfig mcfg;
    mcfg.in_dim = 10;
    mcfg.emb_dim = 6;
    mcfg.n_subcenters = 2;
    MetricModel model = init_metric_model(mcfg, {4, 7, 12}, 77);

    RngStream rng(20);
    Matrix batch = rng.gaussian_matrix(6, 10);
    std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};

    GradCheckReport r = grad_check(model, batch, labels, 1e-5, 20, 3);
    CHECK(r.tensors.size() == 7);
    for (const auto& t : r.tensors) {
        INFO(t.tensor);
        CHECK(t.max_rel_err <= 1e-4);
    }

    // frozen (zero-lr) tensors are still in the report
    bool has_adapter = false;
    for (const auto& t : r.tensors) has_adapter |= t.tensor == "adapter_w";
    CHECK(has_adapter);

    GradCheckReport half = grad_check(model, batch, labels, 0.5e-5, 20, 3);
    CHECK(half.worst() <= std::max(10.0 * r.worst(), 1e-7));
}
