#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "embedkit/metric_model.hpp"

using namespace embedkit;

namespace {

// independent scalar solve of m(n) = a*n^(-lambda) + b anchored at the
// extreme counts
double margin_oracle(double n, double n_min, double n_max, double m_min, double m_max,
                     double lambda) {
    double x_min = std::pow(n_min, -lambda);
    double x_max = std::pow(n_max, -lambda);
    double a = (m_max - m_min) / (x_min - x_max);
    double b = m_max - a * x_min;
    return a * std::pow(n, -lambda) + b;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.in_dim = 6;
    cfg.emb_dim = 4;
    cfg.n_subcenters = 2;
    cfg.scale = 30.0;
    cfg.dropout_rate = 0.2;
    return cfg;
}

struct FixedBatch {
    Matrix x;
    std::vector<std::size_t> labels;
    Matrix mask;
};

FixedBatch make_batch(const ModelConfig& cfg, std::size_t batch, std::size_t n_classes,
                      std::uint64_t seed) {
    RngStream rng(seed);
    FixedBatch b;
    b.x = rng.gaussian_matrix(batch, cfg.in_dim);
    for (std::size_t i = 0; i < batch; ++i)
        b.labels.push_back(static_cast<std::size_t>(rng.uniform_below(n_classes)));
    double keep = 1.0 - cfg.dropout_rate;
    b.mask = rng.bernoulli_matrix(batch, cfg.in_dim, keep);
    if (cfg.dropout_rate > 0.0) b.mask = scale(b.mask, 1.0 / keep);
    return b;
}

double loss_of(const MetricModel& model, const FixedBatch& b) {
    Matrix emb = head_forward_masked(b.x, model.head, b.mask);
    return arcface_forward(emb, b.labels, model.arc).loss;
}

struct TensorRef {
    const char* name;
    Matrix MetricModel::* unused = nullptr;
};

double max_rel_err_fd(MetricModel& model, Matrix& tensor, const Matrix& analytic,
                      const FixedBatch& b, RngStream& coord_rng, int n_coords,
                      double eps = 1e-5) {
    double worst = 0.0;
    for (int t = 0; t < n_coords; ++t) {
        std::size_t idx = static_cast<std::size_t>(coord_rng.uniform_below(tensor.size()));
        double saved = tensor.data()[idx];
        tensor.data()[idx] = saved + eps;
        double lp = loss_of(model, b);
        tensor.data()[idx] = saved - eps;
        double lm = loss_of(model, b);
        tensor.data()[idx] = saved;
        double numeric = (lp - lm) / (2.0 * eps);
        double a = analytic.data()[idx];
        // the 1e-4 floor turns the check absolute (at 1e-8) for coordinates
        // whose true gradient vanishes, e.g. the adapter bias under BN
        double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace

TEST_CASE("dynamic margins anchor at the configured bounds") {
    MarginSchedule s = compute_dynamic_margins({5, 40});
    CHECK(s.per_class[0] == 0.45);
    CHECK(s.per_class[1] == 0.005);
}

TEST_CASE("dynamic margins degenerate to the midpoint") {
    MarginSchedule s = compute_dynamic_margins({7, 7, 7});
    for (double m : s.per_class) CHECK(m == doctest::Approx(0.2275).epsilon(1e-12));
}

TEST_CASE("dynamic margins match the closed-form oracle") {
    MarginSchedule s = compute_dynamic_margins({5, 10, 40}, 0.005, 0.45, 0.25);
    double expect = margin_oracle(10, 5, 40, 0.005, 0.45, 0.25);
    CHECK(s.per_class[1] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(s.per_class[1] == doctest::Approx(0.2753).epsilon(2e-4));
    CHECK(s.per_class[0] == 0.45);
    CHECK(s.per_class[2] == 0.005);
}

TEST_CASE("dynamic margins are monotone in class count") {
    RngStream rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 2 + rng.uniform_below(30);
        std::vector<std::size_t> counts(n);
        for (auto& c : counts) c = 1 + rng.uniform_below(500);
        MarginSchedule s = compute_dynamic_margins(counts);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (counts[i] <= counts[j]) CHECK(s.per_class[i] >= s.per_class[j]);
    }
    CHECK_THROWS_AS(compute_dynamic_margins({}), std::invalid_argument);
    CHECK_THROWS_AS(compute_dynamic_margins({3}, 0.4, 0.2), std::invalid_argument);
}

TEST_CASE("eval forward is deterministic and ignores dropout") {
    ModelConfig cfg = tiny_config();
    MetricModel model = init_metric_model(cfg, {4, 4, 4}, 5);
    RngStream rng(2);
    Matrix x = rng.gaussian_matrix(3, cfg.in_dim);
    Matrix e1 = head_forward(x, model.head, Mode::eval, nullptr);
    Matrix e2 = head_forward(x, model.head, Mode::eval, nullptr);
    CHECK(e1 == e2);
}

TEST_CASE("identity wiring passes the input through") {
    ModelConfig cfg;
    cfg.in_dim = 8;
    cfg.emb_dim = 4;
    cfg.bn_eps = 0.0;  // exact passthrough needs no variance floor
    MetricModel model = init_metric_model(cfg, {3, 3}, 1);
    // gamma=1, beta=0, running stats (0,1) are the init; identity-slice FC
    model.head.fc_w = Matrix(4, 8);
    for (std::size_t i = 0; i < 4; ++i) model.head.fc_w(i, i) = 1.0;
    model.head.fc_b = Matrix(1, 4);

    RngStream rng(3);
    Matrix x = rng.gaussian_matrix(2, 8);
    Matrix e = head_forward(x, model.head, Mode::eval, nullptr);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(e(i, j) == doctest::Approx(x(i, j)).epsilon(1e-12));
}

TEST_CASE("inverted dropout is unbiased") {
    RngStream rng(77);
    const double p = 0.2;
    const double keep = 1.0 - p;
    Matrix acc(2, 3);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
        Matrix mask = scale(rng.bernoulli_matrix(2, 3, keep), 1.0 / keep);
        acc = add(acc, mask);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < acc.size(); ++i) {
        double mean = acc.data()[i] / draws;
        CHECK(std::abs(mean - 1.0) < 0.03);
        total += mean;
    }
    CHECK(std::abs(total / static_cast<double>(acc.size()) - 1.0) < 0.01);
}

TEST_CASE("train forward updates running stats, eval does not") {
    ModelConfig cfg = tiny_config();
    MetricModel model = init_metric_model(cfg, {4, 4}, 9);
    RngStream rng(4);
    Matrix x = scale(rng.gaussian_matrix(8, cfg.in_dim), 2.0);
    Matrix rm_before = model.head.bn_running_mean;
    head_forward(x, model.head, Mode::train, &rng);
    CHECK(!(model.head.bn_running_mean == rm_before));
    Matrix rm_after = model.head.bn_running_mean;
    head_forward(x, model.head, Mode::eval, nullptr);
    CHECK(model.head.bn_running_mean == rm_after);

    Matrix one_row = rng.gaussian_matrix(1, cfg.in_dim);
    CHECK_THROWS_AS(head_forward(one_row, model.head, Mode::train, &rng), std::invalid_argument);
}

TEST_CASE("arcface closed-form two-class loss") {
    ArcFaceParams af;
    af.n_classes = 2;
    af.n_subcenters = 1;
    af.emb_dim = 3;
    af.scale = 1.0;
    af.weights = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}});
    af.margins = compute_dynamic_margins({1, 1}, 0.0, 1.0);  // not used below
    af.margins.per_class = {0.0, 0.0};

    Matrix emb = Matrix::from_rows({{1, 0, 0}});
    ArcFaceResult r = arcface_forward(emb, {0}, af);
    // cos = [1, 0], m=0, s=1 -> loss = ln(1 + e^-1)
    CHECK(r.loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-6));
}

TEST_CASE("zero margins reduce to softmax cross-entropy") {
    RngStream rng(6);
    ArcFaceParams af;
    af.n_classes = 5;
    af.n_subcenters = 3;
    af.emb_dim = 8;
    af.scale = 30.0;
    af.weights = rng.gaussian_matrix(15, 8);
    af.margins.per_class.assign(5, 0.0);

    Matrix emb = rng.gaussian_matrix(6, 8);
    std::vector<std::size_t> labels{0, 1, 2, 3, 4, 0};
    ArcCache cache;
    ArcFaceResult r = arcface_forward(emb, labels, af, &cache);

    // plain softmax CE over s * pooled cosines
    double oracle = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        double zmax = -1e300;
        for (std::size_t c = 0; c < 5; ++c) zmax = std::max(zmax, af.scale * cache.cos_pooled(i, c));
        double lse = 0.0;
        for (std::size_t c = 0; c < 5; ++c) lse += std::exp(af.scale * cache.cos_pooled(i, c) - zmax);
        oracle += std::log(lse) - (af.scale * cache.cos_pooled(i, labels[i]) - zmax);
    }
    oracle /= 6.0;
    CHECK(r.loss == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("subcenter max-pool picks the aligned row") {
    ArcFaceParams af;
    af.n_classes = 2;
    af.n_subcenters = 3;
    af.emb_dim = 4;
    af.scale = 1.0;
    af.margins.per_class = {0.1, 0.1};
    //  class 0 rows: two orthogonal to the embedding, one equal to it
    af.weights = Matrix::from_rows({{0, 1, 0, 0},
                                    {1, 0, 0, 0},
                                    {0, 0, 1, 0},
                                    {0, 0, 0, 1},
                                    {0, -1, 0, 0},
                                    {0, 0, -1, 0}});
    Matrix emb = Matrix::from_rows({{1, 0, 0, 0}});
    ArcCache cache;
    arcface_forward(emb, {0}, af, &cache);
    CHECK(cache.cos_pooled(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cache.argmax_k[0] == 1);

    CHECK_THROWS_AS(arcface_forward(emb, {7}, af), std::invalid_argument);
}

TEST_CASE("K=1 equals single-center arcface") {
    RngStream rng(10);
    Matrix w = rng.gaussian_matrix(4, 6);
    Matrix emb = rng.gaussian_matrix(5, 6);
    std::vector<std::size_t> labels{0, 1, 2, 3, 1};

    ArcFaceParams k1;
    k1.n_classes = 4;
    k1.n_subcenters = 1;
    k1.emb_dim = 6;
    k1.scale = 16.0;
    k1.weights = w;
    k1.margins = compute_dynamic_margins({5, 10, 20, 40});

    ArcFaceResult r = arcface_forward(emb, labels, k1);

    // oracle: classic single-center arcface computed straight from the formula
    Matrix what = l2_normalize_rows(w);
    Matrix ehat = l2_normalize_rows(emb);
    double oracle_loss = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        std::vector<double> z(4);
        for (std::size_t c = 0; c < 4; ++c) {
            double cos = 0.0;
            for (std::size_t j = 0; j < 6; ++j) cos += ehat(i, j) * what(c, j);
            z[c] = cos;
        }
        double u = std::clamp(z[labels[i]], -(1.0 - 1e-7), 1.0 - 1e-7);
        double m = k1.margins.per_class[labels[i]];
        if (u > std::cos(std::numbers::pi - m))
            z[labels[i]] = u * std::cos(m) - std::sqrt(1 - u * u) * std::sin(m);
        else
            z[labels[i]] = u - m * std::sin(m);
        double zmax = *std::max_element(z.begin(), z.end()) * k1.scale;
        double lse = 0.0;
        for (double& v : z) {
            v *= k1.scale;
            lse += std::exp(v - zmax);
        }
        oracle_loss += std::log(lse) - (z[labels[i]] - zmax);
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(std::abs(r.logits(i, c) - z[c]) <= 1e-12);
    }
    CHECK(r.loss == doctest::Approx(oracle_loss / 5.0).epsilon(1e-12));
}

TEST_CASE("margins only penalize the target logit") {
    RngStream rng(12);
    Matrix emb = rng.gaussian_matrix(4, 6);
    Matrix w = rng.gaussian_matrix(6, 6);
    std::vector<std::size_t> labels{0, 1, 2, 0};

    ArcFaceParams with_m;
    with_m.n_classes = 3;
    with_m.n_subcenters = 2;
    with_m.emb_dim = 6;
    with_m.scale = 1.0;
    with_m.weights = w;
    with_m.margins.per_class = {0.3, 0.2, 0.45};
    ArcFaceParams no_m = with_m;
    no_m.margins.per_class = {0.0, 0.0, 0.0};

    ArcCache cm, c0;
    arcface_forward(emb, labels, with_m, &cm);
    arcface_forward(emb, labels, no_m, &c0);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(cm.logits(i, labels[i]) <= c0.logits(i, labels[i]) + 1e-12);
        for (std::size_t c = 0; c < 3; ++c)
            if (c != labels[i]) CHECK(cm.logits(i, c) == doctest::Approx(c0.logits(i, c)).epsilon(1e-12));
    }
}

TEST_CASE("lower target cosine never lowers the loss") {
    // single sample, K=1, two fixed classes; rotate the embedding away from
    // its class center and watch the loss
    ArcFaceParams af;
    af.n_classes = 2;
    af.n_subcenters = 1;
    af.emb_dim = 2;
    af.scale = 20.0;
    af.weights = Matrix::from_rows({{1, 0}, {0, 1}});
    af.margins.per_class = {0.35, 0.35};

    double prev = -1.0;
    for (int step = 0; step <= 40; ++step) {
        double ang = step * (std::numbers::pi / 40.0);
        Matrix emb = Matrix::from_rows({{std::cos(ang), std::sin(ang)}});
        // keep the non-target geometry fixed by measuring only the target term
        ArcCache cache;
        arcface_forward(emb, {0}, af, &cache);
        double target_logit = cache.logits(0, 0);
        if (step > 0) CHECK(target_logit <= prev + 1e-12);
        prev = target_logit;
    }
}

TEST_CASE("backward with zero upstream signal is zero") {
    ModelConfig cfg = tiny_config();
    MetricModel model = init_metric_model(cfg, {4, 4, 4}, 21);
    FixedBatch b = make_batch(cfg, 4, 3, 100);
    HeadCache hc;
    Matrix emb = head_forward_masked(b.x, model.head, b.mask, &hc);
    ArcCache ac;
    arcface_forward(emb, b.labels, model.arc, &ac);
    Gradients g = model_backward(hc, ac, model.head, model.arc, 0.0);
    for (const Matrix* m : {&g.adapter_w, &g.adapter_b, &g.bn_gamma, &g.bn_beta, &g.fc_w, &g.fc_b,
                            &g.arc_w})
        for (std::size_t i = 0; i < m->size(); ++i) CHECK(m->data()[i] == 0.0);
}

TEST_CASE("analytic gradients match central finite differences") {
    ModelConfig cfg = tiny_config();
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        MetricModel model = init_metric_model(cfg, {3, 5, 9}, seed);
        FixedBatch b = make_batch(cfg, 4, 3, seed + 50);

        HeadCache hc;
        Matrix emb = head_forward_masked(b.x, model.head, b.mask, &hc);
        ArcCache ac;
        arcface_forward(emb, b.labels, model.arc, &ac);
        Gradients g = model_backward(hc, ac, model.head, model.arc);

        RngStream coord_rng(seed + 900);
        CHECK(max_rel_err_fd(model, model.head.adapter_w, g.adapter_w, b, coord_rng, 12) <= 1e-4);
        CHECK(max_rel_err_fd(model, model.head.adapter_b, g.adapter_b, b, coord_rng, 6) <= 1e-4);
        CHECK(max_rel_err_fd(model, model.head.bn_gamma, g.bn_gamma, b, coord_rng, 6) <= 1e-4);
        CHECK(max_rel_err_fd(model, model.head.bn_beta, g.bn_beta, b, coord_rng, 6) <= 1e-4);
        CHECK(max_rel_err_fd(model, model.head.fc_w, g.fc_w, b, coord_rng, 12) <= 1e-4);
        CHECK(max_rel_err_fd(model, model.head.fc_b, g.fc_b, b, coord_rng, 4) <= 1e-4);
        CHECK(max_rel_err_fd(model, model.arc.weights, g.arc_w, b, coord_rng, 12) <= 1e-4);
    }
}

TEST_CASE("duplicating the batch leaves mean gradients unchanged") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_rate = 0.0;  // both copies must see the same network
    MetricModel model = init_metric_model(cfg, {4, 4, 4}, 31);
    FixedBatch b = make_batch(cfg, 4, 3, 200);
    b.mask = Matrix(4, cfg.in_dim, 1.0);

    HeadCache hc;
    Matrix emb = head_forward_masked(b.x, model.head, b.mask, &hc);
    ArcCache ac;
    arcface_forward(emb, b.labels, model.arc, &ac);
    Gradients g1 = model_backward(hc, ac, model.head, model.arc);

    FixedBatch dup;
    dup.x = Matrix(8, cfg.in_dim);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < cfg.in_dim; ++j) dup.x(i, j) = b.x(i % 4, j);
    for (std::size_t i = 0; i < 8; ++i) dup.labels.push_back(b.labels[i % 4]);
    dup.mask = Matrix(8, cfg.in_dim, 1.0);

    HeadCache hc2;
    Matrix emb2 = head_forward_masked(dup.x, model.head, dup.mask, &hc2);
    ArcCache ac2;
    arcface_forward(emb2, dup.labels, model.arc, &ac2);
    Gradients g2 = model_backward(hc2, ac2, model.head, model.arc);

    auto close = [](const Matrix& a, const Matrix& bb) {
        REQUIRE(a.same_shape(bb));
        for (std::size_t i = 0; i < a.size(); ++i)
            CHECK(std::abs(a.data()[i] - bb.data()[i]) <= 1e-9);
    };
    close(g1.bn_gamma, g2.bn_gamma);
    close(g1.bn_beta, g2.bn_beta);
    close(g1.fc_w, g2.fc_w);
    close(g1.fc_b, g2.fc_b);
}

TEST_CASE("embed contract") {
    ModelConfig cfg = tiny_config();
    MetricModel model = init_metric_model(cfg, {4, 6}, 41);
    RngStream rng(7);
    Matrix x = rng.gaussian_matrix(5, cfg.in_dim);
    Matrix e = embed(x, model);
    CHECK(e.cols() == cfg.emb_dim);
    for (std::size_t i = 0; i < e.rows(); ++i)
        CHECK(row_norm(e, i) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(embed(x, model) == e);

    // permuting rows permutes outputs identically
    Matrix xp(5, cfg.in_dim);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < cfg.in_dim; ++j) xp(i, j) = x(perm[i], j);
    Matrix ep = embed(xp, model);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < cfg.emb_dim; ++j) CHECK(ep(i, j) == e(perm[i], j));
}

TEST_CASE("checkpoint round-trip preserves the model exactly") {
    namespace fs = std::filesystem;
    ModelConfig cfg = tiny_config();
    MetricModel model = init_metric_model(cfg, {3, 4, 5, 6}, 55);
    // make running stats non-trivial first
    RngStream rng(8);
    Matrix x = rng.gaussian_matrix(6, cfg.in_dim);
    head_forward(x, model.head, Mode::train, &rng);

    fs::path path = fs::temp_directory_path() / "embedkit_ckpt_test.guet";
    save_checkpoint(model, path.string());
    MetricModel loaded = load_checkpoint(path.string());
    fs::remove(path);

    CHECK(loaded.head.fc_w == model.head.fc_w);
    CHECK(loaded.head.adapter_w == model.head.adapter_w);
    CHECK(loaded.head.bn_running_var == model.head.bn_running_var);
    CHECK(loaded.arc.weights == model.arc.weights);
    CHECK(loaded.arc.margins.per_class == model.arc.margins.per_class);
    CHECK(loaded.arc.scale == model.arc.scale);

    Matrix e1 = embed(x, model);
    Matrix e2 = embed(x, loaded);
    CHECK(e1 == e2);
}
