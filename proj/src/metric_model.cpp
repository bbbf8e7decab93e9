#include "embedkit/metric_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "embedkit/tensor_file.hpp"

namespace embedkit {

namespace {

constexpr double kCosClamp = 1.0 - 1e-7;

}  // namespace

MarginSchedule compute_dynamic_margins(const std::vector<std::size_t>& class_counts,
                                       double m_min, double m_max, double lambda) {
    if (class_counts.empty())
        throw std::invalid_argument("compute_dynamic_margins: empty class counts");
    if (!(m_min < m_max))
        throw std::invalid_argument("compute_dynamic_margins: need m_min < m_max");
    if (!(lambda > 0.0)) throw std::invalid_argument("compute_dynamic_margins: need lambda > 0");
    for (std::size_t n : class_counts)
        if (n < 1) throw std::invalid_argument("compute_dynamic_margins: zero class count");

    std::size_t n_min = SIZE_MAX, n_max = 0;
    for (std::size_t n : class_counts) {
        n_min = std::min(n_min, n);
        n_max = std::max(n_max, n);
    }

    MarginSchedule sched;
    sched.m_min = m_min;
    sched.m_max = m_max;
    sched.lambda = lambda;
    sched.per_class.resize(class_counts.size());

    if (n_min == n_max) {
        double mid = 0.5 * (m_min + m_max);
        std::fill(sched.per_class.begin(), sched.per_class.end(), mid);
        return sched;
    }

    double x_min = std::pow(static_cast<double>(n_min), -lambda);
    double x_max = std::pow(static_cast<double>(n_max), -lambda);
    double a = (m_max - m_min) / (x_min - x_max);
    double b = m_max - a * x_min;

    for (std::size_t c = 0; c < class_counts.size(); ++c) {
        std::size_t n = class_counts[c];
        // exact at the anchors, closed form in between
        if (n == n_min)
            sched.per_class[c] = m_max;
        else if (n == n_max)
            sched.per_class[c] = m_min;
        else
            sched.per_class[c] =
                std::clamp(a * std::pow(static_cast<double>(n), -lambda) + b, m_min, m_max);
    }
    return sched;
}

MetricModel init_metric_model(const ModelConfig& cfg,
                              const std::vector<std::size_t>& class_counts, RngStream& rng) {
    if (class_counts.empty()) throw std::invalid_argument("init_metric_model: no classes");
    if (cfg.in_dim < 1 || cfg.emb_dim < 1 || cfg.n_subcenters < 1)
        throw std::invalid_argument("init_metric_model: invalid dimensions");
    if (!(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0))
        throw std::invalid_argument("init_metric_model: dropout_rate must be in [0,1)");

    MetricModel model;
    HeadParams& h = model.head;
    h.in_dim = cfg.in_dim;
    h.emb_dim = cfg.emb_dim;
    h.use_adapter = cfg.use_adapter;
    h.bn_eps = cfg.bn_eps;
    h.bn_momentum = cfg.bn_momentum;
    h.dropout_rate = cfg.dropout_rate;
    if (cfg.use_adapter) {
        h.adapter_w = Matrix::identity(cfg.in_dim);
        h.adapter_b = Matrix(1, cfg.in_dim);
    }
    h.bn_gamma = Matrix(1, cfg.in_dim, 1.0);
    h.bn_beta = Matrix(1, cfg.in_dim);
    h.bn_running_mean = Matrix(1, cfg.in_dim);
    h.bn_running_var = Matrix(1, cfg.in_dim, 1.0);
    h.fc_w = scale(rng.gaussian_matrix(cfg.emb_dim, cfg.in_dim), 0.01);
    h.fc_b = Matrix(1, cfg.emb_dim);

    ArcFaceParams& a = model.arc;
    a.n_classes = class_counts.size();
    a.n_subcenters = cfg.n_subcenters;
    a.emb_dim = cfg.emb_dim;
    a.scale = cfg.scale;
    a.weights = scale(rng.gaussian_matrix(a.n_classes * a.n_subcenters, cfg.emb_dim), 0.01);
    a.margins = compute_dynamic_margins(class_counts, cfg.m_min, cfg.m_max, cfg.margin_lambda);
    return model;
}

MetricModel init_metric_model(const ModelConfig& cfg,
                              const std::vector<std::size_t>& class_counts, std::uint64_t seed) {
    RngStream rng(seed);
    return init_metric_model(cfg, class_counts, rng);
}

namespace {

void check_head_input(const Matrix& x, const HeadParams& p) {
    if (x.cols() != p.in_dim)
        throw std::invalid_argument("head_forward: input dim " + std::to_string(x.cols()) +
                                    " != " + std::to_string(p.in_dim));
    if (!x.all_finite()) throw std::invalid_argument("head_forward: non-finite input");
}

Matrix adapter_apply(const Matrix& x, const HeadParams& p) {
    if (!p.use_adapter) return x;
    Matrix out = matmul(x, transpose(p.adapter_w));
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += p.adapter_b(0, j);
    return out;
}

Matrix fc_apply(const Matrix& d, const HeadParams& p) {
    Matrix out = matmul(d, transpose(p.fc_w));
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += p.fc_b(0, j);
    return out;
}

Matrix head_forward_eval_impl(const Matrix& x, const HeadParams& p, HeadCache* cache) {
    check_head_input(x, p);
    if (x.rows() < 1) throw std::invalid_argument("head_forward: empty batch");
    const std::size_t batch = x.rows();
    const std::size_t dim = p.in_dim;

    Matrix a = adapter_apply(x, p);
    Matrix bn(batch, dim);
    for (std::size_t j = 0; j < dim; ++j) {
        if (!(p.bn_running_var(0, j) > 0.0))
            throw std::invalid_argument("head_forward: running variance must stay positive");
        double inv_sd = 1.0 / std::sqrt(p.bn_running_var(0, j) + p.bn_eps);
        for (std::size_t i = 0; i < batch; ++i)
            bn(i, j) =
                p.bn_gamma(0, j) * ((a(i, j) - p.bn_running_mean(0, j)) * inv_sd) + p.bn_beta(0, j);
    }
    Matrix emb = fc_apply(bn, p);
    if (cache) {
        cache->input = x;
        cache->adapter_out = std::move(a);
        cache->dropout_out = std::move(bn);
        cache->train_mode = false;
    }
    return emb;
}

}  // namespace

Matrix head_forward_masked(const Matrix& x, const HeadParams& p, const Matrix& dropout_mask,
                           HeadCache* cache) {
    check_head_input(x, p);
    const std::size_t batch = x.rows();
    const std::size_t dim = p.in_dim;
    if (batch < 2)
        throw std::invalid_argument("head_forward: train mode needs a batch of >= 2, got " +
                                    std::to_string(batch));
    if (dropout_mask.rows() != batch || dropout_mask.cols() != dim)
        throw std::invalid_argument("head_forward: dropout mask shape mismatch");

    Matrix a = adapter_apply(x, p);

    Matrix mean(1, dim), var(1, dim);
    for (std::size_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < batch; ++i) s += a(i, j);
        mean(0, j) = s / static_cast<double>(batch);
    }
    for (std::size_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            double d = a(i, j) - mean(0, j);
            s += d * d;
        }
        var(0, j) = s / static_cast<double>(batch);  // biased, as used in the forward
    }

    Matrix xhat(batch, dim);
    for (std::size_t j = 0; j < dim; ++j) {
        double inv_sd = 1.0 / std::sqrt(var(0, j) + p.bn_eps);
        for (std::size_t i = 0; i < batch; ++i) xhat(i, j) = (a(i, j) - mean(0, j)) * inv_sd;
    }

    Matrix dropped(batch, dim);
    for (std::size_t j = 0; j < dim; ++j)
        for (std::size_t i = 0; i < batch; ++i) {
            double bn = p.bn_gamma(0, j) * xhat(i, j) + p.bn_beta(0, j);
            dropped(i, j) = bn * dropout_mask(i, j);
        }

    Matrix emb = fc_apply(dropped, p);

    if (cache) {
        cache->input = x;
        cache->adapter_out = std::move(a);
        cache->bn_mean = std::move(mean);
        cache->bn_var = std::move(var);
        cache->bn_xhat = std::move(xhat);
        cache->dropout_mask = dropout_mask;
        cache->dropout_out = std::move(dropped);
        cache->train_mode = true;
    }
    return emb;
}

Matrix head_forward(const Matrix& x, HeadParams& p, Mode mode, RngStream* rng, HeadCache* cache) {
    if (mode == Mode::eval) return head_forward_eval_impl(x, p, cache);

    if (rng == nullptr) throw std::invalid_argument("head_forward: train mode needs an rng");
    const std::size_t batch = x.rows();
    const std::size_t dim = p.in_dim;

    double keep = 1.0 - p.dropout_rate;
    Matrix mask = rng->bernoulli_matrix(batch, dim, keep);
    if (p.dropout_rate > 0.0) mask = scale(mask, 1.0 / keep);

    HeadCache local;
    HeadCache* c = cache ? cache : &local;
    Matrix emb = head_forward_masked(x, p, mask, c);

    // running stats track the unbiased batch variance
    double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
    for (std::size_t j = 0; j < dim; ++j) {
        p.bn_running_mean(0, j) =
            (1.0 - p.bn_momentum) * p.bn_running_mean(0, j) + p.bn_momentum * c->bn_mean(0, j);
        p.bn_running_var(0, j) = (1.0 - p.bn_momentum) * p.bn_running_var(0, j) +
                                 p.bn_momentum * (c->bn_var(0, j) * unbias);
    }
    return emb;
}

ArcFaceResult arcface_forward(const Matrix& embedding, const std::vector<std::size_t>& labels,
                              const ArcFaceParams& af, ArcCache* cache) {
    const std::size_t batch = embedding.rows();
    const std::size_t emb_dim = embedding.cols();
    const std::size_t n_classes = af.n_classes;
    const std::size_t k_sub = af.n_subcenters;
    if (emb_dim != af.emb_dim)
        throw std::invalid_argument("arcface_forward: embedding dim mismatch");
    if (labels.size() != batch)
        throw std::invalid_argument("arcface_forward: labels/batch size mismatch");
    if (af.weights.rows() != n_classes * k_sub || af.weights.cols() != emb_dim)
        throw std::invalid_argument("arcface_forward: weight shape mismatch");
    if (af.margins.per_class.size() != n_classes)
        throw std::invalid_argument("arcface_forward: margin schedule size mismatch");
    if (!embedding.all_finite())
        throw std::invalid_argument("arcface_forward: non-finite embedding");
    for (std::size_t l : labels)
        if (l >= n_classes)
            throw std::invalid_argument("arcface_forward: label " + std::to_string(l) +
                                        " out of range");

    std::vector<double> emb_norms(batch);
    Matrix emb_hat = embedding;
    for (std::size_t i = 0; i < batch; ++i) {
        double n = row_norm(embedding, i);
        if (n < 1e-12)
            throw std::invalid_argument("arcface_forward: embedding row " + std::to_string(i) +
                                        " has near-zero norm");
        emb_norms[i] = n;
        double inv = 1.0 / n;
        for (std::size_t j = 0; j < emb_dim; ++j) emb_hat(i, j) *= inv;
    }

    const std::size_t n_rows = n_classes * k_sub;
    std::vector<double> w_norms(n_rows);
    Matrix w_hat = af.weights;
    for (std::size_t r = 0; r < n_rows; ++r) {
        double n = row_norm(af.weights, r);
        if (n < 1e-12)
            throw std::invalid_argument("arcface_forward: subcenter row " + std::to_string(r) +
                                        " has near-zero norm");
        w_norms[r] = n;
        double inv = 1.0 / n;
        for (std::size_t j = 0; j < emb_dim; ++j) w_hat(r, j) *= inv;
    }

    Matrix cos_full = matmul(emb_hat, transpose(w_hat));  // B x (C*K)

    Matrix cos_pooled(batch, n_classes);
    std::vector<std::size_t> argmax_k(batch * n_classes, 0);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t c = 0; c < n_classes; ++c) {
            std::size_t best_k = 0;
            double best = cos_full(i, c * k_sub);
            for (std::size_t k = 1; k < k_sub; ++k) {
                double v = cos_full(i, c * k_sub + k);
                if (v > best) {
                    best = v;
                    best_k = k;
                }
            }
            cos_pooled(i, c) = best;
            argmax_k[i * n_classes + c] = best_k;
        }

    Matrix logits = cos_pooled;
    std::vector<std::uint8_t> easy_branch(batch, 1), was_clamped(batch, 0);
    for (std::size_t i = 0; i < batch; ++i) {
        std::size_t y = labels[i];
        double raw = cos_pooled(i, y);
        double u = std::clamp(raw, -kCosClamp, kCosClamp);
        if (u != raw) was_clamped[i] = 1;
        double m = af.margins.per_class[y];
        double cos_m = std::cos(m), sin_m = std::sin(m);
        if (u > std::cos(std::numbers::pi - m)) {
            // cos(theta + m) via the angle-sum identity, theta = acos(u)
            logits(i, y) = u * cos_m - std::sqrt(1.0 - u * u) * sin_m;
        } else {
            easy_branch[i] = 0;
            logits(i, y) = u - m * sin_m;
        }
    }
    for (std::size_t i = 0; i < logits.size(); ++i) logits.data()[i] *= af.scale;

    Matrix probs(batch, n_classes);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        double zmax = logits(i, 0);
        for (std::size_t c = 1; c < n_classes; ++c) zmax = std::max(zmax, logits(i, c));
        double lse = 0.0;
        for (std::size_t c = 0; c < n_classes; ++c) lse += std::exp(logits(i, c) - zmax);
        for (std::size_t c = 0; c < n_classes; ++c)
            probs(i, c) = std::exp(logits(i, c) - zmax) / lse;
        loss += std::log(lse) - (logits(i, labels[i]) - zmax);
    }
    loss /= static_cast<double>(batch);

    ArcFaceResult out;
    out.loss = loss;
    out.logits = logits;
    if (cache) {
        cache->labels = labels;
        cache->emb_norms = std::move(emb_norms);
        cache->emb_hat = std::move(emb_hat);
        cache->w_norms = std::move(w_norms);
        cache->w_hat = std::move(w_hat);
        cache->cos_full = std::move(cos_full);
        cache->argmax_k = std::move(argmax_k);
        cache->cos_pooled = std::move(cos_pooled);
        cache->easy_branch = std::move(easy_branch);
        cache->clamped = std::move(was_clamped);
        cache->logits = out.logits;
        cache->probs = std::move(probs);
    }
    return out;
}

Gradients model_backward(const HeadCache& hcache, const ArcCache& acache, const HeadParams& p,
                         const ArcFaceParams& af, double loss_scale) {
    if (!hcache.train_mode)
        throw std::invalid_argument("model_backward: needs a train-mode forward cache");
    const std::size_t batch = hcache.input.rows();
    const std::size_t n_classes = af.n_classes;
    const std::size_t k_sub = af.n_subcenters;
    const std::size_t emb_dim = af.emb_dim;
    const std::size_t dim = p.in_dim;
    if (acache.labels.size() != batch)
        throw std::invalid_argument("model_backward: cache/label batch mismatch");
    if (acache.probs.rows() != batch || acache.probs.cols() != n_classes)
        throw std::invalid_argument("model_backward: forward cache is incomplete");

    // d loss / d logits
    Matrix dlogits = acache.probs;
    for (std::size_t i = 0; i < batch; ++i) dlogits(i, acache.labels[i]) -= 1.0;
    dlogits = scale(dlogits, loss_scale / static_cast<double>(batch));

    // through the scale and the target-class margin transform
    Matrix dcos_pooled = scale(dlogits, af.scale);
    for (std::size_t i = 0; i < batch; ++i) {
        std::size_t y = acache.labels[i];
        if (acache.clamped[i]) {
            dcos_pooled(i, y) = 0.0;  // clamp region has zero slope
            continue;
        }
        double u = acache.cos_pooled(i, y);
        double m = af.margins.per_class[y];
        double dphi;
        if (acache.easy_branch[i]) {
            double sin_theta = std::sqrt(1.0 - u * u);
            dphi = std::cos(m) + std::sin(m) * u / sin_theta;
        } else {
            dphi = 1.0;
        }
        dcos_pooled(i, y) *= dphi;
    }

    // scatter through the subcenter max-pool
    Matrix dcos_full(batch, n_classes * k_sub);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t c = 0; c < n_classes; ++c) {
            std::size_t k = acache.argmax_k[i * n_classes + c];
            dcos_full(i, c * k_sub + k) = dcos_pooled(i, c);
        }

    // cos = emb_hat . w_hat
    Matrix d_emb_hat = matmul(dcos_full, acache.w_hat);             // B x E
    Matrix d_w_hat = matmul(transpose(dcos_full), acache.emb_hat);  // (C*K) x E

    // back through the row normalizations
    Matrix d_emb(batch, emb_dim);
    for (std::size_t i = 0; i < batch; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < emb_dim; ++j) dot += d_emb_hat(i, j) * acache.emb_hat(i, j);
        double inv = 1.0 / acache.emb_norms[i];
        for (std::size_t j = 0; j < emb_dim; ++j)
            d_emb(i, j) = (d_emb_hat(i, j) - dot * acache.emb_hat(i, j)) * inv;
    }
    Gradients g;
    g.arc_w = Matrix(n_classes * k_sub, emb_dim);
    for (std::size_t r = 0; r < n_classes * k_sub; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < emb_dim; ++j) dot += d_w_hat(r, j) * acache.w_hat(r, j);
        double inv = 1.0 / acache.w_norms[r];
        for (std::size_t j = 0; j < emb_dim; ++j)
            g.arc_w(r, j) = (d_w_hat(r, j) - dot * acache.w_hat(r, j)) * inv;
    }

    // FC
    g.fc_w = matmul(transpose(d_emb), hcache.dropout_out);  // E x D
    g.fc_b = Matrix(1, emb_dim);
    for (std::size_t j = 0; j < emb_dim; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < batch; ++i) s += d_emb(i, j);
        g.fc_b(0, j) = s;
    }
    Matrix d_drop = matmul(d_emb, p.fc_w);  // B x D

    // dropout
    Matrix d_bn = hadamard(d_drop, hcache.dropout_mask);

    // batch norm
    g.bn_gamma = Matrix(1, dim);
    g.bn_beta = Matrix(1, dim);
    Matrix d_a(batch, dim);
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t j = 0; j < dim; ++j) {
        double dgamma = 0.0, dbeta = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            dgamma += d_bn(i, j) * hcache.bn_xhat(i, j);
            dbeta += d_bn(i, j);
        }
        g.bn_gamma(0, j) = dgamma;
        g.bn_beta(0, j) = dbeta;

        double gamma = p.bn_gamma(0, j);
        double inv_sd = 1.0 / std::sqrt(hcache.bn_var(0, j) + p.bn_eps);
        double sum_dxhat = dbeta * gamma;
        double sum_dxhat_xhat = dgamma * gamma;
        for (std::size_t i = 0; i < batch; ++i) {
            double dxhat = d_bn(i, j) * gamma;
            d_a(i, j) = inv_sd * (dxhat - inv_b * sum_dxhat -
                                  hcache.bn_xhat(i, j) * inv_b * sum_dxhat_xhat);
        }
    }

    // adapter
    if (p.use_adapter) {
        g.adapter_w = matmul(transpose(d_a), hcache.input);  // D x D
        g.adapter_b = Matrix(1, dim);
        for (std::size_t j = 0; j < dim; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < batch; ++i) s += d_a(i, j);
            g.adapter_b(0, j) = s;
        }
    }
    return g;
}

Matrix embed(const Matrix& x, const MetricModel& model) {
    Matrix e = head_forward_eval_impl(x, model.head, nullptr);
    return l2_normalize_rows(e);
}

namespace {

Matrix margins_row(const MarginSchedule& s) {
    Matrix m(1, s.per_class.size());
    for (std::size_t i = 0; i < s.per_class.size(); ++i) m(0, i) = s.per_class[i];
    return m;
}

}  // namespace

void save_checkpoint(const MetricModel& model, const std::string& path) {
    const HeadParams& h = model.head;
    const ArcFaceParams& a = model.arc;
    TensorFile tf;
    tf.put_scalar("cfg.in_dim", static_cast<double>(h.in_dim));
    tf.put_scalar("cfg.emb_dim", static_cast<double>(h.emb_dim));
    tf.put_scalar("cfg.n_classes", static_cast<double>(a.n_classes));
    tf.put_scalar("cfg.n_subcenters", static_cast<double>(a.n_subcenters));
    tf.put_scalar("cfg.scale", a.scale);
    tf.put_scalar("cfg.dropout_rate", h.dropout_rate);
    tf.put_scalar("cfg.use_adapter", h.use_adapter ? 1.0 : 0.0);
    tf.put_scalar("cfg.bn_eps", h.bn_eps);
    tf.put_scalar("cfg.bn_momentum", h.bn_momentum);
    tf.put_scalar("cfg.m_min", a.margins.m_min);
    tf.put_scalar("cfg.m_max", a.margins.m_max);
    tf.put_scalar("cfg.margin_lambda", a.margins.lambda);
    tf.put("margins", margins_row(a.margins));
    if (h.use_adapter) {
        tf.put("adapter_w", h.adapter_w);
        tf.put("adapter_b", h.adapter_b);
    }
    tf.put("bn_gamma", h.bn_gamma);
    tf.put("bn_beta", h.bn_beta);
    tf.put("bn_running_mean", h.bn_running_mean);
    tf.put("bn_running_var", h.bn_running_var);
    tf.put("fc_w", h.fc_w);
    tf.put("fc_b", h.fc_b);
    tf.put("arc_w", a.weights);
    tf.save(path);
}

MetricModel load_checkpoint(const std::string& path) {
    TensorFile tf = TensorFile::load(path);
    MetricModel model;
    HeadParams& h = model.head;
    ArcFaceParams& a = model.arc;
    h.in_dim = static_cast<std::size_t>(tf.get_scalar("cfg.in_dim"));
    h.emb_dim = static_cast<std::size_t>(tf.get_scalar("cfg.emb_dim"));
    h.use_adapter = tf.get_scalar("cfg.use_adapter") != 0.0;
    h.dropout_rate = tf.get_scalar("cfg.dropout_rate");
    h.bn_eps = tf.get_scalar("cfg.bn_eps");
    h.bn_momentum = tf.get_scalar("cfg.bn_momentum");
    if (h.use_adapter) {
        h.adapter_w = tf.get("adapter_w");
        h.adapter_b = tf.get("adapter_b");
    }
    h.bn_gamma = tf.get("bn_gamma");
    h.bn_beta = tf.get("bn_beta");
    h.bn_running_mean = tf.get("bn_running_mean");
    h.bn_running_var = tf.get("bn_running_var");
    h.fc_w = tf.get("fc_w");
    h.fc_b = tf.get("fc_b");

    a.n_classes = static_cast<std::size_t>(tf.get_scalar("cfg.n_classes"));
    a.n_subcenters = static_cast<std::size_t>(tf.get_scalar("cfg.n_subcenters"));
    a.emb_dim = h.emb_dim;
    a.scale = tf.get_scalar("cfg.scale");
    a.weights = tf.get("arc_w");
    a.margins.m_min = tf.get_scalar("cfg.m_min");
    a.margins.m_max = tf.get_scalar("cfg.m_max");
    a.margins.lambda = tf.get_scalar("cfg.margin_lambda");
    const Matrix& m = tf.get("margins");
    a.margins.per_class.assign(m.data(), m.data() + m.size());

    if (a.weights.rows() != a.n_classes * a.n_subcenters || a.weights.cols() != a.emb_dim)
        throw std::runtime_error("load_checkpoint: inconsistent tensor shapes in '" + path + "'");
    return model;
}

}  // namespace embedkit
