#include "embedkit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace embedkit {

std::vector<NamedParam> trainable_params(MetricModel& model) {
    std::vector<NamedParam> params;
    if (model.head.use_adapter) {
        params.push_back({"adapter_w", &model.head.adapter_w, ParamGroup::backbone});
        params.push_back({"adapter_b", &model.head.adapter_b, ParamGroup::backbone});
    }
    params.push_back({"bn_gamma", &model.head.bn_gamma, ParamGroup::head});
    params.push_back({"bn_beta", &model.head.bn_beta, ParamGroup::head});
    params.push_back({"fc_w", &model.head.fc_w, ParamGroup::head});
    params.push_back({"fc_b", &model.head.fc_b, ParamGroup::head});
    params.push_back({"arc_w", &model.arc.weights, ParamGroup::head});
    return params;
}

std::vector<const Matrix*> gradient_ptrs(const Gradients& grads, const MetricModel& model) {
    std::vector<const Matrix*> ptrs;
    if (model.head.use_adapter) {
        ptrs.push_back(&grads.adapter_w);
        ptrs.push_back(&grads.adapter_b);
    }
    ptrs.push_back(&grads.bn_gamma);
    ptrs.push_back(&grads.bn_beta);
    ptrs.push_back(&grads.fc_w);
    ptrs.push_back(&grads.fc_b);
    ptrs.push_back(&grads.arc_w);
    return ptrs;
}

void audit_param_groups(MetricModel& model) {
    auto params = trainable_params(model);
    std::set<std::string> names;
    std::set<const Matrix*> seen;
    for (const auto& p : params) {
        if (!names.insert(p.name).second)
            throw std::logic_error("audit_param_groups: duplicate tensor '" + p.name + "'");
        if (!seen.insert(p.value).second)
            throw std::logic_error("audit_param_groups: tensor '" + p.name +
                                   "' registered twice");
    }
    // the registry must cover every trainable tensor of the model
    std::size_t expected = 5 + (model.head.use_adapter ? 2 : 0);
    if (params.size() != expected)
        throw std::logic_error("audit_param_groups: expected " + std::to_string(expected) +
                               " tensors, found " + std::to_string(params.size()));
}

AdamState make_adam_state(MetricModel& model) {
    AdamState state;
    for (const auto& p : trainable_params(model)) {
        state.m.emplace_back(p.value->rows(), p.value->cols());
        state.v.emplace_back(p.value->rows(), p.value->cols());
    }
    return state;
}

void adam_step(std::vector<NamedParam>& params, const std::vector<const Matrix*>& grads,
               AdamState& state, const std::map<ParamGroup, double>& group_lrs,
               const TrainConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].value->same_shape(*grads[i]))
            throw std::invalid_argument("adam_step: shape mismatch for tensor '" +
                                        params[i].name + "'");
        if (!grads[i]->all_finite())
            throw std::invalid_argument("adam_step: non-finite gradient for tensor '" +
                                        params[i].name + "'");
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

    for (std::size_t i = 0; i < params.size(); ++i) {
        double lr = group_lrs.at(params[i].group);
        Matrix& theta = *params[i].value;
        const Matrix& g = *grads[i];
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        for (std::size_t k = 0; k < theta.size(); ++k) {
            double gk = g.data()[k];
            m.data()[k] = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * gk;
            v.data()[k] = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
            double mhat = m.data()[k] / bc1;
            double vhat = v.data()[k] / bc2;
            theta.data()[k] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

namespace {

struct TrainSet {
    Matrix features;                  // rows aligned with labels
    std::vector<std::size_t> labels;  // class indices
    std::vector<std::size_t> class_counts;
};

TrainSet assemble_train_set(const FeatureBank& bank, const DatasetManifest& manifest,
                            const Split& split) {
    if (split.train_ids.empty()) throw std::invalid_argument("train: empty train split");

    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < bank.ids.size(); ++i) row_of[bank.ids[i]] = i;
    std::unordered_map<std::string, std::string> class_of;
    for (const auto& e : manifest.entries) class_of[e.id] = e.class_label;

    std::set<std::string> class_set;
    for (const auto& id : split.train_ids) {
        auto it = class_of.find(id);
        if (it == class_of.end())
            throw std::invalid_argument("train: id '" + id + "' missing from manifest");
        class_set.insert(it->second);
    }
    std::vector<std::string> classes(class_set.begin(), class_set.end());
    std::unordered_map<std::string, std::size_t> index_of;
    for (std::size_t i = 0; i < classes.size(); ++i) index_of[classes[i]] = i;

    TrainSet ts;
    ts.features = Matrix(split.train_ids.size(), bank.dim);
    ts.class_counts.assign(classes.size(), 0);
    for (std::size_t i = 0; i < split.train_ids.size(); ++i) {
        auto it = row_of.find(split.train_ids[i]);
        if (it == row_of.end())
            throw std::invalid_argument("train: id '" + split.train_ids[i] +
                                        "' missing from feature bank");
        const double* src = bank.features.row(it->second);
        std::copy(src, src + bank.dim, ts.features.row(i));
        std::size_t cls = index_of[class_of[split.train_ids[i]]];
        ts.labels.push_back(cls);
        ++ts.class_counts[cls];
    }
    for (std::size_t c = 0; c < ts.class_counts.size(); ++c)
        if (ts.class_counts[c] < 2)
            throw std::invalid_argument("train: class index " + std::to_string(c) +
                                        " has fewer than 2 train samples");
    return ts;
}

}  // namespace

TrainResult train(const FeatureBank& bank, const DatasetManifest& manifest, const Split& split,
                  const TrainConfig& cfg) {
    if (cfg.batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
    if (!(cfg.lr_head > 0.0) || !(cfg.lr_backbone > 0.0))
        throw std::invalid_argument("train: learning rates must be positive");

    TrainSet ts = assemble_train_set(bank, manifest, split);

    ModelConfig mcfg = cfg.model;
    mcfg.in_dim = bank.dim;

    RngStream rng(cfg.seed);
    TrainResult result{init_metric_model(mcfg, ts.class_counts, rng), {}};
    MetricModel& model = result.model;
    audit_param_groups(model);

    auto params = trainable_params(model);
    AdamState adam = make_adam_state(model);

    std::vector<std::size_t> order(ts.labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t epoch = 0;
    for (int phase = 1; phase <= 2; ++phase) {
        std::map<ParamGroup, double> lrs{
            {ParamGroup::backbone, phase == 1 ? 0.0 : cfg.lr_backbone},
            {ParamGroup::head, cfg.lr_head}};
        std::size_t n_epochs = phase == 1 ? cfg.epochs_head_only : cfg.epochs_joint;

        for (std::size_t e = 0; e < n_epochs; ++e) {
            auto t0 = std::chrono::steady_clock::now();
            if (cfg.shuffle) rng.shuffle(order);

            double loss_sum = 0.0;
            std::size_t sample_count = 0;
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
                if (bsz < 2) break;  // BN needs at least 2 samples

                Matrix x(bsz, bank.dim);
                std::vector<std::size_t> labels(bsz);
                for (std::size_t i = 0; i < bsz; ++i) {
                    std::size_t src = order[start + i];
                    std::copy(ts.features.row(src), ts.features.row(src) + bank.dim, x.row(i));
                    labels[i] = ts.labels[src];
                }

                HeadCache hcache;
                Matrix emb = head_forward(x, model.head, Mode::train, &rng, &hcache);
                ArcCache acache;
                ArcFaceResult arc = arcface_forward(emb, labels, model.arc, &acache);
                Gradients grads = model_backward(hcache, acache, model.head, model.arc);
                adam_step(params, gradient_ptrs(grads, model), adam, lrs, cfg);

                loss_sum += arc.loss * static_cast<double>(bsz);
                sample_count += bsz;
            }
            if (sample_count == 0)
                throw std::invalid_argument("train: no batch of >= 2 samples could be formed");

            auto t1 = std::chrono::steady_clock::now();
            EpochStat stat;
            stat.epoch = ++epoch;
            stat.phase = phase;
            stat.mean_loss = loss_sum / static_cast<double>(sample_count);
            stat.seconds = std::chrono::duration<double>(t1 - t0).count();
            if (!std::isfinite(stat.mean_loss))
                throw std::runtime_error("train: non-finite epoch loss");
            result.report.epochs.push_back(stat);
        }
    }
    return result;
}

void write_train_log(const TrainReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_train_log: cannot open '" + path + "'");
    os << "epoch,phase,mean_loss,seconds\n";
    char buf[128];
    for (const auto& e : report.epochs) {
        std::snprintf(buf, sizeof(buf), "%zu,%d,%.9f,%.3f\n", e.epoch, e.phase, e.mean_loss,
                      e.seconds);
        os << buf;
    }
}

double GradCheckReport::worst() const {
    double w = 0.0;
    for (const auto& t : tensors) w = std::max(w, t.max_rel_err);
    return w;
}

GradCheckReport grad_check(MetricModel& model, const Matrix& batch,
                           const std::vector<std::size_t>& labels, double epsilon,
                           std::size_t n_coords, std::uint64_t seed) {
    if (batch.rows() < 2) throw std::invalid_argument("grad_check: batch must be >= 2");
    RngStream rng(seed);

    double keep = 1.0 - model.head.dropout_rate;
    Matrix mask = rng.bernoulli_matrix(batch.rows(), model.head.in_dim, keep);
    if (model.head.dropout_rate > 0.0) mask = scale(mask, 1.0 / keep);

    auto loss_of = [&]() {
        Matrix emb = head_forward_masked(batch, model.head, mask);
        return arcface_forward(emb, labels, model.arc).loss;
    };

    HeadCache hcache;
    Matrix emb = head_forward_masked(batch, model.head, mask, &hcache);
    ArcCache acache;
    arcface_forward(emb, labels, model.arc, &acache);
    Gradients grads = model_backward(hcache, acache, model.head, model.arc);

    auto params = trainable_params(model);
    auto grad_ptrs = gradient_ptrs(grads, model);

    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix& tensor = *params[p].value;
        const Matrix& analytic = *grad_ptrs[p];
        double worst = 0.0;
        std::size_t samples = std::min(n_coords, tensor.size());
        for (std::size_t s = 0; s < samples; ++s) {
            std::size_t idx = static_cast<std::size_t>(rng.uniform_below(tensor.size()));
            double saved = tensor.data()[idx];
            tensor.data()[idx] = saved + epsilon;
            double lp = loss_of();
            tensor.data()[idx] = saved - epsilon;
            double lm = loss_of();
            tensor.data()[idx] = saved;
            double numeric = (lp - lm) / (2.0 * epsilon);
            double a = analytic.data()[idx];
            double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4);
            worst = std::max(worst, rel);
        }
        report.tensors.push_back({params[p].name, worst});
    }
    return report;
}

}  // namespace embedkit
