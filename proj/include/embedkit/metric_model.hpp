#pragma once

// The trainable embedding model: an identity-initialized linear adapter
// standing in for the fine-tuned backbone blocks, a BN-Dropout-FC head that
// maps backbone features to the embedding space, and a SubCenter ArcFace
// classification layer with per-class dynamic margins.
//
// Forward and backward passes are written out by hand in f64; the backward
// pass is exact for the recorded dropout mask and batch statistics, which is
// what the finite-difference checks in the trainer rely on.

#include <cstdint>
#include <string>
#include <vector>

#include "embedkit/datastore.hpp"
#include "embedkit/numkit.hpp"

namespace embedkit {

struct MarginSchedule {
    double m_min = 0.005;
    double m_max = 0.45;
    double lambda = 0.25;
    std::vector<double> per_class;  // radians, aligned with class index
};

// Fits m(n) = a * n^(-lambda) + b through m(n_min) = m_max and
// m(n_max) = m_min, so the rarest class gets the largest margin. Equal
// counts everywhere degenerate to the midpoint (m_min + m_max) / 2.
MarginSchedule compute_dynamic_margins(const std::vector<std::size_t>& class_counts,
                                       double m_min = 0.005, double m_max = 0.45,
                                       double lambda = 0.25);

struct HeadParams {
    std::size_t in_dim = 1024;
    std::size_t emb_dim = 256;
    bool use_adapter = true;
    Matrix adapter_w;  // in_dim x in_dim
    Matrix adapter_b;  // 1 x in_dim
    Matrix bn_gamma;   // 1 x in_dim
    Matrix bn_beta;    // 1 x in_dim
    Matrix bn_running_mean;  // 1 x in_dim
    Matrix bn_running_var;   // 1 x in_dim
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double dropout_rate = 0.2;
    Matrix fc_w;  // emb_dim x in_dim
    Matrix fc_b;  // 1 x emb_dim
};

struct ArcFaceParams {
    std::size_t n_classes = 0;
    std::size_t n_subcenters = 3;
    std::size_t emb_dim = 256;
    double scale = 30.0;
    Matrix weights;  // (n_classes * n_subcenters) x emb_dim
    MarginSchedule margins;
};

struct ModelConfig {
    std::size_t in_dim = 1024;
    std::size_t emb_dim = 256;
    std::size_t n_subcenters = 3;
    double scale = 30.0;
    double dropout_rate = 0.2;
    double m_min = 0.005;
    double m_max = 0.45;
    double margin_lambda = 0.25;
    bool use_adapter = true;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
};

struct MetricModel {
    HeadParams head;
    ArcFaceParams arc;
};

// FC and subcenter weights from N(0, 0.01^2) in a pinned draw order
// (fc_w, then arc weights); adapter starts as the exact identity.
MetricModel init_metric_model(const ModelConfig& cfg,
                              const std::vector<std::size_t>& class_counts, RngStream& rng);
MetricModel init_metric_model(const ModelConfig& cfg,
                              const std::vector<std::size_t>& class_counts, std::uint64_t seed);

enum class Mode { train, eval };

struct HeadCache {
    Matrix input;         // B x in_dim
    Matrix adapter_out;   // B x in_dim
    Matrix bn_mean;       // 1 x in_dim (batch, biased var below)
    Matrix bn_var;        // 1 x in_dim
    Matrix bn_xhat;       // B x in_dim
    Matrix dropout_mask;  // B x in_dim, entries 0 or 1/(1-p)
    Matrix dropout_out;   // B x in_dim
    bool train_mode = false;
};

// Train mode: batch statistics, inverted dropout (scale 1/(1-p)), running
// stats updated with momentum (unbiased variance); needs B >= 2 and an rng.
// Eval mode: running statistics, no dropout, B >= 1.
Matrix head_forward(const Matrix& x, HeadParams& params, Mode mode, RngStream* rng,
                    HeadCache* cache = nullptr);

// Pure train-mode forward with a caller-supplied dropout mask and no running
// stat update; the finite-difference gradient checks are built on this.
Matrix head_forward_masked(const Matrix& x, const HeadParams& params, const Matrix& dropout_mask,
                           HeadCache* cache = nullptr);

struct ArcCache {
    std::vector<std::size_t> labels;
    std::vector<double> emb_norms;   // pre-normalization row norms
    Matrix emb_hat;                  // B x emb_dim
    std::vector<double> w_norms;     // per subcenter row
    Matrix w_hat;                    // (C*K) x emb_dim
    Matrix cos_full;                 // B x (C*K)
    std::vector<std::size_t> argmax_k;  // B*C, winning subcenter per (sample, class)
    Matrix cos_pooled;               // B x C, max over subcenters
    std::vector<std::uint8_t> easy_branch;  // per sample, margin branch taken
    std::vector<std::uint8_t> clamped;      // per sample, target cosine hit the clamp
    Matrix logits;                   // B x C, scaled
    Matrix probs;                    // B x C, softmax
};

struct ArcFaceResult {
    double loss = 0.0;
    Matrix logits;  // B x C
};

// Row-normalizes the embedding and the subcenter rows, pools cosines over
// subcenters by max, applies the additive angular margin to the target class
// (falling back to cos(theta) - m*sin(m) past the monotonicity threshold),
// scales by s and takes mean softmax cross-entropy.
ArcFaceResult arcface_forward(const Matrix& embedding, const std::vector<std::size_t>& labels,
                              const ArcFaceParams& af, ArcCache* cache = nullptr);

struct Gradients {
    Matrix adapter_w;
    Matrix adapter_b;
    Matrix bn_gamma;
    Matrix bn_beta;
    Matrix fc_w;
    Matrix fc_b;
    Matrix arc_w;
};

// Exact gradients of the recorded forward pass. loss_scale multiplies the
// upstream signal (1 = the loss as computed).
Gradients model_backward(const HeadCache& hcache, const ArcCache& acache,
                         const HeadParams& params, const ArcFaceParams& af,
                         double loss_scale = 1.0);

// Eval-mode head forward followed by row L2 normalization.
Matrix embed(const Matrix& x, const MetricModel& model);

void save_checkpoint(const MetricModel& model, const std::string& path);
MetricModel load_checkpoint(const std::string& path);

}  // namespace embedkit
