#pragma once

// Adam optimization with two learning-rate groups: the adapter stands in for
// the backbone and gets its own (tiny or zero) rate, everything else is the
// head group. Freezing is expressed as lr = 0, so gradients keep flowing and
// stay checkable. The schedule is two-phase: head-only epochs first, then
// joint epochs with the backbone rate enabled.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "embedkit/datastore.hpp"
#include "embedkit/metric_model.hpp"
#include "embedkit/numkit.hpp"

namespace embedkit {

enum class ParamGroup { backbone, head };

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs_head_only = 5;
    std::size_t epochs_joint = 4;
    double lr_head = 1e-4;
    double lr_backbone = 1e-7;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    bool shuffle = true;
    ModelConfig model;
};

struct NamedParam {
    std::string name;
    Matrix* value = nullptr;
    ParamGroup group = ParamGroup::head;
};

// Every trainable tensor exactly once, in a pinned order. The adapter pair is
// the backbone group; BN affines, FC and the subcenter weights are the head.
std::vector<NamedParam> trainable_params(MetricModel& model);
std::vector<const Matrix*> gradient_ptrs(const Gradients& grads, const MetricModel& model);

// Verifies the group assignment is total and non-overlapping.
void audit_param_groups(MetricModel& model);

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::uint64_t t = 0;
};

AdamState make_adam_state(MetricModel& model);

// One bias-corrected Adam step; each tensor uses its group's learning rate.
// Rejects non-finite gradients, naming the offending tensor.
void adam_step(std::vector<NamedParam>& params, const std::vector<const Matrix*>& grads,
               AdamState& state, const std::map<ParamGroup, double>& group_lrs,
               const TrainConfig& cfg);

struct EpochStat {
    std::size_t epoch = 0;  // 1-based, continuous across phases
    int phase = 1;
    double mean_loss = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochStat> epochs;
};

struct TrainResult {
    MetricModel model;
    TrainReport report;
};

// Phase 1: epochs_head_only epochs with the backbone rate pinned to 0.
// Phase 2: epochs_joint epochs with {backbone: lr_backbone, head: lr_head}.
// Batches come from a seeded shuffle per epoch; a final batch smaller than 2
// is dropped. The margin schedule is computed once from the train-split class
// counts before phase 1. Fully deterministic for a fixed (seed, data, config).
TrainResult train(const FeatureBank& bank, const DatasetManifest& manifest, const Split& split,
                  const TrainConfig& cfg);

// `epoch,phase,mean_loss,seconds` lines, one per epoch.
void write_train_log(const TrainReport& report, const std::string& path);

struct GradCheckEntry {
    std::string tensor;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> tensors;
    double worst() const;
};

// Central finite differences against the analytic gradients on n_coords
// randomly sampled coordinates per tensor, with the dropout mask frozen.
// Relative error uses |a - n| / max(|a| + |n|, 1e-4): coordinates whose true
// gradient vanishes are held to 1e-8 absolute agreement instead.
GradCheckReport grad_check(MetricModel& model, const Matrix& batch,
                           const std::vector<std::size_t>& labels, double epsilon = 1e-5,
                           std::size_t n_coords = 20, std::uint64_t seed = 0);

}  // namespace embedkit
