#pragma once

// Episodic training: segmentation loss on the query, prototype alignment
// loss with support/query roles swapped, SGD or Adam updates.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoseg/data_pipeline.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/prototype.hpp"
#include "protoseg/similarity.hpp"

namespace protoseg::train {

namespace fs = std::filesystem;

inline constexpr Real kLogEps = 1e-8;

struct OptimizerSpec {
    std::string kind = "sgd";  // sgd | adam
    Real lr = 1e-3;
    Real momentum = 0.9;
    Real weight_decay = 5e-4;
    int decay_every = 1000;    // steps between lr decays
    Real decay_rate = 0.95;
    Real beta2 = 0.999;        // adam only; beta1 is `momentum`
    Real adam_eps = 1e-8;

    Real lr_at(std::int64_t step) const;
};

struct TrainConfig {
    int episodes = 1000;
    OptimizerSpec optimizer;
    Real lambda_reg = 1;
    bool alignment = true;
    std::optional<Real> grad_clip;
    std::uint64_t seed = 0;
    int checkpoint_every = 100;
    proto::PoolingWindow window;
    Real threshold = 0.95;
    data::AugmentationSpec augmentation;
    data::EpisodeSampling sampling;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LossReport {
    Real seg_loss = 0;
    Real reg_loss = 0;
    Real total = 0;
    std::int64_t episode_id = 0;
    bool alignment_skipped = false;
    double wall_time = 0;
};

/// Thrown when an episode produces a non-finite loss or gradient. The model
/// state is left untouched.
class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(std::int64_t episode, const std::string& what)
        : std::runtime_error("episode " + std::to_string(episode) + ": " + what), episode_id(episode)
    {
    }
    std::int64_t episode_id;
};

/// One-hot [2,H,W] target (background, foreground) for a binary mask.
Tensor one_hot(const Mask& mask);

/// Mean pixel cross-entropy of [2,H,W] probabilities against a binary mask.
ad::Var segmentation_loss(const ad::Var& probs, const Mask& target);
Real segmentation_loss(const sim::SegmentationResult& pred, const Mask& target);

struct AlignmentResult {
    ad::Var loss;  // scalar; zero constant when skipped
    bool skipped = false;
    std::string reason;
};

/// Re-extracts prototypes from the query with its own (detached) prediction,
/// segments the support with them and scores against the original label.
AlignmentResult alignment_loss(const ad::Var& query_probs, const ad::Var& query_features,
                               const ad::Var& support_features, const Mask& support_label,
                               proto::PoolingWindow window, Real threshold);

struct SupportView {
    ad::Var features;
    Mask mask;  // at the support's input resolution
};

struct EpisodeForward {
    sim::QueryPrediction query;
    ad::Var seg;
    ad::Var reg;
    ad::Var total;
    bool alignment_skipped = false;
    std::string skip_reason;
};

/// Loss graph for a 1-way episode given encoded features.
EpisodeForward episode_forward(const std::vector<SupportView>& support, const ad::Var& query_features,
                               Shape2 query_shape, const Mask& query_label, const TrainConfig& cfg);

/// One optimizer step. On NonFiniteLoss the state is unchanged.
LossReport train_episode(model::ModelState& state, const data::Episode& episode, const TrainConfig& cfg);

/// Applies one update with the gradients currently held by the parameters.
void optimizer_step(model::ModelState& state, const OptimizerSpec& opt, std::optional<Real> grad_clip);

struct TrainingRun {
    std::vector<fs::path> checkpoints;
    fs::path final_checkpoint;
    std::vector<LossReport> reports;  // episodes run in this call
    std::int64_t resumed_from = -1;
};

struct TrainingOptions {
    bool resume = false;
    nlohmann::json run_config = nlohmann::json::object();
    std::function<void(const LossReport&)> on_episode;
    std::function<void(const std::string&)> log;
};

/// Loops sample_training_episode + train_episode until state.step reaches
/// cfg.episodes. Writes <out>/metrics.csv, <out>/checkpoints/step-N (the
/// last one tagged by checkpoints/FINAL) and <out>/training_slices.json.
TrainingRun run_training(const std::vector<data::SliceSample>& pool,
                         const std::vector<data::SuperpixelMap>& superpixels, model::ModelState& state,
                         const TrainConfig& cfg, const fs::path& out, const TrainingOptions& options = {});

/// (patient, z) pairs recorded by run_training.
std::vector<std::pair<std::string, int>> read_training_slices(const fs::path& out);

/// Checkpoint directory tagged FINAL by a completed run.
fs::path final_checkpoint(const fs::path& out);

/// Latest step-N checkpoint below <out>/checkpoints, if any.
std::optional<fs::path> latest_checkpoint(const fs::path& out);

}  // namespace protoseg::train
