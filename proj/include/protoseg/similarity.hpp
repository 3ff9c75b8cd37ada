#pragma once

// Cosine-similarity matching of query features against prototypes, per-class
// fusion and the softmax over classes.

#include <vector>

#include "protoseg/autodiff.hpp"
#include "protoseg/prototype.hpp"

namespace protoseg::sim {

inline constexpr Real kSimilarityScale = 20;
inline constexpr Real kCosineEps = 1e-8;

/// 20 * cos(p_l, f(h,w)) for every prototype row -> [P,H,W].
ad::Var local_similarity_maps(const ad::Var& prototypes, const ad::Var& query_features);

/// sum_l S_l * softmax_l(S_l) per pixel -> [H,W]. Softmax runs over the
/// prototypes of one class.
ad::Var fuse_similarities(const ad::Var& maps);

/// Softmax over stacked class similarities [J,H,W].
ad::Var class_probabilities(const std::vector<ad::Var>& class_similarities);

struct SegmentationResult {
    Tensor probabilities;  // [J,H,W] at `resolution`
    LabelMap prediction;   // per-pixel argmax (ties -> lower class index)
    Shape2 resolution;

    Image class_probability(int j) const;
};

/// Softmax over classes, bilinear upsampling to `output` and argmax.
SegmentationResult predict_probabilities(const std::vector<ad::Var>& class_similarities, Shape2 output);

/// Full matching head on one query. Keeps the graph for training.
struct QueryPrediction {
    ad::Var fused;       // [J,h,w] class similarities on the feature grid
    ad::Var grid_probs;  // [J,h,w]
    ad::Var probs;       // [J,H,W] upsampled to the output resolution
};

QueryPrediction segment_query(const proto::PrototypeSet& prototypes, const ad::Var& query_features,
                              Shape2 output);

SegmentationResult to_result(const ad::Var& probs);

LabelMap argmax_classes(const Tensor& maps);

}  // namespace protoseg::sim
