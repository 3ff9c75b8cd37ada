#include "protoseg/similarity.hpp"

#include <stdexcept>

namespace protoseg::sim {

ad::Var local_similarity_maps(const ad::Var& prototypes, const ad::Var& query_features)
{
    return ad::cosine_maps(prototypes, query_features, kSimilarityScale, kCosineEps);
}

ad::Var fuse_similarities(const ad::Var& maps)
{
    if (!maps.defined() || maps.value().rank() != 3 || maps.dim(0) == 0) {
        throw std::invalid_argument("fuse_similarities: need at least one [H,W] map");
    }
    const int h = maps.dim(1), w = maps.dim(2);
    if (maps.dim(0) == 1) return ad::reshape(maps, {h, w});
    return ad::sum_leading(ad::mul(ad::softmax_leading(maps), maps));
}

ad::Var class_probabilities(const std::vector<ad::Var>& class_similarities)
{
    if (class_similarities.size() < 2) {
        throw std::invalid_argument("class_probabilities: need background and at least one class");
    }
    for (const auto& s : class_similarities) {
        if (!s.value().same_shape(class_similarities[0].value())) {
            throw std::invalid_argument("class_probabilities: class maps have different shapes " +
                                        s.value().shape_str() + " vs " +
                                        class_similarities[0].value().shape_str());
        }
    }
    return ad::softmax_leading(ad::stack(class_similarities));
}

Image SegmentationResult::class_probability(int j) const
{
    Image out(resolution.height, resolution.width);
    const std::size_t n = out.size();
    std::copy(probabilities.data() + j * n, probabilities.data() + (j + 1) * n, out.values().begin());
    return out;
}

LabelMap argmax_classes(const Tensor& maps)
{
    const int j = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    LabelMap out(h, w, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < j; ++c) {
            if (maps[c * n + i] > maps[best * n + i]) best = c;
        }
        out[i] = best;
    }
    return out;
}

SegmentationResult to_result(const ad::Var& probs)
{
    SegmentationResult r;
    r.probabilities = probs.value();
    r.resolution = {probs.dim(1), probs.dim(2)};
    r.prediction = argmax_classes(r.probabilities);
    return r;
}

SegmentationResult predict_probabilities(const std::vector<ad::Var>& class_similarities, Shape2 output)
{
    const ad::Var p = class_probabilities(class_similarities);
    return to_result(ad::resize_bilinear(p, output.height, output.width));
}

QueryPrediction segment_query(const proto::PrototypeSet& prototypes, const ad::Var& query_features,
                              Shape2 output)
{
    std::vector<ad::Var> fused;
    fused.reserve(prototypes.classes.size());
    for (const auto& c : prototypes.classes) {
        fused.push_back(fuse_similarities(local_similarity_maps(c.vectors, query_features)));
    }
    QueryPrediction out;
    out.fused = ad::stack(fused);
    out.grid_probs = ad::softmax_leading(out.fused);
    out.probs = ad::resize_bilinear(out.grid_probs, output.height, output.width);
    return out;
}

}  // namespace protoseg::sim
