#pragma once

// Volumetric 1-shot inference: the C-section support/query protocol,
// connected-component confidence selection and test-time training.

#include <filesystem>
#include <string>
#include <vector>

#include "protoseg/data_pipeline.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/similarity.hpp"
#include "protoseg/training.hpp"

namespace protoseg::infer {

namespace fs = std::filesystem;

struct ConnectedComponent {
    std::vector<int> pixels;  // linear indices, raster order
    int label = 0;            // discovery order (raster order of the first pixel)
    Real confidence = 0;

    int size() const { return static_cast<int>(pixels.size()); }
};

/// Components of the nonzero pixels, largest first (ties by label).
std::vector<ConnectedComponent> connected_components(const Mask& mask, int connectivity = 8);
/// 3D variant over a [z][y][x] volume; connectivity 6, 18 or 26.
std::vector<ConnectedComponent> connected_components_3d(const Volume<std::uint8_t>& mask, int connectivity = 26);

/// Mean foreground probability over the component's pixels.
Real component_confidence(const ConnectedComponent& comp, const std::vector<Real>& fg_probs);
inline Real component_confidence(const ConnectedComponent& comp, const Image& fg_probs)
{
    return component_confidence(comp, fg_probs.values());
}

/// Keeps the most confident component (ties: larger, then lower label).
/// Fills in each component's confidence.
Mask select_most_confident(std::vector<ConnectedComponent>& comps, const Image& fg_probs);
Volume<std::uint8_t> select_most_confident(std::vector<ConnectedComponent>& comps,
                                           const Volume<Real>& fg_probs);

Mask apply_cca(const Mask& mask, const Image& fg_probs, int connectivity = 8);

// ------------------------------------------------------------------ protocol

struct Section {
    int begin = 0;  // offset within the range
    int size = 0;
};

/// Splits n items into min(parts, n) contiguous sections whose sizes differ by
/// at most one, larger sections first.
std::vector<Section> balanced_partition(int n, int parts);

struct SectionPlan {
    int query_begin = 0;  // absolute slice indices, end exclusive
    int query_end = 0;
    int support_z = 0;
};

/// Pairs query sections with the middle slice of the matching support section.
/// Ranges are [begin, end) of class-bearing slices.
std::vector<SectionPlan> plan_sections(int query_begin, int query_end, int support_begin, int support_end,
                                       int sections);

struct InferenceConfig {
    int sections = 3;
    bool cca = true;
    int connectivity = 8;
    bool cca_3d = false;
    Shape2 resolution{256, 256};  // slices are resized to this before encoding
    proto::PoolingWindow window;
    Real threshold = 0.95;
    bool triplets = false;        // feed slice triplets (stack3/slice adapter models)
};

struct VolumePrediction {
    Volume<std::uint8_t> mask;   // final prediction at native resolution
    Volume<std::uint8_t> raw;    // argmax before CCA
    Volume<Real> foreground;     // foreground probability
    std::vector<int> slices;     // slices that were segmented
    std::vector<SectionPlan> plan;
};

/// Segments `class_name` in the query scan using 1-shot support slices from a
/// different patient. Slices outside the query's class range stay empty.
VolumePrediction segment_volume(const data::VolumeScan& query, const data::VolumeScan& support,
                                const std::string& class_name, const model::ModelState& state,
                                const InferenceConfig& cfg);

/// One slice, one support pair, at the input's resolution.
sim::SegmentationResult segment_slice(const data::EncoderInput& query, const data::EncoderInput& support_image,
                                      const Mask& support_mask, const model::ModelState& state,
                                      proto::PoolingWindow window, Real threshold);

// ----------------------------------------------------------- test-time training

struct TTTConfig {
    int iterations = 100;  // passes over the test slices; 0 disables
    Real lr = 1e-4;
    data::AugmentationSpec aug;
    bool refresh_labels = true;   // re-segment the test scans with the adapted model
    bool post_cca_labels = true;  // pseudo-labels from the CCA output rather than the raw argmax
    std::uint64_t seed = 0;
};

struct TttSlice {
    data::EncoderInput image;  // at the inference resolution
    Mask prediction;           // saved (post-CCA) prediction, same resolution
    std::string source;
    int z_index = 0;
};

struct TttReport {
    int episodes = 0;
    int skipped_empty = 0;
    std::vector<train::LossReport> losses;
};

/// Fine-tunes on augmented (slice, saved prediction) pairs. Each pass visits
/// every non-empty slice once in a seeded order. Throws if `pool` is empty
/// (no initial inference pass).
model::ModelState test_time_train(const model::ModelState& state, const std::vector<TttSlice>& pool,
                                  const TTTConfig& ttt, const train::TrainConfig& base, TttReport* report = nullptr);

/// Builds the TTT pool from a finished inference pass.
std::vector<TttSlice> ttt_pool_from(const data::VolumeScan& query, const VolumePrediction& pred,
                                    const InferenceConfig& cfg);

/// Per-slice predicted masks keyed by (scan, z).
class LabelStore {
public:
    explicit LabelStore(fs::path dir);

    fs::path path_for(const std::string& scan, int z) const;
    bool contains(const std::string& scan, int z) const;
    void save(const std::string& scan, int z, const Mask& mask) const;
    Mask load(const std::string& scan, int z) const;
    const fs::path& directory() const { return dir_; }

private:
    fs::path dir_;
};

}  // namespace protoseg::infer
