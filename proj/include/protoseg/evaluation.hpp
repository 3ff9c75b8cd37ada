#pragma once

// Dice scoring, the organ-group/fold experiment loop and result reports.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "protoseg/data_pipeline.hpp"
#include "protoseg/inference.hpp"

namespace protoseg::eval {

namespace fs = std::filesystem;

/// 2|A n B| / (|A| + |B|); 1.0 when both are empty.
Real dice_score(const Volume<std::uint8_t>& pred, const Volume<std::uint8_t>& gt);
Real dice_score(const Mask& pred, const Mask& gt);

enum class Variant { base, cca, ttt, slice_adapter };
Variant parse_variant(const std::string& s);
std::string to_string(Variant v);

struct ExperimentSpec {
    std::string dataset = "SYNTH";
    std::vector<std::vector<std::string>> organ_groups{{"Spleen", "Liver"}, {"LK", "RK"}};
    int n_way = 1;
    int k_shot = 1;
    std::vector<Variant> variants{Variant::base, Variant::cca};
    std::vector<std::uint64_t> seeds{0};

    void validate() const;
};

/// Anything that turns (query, support, class) into a volumetric mask.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    /// Called once per (test class, pairing seed) with every (query, support)
    /// pair before segment(); adaptive variants use it to fine-tune.
    virtual void prepare(const std::string& class_name, std::uint64_t seed,
                         const std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>>& pairs)
    {
        (void)class_name;
        (void)seed;
        (void)pairs;
    }
    virtual Volume<std::uint8_t> segment(const data::VolumeScan& query, const data::VolumeScan& support,
                                         const std::string& class_name) = 0;
};

/// Prototype-network segmenter; TTT config optional.
class ModelSegmenter : public Segmenter {
public:
    ModelSegmenter(model::ModelState state, infer::InferenceConfig cfg);
    ModelSegmenter(model::ModelState state, infer::InferenceConfig cfg, infer::TTTConfig ttt,
                   train::TrainConfig train);

    void prepare(const std::string& class_name, std::uint64_t seed,
                 const std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>>& pairs) override;
    Volume<std::uint8_t> segment(const data::VolumeScan& query, const data::VolumeScan& support,
                                 const std::string& class_name) override;

    const model::ModelState& active_state() const { return adapted_ ? *adapted_ : state_; }
    const infer::TttReport& last_ttt() const { return ttt_report_; }

private:
    model::ModelState state_;
    infer::InferenceConfig cfg_;
    std::optional<infer::TTTConfig> ttt_;
    train::TrainConfig train_;
    std::optional<model::ModelState> adapted_;
    infer::TttReport ttt_report_;
};

struct FoldArtifacts {
    std::string name;
    std::vector<std::string> test_classes;
    std::map<Variant, std::shared_ptr<Segmenter>> segmenters;
    std::vector<std::pair<std::string, int>> training_slices;  // (patient, z) audit log
};

struct ScanResult {
    std::string variant;
    std::string fold;
    std::string class_name;
    std::string scan_id;
    std::string support_id;
    std::uint64_t seed = 0;
    Real dice = 0;  // percent
};

struct SummaryRow {
    std::string variant;
    std::string class_name;
    Real mean = 0;  // percent
    Real std = 0;
    int n_scans = 0;
};

struct MetricsTable {
    std::vector<ScanResult> per_scan;
    std::vector<SummaryRow> summary;

    /// Rebuilds summary rows from per_scan (variants and classes in first-seen order).
    void summarize();
    Real mean_of(const std::string& variant, const std::string& class_name) const;
    /// Mean over classes of the per-class means.
    Real overall_mean(const std::string& variant) const;
};

/// Throws std::runtime_error if any training slice contains a test class.
void audit_setting2(const std::vector<data::VolumeScan>& scans, const std::vector<std::string>& test_classes,
                    const std::vector<std::pair<std::string, int>>& training_slices);

/// Support patient for each query: a seeded pick among the other scans
/// containing the class.
std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>> pair_scans(
    const std::vector<data::VolumeScan>& scans, const std::string& class_name, std::uint64_t seed);

MetricsTable run_experiment(const ExperimentSpec& spec, const std::vector<data::VolumeScan>& scans,
                            const std::vector<FoldArtifacts>& folds);

/// Writes results.csv, summary.csv, table.txt and chart.svg into `out`.
std::vector<fs::path> report(const MetricsTable& table, const fs::path& out, bool chart = true);

}  // namespace protoseg::eval
