#pragma once

// Run configuration and the pipeline commands behind tools/protoseg.
//
// Layout under RunConfig::out:
//   synth/                      generated dataset + manifest.json
//   preprocess/                 preprocess.json (cache key, hit counts)
//   train/<fold>[-<variant>]/   run_training output
//   infer/<fold>/<variant>/seed<k>/<class>/<scan>.nii.gz
//   ttt/<fold>/seed<k>/<class>/ adapted model + predictions
//   eval/                       results.csv, summary.csv, table.txt, chart.svg
// Each stage directory carries run.json (config snapshot, digest, version).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoseg/evaluation.hpp"
#include "protoseg/synthetic.hpp"

namespace protoseg::cli {

namespace fs = std::filesystem;

std::string version_stamp();

struct DatasetConfig {
    fs::path manifest;       // empty with synthetic=true: <out>/synth/manifest.json
    bool synthetic = false;
    synth::SynthSpec synth;
};

struct EvalConfig {
    std::vector<std::vector<std::string>> organ_groups{{"Spleen", "Liver"}, {"LK", "RK"}};
    std::vector<eval::Variant> variants{eval::Variant::base, eval::Variant::cca};
    std::vector<std::uint64_t> seeds;  // pairing seeds; empty: {root seed}
};

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    data::FelzenszwalbParams superpixels;
    model::EncoderConfig encoder;
    train::TrainConfig train;
    infer::InferenceConfig inference;
    infer::TTTConfig ttt;
    EvalConfig evaluation;
    fs::path out = "runs/default";
    fs::path cache;  // empty: <out>/cache; PROTOSEG_CACHE wins over both

    /// Pushes the root seed into every component seed and aligns resolutions.
    void resolve();
    void validate() const;
    nlohmann::json to_json() const;
    std::string digest() const;
};

/// Unknown keys are rejected so typos do not silently fall back to defaults.
RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {});
RunConfig load_run_config(const fs::path& path);

struct Fold {
    std::string name;  // "fold0", "fold1", ...
    std::vector<std::string> test_classes;
};

std::vector<Fold> folds(const RunConfig& cfg);
/// All folds, or the one called `name` (error lists the valid names).
std::vector<Fold> select_folds(const RunConfig& cfg, const std::string& name);

fs::path cache_root(const RunConfig& cfg);
fs::path manifest_path(const RunConfig& cfg);

/// Writes <dir>/run.json. If one exists with a different config digest this
/// throws unless `force`, in which case the directory is cleared first.
/// Returns true when an existing snapshot matched (a rerun of the same config).
bool claim_output(const fs::path& dir, const RunConfig& cfg, bool force);

struct CommandOptions {
    std::string fold;                    // empty: every fold
    std::optional<eval::Variant> variant;
    bool force = false;
    std::optional<int> episodes;         // train only
    std::ostream* log = nullptr;
};

struct PreprocessResult {
    int slices = 0;
    int computed = 0;
    int cache_hits = 0;
    fs::path cache_dir;
};

fs::path cmd_synth(const RunConfig& cfg, const CommandOptions& opt);
PreprocessResult cmd_preprocess(const RunConfig& cfg, const CommandOptions& opt);
std::vector<train::TrainingRun> cmd_train(const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_infer(const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_ttt(const RunConfig& cfg, const CommandOptions& opt);
eval::MetricsTable cmd_eval(const RunConfig& cfg, const CommandOptions& opt);

/// Same layout conventions the commands use.
fs::path train_dir(const RunConfig& cfg, const Fold& fold, eval::Variant variant);
fs::path prediction_path(const RunConfig& cfg, const Fold& fold, eval::Variant variant, std::uint64_t seed,
                         const std::string& class_name, const std::string& scan_id);

}  // namespace protoseg::cli
