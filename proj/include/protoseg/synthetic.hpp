#pragma once

// Synthetic abdominal-ish volumes: a body ellipse with Gaussian-smoothed
// ellipsoid "organs" of distinct intensity, plus optional unlabeled
// distractor blobs.

#include <filesystem>
#include <string>
#include <vector>

#include "protoseg/data_pipeline.hpp"

namespace protoseg::synth {

namespace fs = std::filesystem;

struct Ellipsoid {
    Real cy = 0.5, cx = 0.5, cz = 0.5;  // fractions of height/width/depth
    Real ry = 0.1, rx = 0.1, rz = 0.25;
    Real intensity = 1;
};

struct OrganSpec {
    std::string name;
    int label = 0;
    Ellipsoid shape;
};

struct SynthSpec {
    int patients = 6;
    int height = 64;
    int width = 64;
    int depth = 24;
    Real body_intensity = 0.4;
    Real noise_std = 0.03;
    Real smooth_sigma = 1.0;       // in-plane blur of the intensity image, pixels
    Real position_jitter = 0.03;   // fraction of the extent
    Real radius_jitter = 0.1;      // relative
    bool distractor = false;
    Ellipsoid distractor_shape{0.72, 0.22, 0.5, 0.055, 0.055, 0.2, 0.15};
    std::vector<OrganSpec> organs = default_organs();
    std::uint64_t seed = 0;

    static std::vector<OrganSpec> default_organs();
    void validate() const;
};

/// Patient ids are "synth_00", "synth_01", ...
std::vector<data::VolumeScan> generate(const SynthSpec& spec);

/// Writes image/label NIfTI pairs plus manifest.json into `dir`; returns the
/// manifest path.
fs::path write_dataset(const SynthSpec& spec, const fs::path& dir);

data::ClassCatalog catalog(const SynthSpec& spec);

}  // namespace protoseg::synth
