#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "protoseg/random.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg::data {

namespace fs = std::filesystem;

enum class Modality { ct, mri, synth };

Modality parse_modality(const std::string& s);
std::string to_string(Modality m);

struct ClassInfo {
    int label_value = 0;
    std::string name;
};

using ClassCatalog = std::vector<ClassInfo>;

/// Intensity windows applied at load time.
struct NormalizationSpec {
    Real ct_low_hu = -275;
    Real ct_high_hu = 125;
    Real mri_low_percentile = 0.5;
    Real mri_high_percentile = 99.5;
};

struct VolumeScan {
    Volume<Real> voxels;
    std::map<std::string, Volume<std::uint8_t>> masks;  // keyed by class name
    std::string patient_id;
    Modality modality = Modality::synth;

    int height() const { return voxels.height(); }
    int width() const { return voxels.width(); }
    int depth() const { return voxels.depth(); }
    /// Slice indices z where the class mask is non-empty, ascending.
    std::vector<int> slices_with(const std::string& class_name) const;
};

struct SliceSample {
    Image image;
    std::map<std::string, Mask> labels;
    int z_index = 0;
    std::string source;
    // Axial neighbours (edge slices replicate themselves).
    Image previous;
    Image next;
};

/// Three consecutive slices (z-1, z, z+1) for the stacked/adapter input modes.
struct SliceTriplet {
    std::array<Image, 3> slices;
    int center_index = 0;
};

using EncoderInput = std::variant<Image, SliceTriplet>;

const Image& center_image(const EncoderInput& in);
Shape2 input_shape(const EncoderInput& in);
SliceTriplet make_triplet(const SliceSample& s);

struct SuperpixelMap {
    LabelMap segments;
    int num_segments = 0;

    std::vector<int> region_sizes() const;
    Mask region(int id) const;
};

struct FelzenszwalbParams {
    Real scale = 100;
    Real sigma = 0.8;
    int min_size = 400;
};

struct Range {
    Real lo = 0;
    Real hi = 0;
};

struct AffineSpec {
    Range rotation_deg{-5, 5};
    Range scale{0.9, 1.2};
    Range shear_deg{-5, 5};
    Range translate{-0.02, 0.02};  // fraction of width/height
};

struct ElasticSpec {
    bool enabled = true;
    Real magnitude = 10;  // pixels before smoothing normalisation
    Real sigma = 5;
};

struct IntensitySpec {
    Range gamma{0.5, 1.5};
    Real noise_std = 0.01;
    Range brightness{0, 0};
    Range contrast{1, 1};
};

struct AugmentationSpec {
    AffineSpec affine;
    ElasticSpec elastic;
    IntensitySpec intensity;
    std::uint64_t seed = 0;

    /// No geometric or intensity change.
    static AugmentationSpec identity();
    /// Throws std::invalid_argument on non-finite or inverted ranges.
    void validate() const;
};

/// Output-to-input sampling map for a geometric augmentation.
struct GeometricTransform {
    // input = center + inverse * (output - center - translation)
    std::array<Real, 4> inverse{1, 0, 0, 1};
    std::array<Real, 2> translation{0, 0};
    Image displacement_x;  // optional elastic field, empty when disabled
    Image displacement_y;
    bool identity = true;
};

struct IntensityTransform {
    Real gamma = 1;
    Real contrast = 1;
    Real brightness = 0;
    Real noise_std = 0;
    std::uint64_t noise_seed = 0;
    bool identity = true;
};

GeometricTransform sample_geometric(const AugmentationSpec& spec, Shape2 shape, Rng& rng);
IntensityTransform sample_intensity(const AugmentationSpec& spec, Rng& rng);
Image warp_image(const Image& image, const GeometricTransform& t);
Mask warp_mask(const Mask& mask, const GeometricTransform& t);
Image apply_intensity(const Image& image, const IntensityTransform& t);

struct SupportExample {
    EncoderInput image;
    Mask mask;
};

struct Episode {
    std::vector<SupportExample> support;
    EncoderInput query_image;
    std::optional<Mask> query_label;
    int n_way = 1;
    int k_shot = 1;
    int class_id = 1;
    std::string source;
    int z_index = -1;
    int superpixel_id = -1;
};

struct EpisodeSampling {
    bool triplets = false;  // emit SliceTriplet inputs for 3-slice encoders
    int max_resample = 50;
    int min_pseudo_label_pixels = 1;
};

// ---------------------------------------------------------------- operations

void normalize_intensity(Volume<Real>& voxels, Modality modality, const NormalizationSpec& spec);

/// Builds a scan from raw voxels and an integer label volume.
VolumeScan make_scan(Volume<Real> voxels, const Volume<Real>& labels, const ClassCatalog& catalog,
                     Modality modality, std::string patient_id,
                     const NormalizationSpec& norm = {});

VolumeScan load_volume(const fs::path& image_path, const fs::path& label_path,
                       const ClassCatalog& catalog, Modality modality, std::string patient_id,
                       const NormalizationSpec& norm = {});

Image resize_image(const Image& image, Shape2 target);
Mask resize_mask(const Mask& mask, Shape2 target);

std::vector<SliceSample> reformat_and_resize(const VolumeScan& scan, Shape2 target);

SuperpixelMap generate_superpixels(const Image& image, const FelzenszwalbParams& params);

Episode sample_training_episode(const std::vector<SliceSample>& pool,
                                const std::vector<SuperpixelMap>& superpixels,
                                const AugmentationSpec& aug, Rng& rng,
                                const EpisodeSampling& options = {});

std::vector<SliceSample> filter_setting2(const std::vector<SliceSample>& pool,
                                         const std::vector<std::string>& test_classes);

/// Resized slices of every scan, minus any slice whose native-resolution mask
/// contains a test class (resizing can erase small structures, so the check
/// never looks at the resized labels).
std::vector<SliceSample> build_training_pool(const std::vector<VolumeScan>& scans,
                                             const std::vector<std::string>& test_classes, Shape2 resolution);

// ----------------------------------------------------------------- manifests

struct ManifestEntry {
    std::string patient_id;
    fs::path image;
    fs::path label;
    std::string split = "train";
};

struct Manifest {
    std::string dataset;
    Modality modality = Modality::synth;
    ClassCatalog classes;
    std::vector<ManifestEntry> scans;
    fs::path source;
};

/// Parses a JSON manifest; relative paths resolve against its directory.
/// Errors name the file and the offending entry.
Manifest read_manifest(const fs::path& path, bool check_files = true);
void write_manifest(const fs::path& path, const Manifest& manifest);

// ------------------------------------------------------------ superpixel cache

/// One .npy per slice under <root>/<key>/. Writers go through a temp file
/// plus rename so concurrent readers only ever see complete files.
class SuperpixelCache {
public:
    SuperpixelCache(fs::path root, std::string key);

    fs::path path_for(const std::string& source, int z) const;
    bool contains(const std::string& source, int z) const;
    SuperpixelMap load(const std::string& source, int z) const;
    void store(const std::string& source, int z, const SuperpixelMap& map) const;
    const fs::path& directory() const { return dir_; }

private:
    fs::path dir_;
};

std::string superpixel_cache_key(const std::string& dataset_digest, const FelzenszwalbParams& p,
                                 Shape2 resolution);

struct SuperpixelStats {
    int computed = 0;
    int cache_hits = 0;
};

/// One map per pool slice. With a cache, hits are loaded and misses computed
/// then stored.
std::vector<SuperpixelMap> prepare_superpixels(const std::vector<SliceSample>& pool, const FelzenszwalbParams& params,
                                               const SuperpixelCache* cache = nullptr,
                                               SuperpixelStats* stats = nullptr);

/// Loads every scan in the manifest (all splits unless `split` is given).
std::vector<VolumeScan> load_dataset(const Manifest& manifest, const std::string& split = {},
                                     const NormalizationSpec& norm = {});

/// Content digest over the manifest's image and label bytes.
std::string dataset_digest(const Manifest& manifest);

}  // namespace protoseg::data
