#include "protoseg/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "protoseg/io.hpp"
#include "protoseg/kernels.hpp"

namespace protoseg::data {

Modality parse_modality(const std::string& s)
{
    if (s == "CT" || s == "ct") return Modality::ct;
    if (s == "MRI" || s == "mri") return Modality::mri;
    if (s == "SYNTH" || s == "synth") return Modality::synth;
    throw std::invalid_argument("unknown modality '" + s + "' (expected CT, MRI or SYNTH)");
}

std::string to_string(Modality m)
{
    switch (m) {
    case Modality::ct: return "CT";
    case Modality::mri: return "MRI";
    case Modality::synth: return "SYNTH";
    }
    return "?";
}

std::vector<int> VolumeScan::slices_with(const std::string& class_name) const
{
    const auto it = masks.find(class_name);
    if (it == masks.end()) return {};
    const auto& m = it->second;
    std::vector<int> out;
    const std::size_t plane = static_cast<std::size_t>(m.height()) * m.width();
    for (int z = 0; z < m.depth(); ++z) {
        const auto* p = m.values().data() + z * plane;
        if (std::any_of(p, p + plane, [](std::uint8_t v) { return v != 0; })) out.push_back(z);
    }
    return out;
}

const Image& center_image(const EncoderInput& in)
{
    if (const auto* img = std::get_if<Image>(&in)) return *img;
    return std::get<SliceTriplet>(in).slices[1];
}

Shape2 input_shape(const EncoderInput& in) { return center_image(in).shape(); }

SliceTriplet make_triplet(const SliceSample& s)
{
    SliceTriplet t;
    t.slices = {s.previous.empty() ? s.image : s.previous, s.image,
                s.next.empty() ? s.image : s.next};
    t.center_index = s.z_index;
    return t;
}

// -------------------------------------------------------------- normalization

namespace {

Real percentile(std::vector<Real> values, Real pct)
{
    if (values.empty()) return 0;
    std::sort(values.begin(), values.end());
    const Real pos = pct / 100.0 * static_cast<Real>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const Real frac = pos - static_cast<Real>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

void clip_minmax(std::vector<Real>& v, Real lo, Real hi)
{
    const Real span = hi - lo;
    for (auto& x : v) {
        x = std::clamp(x, lo, hi);
        x = span > 0 ? (x - lo) / span : 0;
    }
}

}  // namespace

void normalize_intensity(Volume<Real>& voxels, Modality modality, const NormalizationSpec& spec)
{
    auto& v = voxels.values();
    if (v.empty()) return;
    switch (modality) {
    case Modality::ct:
        clip_minmax(v, spec.ct_low_hu, spec.ct_high_hu);
        break;
    case Modality::mri: {
        const Real lo = percentile(v, spec.mri_low_percentile);
        const Real hi = percentile(v, spec.mri_high_percentile);
        clip_minmax(v, lo, hi);
        break;
    }
    case Modality::synth: {
        const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
        clip_minmax(v, *mn, *mx);
        break;
    }
    }
}

VolumeScan make_scan(Volume<Real> voxels, const Volume<Real>& labels, const ClassCatalog& catalog,
                     Modality modality, std::string patient_id, const NormalizationSpec& norm)
{
    if (!labels.same_shape(voxels.height(), voxels.width(), voxels.depth())) {
        throw std::invalid_argument("scan " + patient_id + ": label volume shape " +
                                    std::to_string(labels.height()) + "x" + std::to_string(labels.width()) + "x" +
                                    std::to_string(labels.depth()) + " does not match image " +
                                    std::to_string(voxels.height()) + "x" + std::to_string(voxels.width()) + "x" +
                                    std::to_string(voxels.depth()));
    }
    for (Real v : voxels.values()) {
        if (!std::isfinite(v)) throw std::invalid_argument("scan " + patient_id + ": non-finite voxel");
    }
    std::map<int, std::string> by_value;
    for (const auto& c : catalog) {
        if (c.label_value == 0) throw std::invalid_argument("class catalog: label 0 is reserved for background");
        by_value[c.label_value] = c.name;
    }
    VolumeScan scan;
    scan.patient_id = std::move(patient_id);
    scan.modality = modality;
    for (const auto& c : catalog) {
        scan.masks.emplace(c.name, Volume<std::uint8_t>(voxels.height(), voxels.width(), voxels.depth(), 0));
    }
    const auto& lv = labels.values();
    for (std::size_t i = 0; i < lv.size(); ++i) {
        const auto value = static_cast<int>(std::lround(lv[i]));
        if (value == 0) continue;
        const auto it = by_value.find(value);
        if (it == by_value.end()) {
            throw std::invalid_argument("scan " + scan.patient_id + ": unknown class id " +
                                        std::to_string(value) + " in label volume");
        }
        scan.masks[it->second].values()[i] = 1;
    }
    normalize_intensity(voxels, modality, norm);
    scan.voxels = std::move(voxels);
    return scan;
}

VolumeScan load_volume(const fs::path& image_path, const fs::path& label_path,
                       const ClassCatalog& catalog, Modality modality, std::string patient_id,
                       const NormalizationSpec& norm)
{
    auto voxels = io::read_nifti(image_path);
    const auto labels = io::read_nifti(label_path);
    return make_scan(std::move(voxels), labels, catalog, modality, std::move(patient_id), norm);
}

// ------------------------------------------------------------------- resizing

Image resize_image(const Image& image, Shape2 target)
{
    if (target.height <= 0 || target.width <= 0) {
        throw std::invalid_argument("resize_image: non-positive target " + target.str());
    }
    if (image.shape() == target) return image;
    Image out(target.height, target.width);
    kernels::parallel::resize_bilinear(1, image.height(), image.width(), target.height,
                                       target.width, image.values().data(), out.values().data());
    return out;
}

Mask resize_mask(const Mask& mask, Shape2 target)
{
    if (target.height <= 0 || target.width <= 0) {
        throw std::invalid_argument("resize_mask: non-positive target " + target.str());
    }
    if (mask.shape() == target) return mask;
    Mask out(target.height, target.width);
    for (int y = 0; y < target.height; ++y) {
        const int sy = std::min(mask.height() - 1,
                                static_cast<int>((y + 0.5) * mask.height() / target.height));
        for (int x = 0; x < target.width; ++x) {
            const int sx = std::min(mask.width() - 1,
                                    static_cast<int>((x + 0.5) * mask.width() / target.width));
            out(y, x) = mask(sy, sx);
        }
    }
    return out;
}

std::vector<SliceSample> reformat_and_resize(const VolumeScan& scan, Shape2 target)
{
    if (target.height <= 0 || target.width <= 0) {
        throw std::invalid_argument("reformat_and_resize: non-positive target " + target.str());
    }
    std::vector<Image> images;
    images.reserve(scan.depth());
    for (int z = 0; z < scan.depth(); ++z) images.push_back(resize_image(scan.voxels.slice(z), target));
    std::vector<SliceSample> out;
    out.reserve(scan.depth());
    for (int z = 0; z < scan.depth(); ++z) {
        SliceSample s;
        s.image = images[z];
        s.previous = images[std::max(0, z - 1)];
        s.next = images[std::min(scan.depth() - 1, z + 1)];
        s.z_index = z;
        s.source = scan.patient_id;
        for (const auto& [name, m] : scan.masks) s.labels.emplace(name, resize_mask(m.slice(z), target));
        out.push_back(std::move(s));
    }
    return out;
}

// --------------------------------------------------------------- augmentation

AugmentationSpec AugmentationSpec::identity()
{
    AugmentationSpec s;
    s.affine = {{0, 0}, {1, 1}, {0, 0}, {0, 0}};
    s.elastic.enabled = false;
    s.intensity = {{1, 1}, 0, {0, 0}, {1, 1}};
    return s;
}

void AugmentationSpec::validate() const
{
    auto check = [](const Range& r, const char* name) {
        if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || r.lo > r.hi) {
            throw std::invalid_argument(std::string("augmentation range '") + name +
                                        "' must be finite with lo <= hi");
        }
    };
    check(affine.rotation_deg, "rotation_deg");
    check(affine.scale, "scale");
    check(affine.shear_deg, "shear_deg");
    check(affine.translate, "translate");
    check(intensity.gamma, "gamma");
    check(intensity.brightness, "brightness");
    check(intensity.contrast, "contrast");
    if (affine.scale.lo <= 0) throw std::invalid_argument("augmentation scale must be positive");
    if (intensity.gamma.lo <= 0) throw std::invalid_argument("augmentation gamma must be positive");
    if (!std::isfinite(intensity.noise_std) || intensity.noise_std < 0) {
        throw std::invalid_argument("augmentation noise_std must be finite and >= 0");
    }
    if (elastic.enabled && (!(elastic.magnitude >= 0) || !(elastic.sigma > 0))) {
        throw std::invalid_argument("elastic magnitude must be >= 0 and sigma > 0");
    }
}

namespace {

Image smooth_field(Image field, Real sigma)
{
    const int radius = std::max(1, static_cast<int>(3 * sigma + 0.5));
    std::vector<Real> k(2 * radius + 1);
    Real sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    const int h = field.height(), w = field.width();
    Image tmp(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Real s = 0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * field(y, std::clamp(x + i, 0, w - 1));
            tmp(y, x) = s;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Real s = 0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp(std::clamp(y + i, 0, h - 1), x);
            field(y, x) = s;
        }
    }
    return field;
}

// Source coordinate (x, y) for output pixel (ox, oy).
std::pair<Real, Real> source_coord(const GeometricTransform& t, int oy, int ox, Real cy, Real cx)
{
    Real px = ox;
    Real py = oy;
    if (!t.displacement_x.empty()) {
        px += t.displacement_x(oy, ox);
        py += t.displacement_y(oy, ox);
    }
    const Real dx = px - cx - t.translation[0];
    const Real dy = py - cy - t.translation[1];
    return {cx + t.inverse[0] * dx + t.inverse[1] * dy, cy + t.inverse[2] * dx + t.inverse[3] * dy};
}

}  // namespace

GeometricTransform sample_geometric(const AugmentationSpec& spec, Shape2 shape, Rng& rng)
{
    constexpr Real deg = 3.14159265358979323846 / 180.0;
    const auto& a = spec.affine;
    const Real theta = uniform(rng, a.rotation_deg.lo, a.rotation_deg.hi) * deg;
    const Real s = uniform(rng, a.scale.lo, a.scale.hi);
    const Real shear = uniform(rng, a.shear_deg.lo, a.shear_deg.hi) * deg;
    const Real tx = uniform(rng, a.translate.lo, a.translate.hi) * shape.width;
    const Real ty = uniform(rng, a.translate.lo, a.translate.hi) * shape.height;

    // forward = R(theta) * Shear(shear) * s
    const Real c = std::cos(theta), sn = std::sin(theta), sh = std::tan(shear);
    const Real m00 = s * c, m01 = s * (c * sh - sn);
    const Real m10 = s * sn, m11 = s * (sn * sh + c);
    const Real det = m00 * m11 - m01 * m10;
    GeometricTransform t;
    t.inverse = {m11 / det, -m01 / det, -m10 / det, m00 / det};
    t.translation = {tx, ty};
    t.identity = theta == 0 && s == 1 && shear == 0 && tx == 0 && ty == 0;

    if (spec.elastic.enabled && spec.elastic.magnitude > 0) {
        Image fx(shape.height, shape.width), fy(shape.height, shape.width);
        for (auto& v : fx.values()) v = uniform(rng, -1, 1);
        for (auto& v : fy.values()) v = uniform(rng, -1, 1);
        fx = smooth_field(std::move(fx), spec.elastic.sigma);
        fy = smooth_field(std::move(fy), spec.elastic.sigma);
        // Smoothing shrinks the field; rescale so the peak displacement is ~magnitude / sigma.
        Real peak = 1e-12;
        for (std::size_t i = 0; i < fx.size(); ++i) peak = std::max({peak, std::abs(fx[i]), std::abs(fy[i])});
        const Real gain = spec.elastic.magnitude / spec.elastic.sigma / peak;
        for (auto& v : fx.values()) v *= gain;
        for (auto& v : fy.values()) v *= gain;
        t.displacement_x = std::move(fx);
        t.displacement_y = std::move(fy);
        t.identity = false;
    }
    return t;
}

IntensityTransform sample_intensity(const AugmentationSpec& spec, Rng& rng)
{
    const auto& in = spec.intensity;
    IntensityTransform t;
    t.gamma = uniform(rng, in.gamma.lo, in.gamma.hi);
    t.contrast = uniform(rng, in.contrast.lo, in.contrast.hi);
    t.brightness = uniform(rng, in.brightness.lo, in.brightness.hi);
    t.noise_std = in.noise_std;
    t.noise_seed = rng();
    t.identity = t.gamma == 1 && t.contrast == 1 && t.brightness == 0 && t.noise_std == 0;
    return t;
}

Image warp_image(const Image& image, const GeometricTransform& t)
{
    if (t.identity) return image;
    const int h = image.height(), w = image.width();
    const Real cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    Image out(h, w, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto [sx, sy] = source_coord(t, y, x, cy, cx);
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const Real fx = sx - x0, fy = sy - y0;
            auto px = [&](int yy, int xx) -> Real {
                return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? image(yy, xx) : 0;
            };
            out(y, x) = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                        fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
        }
    }
    return out;
}

Mask warp_mask(const Mask& mask, const GeometricTransform& t)
{
    if (t.identity) return mask;
    const int h = mask.height(), w = mask.width();
    const Real cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    Mask out(h, w, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto [sx, sy] = source_coord(t, y, x, cy, cx);
            const int ix = static_cast<int>(std::floor(sx + 0.5));
            const int iy = static_cast<int>(std::floor(sy + 0.5));
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) out(y, x) = mask(iy, ix);
        }
    }
    return out;
}

Image apply_intensity(const Image& image, const IntensityTransform& t)
{
    if (t.identity) return image;
    Image out = image;
    Real mean = 0;
    for (auto& v : out.values()) {
        v = std::pow(std::max<Real>(v, 0), t.gamma);
        mean += v;
    }
    mean /= std::max<std::size_t>(1, out.size());
    Rng noise(t.noise_seed);
    for (auto& v : out.values()) {
        v = (v - mean) * t.contrast + mean + t.brightness;
        if (t.noise_std > 0) v += t.noise_std * normal(noise);
    }
    return out;
}

// ------------------------------------------------------------------- episodes

namespace {

std::size_t count_on(const Mask& m)
{
    return static_cast<std::size_t>(std::count_if(m.values().begin(), m.values().end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

}  // namespace

Episode sample_training_episode(const std::vector<SliceSample>& pool,
                                const std::vector<SuperpixelMap>& superpixels,
                                const AugmentationSpec& aug, Rng& rng,
                                const EpisodeSampling& options)
{
    if (pool.empty()) throw std::invalid_argument("sample_training_episode: empty pool");
    if (superpixels.size() != pool.size()) {
        throw std::invalid_argument("sample_training_episode: one superpixel map per slice required");
    }
    aug.validate();
    for (int attempt = 0; attempt < std::max(1, options.max_resample); ++attempt) {
        const int i = uniform_int(rng, static_cast<int>(pool.size()));
        const SliceSample& slice = pool[i];
        const SuperpixelMap& sp = superpixels[i];
        if (sp.num_segments <= 0) {
            throw std::invalid_argument("sample_training_episode: slice " + slice.source + ":" +
                                        std::to_string(slice.z_index) + " has no superpixels");
        }
        if (sp.segments.shape() != slice.image.shape()) {
            throw std::invalid_argument("sample_training_episode: superpixel map shape mismatch");
        }
        const int r = uniform_int(rng, sp.num_segments);
        Mask pseudo = sp.region(r);
        if (count_on(pseudo) < static_cast<std::size_t>(std::max(1, options.min_pseudo_label_pixels))) continue;

        const GeometricTransform tg = sample_geometric(aug, slice.image.shape(), rng);
        const IntensityTransform ti = sample_intensity(aug, rng);
        Mask query_label = warp_mask(pseudo, tg);
        if (count_on(query_label) == 0) continue;  // pseudo-label left the frame

        Episode ep;
        ep.source = slice.source;
        ep.z_index = slice.z_index;
        ep.superpixel_id = r;
        ep.query_label = std::move(query_label);
        if (options.triplets) {
            SliceTriplet support = make_triplet(slice);
            SliceTriplet query = support;
            for (auto& s : query.slices) s = warp_image(apply_intensity(s, ti), tg);
            ep.support.push_back({std::move(support), std::move(pseudo)});
            ep.query_image = std::move(query);
        } else {
            ep.query_image = warp_image(apply_intensity(slice.image, ti), tg);
            ep.support.push_back({slice.image, std::move(pseudo)});
        }
        return ep;
    }
    throw std::runtime_error("sample_training_episode: no usable pseudo-label after " +
                             std::to_string(options.max_resample) + " attempts");
}

std::vector<SliceSample> filter_setting2(const std::vector<SliceSample>& pool,
                                         const std::vector<std::string>& test_classes)
{
    std::vector<SliceSample> out;
    for (const auto& s : pool) {
        bool clean = true;
        for (const auto& c : test_classes) {
            const auto it = s.labels.find(c);
            if (it != s.labels.end() && count_on(it->second) > 0) {
                clean = false;
                break;
            }
        }
        if (clean) out.push_back(s);
    }
    return out;
}

std::vector<SliceSample> build_training_pool(const std::vector<VolumeScan>& scans,
                                             const std::vector<std::string>& test_classes, Shape2 resolution)
{
    std::vector<SliceSample> out;
    for (const auto& scan : scans) {
        std::vector<bool> excluded(scan.depth(), false);
        for (const auto& c : test_classes) {
            const auto it = scan.masks.find(c);
            if (it == scan.masks.end()) continue;
            for (int z : scan.slices_with(c)) excluded[z] = true;
        }
        auto slices = reformat_and_resize(scan, resolution);
        for (auto& s : slices) {
            if (!excluded[s.z_index]) out.push_back(std::move(s));
        }
    }
    return out;
}

// ------------------------------------------------------------------ manifests

Manifest read_manifest(const fs::path& path, bool check_files)
{
    const std::string text = io::read_text(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
        throw std::runtime_error(path.string() + ":" + std::to_string(line) + ": malformed manifest: " + e.what());
    }
    Manifest m;
    m.source = path;
    const fs::path base = path.parent_path();
    auto ctx = [&](const std::string& where) { return path.string() + ": " + where; };
    try {
        m.dataset = j.value("dataset", "SYNTH");
        m.modality = parse_modality(j.value("modality", "SYNTH"));
        if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty()) {
            throw std::runtime_error(ctx("'classes' must be a non-empty list"));
        }
        std::set<int> seen_values;
        for (std::size_t i = 0; i < j["classes"].size(); ++i) {
            const auto& c = j["classes"][i];
            ClassInfo ci{c.at("value").get<int>(), c.at("name").get<std::string>()};
            if (!seen_values.insert(ci.label_value).second) {
                throw std::runtime_error(ctx("classes[" + std::to_string(i) + "]: duplicate label value"));
            }
            m.classes.push_back(ci);
        }
        if (!j.contains("scans") || !j["scans"].is_array()) throw std::runtime_error(ctx("'scans' must be a list"));
        std::set<std::string> ids;
        for (std::size_t i = 0; i < j["scans"].size(); ++i) {
            const auto& s = j["scans"][i];
            ManifestEntry e;
            e.patient_id = s.at("patient_id").get<std::string>();
            e.image = s.at("image").get<std::string>();
            e.label = s.at("label").get<std::string>();
            e.split = s.value("split", "train");
            if (e.image.is_relative()) e.image = base / e.image;
            if (e.label.is_relative()) e.label = base / e.label;
            const std::string where = "scans[" + std::to_string(i) + "] (patient " + e.patient_id + ")";
            if (!ids.insert(e.patient_id).second) throw std::runtime_error(ctx(where + ": duplicate patient id"));
            if (check_files) {
                if (!fs::exists(e.image)) throw std::runtime_error(ctx(where + ": image file not found: " + e.image.string()));
                if (!fs::exists(e.label)) throw std::runtime_error(ctx(where + ": label file not found: " + e.label.string()));
            }
            m.scans.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(ctx(std::string("invalid manifest: ") + e.what()));
    }
    return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest)
{
    nlohmann::ordered_json j;
    j["dataset"] = manifest.dataset;
    j["modality"] = to_string(manifest.modality);
    j["classes"] = nlohmann::ordered_json::array();
    for (const auto& c : manifest.classes) j["classes"].push_back({{"value", c.label_value}, {"name", c.name}});
    j["scans"] = nlohmann::ordered_json::array();
    const fs::path base = path.parent_path();
    for (const auto& s : manifest.scans) {
        auto rel = [&](const fs::path& p) {
            return p.is_absolute() ? fs::relative(p, fs::absolute(base)).generic_string() : p.generic_string();
        };
        j["scans"].push_back({{"patient_id", s.patient_id},
                              {"image", rel(s.image)},
                              {"label", rel(s.label)},
                              {"split", s.split}});
    }
    io::write_text(path, j.dump(2) + "\n");
}

// ----------------------------------------------------------- superpixel cache

SuperpixelCache::SuperpixelCache(fs::path root, std::string key) : dir_(std::move(root) / std::move(key)) {}

fs::path SuperpixelCache::path_for(const std::string& source, int z) const
{
    return dir_ / (source + "_z" + std::to_string(z) + ".npy");
}

bool SuperpixelCache::contains(const std::string& source, int z) const
{
    return fs::exists(path_for(source, z));
}

SuperpixelMap SuperpixelCache::load(const std::string& source, int z) const
{
    const auto arr = io::read_npy(path_for(source, z));
    if (arr.shape.size() != 2) throw std::runtime_error("superpixel cache: expected 2D array");
    SuperpixelMap m;
    m.segments = LabelMap(arr.shape[0], arr.shape[1]);
    int mx = -1;
    for (std::size_t i = 0; i < arr.values.size(); ++i) {
        m.segments[i] = static_cast<std::int32_t>(arr.values[i]);
        mx = std::max(mx, m.segments[i]);
    }
    m.num_segments = mx + 1;
    return m;
}

void SuperpixelCache::store(const std::string& source, int z, const SuperpixelMap& map) const
{
    fs::create_directories(dir_);
    const fs::path final_path = path_for(source, z);
    const fs::path tmp = final_path.string() + ".tmp";
    io::write_npy(tmp, {map.segments.height(), map.segments.width()}, map.segments.values());
    fs::rename(tmp, final_path);
}

std::string superpixel_cache_key(const std::string& dataset_digest, const FelzenszwalbParams& p,
                                 Shape2 resolution)
{
    const std::string text = dataset_digest + "|" + std::to_string(p.scale) + "|" +
                             std::to_string(p.sigma) + "|" + std::to_string(p.min_size) + "|" +
                             resolution.str();
    return "sp-" + digest_hex(text);
}

std::vector<SuperpixelMap> prepare_superpixels(const std::vector<SliceSample>& pool, const FelzenszwalbParams& params,
                                               const SuperpixelCache* cache, SuperpixelStats* stats)
{
    SuperpixelStats local;
    std::vector<SuperpixelMap> maps;
    maps.reserve(pool.size());
    for (const auto& s : pool) {
        if (cache && cache->contains(s.source, s.z_index)) {
            auto m = cache->load(s.source, s.z_index);
            if (m.segments.shape() == s.image.shape()) {
                maps.push_back(std::move(m));
                ++local.cache_hits;
                continue;
            }
        }
        maps.push_back(generate_superpixels(s.image, params));
        ++local.computed;
        if (cache) cache->store(s.source, s.z_index, maps.back());
    }
    if (stats) *stats = local;
    return maps;
}

std::vector<VolumeScan> load_dataset(const Manifest& manifest, const std::string& split,
                                     const NormalizationSpec& norm)
{
    std::vector<VolumeScan> scans;
    for (const auto& e : manifest.scans) {
        if (!split.empty() && e.split != split) continue;
        try {
            scans.push_back(load_volume(e.image, e.label, manifest.classes, manifest.modality, e.patient_id, norm));
        } catch (const std::exception& ex) {
            throw std::runtime_error("scan " + e.patient_id + ": " + ex.what());
        }
    }
    return scans;
}

std::string dataset_digest(const Manifest& manifest)
{
    std::string acc = manifest.dataset + "|" + to_string(manifest.modality);
    for (const auto& e : manifest.scans) {
        acc += "|" + e.patient_id + ":" + digest_hex(io::read_text(e.image)) + ":" + digest_hex(io::read_text(e.label));
    }
    return digest_hex(acc);
}

}  // namespace protoseg::data
