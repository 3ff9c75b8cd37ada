#include "protoseg/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "protoseg/io.hpp"
#include "protoseg/random.hpp"

namespace protoseg::synth {

namespace {

struct Placed {
    Real cy, cx, cz, ry, rx, rz, intensity;
};

Placed place(const Ellipsoid& e, const SynthSpec& spec, Rng& rng)
{
    const Real j = spec.position_jitter, r = spec.radius_jitter;
    const Real sy = 1 + uniform(rng, -r, r), sx = 1 + uniform(rng, -r, r), sz = 1 + uniform(rng, -r, r);
    return {(e.cy + uniform(rng, -j, j)) * spec.height, (e.cx + uniform(rng, -j, j)) * spec.width,
            (e.cz + uniform(rng, -j, j)) * spec.depth,  e.ry * sy * spec.height,
            e.rx * sx * spec.width,                     e.rz * sz * spec.depth,
            e.intensity};
}

bool inside(const Placed& p, Real y, Real x, Real z)
{
    const Real dy = (y - p.cy) / p.ry, dx = (x - p.cx) / p.rx, dz = (z - p.cz) / p.rz;
    return dy * dy + dx * dx + dz * dz <= 1;
}

// Separable Gaussian blur with edge replication.
Image blur(const Image& in, Real sigma)
{
    if (sigma <= 0) return in;
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<Real> k(2 * radius + 1);
    Real sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    const int h = in.height(), w = in.width();
    Image tmp(h, w), out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Real acc = 0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * in(y, std::clamp(x + i, 0, w - 1));
            tmp(y, x) = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Real acc = 0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(std::clamp(y + i, 0, h - 1), x);
            out(y, x) = acc;
        }
    }
    return out;
}

}  // namespace

std::vector<OrganSpec> SynthSpec::default_organs()
{
    return {
        {"BlobA", 1, {0.36, 0.30, 0.40, 0.13, 0.15, 0.28, 0.70}},
        {"BlobB", 2, {0.36, 0.70, 0.60, 0.12, 0.12, 0.28, 0.90}},
        {"BlobC", 3, {0.66, 0.52, 0.50, 0.12, 0.14, 0.26, 0.12}},
    };
}

void SynthSpec::validate() const
{
    if (patients < 2) throw std::invalid_argument("synthetic dataset needs at least 2 patients");
    if (height < 8 || width < 8 || depth < 4) throw std::invalid_argument("synthetic volume too small");
    if (organs.empty()) throw std::invalid_argument("synthetic dataset needs at least one organ");
    std::set<int> labels;
    std::set<std::string> names;
    for (const auto& o : organs) {
        if (o.label <= 0) throw std::invalid_argument("organ labels must be positive");
        if (!labels.insert(o.label).second || !names.insert(o.name).second) {
            throw std::invalid_argument("duplicate organ label or name: " + o.name);
        }
    }
}

data::ClassCatalog catalog(const SynthSpec& spec)
{
    data::ClassCatalog c;
    for (const auto& o : spec.organs) c.push_back({o.label, o.name});
    return c;
}

namespace {

std::pair<Volume<Real>, Volume<Real>> raw_patient(const SynthSpec& spec, int patient)
{
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(patient)));
    const int h = spec.height, w = spec.width, d = spec.depth;
    const Placed body = place({0.5, 0.5, 0.5, 0.42, 0.45, 10.0, spec.body_intensity}, spec, rng);
    std::vector<Placed> organs;
    for (const auto& o : spec.organs) organs.push_back(place(o.shape, spec, rng));
    std::optional<Placed> distractor;
    if (spec.distractor) distractor = place(spec.distractor_shape, spec, rng);

    Volume<Real> voxels(h, w, d), labels(h, w, d);
    for (int z = 0; z < d; ++z) {
        Image img(h, w);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const Real py = y + 0.5, px = x + 0.5, pz = z + 0.5;
                Real v = inside(body, py, px, pz) ? body.intensity : 0.0;
                for (std::size_t i = 0; i < organs.size(); ++i) {
                    if (inside(organs[i], py, px, pz)) {
                        v = organs[i].intensity;
                        labels(y, x, z) = spec.organs[i].label;
                    }
                }
                if (distractor && inside(*distractor, py, px, pz) && labels(y, x, z) == 0) v = distractor->intensity;
                img(y, x) = v;
            }
        }
        img = blur(img, spec.smooth_sigma);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] += spec.noise_std * normal(rng);
        voxels.set_slice(z, img);
    }
    return {std::move(voxels), std::move(labels)};
}

std::string patient_id(int i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth_%02d", i);
    return buf;
}

}  // namespace

std::vector<data::VolumeScan> generate(const SynthSpec& spec)
{
    spec.validate();
    std::vector<data::VolumeScan> scans;
    for (int p = 0; p < spec.patients; ++p) {
        auto [voxels, labels] = raw_patient(spec, p);
        scans.push_back(data::make_scan(std::move(voxels), labels, catalog(spec), data::Modality::synth, patient_id(p)));
    }
    return scans;
}

fs::path write_dataset(const SynthSpec& spec, const fs::path& dir)
{
    spec.validate();
    fs::create_directories(dir);
    data::Manifest m;
    m.dataset = "SYNTH";
    m.modality = data::Modality::synth;
    m.classes = catalog(spec);
    for (int p = 0; p < spec.patients; ++p) {
        auto [voxels, labels] = raw_patient(spec, p);
        const std::string id = patient_id(p);
        const fs::path img = dir / (id + "_image.nii.gz");
        const fs::path lab = dir / (id + "_label.nii.gz");
        io::write_nifti(img, voxels, io::NiftiType::float32);
        io::write_nifti(lab, labels, io::NiftiType::uint8);
        m.scans.push_back({id, fs::absolute(img), fs::absolute(lab), "train"});
    }
    const fs::path manifest = dir / "manifest.json";
    data::write_manifest(manifest, m);
    return manifest;
}

}  // namespace protoseg::synth
