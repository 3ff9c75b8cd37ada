#include "protoseg/inference.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "protoseg/io.hpp"
#include "protoseg/random.hpp"

namespace protoseg::infer {

// ---------------------------------------------------------------------- CCA

namespace {

class UnionFind {
public:
    int make()
    {
        parent_.push_back(static_cast<int>(parent_.size()));
        return parent_.back();
    }
    int find(int x)
    {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    void unite(int a, int b)
    {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

private:
    std::vector<int> parent_;
};

void sort_components(std::vector<ConnectedComponent>& comps)
{
    std::stable_sort(comps.begin(), comps.end(), [](const ConnectedComponent& a, const ConnectedComponent& b) {
        if (a.size() != b.size()) return a.size() > b.size();
        return a.label < b.label;
    });
}

}  // namespace

std::vector<ConnectedComponent> connected_components(const Mask& mask, int connectivity)
{
    if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
    const int h = mask.height(), w = mask.width();
    std::vector<int> provisional(mask.size(), -1);
    UnionFind sets;
    // First pass: provisional labels from already-visited neighbours.
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!mask(y, x)) continue;
            int label = -1;
            auto visit = [&](int yy, int xx) {
                if (yy < 0 || xx < 0 || xx >= w) return;
                const int l = provisional[static_cast<std::size_t>(yy) * w + xx];
                if (l < 0) return;
                if (label < 0) label = l;
                else sets.unite(label, l);
            };
            visit(y, x - 1);
            visit(y - 1, x);
            if (connectivity == 8) {
                visit(y - 1, x - 1);
                visit(y - 1, x + 1);
            }
            provisional[static_cast<std::size_t>(y) * w + x] = label < 0 ? sets.make() : label;
        }
    }
    // Second pass: resolve equivalences; labels follow raster order of first pixel.
    std::vector<ConnectedComponent> comps;
    std::vector<int> index_of;
    for (std::size_t i = 0; i < provisional.size(); ++i) {
        if (provisional[i] < 0) continue;
        const int root = sets.find(provisional[i]);
        if (static_cast<std::size_t>(root) >= index_of.size()) index_of.resize(root + 1, -1);
        if (index_of[root] < 0) {
            index_of[root] = static_cast<int>(comps.size());
            comps.push_back({});
            comps.back().label = index_of[root];
        }
        comps[index_of[root]].pixels.push_back(static_cast<int>(i));
    }
    sort_components(comps);
    return comps;
}

std::vector<ConnectedComponent> connected_components_3d(const Volume<std::uint8_t>& mask, int connectivity)
{
    if (connectivity != 6 && connectivity != 18 && connectivity != 26) {
        throw std::invalid_argument("3D connectivity must be 6, 18 or 26");
    }
    const int h = mask.height(), w = mask.width(), d = mask.depth();
    std::vector<std::array<int, 3>> offsets;
    for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int n = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (n == 0 || (connectivity == 6 && n > 1) || (connectivity == 18 && n > 2)) continue;
                offsets.push_back({dz, dy, dx});
            }
        }
    }
    std::vector<int> seen(mask.size(), 0);
    std::vector<ConnectedComponent> comps;
    std::vector<int> stack;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask.values()[start] || seen[start]) continue;
        ConnectedComponent c;
        c.label = static_cast<int>(comps.size());
        seen[start] = 1;
        stack.assign(1, static_cast<int>(start));
        while (!stack.empty()) {
            const int i = stack.back();
            stack.pop_back();
            c.pixels.push_back(i);
            const int z = i / (h * w), y = (i / w) % h, x = i % w;
            for (const auto& o : offsets) {
                const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
                if (zz < 0 || zz >= d || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                const std::size_t j = (static_cast<std::size_t>(zz) * h + yy) * w + xx;
                if (mask.values()[j] && !seen[j]) {
                    seen[j] = 1;
                    stack.push_back(static_cast<int>(j));
                }
            }
        }
        std::sort(c.pixels.begin(), c.pixels.end());
        comps.push_back(std::move(c));
    }
    sort_components(comps);
    return comps;
}

Real component_confidence(const ConnectedComponent& comp, const std::vector<Real>& fg_probs)
{
    if (comp.pixels.empty()) throw std::invalid_argument("component_confidence: empty component");
    Real s = 0;
    for (int i : comp.pixels) {
        if (i < 0 || static_cast<std::size_t>(i) >= fg_probs.size()) {
            throw std::out_of_range("component_confidence: pixel outside the probability map");
        }
        s += fg_probs[i];
    }
    return s / static_cast<Real>(comp.pixels.size());
}

namespace {

// Means of equal probabilities can differ in the last bit depending on the
// component size; such rounding noise should not decide the winner.
constexpr Real kConfidenceTie = 1e-12;

const ConnectedComponent* best_component(std::vector<ConnectedComponent>& comps, const std::vector<Real>& probs)
{
    const ConnectedComponent* best = nullptr;
    for (auto& c : comps) {
        c.confidence = component_confidence(c, probs);
        if (!best || c.confidence > best->confidence + kConfidenceTie ||
            (std::abs(c.confidence - best->confidence) <= kConfidenceTie &&
             (c.size() > best->size() || (c.size() == best->size() && c.label < best->label)))) {
            best = &c;
        }
    }
    return best;
}

}  // namespace

Mask select_most_confident(std::vector<ConnectedComponent>& comps, const Image& fg_probs)
{
    Mask out(fg_probs.height(), fg_probs.width(), 0);
    if (const auto* best = best_component(comps, fg_probs.values())) {
        for (int i : best->pixels) out[i] = 1;
    }
    return out;
}

Volume<std::uint8_t> select_most_confident(std::vector<ConnectedComponent>& comps, const Volume<Real>& fg_probs)
{
    Volume<std::uint8_t> out(fg_probs.height(), fg_probs.width(), fg_probs.depth(), 0);
    if (const auto* best = best_component(comps, fg_probs.values())) {
        for (int i : best->pixels) out.values()[i] = 1;
    }
    return out;
}

Mask apply_cca(const Mask& mask, const Image& fg_probs, int connectivity)
{
    if (mask.shape() != fg_probs.shape()) throw std::invalid_argument("apply_cca: mask/probability shape mismatch");
    auto comps = connected_components(mask, connectivity);
    return select_most_confident(comps, fg_probs);
}

// ------------------------------------------------------------------ protocol

std::vector<Section> balanced_partition(int n, int parts)
{
    if (n < 0 || parts <= 0) throw std::invalid_argument("balanced_partition: need n >= 0 and parts > 0");
    const int k = std::min(parts, n);
    std::vector<Section> out;
    int begin = 0;
    for (int i = 0; i < k; ++i) {
        const int size = n / k + (i < n % k ? 1 : 0);
        out.push_back({begin, size});
        begin += size;
    }
    return out;
}

std::vector<SectionPlan> plan_sections(int query_begin, int query_end, int support_begin, int support_end,
                                       int sections)
{
    const int nq = query_end - query_begin, ns = support_end - support_begin;
    if (ns <= 0) throw std::invalid_argument("plan_sections: empty support range");
    if (nq <= 0) return {};
    const int c = std::min({sections, nq, ns});
    const auto qs = balanced_partition(nq, c);
    const auto ss = balanced_partition(ns, c);
    std::vector<SectionPlan> plan;
    for (int i = 0; i < c; ++i) {
        plan.push_back({query_begin + qs[i].begin, query_begin + qs[i].begin + qs[i].size,
                        support_begin + ss[i].begin + ss[i].size / 2});
    }
    return plan;
}

// ---------------------------------------------------------------- inference

sim::SegmentationResult segment_slice(const data::EncoderInput& query, const data::EncoderInput& support_image,
                                      const Mask& support_mask, const model::ModelState& state,
                                      proto::PoolingWindow window, Real threshold)
{
    ad::NoGradGuard guard;
    const auto fs = model::encode(support_image, state);
    const auto cover = model::coverage_on_grid(support_mask, fs.grid());
    const auto protos = proto::assemble_prototype_set({{fs.values, proto::binary_class_weights(cover)}}, window, threshold);
    const auto fq = model::encode(query, state);
    return sim::to_result(sim::segment_query(protos, fq.values, data::input_shape(query)).probs);
}

namespace {

std::pair<int, int> class_range(const data::VolumeScan& scan, const std::string& name)
{
    const auto z = scan.slices_with(name);
    if (z.empty()) return {0, 0};
    return {z.front(), z.back() + 1};
}

data::EncoderInput input_at(const std::vector<data::SliceSample>& slices, int z, bool triplets)
{
    if (triplets) return data::make_triplet(slices[z]);
    return slices[z].image;
}

}  // namespace

VolumePrediction segment_volume(const data::VolumeScan& query, const data::VolumeScan& support,
                                const std::string& class_name, const model::ModelState& state,
                                const InferenceConfig& cfg)
{
    if (query.patient_id == support.patient_id) {
        throw std::invalid_argument("support and query scans must come from different patients (both are " +
                                    query.patient_id + ")");
    }
    if (!support.masks.count(class_name) || !query.masks.count(class_name)) {
        throw std::invalid_argument("class '" + class_name + "' is not in the scans' catalog");
    }
    const auto [sb, se] = class_range(support, class_name);
    if (se <= sb) {
        throw std::invalid_argument("class '" + class_name + "' is absent from support scan " + support.patient_id);
    }
    const auto [qb, qe] = class_range(query, class_name);

    VolumePrediction out;
    const int h = query.height(), w = query.width(), d = query.depth();
    out.mask = Volume<std::uint8_t>(h, w, d, 0);
    out.raw = out.mask;
    out.foreground = Volume<Real>(h, w, d, 0);
    out.plan = plan_sections(qb, qe, sb, se, cfg.sections);
    if (out.plan.empty()) return out;

    ad::NoGradGuard guard;
    const auto qslices = data::reformat_and_resize(query, cfg.resolution);
    const auto sslices = data::reformat_and_resize(support, cfg.resolution);
    std::vector<Image> probs(d);
    for (const auto& sec : out.plan) {
        const auto fs = model::encode(input_at(sslices, sec.support_z, cfg.triplets), state);
        const Mask& smask = sslices[sec.support_z].labels.at(class_name);
        const auto cover = model::coverage_on_grid(smask, fs.grid());
        const auto protos =
            proto::assemble_prototype_set({{fs.values, proto::binary_class_weights(cover)}}, cfg.window, cfg.threshold);
        for (int z = sec.query_begin; z < sec.query_end; ++z) {
            const auto fq = model::encode(input_at(qslices, z, cfg.triplets), state);
            const auto pred = sim::segment_query(protos, fq.values, cfg.resolution);
            const auto result = sim::to_result(pred.probs);
            Image fg = data::resize_image(result.class_probability(1), {h, w});
            Mask raw(h, w);
            for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = fg[i] > 0.5 ? 1 : 0;
            out.raw.set_slice(z, raw);
            out.foreground.set_slice(z, fg);
            if (cfg.cca && !cfg.cca_3d) raw = apply_cca(raw, fg, cfg.connectivity);
            out.mask.set_slice(z, raw);
            out.slices.push_back(z);
        }
    }
    if (cfg.cca && cfg.cca_3d) {
        auto comps = connected_components_3d(out.raw, cfg.connectivity == 4 ? 6 : 26);
        out.mask = select_most_confident(comps, out.foreground);
    }
    return out;
}

// ---------------------------------------------------------- test-time training

std::vector<TttSlice> ttt_pool_from(const data::VolumeScan& query, const VolumePrediction& pred,
                                    const InferenceConfig& cfg)
{
    const auto slices = data::reformat_and_resize(query, cfg.resolution);
    std::vector<TttSlice> pool;
    for (int z : pred.slices) {
        pool.push_back({input_at(slices, z, cfg.triplets), data::resize_mask(pred.mask.slice(z), cfg.resolution),
                        query.patient_id, z});
    }
    return pool;
}

namespace {

bool any_on(const Mask& m)
{
    return std::any_of(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v != 0; });
}

data::EncoderInput augment_input(const data::EncoderInput& in, const data::IntensityTransform& ti,
                                 const data::GeometricTransform& tg)
{
    if (const auto* t = std::get_if<data::SliceTriplet>(&in)) {
        data::SliceTriplet out = *t;
        for (auto& s : out.slices) s = data::warp_image(data::apply_intensity(s, ti), tg);
        return out;
    }
    return data::warp_image(data::apply_intensity(std::get<Image>(in), ti), tg);
}

}  // namespace

model::ModelState test_time_train(const model::ModelState& state, const std::vector<TttSlice>& pool,
                                  const TTTConfig& ttt, const train::TrainConfig& base, TttReport* report)
{
    if (ttt.iterations < 0) throw std::invalid_argument("ttt.iterations must be >= 0");
    if (pool.empty()) {
        throw std::runtime_error("test-time training needs saved predictions from an initial inference pass");
    }
    model::ModelState s = state.clone();
    TttReport local;
    TttReport& rep = report ? *report : local;
    rep = {};
    std::vector<int> eligible;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (any_on(pool[i].prediction)) eligible.push_back(static_cast<int>(i));
        else ++rep.skipped_empty;
    }
    if (ttt.iterations == 0 || eligible.empty()) return s;

    train::TrainConfig cfg = base;
    cfg.optimizer.lr = ttt.lr;
    cfg.optimizer.decay_every = 0;
    cfg.augmentation = ttt.aug;
    s.momentum.clear();
    s.second.clear();
    for (int pass = 0; pass < ttt.iterations; ++pass) {
        std::vector<int> order = eligible;
        Rng shuffle_rng(derive_seed(ttt.seed, 0x77700000ULL + static_cast<std::uint64_t>(pass)));
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            std::swap(order[i], order[uniform_int(shuffle_rng, i + 1)]);
        }
        for (std::size_t k = 0; k < order.size(); ++k) {
            const TttSlice& sl = pool[order[k]];
            Rng rng(derive_seed(ttt.seed, static_cast<std::uint64_t>(pass) * 1000003ULL + k));
            const Shape2 shape = data::input_shape(sl.image);
            const auto tg = data::sample_geometric(ttt.aug, shape, rng);
            const auto ti = data::sample_intensity(ttt.aug, rng);
            Mask label = data::warp_mask(sl.prediction, tg);
            if (!any_on(label)) continue;
            data::Episode ep;
            ep.support.push_back({sl.image, sl.prediction});
            ep.query_image = augment_input(sl.image, ti, tg);
            ep.query_label = std::move(label);
            ep.source = sl.source;
            ep.z_index = sl.z_index;
            rep.losses.push_back(train::train_episode(s, ep, cfg));
            ++rep.episodes;
        }
    }
    return s;
}

// ---------------------------------------------------------------- label store

LabelStore::LabelStore(fs::path dir) : dir_(std::move(dir)) {}

fs::path LabelStore::path_for(const std::string& scan, int z) const
{
    char name[32];
    std::snprintf(name, sizeof name, "z%05d.npy", z);
    return dir_ / scan / name;
}

bool LabelStore::contains(const std::string& scan, int z) const { return fs::exists(path_for(scan, z)); }

void LabelStore::save(const std::string& scan, int z, const Mask& mask) const
{
    const fs::path p = path_for(scan, z);
    fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    io::write_npy(tmp, {mask.height(), mask.width()}, mask.values());
    fs::rename(tmp, p);
}

Mask LabelStore::load(const std::string& scan, int z) const
{
    const fs::path p = path_for(scan, z);
    if (!fs::exists(p)) throw std::runtime_error("no saved prediction for " + scan + " z=" + std::to_string(z));
    const auto arr = io::read_npy(p);
    if (arr.shape.size() != 2) throw std::runtime_error(p.string() + ": expected a 2D mask");
    Mask m(arr.shape[0], arr.shape[1]);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = arr.values[i] != 0 ? 1 : 0;
    return m;
}

}  // namespace protoseg::infer
