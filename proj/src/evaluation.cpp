#include "protoseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

#include "protoseg/io.hpp"
#include "protoseg/random.hpp"

namespace protoseg::eval {

namespace {

std::uint64_t fnv1a(const std::string& s)
{
    Fnv1a h;
    h.update(s);
    return h.value();
}

template <class T>
Real dice_of(const std::vector<T>& a, const std::vector<T>& b)
{
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        na += x;
        nb += y;
        inter += x && y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<Real>(inter) / static_cast<Real>(na + nb);
}

}  // namespace

Real dice_score(const Volume<std::uint8_t>& pred, const Volume<std::uint8_t>& gt)
{
    if (!pred.same_shape(gt.height(), gt.width(), gt.depth())) throw std::invalid_argument("dice_score: shape mismatch");
    return dice_of(pred.values(), gt.values());
}

Real dice_score(const Mask& pred, const Mask& gt)
{
    if (pred.shape() != gt.shape()) throw std::invalid_argument("dice_score: shape mismatch");
    return dice_of(pred.values(), gt.values());
}

Variant parse_variant(const std::string& s)
{
    if (s == "base") return Variant::base;
    if (s == "cca") return Variant::cca;
    if (s == "ttt") return Variant::ttt;
    if (s == "slice_adapter") return Variant::slice_adapter;
    throw std::invalid_argument("unknown variant '" + s + "' (expected base, cca, ttt or slice_adapter)");
}

std::string to_string(Variant v)
{
    switch (v) {
    case Variant::base: return "base";
    case Variant::cca: return "cca";
    case Variant::ttt: return "ttt";
    case Variant::slice_adapter: return "slice_adapter";
    }
    return "?";
}

void ExperimentSpec::validate() const
{
    if (n_way != 1 || k_shot != 1) throw std::invalid_argument("only 1-way 1-shot experiments are supported");
    if (organ_groups.empty()) throw std::invalid_argument("experiment needs at least one organ group");
    std::set<std::string> seen;
    for (const auto& g : organ_groups) {
        if (g.empty()) throw std::invalid_argument("organ groups must be non-empty");
        for (const auto& c : g) {
            if (!seen.insert(c).second) throw std::invalid_argument("organ groups overlap on '" + c + "'");
        }
    }
    if (variants.empty()) throw std::invalid_argument("experiment needs at least one variant");
    if (seeds.empty()) throw std::invalid_argument("experiment needs at least one seed");
}

// ------------------------------------------------------------- ModelSegmenter

ModelSegmenter::ModelSegmenter(model::ModelState state, infer::InferenceConfig cfg)
    : state_(std::move(state)), cfg_(cfg)
{
}

ModelSegmenter::ModelSegmenter(model::ModelState state, infer::InferenceConfig cfg, infer::TTTConfig ttt,
                               train::TrainConfig train)
    : state_(std::move(state)), cfg_(cfg), ttt_(std::move(ttt)), train_(std::move(train))
{
}

void ModelSegmenter::prepare(const std::string& class_name, std::uint64_t seed,
                             const std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>>& pairs)
{
    (void)seed;
    adapted_.reset();
    if (!ttt_) return;
    // Initial pass with the trained weights, then fine-tune on the saved
    // post-CCA predictions of every query scan for this class.
    infer::InferenceConfig first = cfg_;
    first.cca = true;
    std::vector<infer::TttSlice> pool;
    for (const auto& [query, support] : pairs) {
        const auto pred = infer::segment_volume(*query, *support, class_name, state_, first);
        auto slices = infer::ttt_pool_from(*query, pred, cfg_);
        pool.insert(pool.end(), slices.begin(), slices.end());
    }
    if (pool.empty()) return;
    adapted_ = infer::test_time_train(state_, pool, *ttt_, train_, &ttt_report_);
}

Volume<std::uint8_t> ModelSegmenter::segment(const data::VolumeScan& query, const data::VolumeScan& support,
                                             const std::string& class_name)
{
    return infer::segment_volume(query, support, class_name, active_state(), cfg_).mask;
}

// --------------------------------------------------------------- MetricsTable

void MetricsTable::summarize()
{
    summary.clear();
    std::vector<std::pair<std::string, std::string>> keys;
    for (const auto& r : per_scan) {
        const std::pair<std::string, std::string> k{r.variant, r.class_name};
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    for (const auto& [variant, cls] : keys) {
        std::vector<Real> v;
        for (const auto& r : per_scan) {
            if (r.variant == variant && r.class_name == cls) v.push_back(r.dice);
        }
        Real mean = 0;
        for (Real x : v) mean += x;
        mean /= static_cast<Real>(v.size());
        Real var = 0;
        for (Real x : v) var += (x - mean) * (x - mean);
        var /= static_cast<Real>(v.size());
        summary.push_back({variant, cls, mean, std::sqrt(var), static_cast<int>(v.size())});
    }
}

Real MetricsTable::mean_of(const std::string& variant, const std::string& class_name) const
{
    for (const auto& s : summary) {
        if (s.variant == variant && s.class_name == class_name) return s.mean;
    }
    throw std::out_of_range("no summary row for " + variant + "/" + class_name);
}

Real MetricsTable::overall_mean(const std::string& variant) const
{
    Real s = 0;
    int n = 0;
    for (const auto& r : summary) {
        if (r.variant == variant) {
            s += r.mean;
            ++n;
        }
    }
    if (n == 0) throw std::out_of_range("no summary rows for variant " + variant);
    return s / n;
}

// ----------------------------------------------------------------- experiment

void audit_setting2(const std::vector<data::VolumeScan>& scans, const std::vector<std::string>& test_classes,
                    const std::vector<std::pair<std::string, int>>& training_slices)
{
    std::map<std::string, const data::VolumeScan*> by_id;
    for (const auto& s : scans) by_id[s.patient_id] = &s;
    for (const auto& [patient, z] : training_slices) {
        const auto it = by_id.find(patient);
        if (it == by_id.end()) {
            throw std::runtime_error("Setting 2 audit: training slice from unknown patient " + patient);
        }
        const auto& scan = *it->second;
        if (z < 0 || z >= scan.depth()) {
            throw std::runtime_error("Setting 2 audit: slice " + std::to_string(z) + " out of range for " + patient);
        }
        for (const auto& cls : test_classes) {
            const auto m = scan.masks.find(cls);
            if (m == scan.masks.end()) continue;
            const auto sl = m->second.slice(z);
            if (std::any_of(sl.values().begin(), sl.values().end(), [](std::uint8_t v) { return v != 0; })) {
                throw std::runtime_error("Setting 2 audit failed: training slice " + patient + " z=" +
                                         std::to_string(z) + " contains test class " + cls);
            }
        }
    }
}

std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>> pair_scans(
    const std::vector<data::VolumeScan>& scans, const std::string& class_name, std::uint64_t seed)
{
    std::vector<const data::VolumeScan*> with;
    for (const auto& s : scans) {
        if (!s.slices_with(class_name).empty()) with.push_back(&s);
    }
    if (with.size() < 2) {
        throw std::runtime_error("class '" + class_name + "' appears in fewer than two scans; no support/query pair");
    }
    std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>> pairs;
    for (const auto* q : with) {
        std::vector<const data::VolumeScan*> others;
        for (const auto* s : with) {
            if (s->patient_id != q->patient_id) others.push_back(s);
        }
        Rng rng(derive_seed(seed, fnv1a(class_name + "|" + q->patient_id)));
        pairs.emplace_back(q, others[uniform_int(rng, static_cast<int>(others.size()))]);
    }
    return pairs;
}

MetricsTable run_experiment(const ExperimentSpec& spec, const std::vector<data::VolumeScan>& scans,
                            const std::vector<FoldArtifacts>& folds)
{
    spec.validate();
    MetricsTable table;
    for (const auto& group : spec.organ_groups) {
        const FoldArtifacts* fold = nullptr;
        for (const auto& f : folds) {
            std::set<std::string> a(f.test_classes.begin(), f.test_classes.end());
            std::set<std::string> b(group.begin(), group.end());
            if (a == b) fold = &f;
        }
        std::string names;
        for (const auto& c : group) names += (names.empty() ? "" : ",") + c;
        if (!fold) throw std::runtime_error("no checkpoint for the fold testing {" + names + "}");
        for (Variant v : spec.variants) {
            if (!fold->segmenters.count(v)) {
                throw std::runtime_error("fold " + fold->name + " has no model for variant " + to_string(v));
            }
        }
        audit_setting2(scans, group, fold->training_slices);

        for (const auto& cls : group) {
            for (std::uint64_t seed : spec.seeds) {
                const auto pairs = pair_scans(scans, cls, seed);
                for (Variant v : spec.variants) {
                    auto& seg = *fold->segmenters.at(v);
                    seg.prepare(cls, seed, pairs);
                    for (const auto& [query, support] : pairs) {
                        const auto pred = seg.segment(*query, *support, cls);
                        const Real d = dice_score(pred, query->masks.at(cls));
                        table.per_scan.push_back(
                            {to_string(v), fold->name, cls, query->patient_id, support->patient_id, seed, 100.0 * d});
                    }
                }
            }
        }
    }
    table.summarize();
    return table;
}

// --------------------------------------------------------------------- report

namespace {

std::string fmt(Real v, int digits)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::vector<std::string> ordered_unique(const std::vector<SummaryRow>& rows, bool variant)
{
    std::vector<std::string> out;
    for (const auto& r : rows) {
        const auto& k = variant ? r.variant : r.class_name;
        if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
    }
    return out;
}

std::string svg_chart(const MetricsTable& t)
{
    const auto variants = ordered_unique(t.summary, true);
    const auto classes = ordered_unique(t.summary, false);
    static const char* colors[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};
    const int bar = 18, gap = 24, left = 50, top = 20, height = 200;
    const int group_w = static_cast<int>(variants.size()) * bar + gap;
    const int width = left + static_cast<int>(classes.size()) * group_w + 20;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 60
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int tick = 0; tick <= 100; tick += 25) {
        const int y = top + height - tick * height / 100;
        s << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/><text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick
          << "</text>\n";
    }
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const int x0 = left + static_cast<int>(c) * group_w + gap / 2;
        for (std::size_t v = 0; v < variants.size(); ++v) {
            Real m = 0;
            for (const auto& r : t.summary) {
                if (r.variant == variants[v] && r.class_name == classes[c]) m = r.mean;
            }
            const int h = static_cast<int>(std::lround(std::clamp<Real>(m, 0, 100) * height / 100));
            s << "<rect x=\"" << x0 + static_cast<int>(v) * bar << "\" y=\"" << top + height - h << "\" width=\""
              << bar - 2 << "\" height=\"" << h << "\" fill=\"" << colors[v % 6] << "\"/>\n";
        }
        s << "<text x=\"" << x0 + static_cast<int>(variants.size()) * bar / 2 << "\" y=\"" << top + height + 15
          << "\" text-anchor=\"middle\">" << classes[c] << "</text>\n";
    }
    for (std::size_t v = 0; v < variants.size(); ++v) {
        const int x = left + static_cast<int>(v) * 110;
        s << "<rect x=\"" << x << "\" y=\"" << top + height + 32 << "\" width=\"10\" height=\"10\" fill=\""
          << colors[v % 6] << "\"/><text x=\"" << x + 14 << "\" y=\"" << top + height + 41 << "\">" << variants[v]
          << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace

std::vector<fs::path> report(const MetricsTable& table, const fs::path& out, bool chart)
{
    if (table.per_scan.empty()) throw std::invalid_argument("report: empty metrics table");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw std::runtime_error("report: cannot create " + out.string() + ": " + ec.message());

    std::ostringstream results;
    results << "variant,fold,class,scan_id,dice\n";
    for (const auto& r : table.per_scan) {
        results << r.variant << ',' << r.fold << ',' << r.class_name << ',' << r.scan_id << ',' << fmt(r.dice, 8) << '\n';
    }

    const auto variants = ordered_unique(table.summary, true);
    const auto classes = ordered_unique(table.summary, false);
    std::ostringstream summary;
    summary << "variant";
    for (const auto& c : classes) summary << ',' << c;
    summary << ",mean\n";
    std::ostringstream text;
    std::size_t name_w = 8;
    for (const auto& v : variants) name_w = std::max(name_w, v.size() + 2);
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 1, ' '); };
    text << pad("Method", name_w);
    for (const auto& c : classes) text << pad(c, std::max<std::size_t>(16, c.size() + 2));
    text << "Mean\n";
    for (const auto& v : variants) {
        summary << v;
        text << pad(v, name_w);
        for (const auto& c : classes) {
            const auto it = std::find_if(table.summary.begin(), table.summary.end(),
                                         [&](const SummaryRow& r) { return r.variant == v && r.class_name == c; });
            if (it == table.summary.end()) {
                summary << ',';
                text << pad("-", std::max<std::size_t>(16, c.size() + 2));
                continue;
            }
            summary << ',' << fmt(it->mean, 8);
            text << pad(fmt(it->mean, 2) + " +/- " + fmt(it->std, 2), std::max<std::size_t>(16, c.size() + 2));
        }
        const Real m = table.overall_mean(v);
        summary << ',' << fmt(m, 8) << '\n';
        text << fmt(m, 2) << '\n';
    }
    text << "\nDice in percent; mean +/- std over query scans (n = ";
    for (std::size_t i = 0; i < table.summary.size() && i < 1; ++i) text << table.summary[i].n_scans;
    text << " per class).\n";

    std::vector<fs::path> files{out / "results.csv", out / "summary.csv", out / "table.txt"};
    io::write_text(files[0], results.str());
    io::write_text(files[1], summary.str());
    io::write_text(files[2], text.str());
    if (chart) {
        files.push_back(out / "chart.svg");
        io::write_text(files.back(), svg_chart(table));
    }
    return files;
}

}  // namespace protoseg::eval
