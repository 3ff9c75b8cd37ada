#include "protoseg/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <set>
#include <stdexcept>

#include "protoseg/io.hpp"

#ifndef PROTOSEG_VERSION
#define PROTOSEG_VERSION "0.1.0"
#endif

namespace protoseg::cli {

using nlohmann::json;

std::string version_stamp() { return PROTOSEG_VERSION; }

// ---------------------------------------------------------------- RunConfig

void RunConfig::resolve()
{
    encoder.init_seed = derive_seed(seed, 1);
    train.seed = derive_seed(seed, 2);
    ttt.seed = derive_seed(seed, 3);
    dataset.synth.seed = derive_seed(seed, 4);
    if (encoder.lora) encoder.lora->seed = derive_seed(seed, 5);
    if (evaluation.seeds.empty()) evaluation.seeds = {seed};
    inference.resolution = encoder.test_resolution;
    inference.window = train.window;
    inference.threshold = train.threshold;
    ttt.aug = train.augmentation;
}

void RunConfig::validate() const
{
    train.validate();
    dataset.synth.validate();
    ttt.aug.validate();
    if (!dataset.synthetic && dataset.manifest.empty()) {
        throw std::invalid_argument("dataset.manifest is required unless dataset.synthetic is true");
    }
    if (superpixels.scale <= 0 || superpixels.sigma < 0 || superpixels.min_size < 1) {
        throw std::invalid_argument("superpixels: scale must be > 0, sigma >= 0, min_size >= 1");
    }
    if (inference.sections < 1) throw std::invalid_argument("inference.sections must be >= 1");
    if (ttt.iterations < 0) throw std::invalid_argument("ttt.iterations must be >= 0");
    if (!(ttt.lr > 0)) throw std::invalid_argument("ttt.lr must be > 0");
    eval::ExperimentSpec spec;
    spec.organ_groups = evaluation.organ_groups;
    spec.variants = evaluation.variants;
    spec.seeds = evaluation.seeds;
    spec.validate();
}

json RunConfig::to_json() const
{
    json j;
    j["seed"] = seed;
    json synth_j = {{"patients", dataset.synth.patients},
                    {"height", dataset.synth.height},
                    {"width", dataset.synth.width},
                    {"depth", dataset.synth.depth},
                    {"noise_std", dataset.synth.noise_std},
                    {"distractor", dataset.synth.distractor}};
    j["dataset"] = {{"manifest", dataset.manifest.generic_string()},
                    {"synthetic", dataset.synthetic},
                    {"synth", synth_j}};
    j["superpixels"] = {{"scale", superpixels.scale}, {"sigma", superpixels.sigma}, {"min_size", superpixels.min_size}};
    j["encoder"] = model::to_json(encoder);
    j["train"] = train::to_json(train);
    j["inference"] = {{"sections", inference.sections},
                      {"connectivity", inference.connectivity},
                      {"cca_3d", inference.cca_3d}};
    j["ttt"] = {{"iterations", ttt.iterations},
                {"lr", ttt.lr},
                {"refresh_labels", ttt.refresh_labels},
                {"post_cca_labels", ttt.post_cca_labels}};
    json variants = json::array();
    for (auto v : evaluation.variants) variants.push_back(eval::to_string(v));
    j["evaluation"] = {{"organ_groups", evaluation.organ_groups}, {"variants", variants}, {"seeds", evaluation.seeds}};
    j["out"] = out.generic_string();
    j["cache"] = cache.generic_string();
    return j;
}

std::string RunConfig::digest() const
{
    json j = to_json();
    // Where things are written does not change what is computed.
    j.erase("out");
    j.erase("cache");
    return digest_hex(j.dump());
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (!allowed.count(k)) throw std::invalid_argument("unknown key '" + k + "' in " + where);
    }
}

fs::path resolve_path(const std::string& p, const fs::path& base)
{
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

}  // namespace

RunConfig run_config_from_json(const json& j, const fs::path& base_dir)
{
    reject_unknown(j,
                   {"seed", "dataset", "superpixels", "encoder", "train", "inference", "ttt", "evaluation", "out",
                    "cache"},
                   "config");
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    bool groups_given = false;
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        reject_unknown(d, {"manifest", "synthetic", "synth"}, "dataset");
        c.dataset.manifest = resolve_path(d.value("manifest", std::string()), base_dir);
        c.dataset.synthetic = d.value("synthetic", false);
        if (d.contains("synth")) {
            const auto& s = d["synth"];
            reject_unknown(s, {"patients", "height", "width", "depth", "noise_std", "distractor"}, "dataset.synth");
            auto& ss = c.dataset.synth;
            ss.patients = s.value("patients", ss.patients);
            ss.height = s.value("height", ss.height);
            ss.width = s.value("width", ss.width);
            ss.depth = s.value("depth", ss.depth);
            ss.noise_std = s.value("noise_std", ss.noise_std);
            ss.distractor = s.value("distractor", ss.distractor);
        }
    }
    if (j.contains("superpixels")) {
        const auto& s = j["superpixels"];
        reject_unknown(s, {"scale", "sigma", "min_size"}, "superpixels");
        c.superpixels.scale = s.value("scale", c.superpixels.scale);
        c.superpixels.sigma = s.value("sigma", c.superpixels.sigma);
        c.superpixels.min_size = s.value("min_size", c.superpixels.min_size);
    }
    if (j.contains("encoder")) {
        c.encoder = model::encoder_config_from_json(j["encoder"]);
        c.encoder.backbone_weights = resolve_path(c.encoder.backbone_weights.string(), base_dir);
    }
    if (j.contains("train")) c.train = train::train_config_from_json(j["train"]);
    if (j.contains("inference")) {
        const auto& s = j["inference"];
        reject_unknown(s, {"sections", "connectivity", "cca_3d"}, "inference");
        c.inference.sections = s.value("sections", c.inference.sections);
        c.inference.connectivity = s.value("connectivity", c.inference.connectivity);
        c.inference.cca_3d = s.value("cca_3d", c.inference.cca_3d);
    }
    if (j.contains("ttt")) {
        const auto& s = j["ttt"];
        reject_unknown(s, {"iterations", "lr", "refresh_labels", "post_cca_labels"}, "ttt");
        c.ttt.iterations = s.value("iterations", c.ttt.iterations);
        c.ttt.lr = s.value("lr", c.ttt.lr);
        c.ttt.refresh_labels = s.value("refresh_labels", c.ttt.refresh_labels);
        c.ttt.post_cca_labels = s.value("post_cca_labels", c.ttt.post_cca_labels);
    }
    if (j.contains("evaluation")) {
        const auto& s = j["evaluation"];
        reject_unknown(s, {"organ_groups", "variants", "seeds"}, "evaluation");
        if (s.contains("organ_groups")) {
            c.evaluation.organ_groups = s["organ_groups"].get<std::vector<std::vector<std::string>>>();
            groups_given = true;
        }
        if (s.contains("variants")) {
            c.evaluation.variants.clear();
            for (const auto& v : s["variants"]) c.evaluation.variants.push_back(eval::parse_variant(v.get<std::string>()));
        }
        if (s.contains("seeds")) c.evaluation.seeds = s["seeds"].get<std::vector<std::uint64_t>>();
    }
    // The synthetic set holds out its last organ by default.
    if (c.dataset.synthetic && !groups_given) c.evaluation.organ_groups = {{c.dataset.synth.organs.back().name}};
    if (j.contains("out")) c.out = resolve_path(j["out"].get<std::string>(), base_dir);
    if (j.contains("cache")) c.cache = resolve_path(j["cache"].get<std::string>(), base_dir);
    return c;
}

RunConfig load_run_config(const fs::path& path)
{
    const std::string text = io::read_text(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
        throw std::runtime_error(path.string() + ":" + std::to_string(line) + ": invalid JSON: " + e.what());
    }
    try {
        return run_config_from_json(j, path.parent_path());
    } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

std::vector<Fold> folds(const RunConfig& cfg)
{
    std::vector<Fold> out;
    for (std::size_t i = 0; i < cfg.evaluation.organ_groups.size(); ++i) {
        out.push_back({"fold" + std::to_string(i), cfg.evaluation.organ_groups[i]});
    }
    return out;
}

std::vector<Fold> select_folds(const RunConfig& cfg, const std::string& name)
{
    auto all = folds(cfg);
    if (name.empty()) return all;
    std::string names;
    for (const auto& f : all) {
        if (f.name == name) return {f};
        names += (names.empty() ? "" : ", ") + f.name;
    }
    throw std::invalid_argument("unknown fold '" + name + "' (available: " + names + ")");
}

fs::path cache_root(const RunConfig& cfg)
{
    if (const char* env = std::getenv("PROTOSEG_CACHE"); env && *env) return env;
    return cfg.cache.empty() ? cfg.out / "cache" : cfg.cache;
}

fs::path manifest_path(const RunConfig& cfg)
{
    if (!cfg.dataset.manifest.empty()) return cfg.dataset.manifest;
    if (cfg.dataset.synthetic) return cfg.out / "synth" / "manifest.json";
    throw std::invalid_argument("dataset.manifest is not set");
}

bool claim_output(const fs::path& dir, const RunConfig& cfg, bool force)
{
    const fs::path snap = dir / "run.json";
    const std::string digest = cfg.digest();
    if (fs::exists(snap)) {
        std::string previous;
        try {
            previous = json::parse(io::read_text(snap)).value("digest", std::string());
        } catch (const std::exception&) {
        }
        if (previous == digest && !force) return true;
        if (!force) {
            throw std::runtime_error(dir.string() + " holds outputs of a different config (digest " + previous +
                                     ", now " + digest + "); pass --force to overwrite");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    json j;
    j["version"] = version_stamp();
    j["digest"] = digest;
    j["config"] = cfg.to_json();
    io::write_text(snap, j.dump(2) + "\n");
    return false;
}

// ---------------------------------------------------------------- layout

namespace {

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

// base and cca share the base model.
eval::Variant model_of(eval::Variant v)
{
    return v == eval::Variant::slice_adapter ? eval::Variant::slice_adapter : eval::Variant::base;
}

}  // namespace

fs::path train_dir(const RunConfig& cfg, const Fold& fold, eval::Variant variant)
{
    const auto m = model_of(variant);
    return cfg.out / "train" / (m == eval::Variant::base ? fold.name : fold.name + "-" + eval::to_string(m));
}

fs::path prediction_path(const RunConfig& cfg, const Fold& fold, eval::Variant variant, std::uint64_t seed,
                         const std::string& class_name, const std::string& scan_id)
{
    if (variant == eval::Variant::ttt) {
        return cfg.out / "ttt" / fold.name / seed_dir(seed) / class_name / (scan_id + ".nii.gz");
    }
    return cfg.out / "infer" / fold.name / eval::to_string(variant) / seed_dir(seed) / class_name /
           (scan_id + ".nii.gz");
}

// ---------------------------------------------------------------- commands

namespace {

void say(const CommandOptions& opt, const std::string& s)
{
    if (opt.log) *opt.log << s << '\n' << std::flush;
}

struct Dataset {
    data::Manifest manifest;
    std::vector<data::VolumeScan> scans;
};

Dataset load_data(const RunConfig& cfg)
{
    Dataset d;
    const fs::path mp = manifest_path(cfg);
    if (cfg.dataset.synthetic && !fs::exists(mp)) {
        throw std::runtime_error("synthetic dataset not found at " + mp.string() + ": run synth (or preprocess) first");
    }
    d.manifest = data::read_manifest(mp);
    d.scans = data::load_dataset(d.manifest);
    return d;
}

json read_json(const fs::path& p) { return json::parse(io::read_text(p)); }

data::SuperpixelCache open_cache(const RunConfig& cfg)
{
    const fs::path marker = cfg.out / "preprocess" / "preprocess.json";
    if (!fs::exists(marker)) throw std::runtime_error("no preprocessing output in " + cfg.out.string() + ": run preprocess first");
    const json j = read_json(marker);
    return data::SuperpixelCache(cache_root(cfg), j.at("cache_key").get<std::string>());
}

std::vector<eval::Variant> model_variants(const RunConfig& cfg, const CommandOptions& opt)
{
    std::vector<eval::Variant> out;
    auto add = [&](eval::Variant v) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    };
    if (opt.variant) {
        if (*opt.variant == eval::Variant::ttt) {
            throw std::invalid_argument("variant ttt is produced by the ttt command");
        }
        add(*opt.variant);
        return out;
    }
    bool ttt = false;
    for (auto v : cfg.evaluation.variants) {
        if (v == eval::Variant::ttt) ttt = true;
        else add(v);
    }
    // ttt starts from saved predictions of the base model.
    if (ttt) add(cfg.ttt.post_cca_labels ? eval::Variant::cca : eval::Variant::base);
    return out;
}

model::EncoderConfig encoder_for(const RunConfig& cfg, eval::Variant v)
{
    model::EncoderConfig e = cfg.encoder;
    if (v == eval::Variant::slice_adapter) e.input_mode = model::InputMode::slice_adapter;
    return e;
}

train::TrainConfig train_for(const RunConfig& cfg, eval::Variant v)
{
    train::TrainConfig t = cfg.train;
    t.sampling.triplets = t.sampling.triplets || v == eval::Variant::slice_adapter ||
                          cfg.encoder.input_mode != model::InputMode::replicate;
    return t;
}

infer::InferenceConfig inference_for(const RunConfig& cfg, eval::Variant v)
{
    infer::InferenceConfig ic = cfg.inference;
    ic.cca = v != eval::Variant::base;
    ic.triplets = v == eval::Variant::slice_adapter || cfg.encoder.input_mode != model::InputMode::replicate;
    return ic;
}

model::ModelState load_final(const RunConfig& cfg, const Fold& fold, eval::Variant v)
{
    const fs::path dir = train_dir(cfg, fold, v);
    if (!fs::exists(dir / "checkpoints" / "FINAL")) {
        throw std::runtime_error("no trained model for " + fold.name + " (" + eval::to_string(model_of(v)) +
                                 ") in " + dir.string() + ": run train first");
    }
    return model::load_checkpoint(train::final_checkpoint(dir));
}

Volume<std::uint8_t> read_mask(const fs::path& p)
{
    const auto v = io::read_nifti(p);
    Volume<std::uint8_t> m(v.height(), v.width(), v.depth());
    for (std::size_t i = 0; i < v.size(); ++i) m.values()[i] = v.values()[i] != 0 ? 1 : 0;
    return m;
}

void write_pairs(const fs::path& dir,
                 const std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>>& pairs)
{
    json j = json::array();
    for (const auto& [q, s] : pairs) j.push_back({{"query", q->patient_id}, {"support", s->patient_id}});
    io::write_text(dir / "pairs.json", j.dump(2) + "\n");
}

// Reads predictions written by infer/ttt.
class StoredSegmenter : public eval::Segmenter {
public:
    StoredSegmenter(const RunConfig& cfg, Fold fold, eval::Variant v) : cfg_(cfg), fold_(std::move(fold)), v_(v) {}

    void prepare(const std::string&, std::uint64_t seed,
                 const std::vector<std::pair<const data::VolumeScan*, const data::VolumeScan*>>&) override
    {
        seed_ = seed;
    }

    Volume<std::uint8_t> segment(const data::VolumeScan& query, const data::VolumeScan&,
                                 const std::string& class_name) override
    {
        const fs::path p = prediction_path(cfg_, fold_, v_, seed_, class_name, query.patient_id);
        if (!fs::exists(p)) {
            throw std::runtime_error("no " + eval::to_string(v_) + " prediction for " + query.patient_id + " (" +
                                     class_name + ", " + fold_.name + "): run " +
                                     (v_ == eval::Variant::ttt ? "ttt" : "infer") + " first");
        }
        auto m = read_mask(p);
        if (!m.same_shape(query.height(), query.width(), query.depth())) {
            throw std::runtime_error(p.string() + ": prediction shape does not match scan " + query.patient_id);
        }
        return m;
    }

private:
    const RunConfig& cfg_;
    Fold fold_;
    eval::Variant v_;
    std::uint64_t seed_ = 0;
};

}  // namespace

fs::path cmd_synth(const RunConfig& cfg, const CommandOptions& opt)
{
    const fs::path dir = cfg.out / "synth";
    claim_output(dir, cfg, opt.force);
    const fs::path manifest = synth::write_dataset(cfg.dataset.synth, dir);
    say(opt, "synthetic dataset: " + std::to_string(cfg.dataset.synth.patients) + " scans -> " + manifest.string());
    return manifest;
}

PreprocessResult cmd_preprocess(const RunConfig& cfg, const CommandOptions& opt)
{
    if (cfg.dataset.synthetic && cfg.dataset.manifest.empty() && !fs::exists(manifest_path(cfg))) {
        cmd_synth(cfg, opt);
    }
    const fs::path dir = cfg.out / "preprocess";
    claim_output(dir, cfg, opt.force);
    const auto data = load_data(cfg);
    const std::string digest = data::dataset_digest(data.manifest);
    const Shape2 res = cfg.encoder.train_resolution;
    const std::string key = data::superpixel_cache_key(digest, cfg.superpixels, res);
    const data::SuperpixelCache cache(cache_root(cfg), key);

    PreprocessResult r;
    r.cache_dir = cache.directory();
    for (const auto& scan : data.scans) {
        const auto slices = data::reformat_and_resize(scan, res);
        data::SuperpixelStats st;
        data::prepare_superpixels(slices, cfg.superpixels, &cache, &st);
        r.slices += static_cast<int>(slices.size());
        r.computed += st.computed;
        r.cache_hits += st.cache_hits;
    }
    json j;
    j["dataset_digest"] = digest;
    j["cache_key"] = key;
    j["cache_dir"] = r.cache_dir.generic_string();
    j["resolution"] = {res.height, res.width};
    j["scans"] = data.scans.size();
    j["slices"] = r.slices;
    io::write_text(dir / "preprocess.json", j.dump(2) + "\n");
    say(opt, "superpixels: " + std::to_string(r.slices) + " slices, " + std::to_string(r.computed) + " computed, " +
                 std::to_string(r.cache_hits) + " cache hits (" + r.cache_dir.string() + ")");
    return r;
}

std::vector<train::TrainingRun> cmd_train(const RunConfig& cfg, const CommandOptions& opt)
{
    RunConfig c = cfg;
    if (opt.episodes) c.train.episodes = *opt.episodes;
    c.validate();
    const auto cache = open_cache(c);
    const auto data = load_data(c);
    claim_output(c.out / "train", c, opt.force);

    std::vector<train::TrainingRun> runs;
    for (const auto& fold : select_folds(c, opt.fold)) {
        std::vector<eval::Variant> models;
        for (auto v : model_variants(c, opt)) {
            if (std::find(models.begin(), models.end(), model_of(v)) == models.end()) models.push_back(model_of(v));
        }
        for (auto v : models) {
            const auto tc = train_for(c, v);
            const auto ec = encoder_for(c, v);
            auto pool = data::build_training_pool(data.scans, fold.test_classes, ec.train_resolution);
            if (pool.empty()) throw std::runtime_error(fold.name + ": no training slices left after removing test classes");
            data::SuperpixelStats st;
            const auto sps = data::prepare_superpixels(pool, c.superpixels, &cache, &st);
            const fs::path dir = train_dir(c, fold, v);
            say(opt, fold.name + " (" + eval::to_string(v) + "): " + std::to_string(pool.size()) +
                         " training slices, superpixel cache hits " + std::to_string(st.cache_hits) + "/" +
                         std::to_string(pool.size()));
            auto state = model::init_model(ec);
            train::TrainingOptions to;
            to.resume = true;
            to.run_config = c.to_json();
            to.log = [&](const std::string& s) { say(opt, "  " + s); };
            const int every = std::max(1, tc.episodes / 10);
            to.on_episode = [&](const train::LossReport& r) {
                if ((r.episode_id + 1) % every == 0 || r.episode_id + 1 == tc.episodes) {
                    char buf[160];
                    std::snprintf(buf, sizeof buf, "  episode %lld/%d seg %.4f reg %.4f total %.4f",
                                  static_cast<long long>(r.episode_id + 1), tc.episodes, r.seg_loss, r.reg_loss,
                                  r.total);
                    say(opt, buf);
                }
            };
            runs.push_back(train::run_training(pool, sps, state, tc, dir, to));
            say(opt, "  final checkpoint " + runs.back().final_checkpoint.string());
        }
    }
    return runs;
}

std::vector<fs::path> cmd_infer(const RunConfig& cfg, const CommandOptions& opt)
{
    const auto data = load_data(cfg);
    const auto variants = model_variants(cfg, opt);
    const auto selected = select_folds(cfg, opt.fold);
    // Fail before writing anything if a model is missing.
    for (const auto& fold : selected) {
        for (auto v : variants) load_final(cfg, fold, v);
    }
    claim_output(cfg.out / "infer", cfg, opt.force);
    std::vector<fs::path> written;
    for (const auto& fold : selected) {
        for (auto v : variants) {
            const auto state = load_final(cfg, fold, v);
            const auto ic = inference_for(cfg, v);
            for (const auto& cls : fold.test_classes) {
                for (auto seed : cfg.evaluation.seeds) {
                    const auto pairs = eval::pair_scans(data.scans, cls, seed);
                    for (const auto& [q, s] : pairs) {
                        const auto pred = infer::segment_volume(*q, *s, cls, state, ic);
                        const fs::path p = prediction_path(cfg, fold, v, seed, cls, q->patient_id);
                        fs::create_directories(p.parent_path());
                        io::write_nifti(p, pred.mask);
                        written.push_back(p);
                    }
                    write_pairs(prediction_path(cfg, fold, v, seed, cls, "x").parent_path(), pairs);
                    say(opt, fold.name + " " + eval::to_string(v) + " " + cls + " seed " + std::to_string(seed) + ": " +
                                 std::to_string(pairs.size()) + " scans");
                }
            }
        }
    }
    return written;
}

std::vector<fs::path> cmd_ttt(const RunConfig& cfg, const CommandOptions& opt)
{
    if (opt.variant && *opt.variant != eval::Variant::ttt) {
        throw std::invalid_argument("the ttt command only produces variant ttt");
    }
    const auto data = load_data(cfg);
    const auto selected = select_folds(cfg, opt.fold);
    const auto source = cfg.ttt.post_cca_labels ? eval::Variant::cca : eval::Variant::base;
    for (const auto& fold : selected) {
        for (const auto& cls : fold.test_classes) {
            for (auto seed : cfg.evaluation.seeds) {
                for (const auto& [q, s] : eval::pair_scans(data.scans, cls, seed)) {
                    (void)s;
                    if (!fs::exists(prediction_path(cfg, fold, source, seed, cls, q->patient_id))) {
                        throw std::runtime_error("no saved " + eval::to_string(source) + " predictions for " +
                                                 q->patient_id + " (" + cls + ", " + fold.name +
                                                 "): run infer --variant " + eval::to_string(source) + " first");
                    }
                }
            }
        }
    }
    claim_output(cfg.out / "ttt", cfg, opt.force);
    const auto ic = inference_for(cfg, eval::Variant::cca);
    std::vector<fs::path> written;
    for (const auto& fold : selected) {
        const auto base = load_final(cfg, fold, eval::Variant::base);
        for (const auto& cls : fold.test_classes) {
            for (auto seed : cfg.evaluation.seeds) {
                const auto pairs = eval::pair_scans(data.scans, cls, seed);
                const fs::path dir = cfg.out / "ttt" / fold.name / ("seed" + std::to_string(seed)) / cls;
                const infer::LabelStore labels(dir / "labels");
                std::vector<infer::TttSlice> pool;
                for (const auto& [q, s] : pairs) {
                    (void)s;
                    infer::VolumePrediction vp;
                    vp.mask = read_mask(prediction_path(cfg, fold, source, seed, cls, q->patient_id));
                    const auto zs = q->slices_with(cls);
                    for (int z = zs.front(); z <= zs.back(); ++z) vp.slices.push_back(z);
                    for (auto& sl : infer::ttt_pool_from(*q, vp, ic)) {
                        labels.save(sl.source, sl.z_index, sl.prediction);
                        pool.push_back(std::move(sl));
                    }
                }
                infer::TttReport rep;
                const auto adapted = infer::test_time_train(base, pool, cfg.ttt, cfg.train, &rep);
                model::save_checkpoint(dir / "model", adapted, cfg.to_json());
                if (!cfg.ttt.refresh_labels) {
                    say(opt, fold.name + " ttt " + cls + ": adapted model saved, re-segmentation disabled");
                    continue;
                }
                for (const auto& [q, s] : pairs) {
                    const auto pred = infer::segment_volume(*q, *s, cls, adapted, ic);
                    const fs::path p = prediction_path(cfg, fold, eval::Variant::ttt, seed, cls, q->patient_id);
                    io::write_nifti(p, pred.mask);
                    written.push_back(p);
                }
                write_pairs(dir, pairs);
                say(opt, fold.name + " ttt " + cls + " seed " + std::to_string(seed) + ": " +
                             std::to_string(rep.episodes) + " episodes over " + std::to_string(pool.size()) +
                             " slices (" + std::to_string(rep.skipped_empty) + " empty skipped)");
            }
        }
    }
    return written;
}

eval::MetricsTable cmd_eval(const RunConfig& cfg, const CommandOptions& opt)
{
    const auto data = load_data(cfg);
    const auto selected = select_folds(cfg, opt.fold);
    std::vector<eval::Variant> variants = cfg.evaluation.variants;
    if (opt.variant) variants = {*opt.variant};

    eval::ExperimentSpec spec;
    spec.dataset = data.manifest.dataset;
    spec.variants = variants;
    spec.seeds = cfg.evaluation.seeds;
    spec.organ_groups.clear();
    std::vector<eval::FoldArtifacts> artifacts;
    for (const auto& fold : selected) {
        spec.organ_groups.push_back(fold.test_classes);
        eval::FoldArtifacts fa;
        fa.name = fold.name;
        fa.test_classes = fold.test_classes;
        std::set<eval::Variant> models;
        for (auto v : variants) {
            fa.segmenters[v] = std::make_shared<StoredSegmenter>(cfg, fold, v);
            models.insert(model_of(v));
        }
        for (auto m : models) {
            const fs::path dir = train_dir(cfg, fold, m);
            if (!fs::exists(dir / "training_slices.json")) {
                throw std::runtime_error("no training record for " + fold.name + " in " + dir.string() +
                                         ": run train first");
            }
            for (auto& p : train::read_training_slices(dir)) fa.training_slices.push_back(p);
        }
        // Every prediction must exist before anything is scored.
        for (auto v : variants) {
            for (const auto& cls : fold.test_classes) {
                for (auto seed : spec.seeds) {
                    for (const auto& [q, s] : eval::pair_scans(data.scans, cls, seed)) {
                        (void)s;
                        if (!fs::exists(prediction_path(cfg, fold, v, seed, cls, q->patient_id))) {
                            throw std::runtime_error("no " + eval::to_string(v) + " predictions for " + fold.name +
                                                     "/" + cls + ": run " +
                                                     (v == eval::Variant::ttt ? "ttt" : "infer") + " first");
                        }
                    }
                }
            }
        }
        artifacts.push_back(std::move(fa));
    }
    claim_output(cfg.out / "eval", cfg, opt.force);
    auto table = eval::run_experiment(spec, data.scans, artifacts);
    eval::report(table, cfg.out / "eval");
    if (opt.log) *opt.log << io::read_text(cfg.out / "eval" / "table.txt");
    return table;
}

}  // namespace protoseg::cli
