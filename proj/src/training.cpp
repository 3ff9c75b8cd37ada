#include "protoseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "protoseg/io.hpp"

namespace protoseg::train {

using nlohmann::json;

Real OptimizerSpec::lr_at(std::int64_t step) const
{
    if (decay_every <= 0) return lr;
    return lr * std::pow(decay_rate, static_cast<Real>(step / decay_every));
}

void TrainConfig::validate() const
{
    if (episodes <= 0) throw std::invalid_argument("train.episodes must be > 0");
    if (!(optimizer.lr >= 0) || !std::isfinite(optimizer.lr)) throw std::invalid_argument("train.lr must be >= 0");
    if (optimizer.kind != "sgd" && optimizer.kind != "adam") {
        throw std::invalid_argument("train.optimizer must be sgd or adam, got '" + optimizer.kind + "'");
    }
    if (!(lambda_reg >= 0)) throw std::invalid_argument("train.lambda_reg must be >= 0");
    if (checkpoint_every <= 0) throw std::invalid_argument("train.checkpoint_every must be > 0");
    if (grad_clip && !(*grad_clip > 0)) throw std::invalid_argument("train.grad_clip must be > 0");
    if (window.height <= 0 || window.width <= 0) throw std::invalid_argument("pooling window must be positive");
    if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument("coverage threshold must be in [0,1]");
    augmentation.validate();
}

namespace {

json range_json(const data::Range& r) { return json::array({r.lo, r.hi}); }

data::Range range_from(const json& j, data::Range def)
{
    if (j.is_null()) return def;
    return {j.at(0).get<Real>(), j.at(1).get<Real>()};
}

}  // namespace

json to_json(const TrainConfig& c)
{
    const auto& a = c.augmentation;
    json j;
    j["episodes"] = c.episodes;
    j["optimizer"] = {{"kind", c.optimizer.kind},           {"lr", c.optimizer.lr},
                      {"momentum", c.optimizer.momentum},   {"weight_decay", c.optimizer.weight_decay},
                      {"decay_every", c.optimizer.decay_every}, {"decay_rate", c.optimizer.decay_rate},
                      {"beta2", c.optimizer.beta2},         {"adam_eps", c.optimizer.adam_eps}};
    j["lambda_reg"] = c.lambda_reg;
    j["alignment"] = c.alignment;
    j["grad_clip"] = c.grad_clip ? json(*c.grad_clip) : json();
    j["seed"] = c.seed;
    j["checkpoint_every"] = c.checkpoint_every;
    j["window"] = json::array({c.window.height, c.window.width});
    j["threshold"] = c.threshold;
    j["augmentation"] = {
        {"rotation_deg", range_json(a.affine.rotation_deg)},
        {"scale", range_json(a.affine.scale)},
        {"shear_deg", range_json(a.affine.shear_deg)},
        {"translate", range_json(a.affine.translate)},
        {"elastic", {{"enabled", a.elastic.enabled}, {"magnitude", a.elastic.magnitude}, {"sigma", a.elastic.sigma}}},
        {"gamma", range_json(a.intensity.gamma)},
        {"noise_std", a.intensity.noise_std},
        {"brightness", range_json(a.intensity.brightness)},
        {"contrast", range_json(a.intensity.contrast)},
    };
    j["max_resample"] = c.sampling.max_resample;
    j["min_pseudo_label_pixels"] = c.sampling.min_pseudo_label_pixels;
    return j;
}

TrainConfig train_config_from_json(const json& j)
{
    TrainConfig c;
    c.episodes = j.value("episodes", c.episodes);
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        c.optimizer.kind = o.value("kind", c.optimizer.kind);
        c.optimizer.lr = o.value("lr", c.optimizer.lr);
        c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
        c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
        c.optimizer.decay_every = o.value("decay_every", c.optimizer.decay_every);
        c.optimizer.decay_rate = o.value("decay_rate", c.optimizer.decay_rate);
        c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
        c.optimizer.adam_eps = o.value("adam_eps", c.optimizer.adam_eps);
    }
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.alignment = j.value("alignment", c.alignment);
    if (j.contains("grad_clip") && !j["grad_clip"].is_null()) c.grad_clip = j["grad_clip"].get<Real>();
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("window")) c.window = {j["window"].at(0).get<int>(), j["window"].at(1).get<int>()};
    c.threshold = j.value("threshold", c.threshold);
    if (j.contains("augmentation")) {
        const auto& a = j["augmentation"];
        auto& s = c.augmentation;
        auto get = [&](const char* key) { return a.contains(key) ? a[key] : json(); };
        s.affine.rotation_deg = range_from(get("rotation_deg"), s.affine.rotation_deg);
        s.affine.scale = range_from(get("scale"), s.affine.scale);
        s.affine.shear_deg = range_from(get("shear_deg"), s.affine.shear_deg);
        s.affine.translate = range_from(get("translate"), s.affine.translate);
        if (a.contains("elastic")) {
            s.elastic.enabled = a["elastic"].value("enabled", s.elastic.enabled);
            s.elastic.magnitude = a["elastic"].value("magnitude", s.elastic.magnitude);
            s.elastic.sigma = a["elastic"].value("sigma", s.elastic.sigma);
        }
        s.intensity.gamma = range_from(get("gamma"), s.intensity.gamma);
        s.intensity.noise_std = a.value("noise_std", s.intensity.noise_std);
        s.intensity.brightness = range_from(get("brightness"), s.intensity.brightness);
        s.intensity.contrast = range_from(get("contrast"), s.intensity.contrast);
    }
    c.sampling.max_resample = j.value("max_resample", c.sampling.max_resample);
    c.sampling.min_pseudo_label_pixels = j.value("min_pseudo_label_pixels", c.sampling.min_pseudo_label_pixels);
    return c;
}

// -------------------------------------------------------------------- losses

Tensor one_hot(const Mask& mask)
{
    const int h = mask.height(), w = mask.width();
    const std::size_t n = mask.size();
    Tensor t({2, h, w});
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = mask[i];
        if (v > 1) throw std::invalid_argument("segmentation target must be binary, found value " + std::to_string(v));
        t[v * n + i] = 1;
    }
    return t;
}

ad::Var segmentation_loss(const ad::Var& probs, const Mask& target)
{
    if (probs.value().rank() != 3 || probs.dim(0) != 2) {
        throw std::invalid_argument("segmentation_loss: expected [2,H,W] probabilities, got " + probs.value().shape_str());
    }
    if (probs.dim(1) != target.height() || probs.dim(2) != target.width()) {
        throw std::invalid_argument("segmentation_loss: prediction " + std::to_string(probs.dim(1)) + "x" +
                                    std::to_string(probs.dim(2)) + " vs target " + target.shape().str());
    }
    return ad::cross_entropy(probs, one_hot(target), kLogEps);
}

Real segmentation_loss(const sim::SegmentationResult& pred, const Mask& target)
{
    ad::NoGradGuard guard;
    return segmentation_loss(ad::constant(pred.probabilities), target).value()[0];
}

namespace {

Mask foreground_of(const Tensor& probs)
{
    const LabelMap labels = sim::argmax_classes(probs);
    Mask m(labels.height(), labels.width());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels[i] == 1 ? 1 : 0;
    return m;
}

bool any_of(const Mask& m, std::uint8_t v)
{
    return std::find(m.values().begin(), m.values().end(), v) != m.values().end();
}

ad::Var zero_scalar() { return ad::constant(Tensor({1}, 0.0)); }

}  // namespace

AlignmentResult alignment_loss(const ad::Var& query_probs, const ad::Var& query_features,
                               const ad::Var& support_features, const Mask& support_label,
                               proto::PoolingWindow window, Real threshold)
{
    AlignmentResult out;
    const Mask pred = foreground_of(query_probs.value());
    if (!any_of(pred, 1)) {
        out.skipped = true;
        out.reason = "query prediction is all background";
    } else if (!any_of(pred, 0)) {
        out.skipped = true;
        out.reason = "query prediction is all foreground";
    }
    if (out.skipped) {
        out.loss = zero_scalar();
        return out;
    }
    const Shape2 qgrid{query_features.dim(1), query_features.dim(2)};
    const Image cover = model::coverage_on_grid(pred, qgrid);
    const auto protos = proto::assemble_prototype_set({{query_features, proto::binary_class_weights(cover)}},
                                                      window, threshold);
    const auto pred_support = sim::segment_query(protos, support_features, support_label.shape());
    out.loss = segmentation_loss(pred_support.probs, support_label);
    return out;
}

EpisodeForward episode_forward(const std::vector<SupportView>& support, const ad::Var& query_features,
                               Shape2 query_shape, const Mask& query_label, const TrainConfig& cfg)
{
    if (support.empty()) throw std::invalid_argument("episode has no support examples");
    std::vector<proto::SupportFeatures> sf;
    for (const auto& s : support) {
        const Shape2 grid{s.features.dim(1), s.features.dim(2)};
        sf.push_back({s.features, proto::binary_class_weights(model::coverage_on_grid(s.mask, grid))});
    }
    EpisodeForward f;
    const auto protos = proto::assemble_prototype_set(sf, cfg.window, cfg.threshold);
    f.query = sim::segment_query(protos, query_features, query_shape);
    f.seg = segmentation_loss(f.query.probs, query_label);
    f.reg = zero_scalar();
    if (cfg.alignment) {
        auto align = [&] {
            return alignment_loss(f.query.probs, query_features, support.front().features, support.front().mask,
                                  cfg.window, cfg.threshold);
        };
        AlignmentResult a;
        if (cfg.lambda_reg == 0) {
            // Reported only; keeps the update identical to a run without alignment.
            ad::NoGradGuard guard;
            a = align();
            a.loss = ad::constant(a.loss.value());
        } else {
            a = align();
        }
        f.reg = a.loss;
        f.alignment_skipped = a.skipped;
        f.skip_reason = a.reason;
    }
    f.total = cfg.lambda_reg == 0 || !cfg.alignment ? f.seg : ad::add_scalars(f.seg, ad::scale(f.reg, cfg.lambda_reg));
    return f;
}

// ----------------------------------------------------------------- optimizer

void optimizer_step(model::ModelState& state, const OptimizerSpec& opt, std::optional<Real> grad_clip)
{
    const Real lr = opt.lr_at(state.step);
    Real clip_scale = 1;
    if (grad_clip) {
        Real norm2 = 0;
        for (auto& [name, v] : state.params) {
            if (!v.requires_grad() || !v.has_grad()) continue;
            for (Real g : v.grad().values()) norm2 += g * g;
        }
        const Real norm = std::sqrt(norm2);
        if (norm > *grad_clip) clip_scale = *grad_clip / norm;
    }
    const bool adam = opt.kind == "adam";
    const Real t = static_cast<Real>(state.step + 1);
    for (auto& [name, v] : state.params) {
        if (!v.requires_grad()) continue;
        Tensor& w = v.mutable_value();
        const bool has = v.has_grad();
        auto& m = state.momentum[name];
        if (m.empty()) m = Tensor(w.shape());
        if (adam) {
            auto& s2 = state.second[name];
            if (s2.empty()) s2 = Tensor(w.shape());
            const Real b1 = opt.momentum, b2 = opt.beta2;
            const Real c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const Real g = (has ? v.grad()[i] * clip_scale : 0) + opt.weight_decay * w[i];
                m[i] = b1 * m[i] + (1 - b1) * g;
                s2[i] = b2 * s2[i] + (1 - b2) * g * g;
                w[i] -= lr * (m[i] / c1) / (std::sqrt(s2[i] / c2) + opt.adam_eps);
            }
        } else {
            for (std::size_t i = 0; i < w.size(); ++i) {
                const Real g = (has ? v.grad()[i] * clip_scale : 0) + opt.weight_decay * w[i];
                m[i] = opt.momentum * m[i] + g;
                w[i] -= lr * m[i];
            }
        }
    }
    ++state.step;
}

LossReport train_episode(model::ModelState& state, const data::Episode& episode, const TrainConfig& cfg)
{
    if (!episode.query_label) throw std::invalid_argument("train_episode: episode has no query label");
    if (episode.support.empty()) throw std::invalid_argument("train_episode: episode has no support");
    const auto start = std::chrono::steady_clock::now();
    const std::int64_t id = state.step;
    state.zero_grad();
    std::vector<SupportView> support;
    for (const auto& s : episode.support) support.push_back({model::encode(s.image, state).values, s.mask});
    const auto q = model::encode(episode.query_image, state);
    const auto f = episode_forward(support, q.values, data::input_shape(episode.query_image), *episode.query_label, cfg);

    LossReport r;
    r.episode_id = id;
    r.seg_loss = f.seg.value()[0];
    r.reg_loss = f.reg.value()[0];
    r.total = f.total.value()[0];
    r.alignment_skipped = f.alignment_skipped;
    if (!std::isfinite(r.seg_loss) || !std::isfinite(r.reg_loss) || !std::isfinite(r.total)) {
        state.zero_grad();
        throw NonFiniteLoss(id, "non-finite loss (seg " + std::to_string(r.seg_loss) + ", reg " +
                                    std::to_string(r.reg_loss) + ")");
    }
    ad::backward(f.total);
    for (const auto& [name, v] : state.params) {
        if (v.requires_grad() && v.has_grad() && !v.grad().all_finite()) {
            state.zero_grad();
            throw NonFiniteLoss(id, "non-finite gradient for " + name);
        }
    }
    optimizer_step(state, cfg.optimizer, cfg.grad_clip);
    state.zero_grad();
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

// ------------------------------------------------------------------ the loop

namespace {

std::string step_name(std::int64_t step)
{
    std::ostringstream s;
    s << "step-" << std::setw(6) << std::setfill('0') << step;
    return s.str();
}

void truncate_metrics(const fs::path& csv, std::int64_t keep_below)
{
    if (!fs::exists(csv)) return;
    std::ifstream in(csv);
    std::string line, kept;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            kept += line + "\n";
            header = false;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        if (std::stoll(line.substr(0, comma)) < keep_below) kept += line + "\n";
    }
    in.close();
    io::write_text(csv, kept);
}

void write_slices(const fs::path& path, const std::set<std::pair<std::string, int>>& used)
{
    json j = json::array();
    for (const auto& [src, z] : used) j.push_back({{"patient_id", src}, {"z", z}});
    io::write_text(path, j.dump(1) + "\n");
}

}  // namespace

std::optional<fs::path> latest_checkpoint(const fs::path& out)
{
    const fs::path dir = out / "checkpoints";
    if (!fs::exists(dir)) return std::nullopt;
    std::optional<fs::path> best;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("step-", 0) != 0 || !fs::exists(e.path() / "state.json")) continue;
        if (!best || name > best->filename().string()) best = e.path();
    }
    return best;
}

fs::path final_checkpoint(const fs::path& out)
{
    const fs::path tag = out / "checkpoints" / "FINAL";
    if (!fs::exists(tag)) throw std::runtime_error("no final checkpoint under " + out.string() + " (run train first)");
    std::string name = io::read_text(tag);
    while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
    return out / "checkpoints" / name;
}

std::vector<std::pair<std::string, int>> read_training_slices(const fs::path& out)
{
    const fs::path p = out / "training_slices.json";
    if (!fs::exists(p)) throw std::runtime_error("no training slice log at " + p.string() + " (run train first)");
    std::vector<std::pair<std::string, int>> v;
    for (const auto& e : json::parse(io::read_text(p))) v.emplace_back(e.at("patient_id").get<std::string>(), e.at("z").get<int>());
    return v;
}

TrainingRun run_training(const std::vector<data::SliceSample>& pool,
                         const std::vector<data::SuperpixelMap>& superpixels, model::ModelState& state,
                         const TrainConfig& cfg, const fs::path& out, const TrainingOptions& options)
{
    cfg.validate();
    if (pool.empty()) throw std::invalid_argument("run_training: empty training pool");
    TrainingRun run;
    auto log = [&](const std::string& s) {
        if (options.log) options.log(s);
    };
    fs::create_directories(out / "checkpoints");
    const fs::path csv = out / "metrics.csv";
    const fs::path slices_path = out / "training_slices.json";
    std::set<std::pair<std::string, int>> used;

    if (options.resume) {
        if (const auto ckpt = latest_checkpoint(out)) {
            state = model::load_checkpoint(*ckpt);
            run.resumed_from = state.step;
            truncate_metrics(csv, state.step);
            if (fs::exists(slices_path)) {
                for (const auto& p : read_training_slices(out)) used.insert(p);
            }
            log("resumed from " + ckpt->string() + " at step " + std::to_string(state.step));
        }
    }
    if (!fs::exists(csv) || run.resumed_from < 0) io::write_text(csv, "episode_id,seg_loss,reg_loss,total,wall_time\n");

    std::ofstream metrics(csv, std::ios::app);
    if (!metrics) throw std::runtime_error("cannot append to " + csv.string());
    metrics << std::setprecision(10);
    const auto start = std::chrono::steady_clock::now();
    int skipped = 0;
    while (state.step < cfg.episodes) {
        const std::int64_t id = state.step;
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(id)));
        const auto ep = data::sample_training_episode(pool, superpixels, cfg.augmentation, rng, cfg.sampling);
        used.emplace(ep.source, ep.z_index);
        LossReport r = train_episode(state, ep, cfg);
        r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (r.alignment_skipped) ++skipped;
        metrics << r.episode_id << ',' << r.seg_loss << ',' << r.reg_loss << ',' << r.total << ',' << r.wall_time << '\n';
        if (!metrics) throw std::runtime_error("episode " + std::to_string(id) + ": failed writing " + csv.string());
        metrics.flush();
        run.reports.push_back(r);
        if (options.on_episode) options.on_episode(r);
        if (state.step % cfg.checkpoint_every == 0 || state.step == cfg.episodes) {
            const fs::path dir = out / "checkpoints" / step_name(state.step);
            try {
                model::save_checkpoint(dir, state, options.run_config);
                write_slices(slices_path, used);
            } catch (const std::exception& e) {
                throw std::runtime_error("episode " + std::to_string(id) + ": checkpoint failed: " + e.what());
            }
            run.checkpoints.push_back(dir);
        }
    }
    // The last step always has a checkpoint; FINAL tags it.
    const fs::path final_dir = out / "checkpoints" / step_name(state.step);
    if (!fs::exists(final_dir / "state.json")) model::save_checkpoint(final_dir, state, options.run_config);
    io::write_text(out / "checkpoints" / "FINAL", final_dir.filename().string() + "\n");
    write_slices(slices_path, used);
    run.final_checkpoint = final_dir;
    if (skipped > 0) log("alignment term skipped in " + std::to_string(skipped) + " episodes (degenerate query prediction)");
    return run;
}

}  // namespace protoseg::train
