#include "protoseg/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "protoseg/io.hpp"
#include "protoseg/random.hpp"

namespace protoseg::model {

using nlohmann::json;

Backbone parse_backbone(const std::string& s)
{
    if (s == "dilated_cnn" || s == "DILATED_CNN" || s == "cnn") return Backbone::dilated_cnn;
    if (s == "vit" || s == "FOUNDATION_VIT_LARGE" || s == "dinov2") return Backbone::vit;
    throw std::invalid_argument("unknown backbone '" + s + "' (expected dilated_cnn or vit)");
}

InputMode parse_input_mode(const std::string& s)
{
    if (s == "replicate" || s == "REPLICATE_1SLICE") return InputMode::replicate;
    if (s == "stack3" || s == "STACK_3SLICE") return InputMode::stack3;
    if (s == "slice_adapter" || s == "SLICE_ADAPTER") return InputMode::slice_adapter;
    throw std::invalid_argument("unknown input mode '" + s +
                                "' (expected replicate, stack3 or slice_adapter)");
}

std::string to_string(Backbone b) { return b == Backbone::vit ? "vit" : "dilated_cnn"; }

std::string to_string(InputMode m)
{
    switch (m) {
    case InputMode::replicate: return "replicate";
    case InputMode::stack3: return "stack3";
    case InputMode::slice_adapter: return "slice_adapter";
    }
    return "?";
}

int EncoderConfig::stride() const { return backbone == Backbone::vit ? vit.patch : 4; }

int EncoderConfig::feature_dim() const { return backbone == Backbone::vit ? vit.dim : cnn.dim; }

Shape2 EncoderConfig::grid_for(Shape2 input) const
{
    if (feature_upsample) return *feature_upsample;
    return {std::max(1, (input.height + 3) / 4), std::max(1, (input.width + 3) / 4)};
}

// ------------------------------------------------------------------ JSON

namespace {

json shape_json(Shape2 s) { return json::array({s.height, s.width}); }

Shape2 shape_from(const json& j)
{
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("resolution must be [height, width]");
    return {j[0].get<int>(), j[1].get<int>()};
}

}  // namespace

json to_json(const EncoderConfig& c)
{
    json j;
    j["backbone"] = to_string(c.backbone);
    j["input_mode"] = to_string(c.input_mode);
    j["train_resolution"] = shape_json(c.train_resolution);
    j["test_resolution"] = shape_json(c.test_resolution);
    if (c.feature_upsample) j["feature_upsample"] = shape_json(*c.feature_upsample);
    j["pad_to_stride"] = c.pad_to_stride;
    j["cnn"] = {{"channels1", c.cnn.channels1}, {"channels2", c.cnn.channels2}, {"dim", c.cnn.dim}};
    j["vit"] = {{"patch", c.vit.patch}, {"dim", c.vit.dim},       {"depth", c.vit.depth},
                {"heads", c.vit.heads}, {"mlp_hidden", c.vit.mlp_hidden}, {"pos_grid", c.vit.pos_grid},
                {"ln_eps", c.vit.ln_eps}};
    if (c.lora) {
        j["lora"] = {{"rank", c.lora->rank},
                     {"alpha", c.lora->alpha},
                     {"projections", c.lora->projections},
                     {"blocks", c.lora->blocks},
                     {"seed", c.lora->seed}};
    }
    j["backbone_weights"] = c.backbone_weights.string();
    j["backbone_digest"] = c.backbone_digest;
    j["init_seed"] = c.init_seed;
    return j;
}

EncoderConfig encoder_config_from_json(const json& j)
{
    EncoderConfig c;
    if (j.contains("backbone")) c.backbone = parse_backbone(j["backbone"].get<std::string>());
    if (j.contains("input_mode")) c.input_mode = parse_input_mode(j["input_mode"].get<std::string>());
    if (j.contains("train_resolution")) c.train_resolution = shape_from(j["train_resolution"]);
    if (j.contains("test_resolution")) c.test_resolution = shape_from(j["test_resolution"]);
    if (j.contains("feature_upsample") && !j["feature_upsample"].is_null()) {
        c.feature_upsample = shape_from(j["feature_upsample"]);
    }
    c.pad_to_stride = j.value("pad_to_stride", c.pad_to_stride);
    if (j.contains("cnn")) {
        const auto& n = j["cnn"];
        c.cnn.channels1 = n.value("channels1", c.cnn.channels1);
        c.cnn.channels2 = n.value("channels2", c.cnn.channels2);
        c.cnn.dim = n.value("dim", c.cnn.dim);
    }
    if (j.contains("vit")) {
        const auto& v = j["vit"];
        c.vit.patch = v.value("patch", c.vit.patch);
        c.vit.dim = v.value("dim", c.vit.dim);
        c.vit.depth = v.value("depth", c.vit.depth);
        c.vit.heads = v.value("heads", c.vit.heads);
        c.vit.mlp_hidden = v.value("mlp_hidden", c.vit.mlp_hidden);
        c.vit.pos_grid = v.value("pos_grid", c.vit.pos_grid);
        c.vit.ln_eps = v.value("ln_eps", c.vit.ln_eps);
    }
    if (j.contains("lora") && !j["lora"].is_null()) {
        LowRankAdapterSpec s;
        const auto& l = j["lora"];
        s.rank = l.value("rank", s.rank);
        s.alpha = l.value("alpha", s.alpha);
        s.projections = l.value("projections", s.projections);
        s.blocks = l.value("blocks", s.blocks);
        s.seed = l.value("seed", s.seed);
        c.lora = s;
    }
    c.backbone_weights = j.value("backbone_weights", std::string());
    c.backbone_digest = j.value("backbone_digest", std::string());
    c.init_seed = j.value("init_seed", c.init_seed);
    return c;
}

// ------------------------------------------------------------- ModelState

const ad::Var& ModelState::param(const std::string& name) const
{
    const auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ModelState::trainable_names() const
{
    std::vector<std::string> out;
    for (const auto& [name, v] : params) {
        if (v.requires_grad()) out.push_back(name);
    }
    return out;
}

std::size_t ModelState::trainable_count() const
{
    std::size_t n = 0;
    for (const auto& [name, v] : params) {
        if (v.requires_grad()) n += v.value().size();
    }
    return n;
}

namespace {

std::string digest_params(const std::map<std::string, ad::Var>& params, int which)
{
    // which: 0 = frozen only, 1 = all
    Fnv1a h;
    for (const auto& [name, v] : params) {
        if (which == 0 && v.requires_grad()) continue;
        h.update(name);
        const auto& shape = v.value().shape();
        h.update(shape.data(), shape.size() * sizeof(int));
        h.update(v.value().data(), v.value().size() * sizeof(Real));
    }
    return h.hex();
}

}  // namespace

std::string ModelState::frozen_digest() const { return digest_params(params, 0); }
std::string ModelState::weights_digest() const { return digest_params(params, 1); }

ModelState ModelState::clone() const
{
    ModelState out;
    out.config = config;
    for (const auto& [name, v] : params) out.params.emplace(name, ad::Var(v.value(), v.requires_grad()));
    out.momentum = momentum;
    out.second = second;
    out.step = step;
    return out;
}

void ModelState::zero_grad()
{
    for (auto& [name, v] : params) v.zero_grad();
}

// ----------------------------------------------------------- initialization

namespace {

Tensor random_normal(std::vector<int> shape, Real stddev, Rng& rng)
{
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = stddev * normal(rng);
    return t;
}

void add_conv(ModelState& s, const std::string& name, int out_c, int in_c, int k, Rng& rng, bool train)
{
    const Real fan_in = static_cast<Real>(in_c) * k * k;
    s.params.emplace(name + ".weight", ad::Var(random_normal({out_c, in_c, k, k}, std::sqrt(2.0 / fan_in), rng), train));
    s.params.emplace(name + ".bias", ad::Var(Tensor({out_c}), train));
}

void init_cnn(ModelState& s, Rng& rng)
{
    const auto& c = s.config.cnn;
    if (c.channels1 <= 0 || c.channels2 <= 0 || c.dim <= 0) {
        throw std::invalid_argument("cnn channel counts must be positive");
    }
    add_conv(s, "cnn.conv1", c.channels1, 3, 3, rng, true);
    add_conv(s, "cnn.conv2", c.channels2, c.channels1, 3, rng, true);
    add_conv(s, "cnn.conv3", c.channels2, c.channels2, 3, rng, true);
    add_conv(s, "cnn.conv4", c.channels2, c.channels2, 3, rng, true);
    add_conv(s, "cnn.proj", c.dim, c.channels2, 1, rng, true);
}

void check_vit_spec(const VitSpec& v)
{
    if (v.patch <= 0 || v.dim <= 0 || v.depth <= 0 || v.heads <= 0 || v.mlp_hidden <= 0 || v.pos_grid <= 0) {
        throw std::invalid_argument("vit dimensions must be positive");
    }
    if (v.dim % v.heads != 0) throw std::invalid_argument("vit dim must be divisible by heads");
}

// DINOv2 names and shapes for a given spec.
std::vector<std::pair<std::string, std::vector<int>>> vit_layout(const VitSpec& v)
{
    const int d = v.dim;
    std::vector<std::pair<std::string, std::vector<int>>> out{
        {"cls_token", {1, 1, d}},
        {"pos_embed", {1, 1 + v.pos_grid * v.pos_grid, d}},
        {"patch_embed.proj.weight", {d, 3, v.patch, v.patch}},
        {"patch_embed.proj.bias", {d}},
        {"norm.weight", {d}},
        {"norm.bias", {d}},
    };
    for (int i = 0; i < v.depth; ++i) {
        const std::string b = "blocks." + std::to_string(i) + ".";
        out.push_back({b + "norm1.weight", {d}});
        out.push_back({b + "norm1.bias", {d}});
        out.push_back({b + "attn.qkv.weight", {3 * d, d}});
        out.push_back({b + "attn.qkv.bias", {3 * d}});
        out.push_back({b + "attn.proj.weight", {d, d}});
        out.push_back({b + "attn.proj.bias", {d}});
        out.push_back({b + "ls1.gamma", {d}});
        out.push_back({b + "norm2.weight", {d}});
        out.push_back({b + "norm2.bias", {d}});
        out.push_back({b + "mlp.fc1.weight", {v.mlp_hidden, d}});
        out.push_back({b + "mlp.fc1.bias", {v.mlp_hidden}});
        out.push_back({b + "mlp.fc2.weight", {d, v.mlp_hidden}});
        out.push_back({b + "mlp.fc2.bias", {d}});
        out.push_back({b + "ls2.gamma", {d}});
    }
    return out;
}

bool ends_with(const std::string& s, const std::string& suffix)
{
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void init_vit_random(ModelState& s, Rng& rng)
{
    for (const auto& [name, shape] : vit_layout(s.config.vit)) {
        Tensor t(shape);
        if (ends_with(name, "norm1.weight") || ends_with(name, "norm2.weight") || name == "norm.weight" ||
            ends_with(name, ".gamma")) {
            t.fill(1);
        } else if (!ends_with(name, ".bias")) {
            for (auto& v : t.values()) v = 0.02 * normal(rng);
        }
        s.params.emplace(name, ad::Var(std::move(t), false));
    }
}

void add_slice_adapter(ModelState& s)
{
    Tensor w({3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1;
    s.params.emplace("slice_adapter.weight", ad::Var(std::move(w), true));
    s.params.emplace("slice_adapter.bias", ad::Var(Tensor({3}), true));
}

}  // namespace

ModelState init_model(const EncoderConfig& config)
{
    ModelState s;
    s.config = config;
    s.config.lora.reset();
    Rng rng(derive_seed(config.init_seed, 0x5eed));
    if (config.backbone == Backbone::dilated_cnn) {
        if (config.lora) throw std::invalid_argument("low-rank adapters require the vit backbone");
        init_cnn(s, rng);
    } else {
        check_vit_spec(config.vit);
        if (config.backbone_weights.empty()) {
            init_vit_random(s, rng);
        } else {
            load_backbone(s, config.backbone_weights, config.backbone_digest);
        }
    }
    if (config.input_mode == InputMode::slice_adapter) add_slice_adapter(s);
    if (config.lora) s = wrap_with_low_rank_adapters(s, *config.lora);
    return s;
}

void load_backbone(ModelState& state, const fs::path& path, const std::string& expected_digest)
{
    if (!fs::exists(path)) throw std::runtime_error("backbone weights not found: " + path.string());
    if (!expected_digest.empty()) {
        const std::string actual = digest_hex(io::read_text(path));
        if (actual != expected_digest) {
            throw std::runtime_error("backbone weights " + path.string() + " digest " + actual +
                                     " does not match expected " + expected_digest);
        }
    }
    auto tensors = io::read_safetensors(path);
    // Infer architecture from the file so the config cannot silently disagree.
    auto& v = state.config.vit;
    const auto it = tensors.find("patch_embed.proj.weight");
    if (it == tensors.end()) throw std::runtime_error(path.string() + ": missing patch_embed.proj.weight");
    const int dim = it->second.dim(0);
    const int patch = it->second.dim(2);
    int depth = 0;
    while (tensors.count("blocks." + std::to_string(depth) + ".attn.qkv.weight")) ++depth;
    const auto pe = tensors.find("pos_embed");
    if (pe == tensors.end()) throw std::runtime_error(path.string() + ": missing pos_embed");
    const int tokens = pe->second.dim(1) - 1;
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens))));
    if (grid * grid != tokens) throw std::runtime_error(path.string() + ": pos_embed is not a square grid");
    if (dim != v.dim || depth != v.depth || patch != v.patch) {
        throw std::runtime_error(path.string() + ": file has dim " + std::to_string(dim) + ", depth " +
                                 std::to_string(depth) + ", patch " + std::to_string(patch) +
                                 " but config expects " + std::to_string(v.dim) + "/" +
                                 std::to_string(v.depth) + "/" + std::to_string(v.patch));
    }
    v.pos_grid = grid;
    const auto fc1 = tensors.find("blocks.0.mlp.fc1.weight");
    if (fc1 != tensors.end()) v.mlp_hidden = fc1->second.dim(0);
    check_vit_spec(v);
    for (const auto& [name, shape] : vit_layout(v)) {
        auto t = tensors.find(name);
        if (t == tensors.end()) {
            // Older exports without layer scale behave as gamma = 1.
            if (ends_with(name, ".gamma")) {
                state.params.insert_or_assign(name, ad::Var(Tensor(shape, 1.0), false));
                continue;
            }
            throw std::runtime_error(path.string() + ": missing tensor " + name);
        }
        if (t->second.size() != Tensor::numel(shape)) {
            throw std::runtime_error(path.string() + ": tensor " + name + " has shape " +
                                     t->second.shape_str() + ", expected " + shape_str(shape));
        }
        state.params.insert_or_assign(name, ad::Var(t->second.reshaped(shape), false));
    }
}

ModelState wrap_with_low_rank_adapters(const ModelState& state, const LowRankAdapterSpec& spec)
{
    if (state.config.backbone != Backbone::vit) {
        throw std::invalid_argument("low-rank adapters require the vit backbone");
    }
    const auto& v = state.config.vit;
    if (spec.rank < 1 || spec.rank > v.dim) {
        throw std::invalid_argument("lora rank must be in [1, " + std::to_string(v.dim) + "]");
    }
    if (!(spec.alpha > 0)) throw std::invalid_argument("lora alpha must be positive");
    if (spec.projections.empty()) throw std::invalid_argument("lora needs at least one target projection");
    for (const auto& p : spec.projections) {
        if (p != "q" && p != "k" && p != "v" && p != "proj") {
            throw std::invalid_argument("lora target '" + p + "' is not one of q, k, v, proj");
        }
    }
    std::vector<int> blocks = spec.blocks;
    if (blocks.empty()) {
        for (int i = 0; i < v.depth; ++i) blocks.push_back(i);
    }
    for (int b : blocks) {
        if (b < 0 || b >= v.depth) {
            throw std::invalid_argument("lora targets block " + std::to_string(b) + " but the backbone has " +
                                        std::to_string(v.depth) + " blocks");
        }
    }
    ModelState out = state.clone();
    out.config.lora = spec;
    Rng rng(derive_seed(spec.seed, 0x10a));
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(v.dim));
    for (int b : blocks) {
        for (const auto& p : spec.projections) {
            const std::string base = "blocks." + std::to_string(b) + ".attn.lora_" + p;
            if (out.has(base + ".A")) throw std::invalid_argument("lora already applied to " + base);
            Tensor a({spec.rank, v.dim});
            for (auto& x : a.values()) x = uniform(rng, -bound, bound);
            out.params.emplace(base + ".A", ad::Var(std::move(a), true));
            out.params.emplace(base + ".B", ad::Var(Tensor({v.dim, spec.rank}), true));
        }
    }
    return out;
}

// ------------------------------------------------------------------ forward

namespace {

ad::Var stack_images(const Image& a, const Image& b, const Image& c)
{
    Tensor t({3, a.height(), a.width()});
    const std::size_t n = a.size();
    std::copy(a.values().begin(), a.values().end(), t.data());
    std::copy(b.values().begin(), b.values().end(), t.data() + n);
    std::copy(c.values().begin(), c.values().end(), t.data() + 2 * n);
    return ad::constant(std::move(t));
}

void check_triplet(const data::SliceTriplet& t)
{
    for (const auto& s : t.slices) {
        if (s.shape() != t.slices[1].shape()) {
            throw std::invalid_argument("slice triplet shapes differ: " + s.shape().str() + " vs " +
                                        t.slices[1].shape().str());
        }
    }
}

ad::Var three_channel_input(const data::EncoderInput& input, const ModelState& state)
{
    const auto mode = state.config.input_mode;
    const auto* triplet = std::get_if<data::SliceTriplet>(&input);
    if (mode == InputMode::replicate || !triplet) {
        const Image& img = data::center_image(input);
        if (mode == InputMode::slice_adapter) {
            data::SliceTriplet t;
            t.slices = {img, img, img};
            return apply_slice_adapter(t, state);
        }
        return stack_images(img, img, img);
    }
    check_triplet(*triplet);
    if (mode == InputMode::stack3) return stack_images(triplet->slices[0], triplet->slices[1], triplet->slices[2]);
    return apply_slice_adapter(*triplet, state);
}

ad::Var cnn_forward(const ad::Var& x, const ModelState& s)
{
    auto conv = [&](const ad::Var& in, const std::string& name, int pad, int dilation) {
        return ad::conv2d(in, s.param(name + ".weight"), s.param(name + ".bias"), 1, pad, dilation);
    };
    ad::Var h = ad::relu(conv(x, "cnn.conv1", 1, 1));
    h = ad::window_mean(h, 2, 2);
    h = ad::relu(conv(h, "cnn.conv2", 1, 1));
    h = ad::window_mean(h, 2, 2);
    h = ad::relu(conv(h, "cnn.conv3", 2, 2));
    h = ad::relu(conv(h, "cnn.conv4", 4, 4));
    return conv(h, "cnn.proj", 0, 1);
}

// Adds scale * x A^T B^T when an adapter named `base` exists.
ad::Var with_lora(const ad::Var& y, const ad::Var& x, const ModelState& s, const std::string& base)
{
    const auto a = s.params.find(base + ".A");
    if (a == s.params.end()) return y;
    const auto& spec = *s.config.lora;
    const ad::Var low = ad::linear(x, a->second, ad::Var());
    const ad::Var delta = ad::linear(low, s.param(base + ".B"), ad::Var());
    return ad::add(y, ad::scale(delta, spec.alpha / spec.rank));
}

ad::Var vit_block(const ad::Var& x, const ModelState& s, int index)
{
    const auto& v = s.config.vit;
    const std::string b = "blocks." + std::to_string(index) + ".";
    const int d = v.dim;
    const int dh = d / v.heads;

    ad::Var xn = ad::layer_norm(x, s.param(b + "norm1.weight"), s.param(b + "norm1.bias"), v.ln_eps);
    const ad::Var qkv = ad::linear(xn, s.param(b + "attn.qkv.weight"), s.param(b + "attn.qkv.bias"));
    ad::Var q = with_lora(ad::slice_cols(qkv, 0, d), xn, s, b + "attn.lora_q");
    ad::Var k = with_lora(ad::slice_cols(qkv, d, d), xn, s, b + "attn.lora_k");
    ad::Var val = with_lora(ad::slice_cols(qkv, 2 * d, d), xn, s, b + "attn.lora_v");
    std::vector<ad::Var> heads;
    heads.reserve(v.heads);
    const Real inv = 1.0 / std::sqrt(static_cast<Real>(dh));
    for (int h = 0; h < v.heads; ++h) {
        const ad::Var qh = ad::slice_cols(q, h * dh, dh);
        const ad::Var kh = ad::slice_cols(k, h * dh, dh);
        const ad::Var vh = ad::slice_cols(val, h * dh, dh);
        const ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
        heads.push_back(ad::matmul(attn, vh));
    }
    const ad::Var merged = heads.size() == 1 ? heads[0] : ad::concat_cols(heads);
    ad::Var proj = ad::linear(merged, s.param(b + "attn.proj.weight"), s.param(b + "attn.proj.bias"));
    proj = with_lora(proj, merged, s, b + "attn.lora_proj");
    ad::Var h = ad::add(x, ad::mul_rowvec(proj, s.param(b + "ls1.gamma")));

    xn = ad::layer_norm(h, s.param(b + "norm2.weight"), s.param(b + "norm2.bias"), v.ln_eps);
    ad::Var m = ad::gelu(ad::linear(xn, s.param(b + "mlp.fc1.weight"), s.param(b + "mlp.fc1.bias")));
    m = ad::linear(m, s.param(b + "mlp.fc2.weight"), s.param(b + "mlp.fc2.bias"));
    return ad::add(h, ad::mul_rowvec(m, s.param(b + "ls2.gamma")));
}

ad::Var imagenet_normalize(const ad::Var& x)
{
    static constexpr Real mean[3] = {0.485, 0.456, 0.406};
    static constexpr Real stdv[3] = {0.229, 0.224, 0.225};
    Tensor w({3, 3, 1, 1});
    Tensor b({3});
    for (int c = 0; c < 3; ++c) {
        w[c * 3 + c] = 1.0 / stdv[c];
        b[c] = -mean[c] / stdv[c];
    }
    return ad::conv2d(x, ad::constant(std::move(w)), ad::constant(std::move(b)), 1, 0, 1);
}

ad::Var vit_forward(const ad::Var& x, const ModelState& s)
{
    const auto& v = s.config.vit;
    const int d = v.dim;
    const ad::Var patches = ad::conv2d(imagenet_normalize(x), s.param("patch_embed.proj.weight"),
                                       s.param("patch_embed.proj.bias"), v.patch, 0, 1);
    const int gh = patches.dim(1), gw = patches.dim(2), n = gh * gw;
    const ad::Var tokens = ad::transpose(ad::reshape(patches, {d, n}));  // [N, D]

    // Interpolate the pre-training position grid to the current token grid.
    const ad::Var pos_all = ad::reshape(s.param("pos_embed"), {1 + v.pos_grid * v.pos_grid, d});
    const ad::Var pos_cls = ad::slice_rows(pos_all, 0, 1);
    ad::Var pos_grid = ad::slice_rows(pos_all, 1, v.pos_grid * v.pos_grid);
    pos_grid = ad::reshape(ad::transpose(pos_grid), {d, v.pos_grid, v.pos_grid});
    pos_grid = ad::resize_bilinear(pos_grid, gh, gw);
    pos_grid = ad::transpose(ad::reshape(pos_grid, {d, n}));

    const ad::Var cls = ad::add(ad::reshape(s.param("cls_token"), {1, d}), pos_cls);
    ad::Var h = ad::concat_rows({cls, ad::add(tokens, pos_grid)});
    for (int i = 0; i < v.depth; ++i) h = vit_block(h, s, i);
    h = ad::layer_norm(h, s.param("norm.weight"), s.param("norm.bias"), v.ln_eps);
    const ad::Var patch_tokens = ad::slice_rows(h, 1, n);
    return ad::reshape(ad::transpose(patch_tokens), {d, gh, gw});
}

}  // namespace

ad::Var apply_slice_adapter(const data::SliceTriplet& triplet, const ModelState& state)
{
    check_triplet(triplet);
    const ad::Var x = stack_images(triplet.slices[0], triplet.slices[1], triplet.slices[2]);
    return ad::conv2d(x, state.param("slice_adapter.weight"), state.param("slice_adapter.bias"), 1, 0, 1);
}

FeatureMap encode(const data::EncoderInput& input, const ModelState& state)
{
    const Shape2 src = data::input_shape(input);
    if (src.height <= 0 || src.width <= 0) throw std::invalid_argument("encode: empty input image");
    const auto& cfg = state.config;
    const int stride = cfg.stride();
    const Shape2 padded{(src.height + stride - 1) / stride * stride, (src.width + stride - 1) / stride * stride};
    ad::Var x = three_channel_input(input, state);
    if (padded != src) {
        if (!cfg.pad_to_stride) {
            throw std::invalid_argument("encode: input " + src.str() + " is not a multiple of the backbone stride " +
                                        std::to_string(stride) + " and padding is disabled");
        }
        x = ad::pad_bottom_right(x, padded.height - src.height, padded.width - src.width);
    }
    FeatureMap out;
    ad::Var f = cfg.backbone == Backbone::vit ? vit_forward(x, state) : cnn_forward(x, state);
    out.backbone_grid = {f.dim(1), f.dim(2)};
    const Shape2 grid = cfg.grid_for(src);
    // Resample over the padded extent, then keep the part covering the source.
    const Shape2 grid_padded{
        std::max(grid.height, static_cast<int>(std::lround(static_cast<double>(grid.height) * padded.height / src.height))),
        std::max(grid.width, static_cast<int>(std::lround(static_cast<double>(grid.width) * padded.width / src.width)))};
    f = ad::resize_bilinear(f, grid_padded.height, grid_padded.width);
    if (grid_padded != grid) f = ad::crop_top_left(f, grid.height, grid.width);
    out.values = f;
    out.stride = static_cast<Real>(src.height) / grid.height;
    out.source_shape = src;
    return out;
}

Image coverage_on_grid(const Mask& mask, Shape2 grid)
{
    if (grid.height <= 0 || grid.width <= 0) throw std::invalid_argument("coverage_on_grid: empty grid");
    Image out(grid.height, grid.width, 0);
    if (mask.shape() == grid) {
        for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 1 : 0;
        return out;
    }
    // Per-axis overlap weights between output cells and source pixels.
    auto weights = [](int in, int outn) {
        std::vector<std::vector<std::pair<int, Real>>> w(outn);
        const Real step = static_cast<Real>(in) / outn;
        for (int o = 0; o < outn; ++o) {
            const Real lo = o * step, hi = (o + 1) * step;
            for (int i = static_cast<int>(std::floor(lo)); i < std::min(in, static_cast<int>(std::ceil(hi))); ++i) {
                const Real overlap = std::min<Real>(hi, i + 1) - std::max<Real>(lo, i);
                if (overlap > 0) w[o].push_back({i, overlap / step});
            }
        }
        return w;
    };
    const auto wy = weights(mask.height(), grid.height);
    const auto wx = weights(mask.width(), grid.width);
    for (int gy = 0; gy < grid.height; ++gy) {
        for (int gx = 0; gx < grid.width; ++gx) {
            Real s = 0;
            for (const auto& [y, a] : wy[gy]) {
                for (const auto& [x, b] : wx[gx]) {
                    if (mask(y, x)) s += a * b;
                }
            }
            out(gy, gx) = std::min<Real>(1, s);
        }
    }
    return out;
}

// --------------------------------------------------------------- checkpoints

void save_checkpoint(const fs::path& dir, const ModelState& state, const json& run_config)
{
    fs::create_directories(dir);
    io::NamedTensors trainable;
    for (const auto& name : state.trainable_names()) trainable.emplace(name, state.param(name).value());
    io::write_safetensors(dir / "trainable.safetensors", trainable, {{"format", "protoseg-1"}});
    io::NamedTensors opt;
    for (const auto& [name, t] : state.momentum) opt.emplace("m/" + name, t);
    for (const auto& [name, t] : state.second) opt.emplace("v/" + name, t);
    io::write_safetensors(dir / "optimizer.safetensors", opt);
    json cfg;
    cfg["encoder"] = to_json(state.config);
    cfg["run"] = run_config;
    io::write_text(dir / "config.json", cfg.dump(2) + "\n");
    json st;
    st["step"] = state.step;
    st["frozen_digest"] = state.frozen_digest();
    st["weights_digest"] = state.weights_digest();
    io::write_text(dir / "state.json", st.dump(2) + "\n");
}

ModelState load_checkpoint(const fs::path& dir)
{
    for (const char* f : {"trainable.safetensors", "optimizer.safetensors", "config.json", "state.json"}) {
        if (!fs::exists(dir / f)) throw std::runtime_error("checkpoint " + dir.string() + " is missing " + f);
    }
    const json cfg = json::parse(io::read_text(dir / "config.json"));
    const json st = json::parse(io::read_text(dir / "state.json"));
    ModelState s = init_model(encoder_config_from_json(cfg.at("encoder")));
    const std::string frozen = st.value("frozen_digest", std::string());
    if (frozen != s.frozen_digest()) {
        throw std::runtime_error("checkpoint " + dir.string() + ": frozen backbone weights differ from the ones it was trained with");
    }
    const auto trainable = io::read_safetensors(dir / "trainable.safetensors");
    for (const auto& name : s.trainable_names()) {
        const auto it = trainable.find(name);
        if (it == trainable.end()) throw std::runtime_error("checkpoint " + dir.string() + ": missing tensor " + name);
        if (!it->second.same_shape(s.param(name).value())) {
            throw std::runtime_error("checkpoint " + dir.string() + ": tensor " + name + " has shape " +
                                     it->second.shape_str() + ", model expects " + s.param(name).value().shape_str());
        }
        s.params[name] = ad::Var(it->second, true);
    }
    for (const auto& [key, t] : io::read_safetensors(dir / "optimizer.safetensors")) {
        if (key.rfind("m/", 0) == 0) s.momentum[key.substr(2)] = t;
        else if (key.rfind("v/", 0) == 0) s.second[key.substr(2)] = t;
    }
    s.step = st.at("step").get<std::int64_t>();
    return s;
}

}  // namespace protoseg::model
