#pragma once

// Dense feature extraction. Two backbones share one parameter store:
//  - a small dilated CNN (output stride 4), trained end to end, and
//  - a DINOv2-layout ViT (patch 14) whose base weights stay frozen; only
//    low-rank adapters and the optional slice adapter train.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoseg/autodiff.hpp"
#include "protoseg/data_pipeline.hpp"

namespace protoseg::model {

namespace fs = std::filesystem;

enum class Backbone { dilated_cnn, vit };
enum class InputMode { replicate, stack3, slice_adapter };

Backbone parse_backbone(const std::string& s);
InputMode parse_input_mode(const std::string& s);
std::string to_string(Backbone b);
std::string to_string(InputMode m);

struct LowRankAdapterSpec {
    int rank = 16;
    Real alpha = 16;
    std::vector<std::string> projections{"q", "v"};  // subset of q, k, v, proj
    std::vector<int> blocks;                          // empty: every block
    std::uint64_t seed = 0;
};

struct CnnSpec {
    int channels1 = 16;
    int channels2 = 32;
    int dim = 32;
};

struct VitSpec {
    int patch = 14;
    int dim = 1024;
    int depth = 24;
    int heads = 16;
    int mlp_hidden = 4096;
    int pos_grid = 37;  // 518 / 14, the DINOv2 pre-training grid
    Real ln_eps = 1e-6;
};

struct EncoderConfig {
    Backbone backbone = Backbone::dilated_cnn;
    InputMode input_mode = InputMode::replicate;
    Shape2 train_resolution{256, 256};
    Shape2 test_resolution{256, 256};
    std::optional<LowRankAdapterSpec> lora;
    // Working grid for prototypes; unset means a quarter of the input size.
    std::optional<Shape2> feature_upsample;
    // Zero-pad bottom/right up to the backbone stride; if false such inputs are rejected.
    bool pad_to_stride = true;
    CnnSpec cnn;
    VitSpec vit;
    fs::path backbone_weights;    // safetensors; empty = seeded random init
    std::string backbone_digest;  // optional expected digest of the loaded file
    std::uint64_t init_seed = 0;

    int stride() const;
    int feature_dim() const;
    /// Working grid for an input of the given (unpadded) shape.
    Shape2 grid_for(Shape2 input) const;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

struct FeatureMap {
    ad::Var values;          // [D, H', W'] on the working grid
    Real stride = 1;         // input pixels per working-grid cell
    Shape2 source_shape;     // unpadded input size
    Shape2 backbone_grid;    // backbone output grid before resampling

    int dim() const { return values.dim(0); }
    Shape2 grid() const { return {values.dim(1), values.dim(2)}; }
};

/// All weights by name. Frozen tensors are leaves without requires_grad.
class ModelState {
public:
    EncoderConfig config;
    std::map<std::string, ad::Var> params;
    std::map<std::string, Tensor> momentum;   // optimizer first moments
    std::map<std::string, Tensor> second;     // Adam second moments
    std::int64_t step = 0;

    bool has(const std::string& name) const { return params.count(name) != 0; }
    const ad::Var& param(const std::string& name) const;
    bool trainable(const std::string& name) const { return param(name).requires_grad(); }
    std::vector<std::string> trainable_names() const;
    std::size_t trainable_count() const;
    /// Digest over every frozen tensor (name, shape, bytes).
    std::string frozen_digest() const;
    /// Digest over every tensor.
    std::string weights_digest() const;
    /// Deep copy; the result shares no storage with *this.
    ModelState clone() const;
    void zero_grad();
};

/// Builds a model for the config: random init from config.init_seed, or the
/// ViT base from config.backbone_weights. LoRA in the config is applied.
ModelState init_model(const EncoderConfig& config);

/// Loads DINOv2-named ViT weights into state (frozen).
void load_backbone(ModelState& state, const fs::path& path, const std::string& expected_digest = {});

ModelState wrap_with_low_rank_adapters(const ModelState& state, const LowRankAdapterSpec& spec);

/// 1x1 convolution (3 -> 3, with bias) over the stacked triplet -> [3,H,W].
ad::Var apply_slice_adapter(const data::SliceTriplet& triplet, const ModelState& state);

FeatureMap encode(const data::EncoderInput& input, const ModelState& state);

/// Area coverage of a binary mask on a coarser grid; values in [0,1].
Image coverage_on_grid(const Mask& mask, Shape2 grid);

// Checkpoint directory: trainable.safetensors, optimizer.safetensors,
// config.json, state.json.
void save_checkpoint(const fs::path& dir, const ModelState& state,
                     const nlohmann::json& run_config = nlohmann::json::object());
ModelState load_checkpoint(const fs::path& dir);

}  // namespace protoseg::model
