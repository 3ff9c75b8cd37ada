#pragma once

// File formats: NIfTI-1 volumes (.nii / .nii.gz), NumPy .npy arrays for
// per-slice caches, and safetensors for weights and checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "protoseg/tensor.hpp"

namespace protoseg::io {

namespace fs = std::filesystem;

struct Spacing {
    std::array<float, 3> mm{1.f, 1.f, 1.f};  // x, y, z
};

enum class NiftiType : std::int16_t {
    uint8 = 2,
    int16 = 4,
    int32 = 8,
    float32 = 16,
    float64 = 64,
    int8 = 256,
    uint16 = 512,
    uint32 = 768,
};

/// Reads a NIfTI-1 file (gzip detected transparently). Intensity scaling
/// (scl_slope/scl_inter) is applied when the slope is non-zero. Volume rows
/// are NIfTI y, columns are x, depth is z; 2D files yield depth 1.
Volume<Real> read_nifti(const fs::path& path, Spacing* spacing = nullptr);

void write_nifti(const fs::path& path, const Volume<Real>& volume, NiftiType type,
                 const Spacing& spacing = {});
void write_nifti(const fs::path& path, const Volume<std::uint8_t>& volume,
                 const Spacing& spacing = {});

/// .npy v1.0, little-endian, C order.
struct NpyArray {
    std::vector<int> shape;
    std::vector<Real> values;
};

void write_npy(const fs::path& path, const std::vector<int>& shape, const std::vector<float>& v);
void write_npy(const fs::path& path, const std::vector<int>& shape, const std::vector<double>& v);
void write_npy(const fs::path& path, const std::vector<int>& shape,
               const std::vector<std::int32_t>& v);
void write_npy(const fs::path& path, const std::vector<int>& shape,
               const std::vector<std::uint8_t>& v);
/// Reads any of <f4, <f8, <i4, <u1, |u1, <i8 into Real values.
NpyArray read_npy(const fs::path& path);

using NamedTensors = std::map<std::string, Tensor>;

/// safetensors writer; values are stored as F64 so round trips are exact.
void write_safetensors(const fs::path& path, const NamedTensors& tensors,
                       const std::map<std::string, std::string>& metadata = {});
/// Reads F64/F32/F16/BF16 tensors.
NamedTensors read_safetensors(const fs::path& path,
                              std::map<std::string, std::string>* metadata = nullptr);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace protoseg::io
