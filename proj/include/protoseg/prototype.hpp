#pragma once

// Adaptive local prototype pooling: window-mean prototypes for windows a
// class covers, plus one mask-weighted global prototype per class and
// support example.

#include <optional>
#include <vector>

#include "protoseg/autodiff.hpp"

namespace protoseg::proto {

struct PoolingWindow {
    int height = 4;
    int width = 4;
};

enum class PrototypeKind { local, global };

struct PrototypeInfo {
    int class_id = 0;
    PrototypeKind kind = PrototypeKind::global;
    int row = -1;  // window coordinates for local prototypes
    int col = -1;
    int source_index = 0;
};

/// Plain-value prototype, for inspection and tests.
struct Prototype {
    std::vector<Real> vector;
    PrototypeInfo info;
};

/// Prototypes of one class stacked as rows of a [P, D] matrix.
struct ClassPrototypes {
    int class_id = 0;
    ad::Var vectors;
    std::vector<PrototypeInfo> info;

    int count() const { return static_cast<int>(info.size()); }
};

struct PrototypeSet {
    std::vector<ClassPrototypes> classes;  // classes[0] is background

    std::size_t size() const;
    const ClassPrototypes& of_class(int class_id) const;
    std::vector<Prototype> flatten() const;
};

/// Local prototypes of a [D,H,W] map. `coverage` holds the class weight per
/// cell (binary masks are the common case). A window emits a prototype when its
/// mean coverage is >= threshold and > 0. Returns an undefined Var when none.
struct LocalPrototypes {
    ad::Var vectors;  // [P, D]
    std::vector<std::pair<int, int>> cells;
};

LocalPrototypes pool_local_prototypes(const ad::Var& features, const Image& coverage,
                                      PoolingWindow window, Real threshold);

/// Coverage-weighted mean feature -> [1, D]. Throws on an empty mask.
ad::Var compute_class_prototype(const ad::Var& features, const Image& coverage);

struct SupportFeatures {
    ad::Var features;                 // [D,H,W]
    std::vector<Image> class_weights; // per class, index 0 background
};

PrototypeSet assemble_prototype_set(const std::vector<SupportFeatures>& support,
                                    PoolingWindow window, Real threshold);

/// Background and foreground weights for one binary support mask on the grid.
std::vector<Image> binary_class_weights(const Image& foreground_coverage);

}  // namespace protoseg::proto
