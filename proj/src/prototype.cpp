#include "protoseg/prototype.hpp"

#include <stdexcept>
#include <string>

#include "protoseg/kernels.hpp"

namespace protoseg::proto {

std::size_t PrototypeSet::size() const
{
    std::size_t n = 0;
    for (const auto& c : classes) n += c.info.size();
    return n;
}

const ClassPrototypes& PrototypeSet::of_class(int class_id) const
{
    for (const auto& c : classes) {
        if (c.class_id == class_id) return c;
    }
    throw std::out_of_range("prototype set has no class " + std::to_string(class_id));
}

std::vector<Prototype> PrototypeSet::flatten() const
{
    std::vector<Prototype> out;
    for (const auto& c : classes) {
        const int d = c.vectors.dim(1);
        for (int p = 0; p < c.count(); ++p) {
            const Real* row = c.vectors.value().data() + static_cast<std::size_t>(p) * d;
            out.push_back({std::vector<Real>(row, row + d), c.info[p]});
        }
    }
    return out;
}

namespace {

void check_coverage(const ad::Var& features, const Image& coverage, const char* op)
{
    if (!features.defined() || features.value().rank() != 3) {
        throw std::invalid_argument(std::string(op) + ": features must be [D,H,W]");
    }
    if (coverage.height() != features.dim(1) || coverage.width() != features.dim(2)) {
        throw std::invalid_argument(std::string(op) + ": mask " + coverage.shape().str() +
                                    " does not match feature grid " + std::to_string(features.dim(1)) +
                                    "x" + std::to_string(features.dim(2)));
    }
}

}  // namespace

LocalPrototypes pool_local_prototypes(const ad::Var& features, const Image& coverage,
                                      PoolingWindow window, Real threshold)
{
    check_coverage(features, coverage, "pool_local_prototypes");
    if (window.height <= 0 || window.width <= 0) throw std::invalid_argument("pooling window must be positive");
    if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument("coverage threshold must be in [0,1]");
    const int h = coverage.height(), w = coverage.width();
    const int gh = kernels::window_count(h, window.height);
    const int gw = kernels::window_count(w, window.width);
    std::vector<Real> cover(static_cast<std::size_t>(gh) * gw);
    kernels::parallel::window_mean(1, h, w, window.height, window.width, coverage.values().data(), cover.data());

    LocalPrototypes out;
    for (int m = 0; m < gh; ++m) {
        for (int n = 0; n < gw; ++n) {
            const Real c = cover[static_cast<std::size_t>(m) * gw + n];
            if (c >= threshold && c > 0) out.cells.emplace_back(m, n);
        }
    }
    if (!out.cells.empty()) {
        out.vectors = ad::gather_cells(ad::window_mean(features, window.height, window.width), out.cells);
    }
    return out;
}

ad::Var compute_class_prototype(const ad::Var& features, const Image& coverage)
{
    check_coverage(features, coverage, "compute_class_prototype");
    Real total = 0;
    for (Real v : coverage.values()) total += v;
    if (!(total > 0)) throw std::invalid_argument("compute_class_prototype: empty mask");
    const Tensor weights({coverage.height(), coverage.width()}, coverage.values());
    return ad::reshape(ad::masked_mean(features, weights), {1, features.dim(0)});
}

PrototypeSet assemble_prototype_set(const std::vector<SupportFeatures>& support,
                                    PoolingWindow window, Real threshold)
{
    if (support.empty()) throw std::invalid_argument("assemble_prototype_set: no support examples");
    const std::size_t n_classes = support.front().class_weights.size();
    if (n_classes < 2) throw std::invalid_argument("assemble_prototype_set: need background and >= 1 class");
    PrototypeSet set;
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::vector<ad::Var> parts;
        ClassPrototypes cp;
        cp.class_id = static_cast<int>(c);
        for (std::size_t i = 0; i < support.size(); ++i) {
            const auto& s = support[i];
            if (s.class_weights.size() != n_classes) {
                throw std::invalid_argument("assemble_prototype_set: support examples disagree on class count");
            }
            const Image& cov = s.class_weights[c];
            Real total = 0;
            for (Real v : cov.values()) total += v;
            if (!(total > 0)) continue;
            const auto local = pool_local_prototypes(s.features, cov, window, threshold);
            if (local.vectors.defined()) {
                parts.push_back(local.vectors);
                for (const auto& [m, n] : local.cells) {
                    cp.info.push_back({cp.class_id, PrototypeKind::local, m, n, static_cast<int>(i)});
                }
            }
            parts.push_back(compute_class_prototype(s.features, cov));
            cp.info.push_back({cp.class_id, PrototypeKind::global, -1, -1, static_cast<int>(i)});
        }
        if (parts.empty()) {
            throw std::invalid_argument("assemble_prototype_set: class " + std::to_string(c) +
                                        " is empty in every support example");
        }
        cp.vectors = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
        set.classes.push_back(std::move(cp));
    }
    return set;
}

std::vector<Image> binary_class_weights(const Image& foreground_coverage)
{
    Image bg = foreground_coverage;
    for (auto& v : bg.values()) v = 1 - v;
    return {std::move(bg), foreground_coverage};
}

}  // namespace protoseg::proto
