#pragma once

// Binary post-filters for CNN-TO results: floating-island removal, small-hole
// filling and peninsula pruning, plus the connected-component labeling they
// are built on.

#include "cnnto/error.hpp"
#include "cnnto/fem.hpp"

#include "json.hpp"

#include <algorithm>
#include <deque>
#include <string>
#include <utility>
#include <vector>

namespace cnnto {

enum class Foreground { material, void_ };

struct FilterConfig {
    /// Neighborhood for material components (4 or 8). Void components use
    /// the dual neighborhood (8 -> 4, 4 -> 8).
    int connectivity = 8;
    int max_hole_area = 4;
    /// A material element with this many or fewer material elements among
    /// its 8 neighbors is a peninsula.
    int peninsula_neighbor_threshold = 2;
    /// Number of simultaneous-removal passes; ignored when peninsula_fixpoint.
    int peninsula_passes = 1;
    bool peninsula_fixpoint = true;
    /// Linear element indices (GridMesh::element) that are never removed and
    /// that material components must contain to survive island removal.
    std::vector<int> anchor_elements;

    int void_connectivity() const { return connectivity == 8 ? 4 : 8; }

    void validate() const {
        require(connectivity == 4 || connectivity == 8, "FilterConfig: connectivity must be 4 or 8");
        require(max_hole_area >= 0, "FilterConfig: max_hole_area must be >= 0");
        require(peninsula_neighbor_threshold >= 0, "FilterConfig: peninsula threshold must be >= 0");
        require(peninsula_passes >= 0, "FilterConfig: peninsula_passes must be >= 0");
    }
};

struct LabeledComponents {
    Eigen::MatrixXi labels;  // nely x nelx, 0 = background, components 1..count
    std::vector<int> areas;  // areas[label - 1]
    std::vector<bool> touches_anchor;
    std::vector<bool> touches_boundary;

    int count() const { return static_cast<int>(areas.size()); }
};

namespace detail {

inline void require_binary(const DensityField& field, const char* who) {
    if (!field.is_exactly_binary()) throw InputError(std::string(who) + ": field must be binary (0/1)");
}

inline std::vector<bool> anchor_mask(const DensityField& field, const std::vector<int>& anchors) {
    std::vector<bool> mask(field.size(), false);
    for (int a : anchors) {
        if (a < 0 || a >= field.size()) throw InputError("anchor element index out of range");
        mask[a] = true;
    }
    return mask;
}

inline int material_neighbors(const DensityField& f, int r, int c) {
    int n = 0;
    for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            const int rr = r + dr, cc = c + dc;
            if (rr >= 0 && rr < f.nely() && cc >= 0 && cc < f.nelx() && f(rr, cc) == 1.0) ++n;
        }
    return n;
}

}  // namespace detail

/// Connected components of the chosen phase. Labels follow row-major
/// first-seen order, so they are deterministic.
inline LabeledComponents label_components(const DensityField& field, Foreground fg, int connectivity,
                                          const std::vector<int>& anchors = {}) {
    detail::require_binary(field, "label_components");
    require(connectivity == 4 || connectivity == 8, "label_components: connectivity must be 4 or 8");
    const int nr = field.nely(), nc = field.nelx();
    const double want = fg == Foreground::material ? 1.0 : 0.0;
    const auto is_anchor = detail::anchor_mask(field, anchors);

    LabeledComponents out;
    out.labels = Eigen::MatrixXi::Zero(nr, nc);
    std::deque<std::pair<int, int>> queue;
    for (int r = 0; r < nr; ++r) {
        for (int c = 0; c < nc; ++c) {
            if (field(r, c) != want || out.labels(r, c) != 0) continue;
            const int label = out.count() + 1;
            int area = 0;
            bool anchor = false, boundary = false;
            out.labels(r, c) = label;
            queue.emplace_back(r, c);
            while (!queue.empty()) {
                const auto [cr, cc] = queue.front();
                queue.pop_front();
                ++area;
                anchor = anchor || is_anchor[cc * nr + cr];
                boundary = boundary || cr == 0 || cc == 0 || cr == nr - 1 || cc == nc - 1;
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        if (connectivity == 4 && dr != 0 && dc != 0) continue;
                        const int rr = cr + dr, c2 = cc + dc;
                        if (rr < 0 || rr >= nr || c2 < 0 || c2 >= nc) continue;
                        if (field(rr, c2) != want || out.labels(rr, c2) != 0) continue;
                        out.labels(rr, c2) = label;
                        queue.emplace_back(rr, c2);
                    }
            }
            out.areas.push_back(area);
            out.touches_anchor.push_back(anchor);
            out.touches_boundary.push_back(boundary);
        }
    }
    return out;
}

/// Material components that contain no anchor element become void.
inline DensityField remove_floating_islands(const DensityField& field, const FilterConfig& config) {
    config.validate();
    require(!config.anchor_elements.empty(), "remove_floating_islands: anchor_elements is empty");
    const auto comps = label_components(field, Foreground::material, config.connectivity, config.anchor_elements);
    DensityField out(field.values, true);
    for (int r = 0; r < field.nely(); ++r)
        for (int c = 0; c < field.nelx(); ++c) {
            const int l = comps.labels(r, c);
            if (l > 0 && !comps.touches_anchor[l - 1]) out(r, c) = 0.0;
        }
    return out;
}

/// Interior void components (not touching the domain edge) with area
/// <= max_hole_area become material.
inline DensityField fill_small_holes(const DensityField& field, const FilterConfig& config) {
    config.validate();
    const auto comps = label_components(field, Foreground::void_, config.void_connectivity());
    DensityField out(field.values, true);
    for (int r = 0; r < field.nely(); ++r)
        for (int c = 0; c < field.nelx(); ++c) {
            const int l = comps.labels(r, c);
            if (l > 0 && !comps.touches_boundary[l - 1] && comps.areas[l - 1] <= config.max_hole_area)
                out(r, c) = 1.0;
        }
    return out;
}

/// One simultaneous pass: counts come from the field as it was before the
/// pass. Returns the number of elements removed.
inline int remove_peninsulas_pass(DensityField& field, const FilterConfig& config,
                                  const std::vector<bool>& is_anchor) {
    std::vector<std::pair<int, int>> marked;
    for (int r = 0; r < field.nely(); ++r)
        for (int c = 0; c < field.nelx(); ++c) {
            if (field(r, c) != 1.0 || is_anchor[c * field.nely() + r]) continue;
            if (detail::material_neighbors(field, r, c) <= config.peninsula_neighbor_threshold)
                marked.emplace_back(r, c);
        }
    for (const auto& [r, c] : marked) field(r, c) = 0.0;
    return static_cast<int>(marked.size());
}

/// Removes material elements with <= threshold material neighbors (cells
/// outside the domain count as void). Anchor elements are exempt.
inline DensityField remove_peninsulas(const DensityField& field, const FilterConfig& config) {
    config.validate();
    detail::require_binary(field, "remove_peninsulas");
    const auto is_anchor = detail::anchor_mask(field, config.anchor_elements);
    DensityField out(field.values, true);
    if (config.peninsula_fixpoint) {
        while (remove_peninsulas_pass(out, config, is_anchor) > 0) {
        }
    } else {
        for (int p = 0; p < config.peninsula_passes; ++p)
            if (remove_peninsulas_pass(out, config, is_anchor) == 0) break;
    }
    return out;
}

struct FilterStage {
    std::string name;
    int added = 0;
    int removed = 0;
};

struct FilterReport {
    std::vector<FilterStage> stages;
    double initial_volume = 0.0;
    double final_volume = 0.0;
    bool empty_result = false;

    double volume_delta() const { return final_volume - initial_volume; }
};

inline nlohmann::json filter_report_to_json(const FilterReport& report) {
    nlohmann::json j;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : report.stages)
        j["stages"].push_back({{"stage", s.name}, {"added", s.added}, {"removed", s.removed}});
    j["initial_volume"] = report.initial_volume;
    j["final_volume"] = report.final_volume;
    j["volume_delta"] = report.volume_delta();
    j["empty_result"] = report.empty_result;
    return j;
}

/// islands -> holes -> peninsulas -> islands. The last sweep drops pieces
/// that peninsula pruning cut loose.
inline std::pair<DensityField, FilterReport> apply_filter_pipeline(const DensityField& field,
                                                                   const FilterConfig& config) {
    config.validate();
    detail::require_binary(field, "apply_filter_pipeline");
    FilterReport report;
    report.initial_volume = field.volume();

    DensityField current(field.values, true);
    auto run = [&](const char* name, auto&& stage) {
        DensityField next = stage(current, config);
        FilterStage s{name, 0, 0};
        for (int i = 0; i < current.size(); ++i) {
            if (next[i] > current[i]) ++s.added;
            if (next[i] < current[i]) ++s.removed;
        }
        report.stages.push_back(s);
        current = std::move(next);
    };
    run("remove_floating_islands", remove_floating_islands);
    run("fill_small_holes", fill_small_holes);
    run("remove_peninsulas", remove_peninsulas);
    run("remove_floating_islands_final", remove_floating_islands);

    report.final_volume = current.volume();
    report.empty_result = report.final_volume == 0.0;
    return {std::move(current), report};
}

} // namespace cnnto
