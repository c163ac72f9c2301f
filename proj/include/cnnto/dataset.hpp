#pragma once

// Bar-system training data: random chains of capsule-shaped bars joining the
// support anchor to the load anchor, rasterized by element-centroid
// containment and labeled with FEM compliance sensitivities.
//
// Dataset file layout (all integers and floats little-endian):
//   "CNNTODS1" | u64 header_len | JSON header | count records
//   record = nely*nelx u8 densities (0/1, row-major)
//          + nely*nelx f64 sensitivities (row-major)

#include "cnnto/error.hpp"
#include "cnnto/fem.hpp"
#include "cnnto/io.hpp"
#include "cnnto/rng.hpp"
#include "cnnto/version.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cnnto {

struct Point {
    double x = 0.0;  // element units, +right
    double y = 0.0;  // element units, +down

    bool operator==(const Point&) const = default;
};

struct Bar {
    Point p0;
    Point p1;
    double width = 0.0;  // half-width of the capsule

    bool operator==(const Bar&) const = default;
};

struct BarSystem {
    std::vector<Bar> bars;
    Point support_anchor;
    Point load_anchor;

    bool operator==(const BarSystem&) const = default;
};

struct TrainingSample {
    DensityField density;
    SensitivityField sensitivity;
};

struct GenConfig {
    std::pair<int, int> n_bars_range{1, 4};      // bars in the support->load chain
    std::pair<int, int> extra_bars_range{0, 2};  // decorations hanging off endpoints
    std::pair<double, double> width_range{0.75, 2.0};
    std::uint64_t rng_seed = 0;
    FemProblem problem;
    std::string bc_preset = kCantileverPreset;
    int max_resample = 100;

    double label_floor() const { return problem.material.x_min; }

    void validate() const {
        require(n_bars_range.first >= 1 && n_bars_range.first <= n_bars_range.second,
                "GenConfig: n_bars_range must satisfy 1 <= min <= max");
        require(extra_bars_range.first >= 0 && extra_bars_range.first <= extra_bars_range.second,
                "GenConfig: extra_bars_range must satisfy 0 <= min <= max");
        require(width_range.first > 0.0 && width_range.first <= width_range.second,
                "GenConfig: width_range must satisfy 0 < min <= max");
        require(max_resample >= 1, "GenConfig: max_resample must be >= 1");
        problem.validate();
    }
};

inline Point element_centroid(const GridMesh& mesh, int element) {
    const int elx = element / mesh.nely;
    const int ely = element % mesh.nely;
    return {elx + 0.5, ely + 0.5};
}

inline Point mean_centroid(const GridMesh& mesh, const std::vector<int>& elements) {
    require(!elements.empty(), "mean_centroid: no elements");
    Point p;
    for (int e : elements) {
        const Point c = element_centroid(mesh, e);
        p.x += c.x;
        p.y += c.y;
    }
    p.x /= static_cast<double>(elements.size());
    p.y /= static_cast<double>(elements.size());
    return p;
}

/// Support anchor = mean centroid of the supported elements, load anchor =
/// mean centroid of the loaded elements.
inline std::pair<Point, Point> bc_anchors(const FemProblem& problem) {
    return {mean_centroid(problem.mesh, support_elements(problem.mesh, problem.bc)),
            mean_centroid(problem.mesh, load_elements(problem.mesh, problem.bc))};
}

inline BarSystem sample_bar_system(const GenConfig& config, Rng& rng) {
    const auto [support, load] = bc_anchors(config.problem);
    const double w = config.problem.mesh.nelx;
    const double h = config.problem.mesh.nely;
    auto random_point = [&] { return Point{rng.uniform(0.0, w), rng.uniform(0.0, h)}; };
    auto random_width = [&] { return rng.uniform(config.width_range.first, config.width_range.second); };

    BarSystem sys;
    sys.support_anchor = support;
    sys.load_anchor = load;
    const int n = rng.uniform_int(config.n_bars_range.first, config.n_bars_range.second);
    Point from = support;
    for (int k = 0; k < n; ++k) {
        const Point to = k + 1 == n ? load : random_point();
        sys.bars.push_back({from, to, random_width()});
        from = to;
    }
    const int extra = rng.uniform_int(config.extra_bars_range.first, config.extra_bars_range.second);
    for (int k = 0; k < extra; ++k) {
        const std::size_t j = rng.next() % (sys.bars.size() * 2);
        const Point start = j % 2 == 0 ? sys.bars[j / 2].p0 : sys.bars[j / 2].p1;
        const Point end = random_point();
        sys.bars.push_back({start, end, random_width()});
    }
    return sys;
}

/// True when the bar graph (nodes = distinct endpoints) links the support
/// anchor to the load anchor.
inline bool bar_graph_connected(const BarSystem& sys) {
    std::vector<Point> nodes;
    auto node_of = [&](const Point& p) {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i] == p) return static_cast<int>(i);
        nodes.push_back(p);
        return static_cast<int>(nodes.size() - 1);
    };
    const int src = node_of(sys.support_anchor);
    const int dst = node_of(sys.load_anchor);
    std::vector<std::pair<int, int>> edges;
    for (const auto& b : sys.bars) edges.emplace_back(node_of(b.p0), node_of(b.p1));
    std::vector<bool> seen(nodes.size(), false);
    std::deque<int> queue{src};
    seen[src] = true;
    while (!queue.empty()) {
        const int v = queue.front();
        queue.pop_front();
        if (v == dst) return true;
        for (const auto& [a, b] : edges) {
            const int other = a == v ? b : (b == v ? a : -1);
            if (other >= 0 && !seen[other]) {
                seen[other] = true;
                queue.push_back(other);
            }
        }
    }
    return false;
}

inline double point_segment_distance(const Point& p, const Point& a, const Point& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
    const double qx = a.x + t * dx - p.x, qy = a.y + t * dy - p.y;
    return std::sqrt(qx * qx + qy * qy);
}

/// x_e = 1 iff the centroid of element e lies inside some bar's capsule.
inline DensityField rasterize(const BarSystem& sys, const GridMesh& mesh) {
    DensityField field(mesh, 0.0, true);
    for (int elx = 0; elx < mesh.nelx; ++elx)
        for (int ely = 0; ely < mesh.nely; ++ely) {
            const Point c{elx + 0.5, ely + 0.5};
            for (const auto& bar : sys.bars)
                if (point_segment_distance(c, bar.p0, bar.p1) <= bar.width) {
                    field(ely, elx) = 1.0;
                    break;
                }
        }
    return field;
}

/// 8-connected material path from a supported element to a loaded element.
inline bool support_load_connected(const DensityField& field, const FemProblem& problem) {
    const GridMesh& mesh = problem.mesh;
    require(field.matches(mesh), "support_load_connected: shape mismatch");
    std::vector<bool> is_target(mesh.element_count(), false);
    for (int e : load_elements(mesh, problem.bc)) is_target[e] = true;
    std::vector<bool> seen(mesh.element_count(), false);
    std::deque<int> queue;
    for (int e : support_elements(mesh, problem.bc))
        if (field[e] == 1.0) {
            seen[e] = true;
            queue.push_back(e);
        }
    while (!queue.empty()) {
        const int e = queue.front();
        queue.pop_front();
        if (is_target[e]) return true;
        const int elx = e / mesh.nely, ely = e % mesh.nely;
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy) {
                const int nx = elx + dx, ny = ely + dy;
                if (nx < 0 || ny < 0 || nx >= mesh.nelx || ny >= mesh.nely) continue;
                const int n = mesh.element(nx, ny);
                if (!seen[n] && field[n] == 1.0) {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
    }
    return false;
}

/// FEM label for a binary field; void elements are solved at the label floor
/// (x_min) rather than dropped.
inline TrainingSample label_sample(const DensityField& density, const FemProblem& problem) {
    require(density.matches(problem.mesh), "label_sample: shape mismatch");
    require(density.is_exactly_binary(), "label_sample: density must be binary");
    const DensityField lifted = problem.lifted(density);
    const auto analysis = problem.analyze(lifted);
    TrainingSample s{DensityField(density.values, true), analysis.sensitivity};
    return s;
}

/// Sample `index` of a dataset; a pure function of (config, index).
inline TrainingSample generate_sample(const GenConfig& config, std::uint64_t index) {
    Rng rng(config.rng_seed, index);
    for (int attempt = 0; attempt < config.max_resample; ++attempt) {
        const BarSystem sys = sample_bar_system(config, rng);
        DensityField field = rasterize(sys, config.problem.mesh);
        if (field.volume() == 0.0 || !support_load_connected(field, config.problem)) continue;
        return label_sample(field, config.problem);
    }
    throw InputError("generate_sample: resample budget exceeded for sample " + std::to_string(index) +
                     " (bars too thin for the mesh?)");
}

struct Dataset {
    nlohmann::json header;
    GridMesh mesh;
    std::vector<TrainingSample> samples;
};

inline nlohmann::json gen_config_to_json(const GenConfig& c) {
    const auto& m = c.problem.material;
    return {
        {"n_bars_range", {c.n_bars_range.first, c.n_bars_range.second}},
        {"extra_bars_range", {c.extra_bars_range.first, c.extra_bars_range.second}},
        {"width_range", {c.width_range.first, c.width_range.second}},
        {"label_floor", c.label_floor()},
        {"max_resample", c.max_resample},
        {"material", {{"e0", m.e0}, {"nu", m.nu}, {"penal", m.penal}, {"x_min", m.x_min}}},
    };
}

inline Dataset generate_dataset(const GenConfig& config, int count) {
    config.validate();
    require(count >= 1, "generate_dataset: count must be >= 1");
    Dataset ds;
    ds.mesh = config.problem.mesh;
    ds.samples.reserve(count);
    double material = 0.0;
    for (int i = 0; i < count; ++i) {
        ds.samples.push_back(generate_sample(config, static_cast<std::uint64_t>(i)));
        material += ds.samples.back().density.volume();
    }
    const int n = ds.mesh.element_count();
    ds.header = {
        {"format", "cnnto-dataset"},
        {"format_version", 1},
        {"toolkit_version", kToolkitVersion},
        {"count", count},
        {"nelx", ds.mesh.nelx},
        {"nely", ds.mesh.nely},
        {"seed", config.rng_seed},
        {"bc_preset", config.bc_preset},
        {"bc", bc_to_json(config.problem.bc)},
        {"generator", gen_config_to_json(config)},
        {"mean_material_fraction", material / (static_cast<double>(count) * n)},
        {"record", {{"density", "u8"}, {"sensitivity", "f64le"}, {"order", "row-major"},
                    {"bytes", n * (1 + 8)}}},
    };
    return ds;
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
    auto out = open_for_write(path, true);
    write_container_header(out, "CNNTODS1", ds.header);
    for (const auto& s : ds.samples) {
        for (int r = 0; r < ds.mesh.nely; ++r)
            for (int c = 0; c < ds.mesh.nelx; ++c) out.put(s.density(r, c) == 1.0 ? 1 : 0);
        for (int r = 0; r < ds.mesh.nely; ++r)
            for (int c = 0; c < ds.mesh.nelx; ++c) write_le<double>(out, s.sensitivity.values(r, c));
    }
    if (!out) throw InputError("write_dataset: I/O error on '" + path.string() + "'");
}

inline Dataset read_dataset(const std::filesystem::path& path) {
    auto in = open_for_read(path, true);
    Dataset ds;
    ds.header = read_container_header(in, "CNNTODS1", "dataset '" + path.string() + "'");
    int count = 0;
    try {
        ds.mesh = GridMesh(ds.header.at("nelx").get<int>(), ds.header.at("nely").get<int>());
        count = ds.header.at("count").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("dataset header: ") + e.what());
    }
    for (int i = 0; i < count; ++i) {
        TrainingSample s{DensityField(ds.mesh, 0.0, true), {Eigen::MatrixXd(ds.mesh.nely, ds.mesh.nelx)}};
        for (int r = 0; r < ds.mesh.nely; ++r)
            for (int c = 0; c < ds.mesh.nelx; ++c) {
                const int b = in.get();
                if (b != 0 && b != 1) throw InputError("dataset: bad density byte in record " + std::to_string(i));
                s.density(r, c) = b;
            }
        for (int r = 0; r < ds.mesh.nely; ++r)
            for (int c = 0; c < ds.mesh.nelx; ++c) s.sensitivity.values(r, c) = read_le<double>(in);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace cnnto
