#pragma once

#include "cnnto/fem.hpp"
#include "cnnto/rng.hpp"

#include <string>
#include <vector>

namespace cnnto::testing {

/// '#' = material, anything else = void. Rows top to bottom.
inline DensityField field_from_ascii(const std::vector<std::string>& rows) {
    const int nely = static_cast<int>(rows.size());
    const int nelx = static_cast<int>(rows.front().size());
    DensityField f(GridMesh(nelx, nely), 0.0, true);
    for (int r = 0; r < nely; ++r)
        for (int c = 0; c < nelx; ++c) f(r, c) = rows[r][c] == '#' ? 1.0 : 0.0;
    return f;
}

/// Cantilever-shaped structure with one of each defect: a floating 2x2
/// island at rows 1-2 / cols 10-11, a one-cell hole at (5, 6) and a diagonal
/// two-element spur whose tip sits at (2, 14). Anchors come from the
/// cantilever preset on a 16x8 mesh.
inline DensityField composite_fixture() {
    return field_from_ascii({
        "#...............",
        "#.........##....",
        "#.........##..#.",
        "#............#..",
        "################",
        "######.#########",
        "################",
        "################",
    });
}

inline DensityField random_binary(Rng& rng, const GridMesh& mesh, double p) {
    DensityField f(mesh, 0.0, true);
    for (int i = 0; i < f.size(); ++i) f[i] = rng.uniform() < p ? 1.0 : 0.0;
    return f;
}

}  // namespace cnnto::testing
