#pragma once

#include "cde/evalsuite.hpp"

#include <array>
#include <string>
#include <vector>

namespace cde {

/// Diverging ramp, fixed numerically so image tests are bit-exact:
///   v in [-1, 0]: (R, G, B) = (round(255*(1+v)), round(255*(1+v)), 255)
///   v in ( 0, 1]: (R, G, B) = (255, round(255*(1-v)), round(255*(1-v)))
/// so -1 is pure blue, 0 white, +1 pure red. Missing entries are gray
/// (128, 128, 128). Out-of-range values clamp (the call reports how many).
std::array<unsigned char, 3> heatmap_color(double v);

/// Writes a binary PPM (P6), cell_px x cell_px pixels per matrix entry, rows
/// and columns in action declaration order, plus a "<path>.legend.txt"
/// sidecar recording that order and the ramp. Returns the clamp count.
std::size_t emit_heatmap(const SimilarityMatrix& matrix,
                         const std::vector<std::string>& action_names, const std::string& path,
                         std::size_t cell_px = 32);

} // namespace cde
