#include "cde/heatmap.hpp"

#include "cde/errors.hpp"

#include <cmath>
#include <fstream>

namespace cde {

std::array<unsigned char, 3> heatmap_color(double v) {
    v = std::min(1.0, std::max(-1.0, v));
    if (v <= 0.0) {
        const auto c = static_cast<unsigned char>(std::lround(255.0 * (1.0 + v)));
        return {c, c, 255};
    }
    const auto c = static_cast<unsigned char>(std::lround(255.0 * (1.0 - v)));
    return {255, c, c};
}

std::size_t emit_heatmap(const SimilarityMatrix& matrix,
                         const std::vector<std::string>& action_names, const std::string& path,
                         std::size_t cell_px) {
    const std::size_t A = matrix.values.rows();
    if (A == 0 || cell_px == 0) throw ConfigError("emit_heatmap: empty matrix or zero cell size");
    const std::size_t side = A * cell_px;

    std::vector<unsigned char> pixels(side * side * 3);
    std::size_t clamped = 0;
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t b = 0; b < A; ++b) {
            std::array<unsigned char, 3> rgb{128, 128, 128}; // missing entry
            if (matrix.entry_valid(a, b)) {
                const double v = matrix.values.at(a, b);
                if (v < -1.0 || v > 1.0) ++clamped;
                rgb = heatmap_color(v);
            }
            for (std::size_t py = 0; py < cell_px; ++py) {
                unsigned char* row = pixels.data() + ((a * cell_px + py) * side + b * cell_px) * 3;
                for (std::size_t px = 0; px < cell_px; ++px) {
                    row[px * 3 + 0] = rgb[0];
                    row[px * 3 + 1] = rgb[1];
                    row[px * 3 + 2] = rgb[2];
                }
            }
        }
    }

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << "P6\n" << side << ' ' << side << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
    if (!os) throw IoError("write failed for " + path);

    std::ofstream legend(path + ".legend.txt", std::ios::binary | std::ios::trunc);
    if (!legend) throw IoError("cannot write legend for " + path);
    legend << "rows/columns in action declaration order:\n";
    for (std::size_t a = 0; a < A; ++a) {
        legend << a << ": " << (a < action_names.size() ? action_names[a] : "?") << '\n';
    }
    legend << "color ramp: -1 -> (0,0,255), 0 -> (255,255,255), +1 -> (255,0,0), linear\n";
    legend << "missing entries: (128,128,128)\n";
    return clamped;
}

} // namespace cde
