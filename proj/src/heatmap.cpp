#include "kplab/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace kplab {

void emit_heatmap(const EntropyMap& map, const std::string& path) {
  if (map.entropy.empty()) throw std::invalid_argument("emit_heatmap: empty map");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("emit_heatmap: cannot open " + path);
  const double lo = *std::min_element(map.entropy.begin(), map.entropy.end());
  const double hi = *std::max_element(map.entropy.begin(), map.entropy.end());
  const size_t cw = map.grid.cells_w(), ch = map.grid.cells_h();
  f << "P2\n" << cw << " " << ch << "\n255\n";
  for (size_t r = 0; r < ch; ++r) {
    for (size_t c = 0; c < cw; ++c) {
      int gray = 0;
      if (hi > lo) {
        gray = static_cast<int>(
            std::lround(255.0 * (hi - map.entropy[r * cw + c]) / (hi - lo)));
      }
      f << gray << (c + 1 < cw ? " " : "\n");
    }
  }
  if (!f) throw std::runtime_error("emit_heatmap: write failed for " + path);
}

}  // namespace kplab
