#pragma once

#include <string>

#include "kplab/quantify.hpp"

namespace kplab {

// Plain-text PGM ("P2"), one pixel per grid cell, maxval 255.
// gray = round(255 * (H_max - H_i) / (H_max - H_min)), so cells whose
// information survives to the tap (low entropy) render bright. A constant
// map emits all zeros.
void emit_heatmap(const EntropyMap& map, const std::string& path);

}  // namespace kplab
