#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kplab/nn.hpp"
#include "kplab/quantify.hpp"

namespace kplab {

// One synthetic sample: a class-specific shape over structured clutter with
// an exact per-pixel foreground mask.
struct MaskedSample {
  Tensor image;               // [1,h,w] in [0,1]
  size_t label = 0;
  std::vector<uint8_t> mask;  // h*w flags, exactly the shape's pixels
  std::string id;
};

struct MaskedDataset {
  std::vector<MaskedSample> samples;
  size_t classes = 0;
  size_t height = 32, width = 32;
};

// Deterministic generator. Each class renders one shape family
// (bars/disk/cross/ring/frame/diamond orientations) at a random position and
// size over low-frequency texture plus reduced-contrast fragments of other
// classes' shapes. Size bounds keep the foreground fraction in [5%, 60%] and
// every sample's grid-reduced mask nonempty on both sides for `grid`.
MaskedDataset gen_dataset(uint64_t seed, size_t n_per_class, size_t classes,
                          const GridGeometry& grid = GridGeometry{32, 32, 4, 4});

// Cell is foreground iff more than half of its pixels are foreground.
std::vector<uint8_t> grid_reduced_mask(const std::vector<uint8_t>& pixel_mask,
                                       const GridGeometry& grid);

LabeledDataset as_labeled(const MaskedDataset& data, size_t begin = 0,
                          size_t end = static_cast<size_t>(-1));

}  // namespace kplab
