#include "kplab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "kplab/rng.hpp"

namespace kplab {

namespace {

constexpr size_t kShapeFamilies = 8;

// Pixel predicate for shape family `family` with extent `size`, relative to
// a center; `size` is bounded by the caller so foreground fractions stay in
// range.
std::function<bool(int, int)> shape_predicate(size_t family, int size) {
  switch (family % kShapeFamilies) {
    case 0:  // horizontal bar
      return [size](int dy, int dx) { return std::abs(dy) <= 2 && std::abs(dx) <= size; };
    case 1:  // disk
      return [size](int dy, int dx) { return dy * dy + dx * dx <= size * size; };
    case 2:  // plus cross
      return [size](int dy, int dx) {
        return (std::abs(dy) <= 2 && std::abs(dx) <= size) ||
               (std::abs(dx) <= 2 && std::abs(dy) <= size);
      };
    case 3:  // ring
      return [size](int dy, int dx) {
        const int r2 = dy * dy + dx * dx;
        const int inner = size - 3;
        return r2 <= size * size && r2 > inner * inner;
      };
    case 4:  // vertical bar
      return [size](int dy, int dx) { return std::abs(dx) <= 2 && std::abs(dy) <= size; };
    case 5:  // diagonal cross
      return [size](int dy, int dx) {
        if (std::abs(dy) > size || std::abs(dx) > size) return false;
        return std::abs(dy - dx) <= 2 || std::abs(dy + dx) <= 2;
      };
    case 6:  // square frame
      return [size](int dy, int dx) {
        const int m = std::max(std::abs(dy), std::abs(dx));
        return m <= size && m > size - 3;
      };
    default:  // filled diamond
      return [size](int dy, int dx) { return std::abs(dy) + std::abs(dx) <= size; };
  }
}

int draw_size(size_t family, Rng& rng) {
  switch (family % kShapeFamilies) {
    case 0:
    case 4:
      return rng.range_int(8, 12);   // bar half-length
    case 1:
      return rng.range_int(5, 8);    // disk radius
    case 2:
      return rng.range_int(7, 10);   // cross half-length
    case 3:
      return rng.range_int(7, 9);    // ring outer radius
    case 5:
      return rng.range_int(7, 10);
    case 6:
      return rng.range_int(6, 9);    // frame half-side
    default:
      return rng.range_int(6, 9);    // diamond radius
  }
}

void render(std::vector<uint8_t>& hit, size_t h, size_t w, size_t family, int size, int cy,
            int cx) {
  auto pred = shape_predicate(family, size);
  for (int y = std::max(0, cy - size - 3); y <= std::min(static_cast<int>(h) - 1, cy + size + 3);
       ++y) {
    for (int x = std::max(0, cx - size - 3);
         x <= std::min(static_cast<int>(w) - 1, cx + size + 3); ++x) {
      if (pred(y - cy, x - cx)) hit[static_cast<size_t>(y) * w + x] = 1;
    }
  }
}

// Low-frequency clutter: a coarse random lattice bilinearly upsampled.
std::vector<double> texture(size_t h, size_t w, Rng& rng) {
  constexpr size_t kCoarse = 5;
  double lattice[kCoarse + 1][kCoarse + 1];
  for (size_t i = 0; i <= kCoarse; ++i) {
    for (size_t j = 0; j <= kCoarse; ++j) lattice[i][j] = rng.uniform(0.18, 0.5);
  }
  std::vector<double> img(h * w);
  for (size_t y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / static_cast<double>(h - 1) * kCoarse;
    const size_t iy = std::min(kCoarse - 1, static_cast<size_t>(fy));
    const double ty = fy - static_cast<double>(iy);
    for (size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / static_cast<double>(w - 1) * kCoarse;
      const size_t ix = std::min(kCoarse - 1, static_cast<size_t>(fx));
      const double tx = fx - static_cast<double>(ix);
      const double top = lattice[iy][ix] * (1 - tx) + lattice[iy][ix + 1] * tx;
      const double bot = lattice[iy + 1][ix] * (1 - tx) + lattice[iy + 1][ix + 1] * tx;
      img[y * w + x] = top * (1 - ty) + bot * ty;
    }
  }
  return img;
}

}  // namespace

std::vector<uint8_t> grid_reduced_mask(const std::vector<uint8_t>& pixel_mask,
                                       const GridGeometry& grid) {
  grid.validate();
  if (pixel_mask.size() != grid.img_h * grid.img_w) {
    throw std::invalid_argument("grid_reduced_mask: mask does not match the grid extents");
  }
  std::vector<uint8_t> cells(grid.cell_count(), 0);
  const size_t half = grid.cell_h * grid.cell_w / 2;
  for (size_t r = 0; r < grid.cells_h(); ++r) {
    for (size_t c = 0; c < grid.cells_w(); ++c) {
      size_t hits = 0;
      for (size_t dy = 0; dy < grid.cell_h; ++dy) {
        const size_t y = r * grid.cell_h + dy;
        for (size_t dx = 0; dx < grid.cell_w; ++dx) {
          hits += pixel_mask[y * grid.img_w + c * grid.cell_w + dx];
        }
      }
      cells[r * grid.cells_w() + c] = hits > half ? 1 : 0;
    }
  }
  return cells;
}

MaskedDataset gen_dataset(uint64_t seed, size_t n_per_class, size_t classes,
                          const GridGeometry& grid) {
  if (classes < 2) throw std::invalid_argument("gen_dataset: need at least 2 classes");
  if (classes > kShapeFamilies) {
    throw std::invalid_argument("gen_dataset: shape palette supports up to " +
                                std::to_string(kShapeFamilies) + " classes");
  }
  if (n_per_class < 1) throw std::invalid_argument("gen_dataset: n_per_class must be >= 1");
  grid.validate();
  const size_t h = grid.img_h, w = grid.img_w;
  const size_t pixels = h * w;
  const size_t min_fg = (pixels * 5 + 99) / 100;
  const size_t max_fg = pixels * 60 / 100;

  MaskedDataset out;
  out.classes = classes;
  out.height = h;
  out.width = w;
  Rng rng(mix_seed(seed, 0x64617461ULL));  // "data"

  for (size_t cls = 0; cls < classes; ++cls) {
    for (size_t i = 0; i < n_per_class; ++i) {
      MaskedSample sample;
      sample.label = cls;
      sample.id = "c" + std::to_string(cls) + "_" + std::to_string(i);

      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        const int size = draw_size(cls, rng);
        const int margin = size + 1;
        if (2 * margin >= static_cast<int>(std::min(h, w))) continue;
        const int cy = rng.range_int(margin, static_cast<int>(h) - 1 - margin);
        const int cx = rng.range_int(margin, static_cast<int>(w) - 1 - margin);
        std::vector<uint8_t> mask(pixels, 0);
        render(mask, h, w, cls, size, cy, cx);
        const size_t fg = static_cast<size_t>(std::count(mask.begin(), mask.end(), 1));
        if (fg < min_fg || fg > max_fg) continue;
        const auto cells = grid_reduced_mask(mask, grid);
        const size_t fg_cells = static_cast<size_t>(std::count(cells.begin(), cells.end(), 1));
        if (fg_cells == 0 || fg_cells == cells.size()) continue;

        std::vector<double> img = texture(h, w, rng);
        const size_t n_frag = 1 + rng.index(2);
        for (size_t fgm = 0; fgm < n_frag; ++fgm) {
          size_t other = rng.index(classes);
          if (other == cls) other = (other + 1) % classes;
          const int fsize = std::max(3, draw_size(other, rng) - 2);
          const int fy = rng.range_int(fsize, static_cast<int>(h) - 1 - fsize);
          const int fx = rng.range_int(fsize, static_cast<int>(w) - 1 - fsize);
          std::vector<uint8_t> frag(pixels, 0);
          render(frag, h, w, other, fsize, fy, fx);
          const double bump = rng.uniform(0.12, 0.2);
          for (size_t p = 0; p < pixels; ++p) {
            if (frag[p]) img[p] = std::min(1.0, img[p] + bump);
          }
        }
        const double fg_level = rng.uniform(0.78, 0.95);
        for (size_t p = 0; p < pixels; ++p) {
          if (mask[p]) img[p] = std::clamp(fg_level + rng.uniform(-0.03, 0.03), 0.0, 1.0);
        }
        sample.image = Tensor::from({1, h, w}, std::move(img), false);
        sample.mask = std::move(mask);
        placed = true;
      }
      if (!placed) {
        throw std::runtime_error("gen_dataset: could not place a valid shape for class " +
                                 std::to_string(cls) + " after 100 attempts");
      }
      out.samples.push_back(std::move(sample));
    }
  }
  return out;
}

LabeledDataset as_labeled(const MaskedDataset& data, size_t begin, size_t end) {
  end = std::min(end, data.samples.size());
  if (begin > end) throw std::invalid_argument("as_labeled: begin past end");
  LabeledDataset out;
  out.reserve(end - begin);
  for (size_t i = begin; i < end; ++i) {
    out.push_back({data.samples[i].image, data.samples[i].label});
  }
  return out;
}

}  // namespace kplab
