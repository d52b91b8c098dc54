#pragma once

#include <string>

#include "kplab/nn.hpp"

namespace kplab {

// KPCHK1 checkpoint container, byte-exact layout:
//   bytes 0-5   magic "KPCHK1"
//   byte  6     format version (0x01)
//   byte  7     kind flag: 0 = scratch training, 1 = distill phase 1, 2 = final
//   bytes 8-11  u32 little-endian snapshot count (epochs + 1, includes epoch 0)
//   bytes 12-19 u64 little-endian parameter count
//   then        snapshot_count * parameter_count IEEE-754 doubles, little-endian
// A sidecar "<path>.meta" key=value file carries seed, loss curve and accuracy.
void save_checkpoints(const std::string& path, const CheckpointSeries& series);
CheckpointSeries load_checkpoints(const std::string& path);
bool checkpoint_exists(const std::string& path);

}  // namespace kplab
