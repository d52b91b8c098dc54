#include "kplab/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kplab {

namespace {

constexpr char kMagic[6] = {'K', 'P', 'C', 'H', 'K', '1'};
constexpr uint8_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

double get_f64(const unsigned char* p) {
  const uint64_t bits = get_u64(p);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoints(const std::string& path, const CheckpointSeries& series) {
  if (series.weights.empty()) {
    throw std::invalid_argument("save_checkpoints: series has no snapshots");
  }
  const size_t params = series.weights[0].size();
  for (const auto& w : series.weights) {
    if (w.size() != params) {
      throw std::invalid_argument("save_checkpoints: snapshot dimensionality mismatch");
    }
  }
  std::string buf;
  buf.reserve(20 + series.weights.size() * params * 8);
  buf.append(kMagic, 6);
  buf.push_back(static_cast<char>(kVersion));
  buf.push_back(static_cast<char>(series.kind));
  put_u32(buf, static_cast<uint32_t>(series.weights.size()));
  put_u64(buf, params);
  for (const auto& w : series.weights) {
    for (double v : w) put_f64(buf, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoints: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("save_checkpoints: write failed for " + path);
  f.close();

  std::ostringstream meta;
  meta << "seed=" << series.seed << "\n";
  meta << "kind=" << static_cast<int>(series.kind) << "\n";
  char num[40];
  std::snprintf(num, sizeof(num), "%.17g", series.final_accuracy);
  meta << "final_accuracy=" << num << "\n";
  meta << "loss_curve=";
  for (size_t i = 0; i < series.loss_curve.size(); ++i) {
    std::snprintf(num, sizeof(num), "%.17g", series.loss_curve[i]);
    meta << (i ? "," : "") << num;
  }
  meta << "\n";
  std::ofstream mf(path + ".meta", std::ios::trunc);
  if (!mf) throw std::runtime_error("save_checkpoints: cannot open " + path + ".meta");
  mf << meta.str();
}

CheckpointSeries load_checkpoints(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoints: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || std::memcmp(buf.data(), kMagic, 6) != 0) {
    throw std::runtime_error("load_checkpoints: " + path + " is not a KPCHK1 file");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (p[6] != kVersion) {
    throw std::runtime_error("load_checkpoints: unsupported version " + std::to_string(p[6]));
  }
  CheckpointSeries series;
  series.kind = p[7];
  const uint32_t snapshots = get_u32(p + 8);
  const uint64_t params = get_u64(p + 12);
  const size_t need = 20 + static_cast<size_t>(snapshots) * params * 8;
  if (snapshots == 0 || buf.size() != need) {
    throw std::runtime_error("load_checkpoints: truncated or corrupt " + path);
  }
  series.weights.resize(snapshots);
  size_t off = 20;
  for (uint32_t e = 0; e < snapshots; ++e) {
    series.weights[e].resize(params);
    for (uint64_t i = 0; i < params; ++i, off += 8) {
      series.weights[e][i] = get_f64(p + off);
    }
  }

  std::ifstream mf(path + ".meta");
  if (mf) {
    std::string line;
    while (std::getline(mf, line)) {
      const size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      if (key == "seed") {
        series.seed = std::strtoull(val.c_str(), nullptr, 10);
      } else if (key == "final_accuracy") {
        series.final_accuracy = std::strtod(val.c_str(), nullptr);
      } else if (key == "loss_curve" && !val.empty()) {
        std::istringstream vs(val);
        std::string item;
        while (std::getline(vs, item, ',')) {
          series.loss_curve.push_back(std::strtod(item.c_str(), nullptr));
        }
      }
    }
  }
  return series;
}

bool checkpoint_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

}  // namespace kplab
