#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rflx/model.hpp"

namespace rflx {

/// RFLXW1: magic, config fields as little-endian u32 in declaration order,
/// then every tensor in declaration order as little-endian f64, row-major.
std::string encode_weights(const ModelConfig& config, const Weights& weights);
Model decode_weights(std::string_view bytes);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

/// Per-layer hidden-state blocks: block l holds n_positions rows of dim
/// values (the post-MLP residual of layer l).
struct StateDump {
  std::uint32_t layer_count = 0;
  std::uint32_t n_positions = 0;
  std::uint32_t dim = 0;
  std::vector<double> data;  // layer-major, then position, then component

  std::span<const double> at(std::size_t layer, std::size_t position) const {
    return {data.data() + (layer * n_positions + position) * dim, dim};
  }
  bool operator==(const StateDump&) const = default;
};

/// RFLXH1: magic, layer_count, n_positions, dim as little-endian u32, then
/// the blocks as little-endian f64.
std::string encode_states(const StateDump& dump);
StateDump decode_states(std::string_view bytes);
void save_states(const std::filesystem::path& path, const StateDump& dump);
StateDump load_states(const std::filesystem::path& path);

namespace le {
void put_u32(std::string& out, std::uint32_t v);
void put_f64(std::string& out, double v);
/// Cursor over a byte buffer; throws InvalidFormat on overrun.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32();
  double f64();
  void expect_magic(std::string_view magic);
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  std::string_view bytes_;
  std::size_t pos_ = 0;
};
}  // namespace le

}  // namespace rflx
