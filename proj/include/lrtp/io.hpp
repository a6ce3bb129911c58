#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lrtp/costmodel.hpp"
#include "lrtp/decomposition.hpp"
#include "lrtp/kvcache.hpp"
#include "lrtp/model_config.hpp"

namespace lrtp {

// Binary layout: "DLR1", u32 LE manifest length, UTF-8 JSON manifest
// {"tensors":[{"name","rows","cols","offset"}...]}, then the payload of
// little-endian f64 values, row-major. Offsets are relative to the payload.
struct ArchiveEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint64_t offset = 0;
};

class WeightArchive {
 public:
  // kInput on a duplicate name.
  void add(const std::string& name, DenseMatrix m);
  bool contains(const std::string& name) const { return tensors_.contains(name); }
  // kPlan naming the tensor when absent.
  const DenseMatrix& at(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return tensors_.size(); }

  std::vector<std::uint8_t> serialize() const;
  // kIo on any framing, manifest or payload inconsistency.
  static WeightArchive deserialize(std::span<const std::uint8_t> bytes);

  void write(const std::filesystem::path& path) const;
  static WeightArchive read(const std::filesystem::path& path);

  friend bool operator==(const WeightArchive&, const WeightArchive&) = default;

 private:
  std::map<std::string, DenseMatrix> tensors_;
};

std::string tensor_name(std::size_t layer, LayerMatrix m);

WeightArchive archive_dense(std::span<const DenseLayer> layers);
WeightArchive archive_factors(std::span<const FactorLayer> layers);
// Pulls "layers.<i>.<matrix>" for every matrix the config implies.
std::vector<DenseLayer> dense_from_archive(const WeightArchive& archive, const ModelConfig& config);
// Pulls "layers.<i>.<matrix>.down" / ".up".
std::vector<FactorLayer> factors_from_archive(const WeightArchive& archive, const ModelConfig& config);

// Matrices present in a block of this config, in canonical order.
std::vector<LayerMatrix> config_matrices(const ModelConfig& config);
// (d_in, d_out) of one matrix.
std::pair<std::size_t, std::size_t> matrix_shape(const ModelConfig& config, LayerMatrix m);
// Ratio plan computed from shapes alone, no weights needed.
DecompositionPlan plan_from_ratio(const ModelConfig& config, double ratio);
DecompositionPlan plan_lossless(const ModelConfig& config);

enum class ConventionSelection { kTabulated, kMeasured, kBoth };
ConventionSelection parse_convention_selection(std::string_view s);
std::vector<CostConvention> conventions(ConventionSelection s);

// One run, as read from a JSON config file:
// {
//   "model": {"num_heads", "num_kv_heads", "head_dim", "intermediate_dim",
//             "mlp": "glu"|"non_glu", "rope", "rope_base", "num_layers",
//             optional "hidden_dim"/"kv_dim" overrides},
//   "plan": {"ratio": r} | {"ranks": {"q": .., ...}} | {"lossless": true},
//   "tp": [1, 2, 4], "seed": 42,
//   "cache": {"block_size", "num_blocks", "max_tokens", "max_sequences", "scramble_seed"},
//   "convention": "tabulated"|"measured"|"both", "bytes_per_element": 2
// }
struct RunConfig {
  ModelConfig model;
  std::optional<double> ratio;
  std::map<LayerMatrix, std::size_t> ranks;  // explicit, applied to every layer
  bool lossless = false;
  std::vector<std::size_t> tp{1, 2, 4};
  std::uint64_t seed = 0;
  CacheSettings cache;
  ConventionSelection convention = ConventionSelection::kBoth;
  std::size_t bytes_per_element = 2;

  // Explicit ranks win over a ratio; neither means lossless.
  DecompositionPlan plan() const;
  CostInputs cost_inputs() const;
  // Throws kConfig (or the module's own code) on anything invalid.
  void validate() const;

  static RunConfig parse(const std::string& json_text);
  static RunConfig load(const std::filesystem::path& path);
};

// Reads {"q": 4916, ...} (optionally wrapped in {"ranks": {...}}).
std::map<LayerMatrix, std::size_t> load_ranks(const std::filesystem::path& path);
std::map<LayerMatrix, std::size_t> parse_ranks(const std::string& json_text);

}  // namespace lrtp
