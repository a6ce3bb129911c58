#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrtp/linalg.hpp"

namespace lrtp {

// Named weight matrices of one transformer block. Gate exists only for
// gated (GLU) MLPs.
enum class LayerMatrix { kQ, kK, kV, kO, kUp, kGate, kDown };

inline constexpr std::array<LayerMatrix, 7> kAllLayerMatrices = {
    LayerMatrix::kQ,  LayerMatrix::kK,    LayerMatrix::kV,   LayerMatrix::kO,
    LayerMatrix::kUp, LayerMatrix::kGate, LayerMatrix::kDown};

std::string_view to_string(LayerMatrix m);
std::optional<LayerMatrix> parse_layer_matrix(std::string_view name);

// W (d_in x d_out) ~= down (d_in x rank) * up (rank x d_out).
struct FactorPair {
  DenseMatrix down;
  DenseMatrix up;

  std::size_t rank() const noexcept { return down.cols(); }
  std::size_t d_in() const noexcept { return down.rows(); }
  std::size_t d_out() const noexcept { return up.cols(); }
  std::size_t parameter_count() const noexcept { return down.size() + up.size(); }
  DenseMatrix product() const { return matmul(down, up); }
};

FactorPair decompose_matrix(const DenseMatrix& w, std::size_t rank);

// round((1 - ratio) * min(d_in, d_out)), at least 1.
std::size_t rank_from_ratio(double compression_ratio, std::size_t d_in, std::size_t d_out);

using DenseLayer = std::map<LayerMatrix, DenseMatrix>;
using FactorLayer = std::map<LayerMatrix, FactorPair>;

// Per-layer, per-matrix ranks. Layers and matrices may all differ.
class DecompositionPlan {
 public:
  DecompositionPlan() = default;
  explicit DecompositionPlan(std::size_t num_layers) : ranks_(num_layers) {}

  // Same rank map for every layer.
  static DecompositionPlan uniform(std::size_t num_layers,
                                   const std::map<LayerMatrix, std::size_t>& ranks);
  // Ranks derived from a compression ratio against the given dense layers.
  static DecompositionPlan from_ratio(std::span<const DenseLayer> layers, double ratio);
  // Every rank equal to its matrix's min dimension.
  static DecompositionPlan lossless(std::span<const DenseLayer> layers);

  std::size_t num_layers() const noexcept { return ranks_.size(); }
  void set(std::size_t layer, LayerMatrix m, std::size_t rank);
  std::optional<std::size_t> rank(std::size_t layer, LayerMatrix m) const;
  const std::map<LayerMatrix, std::size_t>& layer(std::size_t layer) const { return ranks_.at(layer); }

 private:
  std::vector<std::map<LayerMatrix, std::size_t>> ranks_;
};

struct DecomposedModel {
  std::vector<FactorLayer> layers;
  std::vector<DenseLayer> dense;  // originals, kept for oracle comparisons
};

// Throws kPlan when a present matrix has no planned rank or the rank is out
// of bounds.
DecomposedModel decompose_model(std::span<const DenseLayer> weights, const DecompositionPlan& plan);

// Collapses a conformable chain M0 * M1 * ... * Mn into two factors, cutting
// at the smallest inner dimension (leftmost on ties).
FactorPair absorb_factor_chain(std::span<const DenseMatrix> chain);

}  // namespace lrtp
