#include "lrtp/decomposition.hpp"

#include <algorithm>
#include <cmath>

namespace lrtp {

std::string_view to_string(LayerMatrix m) {
  switch (m) {
    case LayerMatrix::kQ: return "q";
    case LayerMatrix::kK: return "k";
    case LayerMatrix::kV: return "v";
    case LayerMatrix::kO: return "o";
    case LayerMatrix::kUp: return "up";
    case LayerMatrix::kGate: return "gate";
    case LayerMatrix::kDown: return "down";
  }
  return "?";
}

std::optional<LayerMatrix> parse_layer_matrix(std::string_view name) {
  for (LayerMatrix m : kAllLayerMatrices) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

FactorPair decompose_matrix(const DenseMatrix& w, std::size_t rank) {
  TruncatedSVDResult svd = truncated_svd(w, rank);
  return FactorPair{std::move(svd.left_factor), std::move(svd.right_factor)};
}

std::size_t rank_from_ratio(double compression_ratio, std::size_t d_in, std::size_t d_out) {
  if (!(compression_ratio >= 0.0) || compression_ratio >= 1.0) {
    throw Error(ErrorCode::kParameter,
                "compression ratio must lie in [0, 1), got " + std::to_string(compression_ratio));
  }
  const double kept = (1.0 - compression_ratio) * static_cast<double>(std::min(d_in, d_out));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(kept)));
}

DecompositionPlan DecompositionPlan::uniform(std::size_t num_layers,
                                             const std::map<LayerMatrix, std::size_t>& ranks) {
  DecompositionPlan plan(num_layers);
  for (auto& layer : plan.ranks_) layer = ranks;
  return plan;
}

DecompositionPlan DecompositionPlan::from_ratio(std::span<const DenseLayer> layers, double ratio) {
  DecompositionPlan plan(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& [name, w] : layers[i]) plan.set(i, name, rank_from_ratio(ratio, w.rows(), w.cols()));
  }
  return plan;
}

DecompositionPlan DecompositionPlan::lossless(std::span<const DenseLayer> layers) {
  DecompositionPlan plan(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& [name, w] : layers[i]) plan.set(i, name, std::min(w.rows(), w.cols()));
  }
  return plan;
}

void DecompositionPlan::set(std::size_t layer, LayerMatrix m, std::size_t rank) {
  if (layer >= ranks_.size()) ranks_.resize(layer + 1);
  ranks_[layer][m] = rank;
}

std::optional<std::size_t> DecompositionPlan::rank(std::size_t layer, LayerMatrix m) const {
  if (layer >= ranks_.size()) return std::nullopt;
  auto it = ranks_[layer].find(m);
  if (it == ranks_[layer].end()) return std::nullopt;
  return it->second;
}

DecomposedModel decompose_model(std::span<const DenseLayer> weights, const DecompositionPlan& plan) {
  // Validate the whole plan before spending time on any SVD.
  for (std::size_t i = 0; i < weights.size(); ++i) {
    for (const auto& [name, w] : weights[i]) {
      const std::string where = "layers." + std::to_string(i) + "." + std::string(to_string(name));
      const auto r = plan.rank(i, name);
      if (!r) throw Error(ErrorCode::kPlan, "no rank planned for " + where);
      const std::size_t bound = std::min(w.rows(), w.cols());
      if (*r < 1 || *r > bound) {
        throw Error(ErrorCode::kPlan, "rank " + std::to_string(*r) + " for " + where +
                                          " outside [1, " + std::to_string(bound) + "]");
      }
    }
  }
  DecomposedModel model;
  model.dense.assign(weights.begin(), weights.end());
  model.layers.resize(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    for (const auto& [name, w] : weights[i]) {
      model.layers[i].emplace(name, decompose_matrix(w, *plan.rank(i, name)));
    }
  }
  return model;
}

namespace {

DenseMatrix chain_product(std::span<const DenseMatrix> chain) {
  DenseMatrix acc = chain.front();
  for (std::size_t i = 1; i < chain.size(); ++i) acc = matmul(acc, chain[i]);
  return acc;
}

}  // namespace

FactorPair absorb_factor_chain(std::span<const DenseMatrix> chain) {
  if (chain.size() < 2) throw Error(ErrorCode::kShape, "factor chain needs at least two matrices");
  for (std::size_t i = 0; i + 1 < chain.size(); ++i) {
    if (chain[i].cols() != chain[i + 1].rows()) {
      throw Error(ErrorCode::kShape, "factor chain not conformable at position " + std::to_string(i));
    }
  }
  std::size_t cut = 0;
  for (std::size_t i = 1; i + 1 < chain.size(); ++i) {
    if (chain[i].cols() < chain[cut].cols()) cut = i;
  }
  return FactorPair{chain_product(chain.subspan(0, cut + 1)), chain_product(chain.subspan(cut + 1))};
}

}  // namespace lrtp
