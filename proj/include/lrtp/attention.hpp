#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lrtp/linalg.hpp"
#include "lrtp/model_config.hpp"

namespace lrtp {

// Which query heads (and the kv heads they read) a worker holds. Query head g
// reads kv head floor(g * num_kv_heads / num_heads).
struct HeadSlice {
  std::size_t num_heads = 0;
  std::size_t num_kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t q_begin = 0;
  std::size_t q_count = 0;
  std::size_t kv_begin = 0;
  std::size_t kv_count = 0;

  static HeadSlice full(const ModelConfig& config);
  // Throws kPartition when heads cannot be split over world_size workers.
  static HeadSlice for_worker(const ModelConfig& config, std::size_t rank, std::size_t world_size);

  std::size_t local_kv_for(std::size_t local_q) const {
    return (q_begin + local_q) * num_kv_heads / num_heads - kv_begin;
  }
  std::size_t q_width() const noexcept { return q_count * head_dim; }
  std::size_t kv_width() const noexcept { return kv_count * head_dim; }
};

// Rotates each (2i, 2i+1) pair of every head in `row` by
// position * base^(-2i / head_dim).
void rope_in_place(std::span<double> row, std::size_t head_dim, std::size_t position, double base);

// Row r of `x` is rotated with positions[r]; throws kConfig on odd head_dim.
DenseMatrix apply_rope(const DenseMatrix& x, std::size_t head_dim, std::span<const std::size_t> positions,
                       double base);

// softmax(q k^T / sqrt(d) + mask) v over packed heads. Query row i sees key j
// when key_positions[j] <= query_positions[i] (or always, without a mask).
// Adds 4 * head_dim FLOPs per (head, query, visible key) to *flops.
DenseMatrix attend(const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v, const HeadSlice& heads,
                   std::span<const std::size_t> query_positions, std::span<const std::size_t> key_positions,
                   bool causal = true, std::uint64_t* flops = nullptr);

// Per-head form: q_heads[g] is (tokens x head_dim), k/v_heads[j] are
// (keys x head_dim). Positions are 0..n-1 for both queries and keys.
std::vector<DenseMatrix> self_attention_reference(std::span<const DenseMatrix> q_heads,
                                                  std::span<const DenseMatrix> k_heads,
                                                  std::span<const DenseMatrix> v_heads, bool causal);

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }

}  // namespace lrtp
