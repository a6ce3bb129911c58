#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "lrtp/attention.hpp"
#include "lrtp/decomposition.hpp"
#include "lrtp/kvcache.hpp"
#include "lrtp/model_config.hpp"
#include "lrtp/parallel.hpp"

namespace lrtp {

// Per-worker counter deltas and the collectives issued during one forward.
struct ForwardTrace {
  std::vector<std::uint64_t> attention_flops;
  std::vector<std::uint64_t> matmul_flops;
  TrafficLedger ledger;
};

struct ForwardResult {
  std::vector<DenseMatrix> outputs;  // one per worker, identical after the last collective
  ForwardTrace trace;
  // Low-rank K/V rows (tokens x l_k, tokens x l_v); latent attention only.
  DenseMatrix k_low_rank;
  DenseMatrix v_low_rank;

  const DenseMatrix& output() const { return outputs.front(); }
};

// Post-RoPE K/V rows of one sequence on one worker, for the contiguous
// (non-paged) decode path of the dense and Base pipelines.
struct KvHistory {
  DenseMatrix k;
  DenseMatrix v;
  std::vector<std::size_t> positions;
};

struct AttentionOptions {
  std::size_t layer = 0;
  std::size_t position_offset = 0;     // position of row 0
  std::vector<KvHistory>* history = nullptr;  // one per worker when set
};

// Seeded dense weights for one block, entries ~ N(0, 1/d_in).
DenseLayer random_dense_layer(const ModelConfig& config, Rng& rng);
std::vector<DenseLayer> random_dense_model(const ModelConfig& config, std::uint64_t seed);

// Single-worker forwards used as oracles.
DenseMatrix reference_attention(const ModelConfig& config, const DenseLayer& weights, const DenseMatrix& x,
                                std::size_t position_offset = 0);
DenseMatrix reference_attention(const ModelConfig& config, const FactorLayer& weights, const DenseMatrix& x,
                                std::size_t position_offset = 0);
DenseMatrix reference_mlp(const ModelConfig& config, const DenseLayer& weights, const DenseMatrix& x);
DenseMatrix reference_mlp(const ModelConfig& config, const FactorLayer& weights, const DenseMatrix& x);

// ---- Dense tensor parallel: column-split Q/K/V by heads, row-split O.

struct DenseTpAttentionShards {
  std::vector<HeadSlice> heads;
  ShardedMatrix q, k, v, o;
};
DenseTpAttentionShards shard_dense_tp_attention(const ModelConfig& config, const DenseLayer& weights,
                                                std::size_t world_size);
ForwardResult forward_dense_tp_attention(const ModelConfig& config, const DenseTpAttentionShards& shards,
                                         const DenseMatrix& x, WorkerGroup& group,
                                         const AttentionOptions& options = {});

struct DenseTpMlpShards {
  ShardedMatrix up, gate, down;  // gate empty for NonGLU
};
DenseTpMlpShards shard_dense_tp_mlp(const ModelConfig& config, const DenseLayer& weights, std::size_t world_size);
ForwardResult forward_dense_tp_mlp(const ModelConfig& config, const DenseTpMlpShards& shards, const DenseMatrix& x,
                                   WorkerGroup& group, std::size_t layer = 0);

// ---- Base: every factor pair split along its rank, one reduce-sum per pair.

struct NaivePairShards {
  ShardedMatrix down;  // column shard over the rank
  ShardedMatrix up;    // row shard over the rank
};

struct BaseAttentionShards {
  NaivePairShards q, k, v, o;
};
BaseAttentionShards shard_base_attention(const ModelConfig& config, const FactorLayer& weights,
                                         std::size_t world_size);
ForwardResult forward_base_attention(const ModelConfig& config, const BaseAttentionShards& shards,
                                     const DenseMatrix& x, WorkerGroup& group, const AttentionOptions& options = {});

struct BaseMlpShards {
  NaivePairShards up, gate, down;
};
BaseMlpShards shard_base_mlp(const ModelConfig& config, const FactorLayer& weights, std::size_t world_size);
ForwardResult forward_base_mlp(const ModelConfig& config, const BaseMlpShards& shards, const DenseMatrix& x,
                               WorkerGroup& group, std::size_t layer = 0);

// ---- Latent communication: downward factors concatenated and split, one
// all-gather in the low-rank space, upward factors sharded by heads, and the
// second sub-layer reduced in its low-rank space before a replicated upward
// factor.

struct LatentAttentionShards {
  std::size_t rank_q = 0, rank_k = 0, rank_v = 0, rank_o = 0;
  std::vector<HeadSlice> heads;
  ShardedMatrix qkv_down;  // ConcatSplit of [Dq | Dk | Dv]
  ShardedMatrix q_up, k_up, v_up;  // ColumnShard by heads
  ShardedMatrix o_down;    // RowParallel
  ShardedMatrix o_up;      // Replicated
};
// When `plan` is given, every factor's rank must match it (kPlan otherwise).
LatentAttentionShards shard_latent_attention(const ModelConfig& config, const FactorLayer& weights,
                                             std::size_t world_size, const DecompositionPlan* plan = nullptr,
                                             std::size_t layer = 0);
ForwardResult forward_latent_attention(const ModelConfig& config, const LatentAttentionShards& shards,
                                       const DenseMatrix& x, WorkerGroup& group,
                                       const AttentionOptions& options = {});

// Decode/prefill against the paged low-rank cache. Rows of `x` are grouped
// by `batch`; each row is placed at its sequence's next position. `caches`
// holds one cache per worker for this layer.
ForwardResult forward_latent_attention_cached(const ModelConfig& config, const LatentAttentionShards& shards,
                                              const DenseMatrix& x, WorkerGroup& group,
                                              std::span<const std::unique_ptr<WorkerKvCache>> caches,
                                              std::span<const QueryChunk> batch, std::size_t layer = 0);

struct LatentMlpShards {
  std::size_t rank_up = 0, rank_gate = 0, rank_down = 0;
  ShardedMatrix input_down;  // ConcatSplit of [Dup | Dgate] (or [Dup])
  ShardedMatrix up_up, gate_up;  // ColumnShard over m
  ShardedMatrix down_down;  // RowParallel over m
  ShardedMatrix down_up;    // Replicated
};
LatentMlpShards shard_latent_mlp(const ModelConfig& config, const FactorLayer& weights, std::size_t world_size,
                                 const DecompositionPlan* plan = nullptr, std::size_t layer = 0);
ForwardResult forward_latent_mlp(const ModelConfig& config, const LatentMlpShards& shards, const DenseMatrix& x,
                                 WorkerGroup& group, std::size_t layer = 0);

}  // namespace lrtp
