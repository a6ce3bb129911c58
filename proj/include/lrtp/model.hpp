#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "lrtp/pipelines.hpp"

namespace lrtp {

enum class PipelineMode { kDense, kBase, kLatent };

std::string_view to_string(PipelineMode mode);
// Accepts "dense", "base", "latent" (alias "deinfer").
PipelineMode parse_pipeline_mode(std::string_view s);

// A stack of blocks, each h <- h + attention(h); h <- h + mlp(h), sharded for
// one pipeline mode over its own worker group.
class ParallelModel {
 public:
  ParallelModel(const ModelConfig& config, const DecomposedModel& model, PipelineMode mode, std::size_t world_size,
                std::optional<CacheSettings> cache = std::nullopt, const DecompositionPlan* plan = nullptr);

  // One sequence at positions 0..rows-1, no cache. When given,
  // `attention_inputs` receives each layer's attention input.
  ForwardResult forward(const DenseMatrix& x, std::vector<DenseMatrix>* attention_inputs = nullptr);

  // Appends rows to each sequence named in `batch` and returns their final
  // hidden states. Latent mode goes through the paged low-rank cache; dense
  // and Base keep contiguous full-width K/V per sequence.
  ForwardResult decode_step(const DenseMatrix& x, std::span<const QueryChunk> batch);

  PipelineMode mode() const noexcept { return mode_; }
  const ModelConfig& config() const noexcept { return config_; }
  WorkerGroup& group() noexcept { return group_; }
  const WorkerGroup& group() const noexcept { return group_; }
  const WorkerKvCache& cache(std::size_t layer, std::size_t rank) const;

 private:
  struct Layer {
    std::optional<DenseTpAttentionShards> dense_attention;
    std::optional<DenseTpMlpShards> dense_mlp;
    std::optional<BaseAttentionShards> base_attention;
    std::optional<BaseMlpShards> base_mlp;
    std::optional<LatentAttentionShards> latent_attention;
    std::optional<LatentMlpShards> latent_mlp;
  };

  ForwardResult attention(std::size_t layer, const DenseMatrix& x, const AttentionOptions& options);
  ForwardResult mlp(std::size_t layer, const DenseMatrix& x);

  ModelConfig config_;
  PipelineMode mode_;
  WorkerGroup group_;
  std::vector<Layer> layers_;
  std::vector<std::vector<std::unique_ptr<WorkerKvCache>>> caches_;  // [layer][rank]
  std::map<SequenceId, std::vector<std::vector<KvHistory>>> histories_;  // seq -> [layer][rank]
};

}  // namespace lrtp
