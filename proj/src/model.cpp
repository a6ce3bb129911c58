#include "lrtp/model.hpp"

#include <string>

namespace lrtp {

std::string_view to_string(PipelineMode mode) {
  switch (mode) {
    case PipelineMode::kDense: return "dense";
    case PipelineMode::kBase: return "base";
    case PipelineMode::kLatent: return "latent";
  }
  return "?";
}

PipelineMode parse_pipeline_mode(std::string_view s) {
  if (s == "dense") return PipelineMode::kDense;
  if (s == "base") return PipelineMode::kBase;
  if (s == "latent" || s == "deinfer") return PipelineMode::kLatent;
  throw Error(ErrorCode::kConfig, "unknown pipeline '" + std::string(s) + "'");
}

ParallelModel::ParallelModel(const ModelConfig& config, const DecomposedModel& model, PipelineMode mode,
                             std::size_t world_size, std::optional<CacheSettings> cache,
                             const DecompositionPlan* plan)
    : config_(config), mode_(mode), group_(world_size) {
  config_.validate();
  const std::size_t n = config_.num_layers;
  if ((mode == PipelineMode::kDense ? model.dense.size() : model.layers.size()) != n) {
    throw Error(ErrorCode::kConfig, "model has the wrong number of layers for the config");
  }
  layers_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& L = layers_[i];
    switch (mode) {
      case PipelineMode::kDense:
        L.dense_attention = shard_dense_tp_attention(config_, model.dense[i], world_size);
        L.dense_mlp = shard_dense_tp_mlp(config_, model.dense[i], world_size);
        break;
      case PipelineMode::kBase:
        L.base_attention = shard_base_attention(config_, model.layers[i], world_size);
        L.base_mlp = shard_base_mlp(config_, model.layers[i], world_size);
        break;
      case PipelineMode::kLatent:
        L.latent_attention = shard_latent_attention(config_, model.layers[i], world_size, plan, i);
        L.latent_mlp = shard_latent_mlp(config_, model.layers[i], world_size, plan, i);
        break;
    }
  }
  if (mode == PipelineMode::kLatent && cache) {
    caches_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = *layers_[i].latent_attention;
      for (std::size_t r = 0; r < world_size; ++r) {
        caches_[i].push_back(std::make_unique<WorkerKvCache>(*cache, s.rank_k, s.rank_v, s.heads[r].kv_width()));
      }
    }
  }
}

const WorkerKvCache& ParallelModel::cache(std::size_t layer, std::size_t rank) const {
  if (layer >= caches_.size() || rank >= caches_[layer].size()) {
    throw Error(ErrorCode::kLookup, "no paged cache for layer " + std::to_string(layer));
  }
  return *caches_[layer][rank];
}

ForwardResult ParallelModel::attention(std::size_t layer, const DenseMatrix& x, const AttentionOptions& options) {
  const auto& L = layers_[layer];
  switch (mode_) {
    case PipelineMode::kDense: return forward_dense_tp_attention(config_, *L.dense_attention, x, group_, options);
    case PipelineMode::kBase: return forward_base_attention(config_, *L.base_attention, x, group_, options);
    case PipelineMode::kLatent: return forward_latent_attention(config_, *L.latent_attention, x, group_, options);
  }
  throw Error(ErrorCode::kConfig, "unknown pipeline");
}

ForwardResult ParallelModel::mlp(std::size_t layer, const DenseMatrix& x) {
  const auto& L = layers_[layer];
  switch (mode_) {
    case PipelineMode::kDense: return forward_dense_tp_mlp(config_, *L.dense_mlp, x, group_, layer);
    case PipelineMode::kBase: return forward_base_mlp(config_, *L.base_mlp, x, group_, layer);
    case PipelineMode::kLatent: return forward_latent_mlp(config_, *L.latent_mlp, x, group_, layer);
  }
  throw Error(ErrorCode::kConfig, "unknown pipeline");
}

namespace {

// Accumulates sub-layer traces into one.
void merge(ForwardTrace& into, const ForwardTrace& t) {
  if (into.attention_flops.empty()) {
    into.attention_flops.assign(t.attention_flops.size(), 0);
    into.matmul_flops.assign(t.matmul_flops.size(), 0);
  }
  for (std::size_t r = 0; r < t.attention_flops.size(); ++r) {
    into.attention_flops[r] += t.attention_flops[r];
    into.matmul_flops[r] += t.matmul_flops[r];
  }
  for (const auto& rec : t.ledger.records()) into.ledger.record(rec);
}

// Residual update on every worker's copy.
void residual(std::vector<DenseMatrix>& hidden, const ForwardResult& block) {
  for (std::size_t r = 0; r < hidden.size(); ++r) hidden[r] = add(hidden[r], block.outputs[r]);
}

}  // namespace

ForwardResult ParallelModel::forward(const DenseMatrix& x, std::vector<DenseMatrix>* attention_inputs) {
  ForwardResult result;
  std::vector<DenseMatrix> hidden(group_.size(), x);
  if (attention_inputs) attention_inputs->clear();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (attention_inputs) attention_inputs->push_back(hidden.front());
    AttentionOptions options;
    options.layer = i;
    ForwardResult a = attention(i, hidden.front(), options);
    merge(result.trace, a.trace);
    residual(hidden, a);
    ForwardResult m = mlp(i, hidden.front());
    merge(result.trace, m.trace);
    residual(hidden, m);
  }
  result.outputs = std::move(hidden);
  return result;
}

ForwardResult ParallelModel::decode_step(const DenseMatrix& x, std::span<const QueryChunk> batch) {
  ForwardResult result;
  if (mode_ == PipelineMode::kLatent) {
    if (caches_.empty()) throw Error(ErrorCode::kConfig, "latent decoding needs cache settings");
    std::vector<DenseMatrix> hidden(group_.size(), x);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      ForwardResult a = forward_latent_attention_cached(config_, *layers_[i].latent_attention, hidden.front(), group_,
                                                        caches_[i], batch, i);
      merge(result.trace, a.trace);
      residual(hidden, a);
      ForwardResult m = mlp(i, hidden.front());
      merge(result.trace, m.trace);
      residual(hidden, m);
    }
    result.outputs = std::move(hidden);
    return result;
  }

  // Dense and Base: one sequence at a time against its contiguous history.
  std::vector<std::vector<DenseMatrix>> per_chunk;
  std::size_t cursor = 0;
  for (const auto& chunk : batch) {
    auto& hist = histories_[chunk.seq];
    if (hist.empty()) hist.assign(layers_.size(), std::vector<KvHistory>(group_.size()));
    const std::size_t offset = hist.front().front().positions.size();
    std::vector<DenseMatrix> hidden(group_.size(), x.row_range(cursor, cursor + chunk.rows));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      AttentionOptions options{i, offset, &hist[i]};
      ForwardResult a = attention(i, hidden.front(), options);
      merge(result.trace, a.trace);
      residual(hidden, a);
      ForwardResult m = mlp(i, hidden.front());
      merge(result.trace, m.trace);
      residual(hidden, m);
    }
    per_chunk.push_back(std::move(hidden));
    cursor += chunk.rows;
  }
  if (cursor != x.rows()) throw Error(ErrorCode::kShape, "batch chunks do not cover the input rows");
  for (std::size_t r = 0; r < group_.size(); ++r) {
    std::vector<DenseMatrix> parts;
    for (auto& c : per_chunk) parts.push_back(c[r]);
    result.outputs.push_back(parts.empty() ? DenseMatrix(0, config_.hidden_dim) : vconcat(parts));
  }
  return result;
}

}  // namespace lrtp
