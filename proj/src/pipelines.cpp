#include "lrtp/pipelines.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace lrtp {

namespace {

// Snapshot of the group's counters; finish() turns it into a trace delta.
class TraceScope {
 public:
  explicit TraceScope(const WorkerGroup& group) : group_(group), mark_(group.ledger().size()) {
    for (const auto& c : group.counters()) {
      attention_.push_back(c.attention_flops);
      matmul_.push_back(c.matmul_flops);
    }
  }

  ForwardTrace finish() const {
    ForwardTrace t;
    for (std::size_t r = 0; r < group_.size(); ++r) {
      t.attention_flops.push_back(group_.counters()[r].attention_flops - attention_[r]);
      t.matmul_flops.push_back(group_.counters()[r].matmul_flops - matmul_[r]);
    }
    t.ledger = group_.ledger().since(mark_);
    return t;
  }

 private:
  const WorkerGroup& group_;
  std::size_t mark_;
  std::vector<std::uint64_t> attention_;
  std::vector<std::uint64_t> matmul_;
};

const DenseMatrix& weight(const DenseLayer& layer, LayerMatrix m) {
  auto it = layer.find(m);
  if (it == layer.end()) throw Error(ErrorCode::kPlan, "missing dense weight '" + std::string(to_string(m)) + "'");
  return it->second;
}

const FactorPair& factor(const FactorLayer& layer, LayerMatrix m) {
  auto it = layer.find(m);
  if (it == layer.end()) throw Error(ErrorCode::kPlan, "missing factor pair '" + std::string(to_string(m)) + "'");
  return it->second;
}

std::vector<std::size_t> positions_from(std::size_t offset, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), offset);
  return p;
}

void rope_rows(DenseMatrix& m, const ModelConfig& config, std::span<const std::size_t> positions) {
  if (!config.use_rope) return;
  for (std::size_t r = 0; r < m.rows(); ++r) rope_in_place(m.row(r), config.head_dim, positions[r], config.rope_base);
}

DenseMatrix activate(const ModelConfig& config, const DenseMatrix& up, const DenseMatrix* gate) {
  DenseMatrix a = up;
  auto ad = a.data();
  if (config.mlp_variant == MlpVariant::kGlu) {
    auto gd = gate->data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] = silu(gd[i]) * ad[i];
  } else {
    for (double& v : ad) v = relu(v);
  }
  return a;
}

// Appends this step's K/V rows to the worker's history and returns the full
// key set to attend over.
struct KeySet {
  DenseMatrix k;
  DenseMatrix v;
  std::vector<std::size_t> positions;
};

KeySet extend_history(KvHistory* history, DenseMatrix k, DenseMatrix v, std::vector<std::size_t> positions) {
  if (history == nullptr) return KeySet{std::move(k), std::move(v), std::move(positions)};
  if (history->k.empty()) {
    history->k = std::move(k);
    history->v = std::move(v);
    history->positions = std::move(positions);
  } else {
    const DenseMatrix ks[] = {history->k, k};
    const DenseMatrix vs[] = {history->v, v};
    history->k = vconcat(ks);
    history->v = vconcat(vs);
    history->positions.insert(history->positions.end(), positions.begin(), positions.end());
  }
  return KeySet{history->k, history->v, history->positions};
}

KvHistory* history_for(const AttentionOptions& options, std::size_t rank, std::size_t world_size) {
  if (options.history == nullptr) return nullptr;
  if (options.history->size() != world_size) {
    throw Error(ErrorCode::kParameter, "history needs one entry per worker");
  }
  return &(*options.history)[rank];
}

void check_input(const ModelConfig& config, const DenseMatrix& x) {
  if (x.cols() != config.hidden_dim) {
    throw Error(ErrorCode::kShape, "hidden states have " + std::to_string(x.cols()) + " columns, expected " +
                                       std::to_string(config.hidden_dim));
  }
}

std::vector<HeadSlice> worker_heads(const ModelConfig& config, std::size_t world_size) {
  std::vector<HeadSlice> heads;
  for (std::size_t r = 0; r < world_size; ++r) heads.push_back(HeadSlice::for_worker(config, r, world_size));
  return heads;
}

NaivePairShards shard_pair_naive(const FactorPair& pair, std::size_t world_size) {
  return NaivePairShards{partition(pair.down, ShardScheme::kColumnShard, world_size),
                         partition(pair.up, ShardScheme::kRowParallel, world_size)};
}

// (x * down_r) * up_r on every worker, then one reduce-sum.
std::vector<DenseMatrix> naive_pair_forward(const NaivePairShards& pair, std::span<const DenseMatrix> inputs,
                                            WorkerGroup& group, CollectiveTag tag) {
  std::vector<DenseMatrix> partial;
  for (std::size_t r = 0; r < group.size(); ++r) {
    partial.push_back(group.matmul(r, group.matmul(r, inputs[r], pair.down.shards[r]), pair.up.shards[r]));
  }
  return group.reduce_sum(partial, tag);
}

void check_rank(const DecompositionPlan* plan, std::size_t layer, LayerMatrix m, std::size_t actual) {
  if (plan == nullptr) return;
  const auto planned = plan->rank(layer, m);
  if (!planned || *planned != actual) {
    throw Error(ErrorCode::kPlan, "layer " + std::to_string(layer) + " " + std::string(to_string(m)) +
                                      " has rank " + std::to_string(actual) + ", plan says " +
                                      (planned ? std::to_string(*planned) : std::string("nothing")));
  }
}

}  // namespace

DenseLayer random_dense_layer(const ModelConfig& config, Rng& rng) {
  const std::size_t h = config.hidden_dim;
  const std::size_t hkv = config.kv_dim;
  const std::size_t m = config.intermediate_dim;
  auto scaled = [&](std::size_t in, std::size_t out) {
    return rng.normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  DenseLayer layer;
  layer[LayerMatrix::kQ] = scaled(h, h);
  layer[LayerMatrix::kK] = scaled(h, hkv);
  layer[LayerMatrix::kV] = scaled(h, hkv);
  layer[LayerMatrix::kO] = scaled(h, h);
  layer[LayerMatrix::kUp] = scaled(h, m);
  if (config.mlp_variant == MlpVariant::kGlu) layer[LayerMatrix::kGate] = scaled(h, m);
  layer[LayerMatrix::kDown] = scaled(m, h);
  return layer;
}

std::vector<DenseLayer> random_dense_model(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < config.num_layers; ++i) layers.push_back(random_dense_layer(config, rng));
  return layers;
}

namespace {

DenseMatrix attention_from_projections(const ModelConfig& config, DenseMatrix q, DenseMatrix k, const DenseMatrix& v,
                                       const DenseMatrix& o, std::size_t position_offset) {
  const auto pos = positions_from(position_offset, q.rows());
  rope_rows(q, config, pos);
  rope_rows(k, config, pos);
  return matmul(attend(q, k, v, HeadSlice::full(config), pos, pos), o);
}

}  // namespace

DenseMatrix reference_attention(const ModelConfig& config, const DenseLayer& w, const DenseMatrix& x,
                                std::size_t position_offset) {
  check_input(config, x);
  return attention_from_projections(config, matmul(x, weight(w, LayerMatrix::kQ)), matmul(x, weight(w, LayerMatrix::kK)),
                                    matmul(x, weight(w, LayerMatrix::kV)), weight(w, LayerMatrix::kO),
                                    position_offset);
}

DenseMatrix reference_attention(const ModelConfig& config, const FactorLayer& w, const DenseMatrix& x,
                                std::size_t position_offset) {
  check_input(config, x);
  auto project = [&](LayerMatrix m) {
    const auto& f = factor(w, m);
    return matmul(matmul(x, f.down), f.up);
  };
  DenseMatrix q = project(LayerMatrix::kQ);
  DenseMatrix k = project(LayerMatrix::kK);
  DenseMatrix v = project(LayerMatrix::kV);
  const auto pos = positions_from(position_offset, q.rows());
  rope_rows(q, config, pos);
  rope_rows(k, config, pos);
  const DenseMatrix a = attend(q, k, v, HeadSlice::full(config), pos, pos);
  const auto& o = factor(w, LayerMatrix::kO);
  return matmul(matmul(a, o.down), o.up);
}

DenseMatrix reference_mlp(const ModelConfig& config, const DenseLayer& w, const DenseMatrix& x) {
  check_input(config, x);
  const DenseMatrix up = matmul(x, weight(w, LayerMatrix::kUp));
  DenseMatrix gate;
  if (config.mlp_variant == MlpVariant::kGlu) gate = matmul(x, weight(w, LayerMatrix::kGate));
  return matmul(activate(config, up, &gate), weight(w, LayerMatrix::kDown));
}

DenseMatrix reference_mlp(const ModelConfig& config, const FactorLayer& w, const DenseMatrix& x) {
  check_input(config, x);
  auto project = [&](const DenseMatrix& in, LayerMatrix m) {
    const auto& f = factor(w, m);
    return matmul(matmul(in, f.down), f.up);
  };
  const DenseMatrix up = project(x, LayerMatrix::kUp);
  DenseMatrix gate;
  if (config.mlp_variant == MlpVariant::kGlu) gate = project(x, LayerMatrix::kGate);
  return project(activate(config, up, &gate), LayerMatrix::kDown);
}

// ---------------------------------------------------------------- dense TP

DenseTpAttentionShards shard_dense_tp_attention(const ModelConfig& config, const DenseLayer& w,
                                                std::size_t world_size) {
  config.validate();
  DenseTpAttentionShards s;
  s.heads = worker_heads(config, world_size);
  s.q = partition_heads(weight(w, LayerMatrix::kQ), config.num_heads, config.head_dim, world_size);
  s.k = partition_heads(weight(w, LayerMatrix::kK), config.num_kv_heads, config.head_dim, world_size);
  s.v = partition_heads(weight(w, LayerMatrix::kV), config.num_kv_heads, config.head_dim, world_size);
  s.o = partition(weight(w, LayerMatrix::kO), ShardScheme::kRowParallel, world_size);
  return s;
}

ForwardResult forward_dense_tp_attention(const ModelConfig& config, const DenseTpAttentionShards& s,
                                         const DenseMatrix& x, WorkerGroup& group, const AttentionOptions& options) {
  check_input(config, x);
  if (s.heads.size() != group.size()) throw Error(ErrorCode::kPartition, "shards built for a different group size");
  TraceScope scope(group);
  const auto pos = positions_from(options.position_offset, x.rows());
  std::vector<DenseMatrix> partial;
  for (std::size_t r = 0; r < group.size(); ++r) {
    DenseMatrix q = group.matmul(r, x, s.q.shards[r]);
    DenseMatrix k = group.matmul(r, x, s.k.shards[r]);
    DenseMatrix v = group.matmul(r, x, s.v.shards[r]);
    rope_rows(q, config, pos);
    rope_rows(k, config, pos);
    const KeySet keys = extend_history(history_for(options, r, group.size()), std::move(k), std::move(v), pos);
    const DenseMatrix a =
        attend(q, keys.k, keys.v, s.heads[r], pos, keys.positions, true, &group.counters(r).attention_flops);
    partial.push_back(group.matmul(r, a, s.o.shards[r]));
  }
  ForwardResult result;
  result.outputs = group.reduce_sum(partial, {options.layer, Sublayer::kAttention});
  result.trace = scope.finish();
  return result;
}

DenseTpMlpShards shard_dense_tp_mlp(const ModelConfig& config, const DenseLayer& w, std::size_t world_size) {
  config.validate();
  DenseTpMlpShards s;
  s.up = partition(weight(w, LayerMatrix::kUp), ShardScheme::kColumnShard, world_size);
  if (config.mlp_variant == MlpVariant::kGlu) {
    s.gate = partition(weight(w, LayerMatrix::kGate), ShardScheme::kColumnShard, world_size);
  }
  s.down = partition(weight(w, LayerMatrix::kDown), ShardScheme::kRowParallel, world_size);
  return s;
}

ForwardResult forward_dense_tp_mlp(const ModelConfig& config, const DenseTpMlpShards& s, const DenseMatrix& x,
                                   WorkerGroup& group, std::size_t layer) {
  check_input(config, x);
  if (s.up.shards.size() != group.size()) throw Error(ErrorCode::kPartition, "shards built for a different group size");
  TraceScope scope(group);
  std::vector<DenseMatrix> partial;
  for (std::size_t r = 0; r < group.size(); ++r) {
    const DenseMatrix up = group.matmul(r, x, s.up.shards[r]);
    DenseMatrix gate;
    if (config.mlp_variant == MlpVariant::kGlu) gate = group.matmul(r, x, s.gate.shards[r]);
    partial.push_back(group.matmul(r, activate(config, up, &gate), s.down.shards[r]));
  }
  ForwardResult result;
  result.outputs = group.reduce_sum(partial, {layer, Sublayer::kMlp});
  result.trace = scope.finish();
  return result;
}

// -------------------------------------------------------------------- Base

BaseAttentionShards shard_base_attention(const ModelConfig& config, const FactorLayer& w, std::size_t world_size) {
  config.validate();
  return BaseAttentionShards{shard_pair_naive(factor(w, LayerMatrix::kQ), world_size),
                             shard_pair_naive(factor(w, LayerMatrix::kK), world_size),
                             shard_pair_naive(factor(w, LayerMatrix::kV), world_size),
                             shard_pair_naive(factor(w, LayerMatrix::kO), world_size)};
}

ForwardResult forward_base_attention(const ModelConfig& config, const BaseAttentionShards& s, const DenseMatrix& x,
                                     WorkerGroup& group, const AttentionOptions& options) {
  check_input(config, x);
  if (s.q.down.shards.size() != group.size()) {
    throw Error(ErrorCode::kPartition, "shards built for a different group size");
  }
  TraceScope scope(group);
  const CollectiveTag tag{options.layer, Sublayer::kAttention};
  const std::vector<DenseMatrix> inputs(group.size(), x);
  auto q = naive_pair_forward(s.q, inputs, group, tag);
  auto k = naive_pair_forward(s.k, inputs, group, tag);
  auto v = naive_pair_forward(s.v, inputs, group, tag);

  // Every worker now holds full Q/K/V and repeats the whole attention.
  const auto pos = positions_from(options.position_offset, x.rows());
  const HeadSlice all_heads = HeadSlice::full(config);
  std::vector<DenseMatrix> attn;
  for (std::size_t r = 0; r < group.size(); ++r) {
    rope_rows(q[r], config, pos);
    rope_rows(k[r], config, pos);
    const KeySet keys = extend_history(history_for(options, r, group.size()), std::move(k[r]), std::move(v[r]), pos);
    attn.push_back(attend(q[r], keys.k, keys.v, all_heads, pos, keys.positions, true,
                          &group.counters(r).attention_flops));
  }
  ForwardResult result;
  result.outputs = naive_pair_forward(s.o, attn, group, tag);
  result.trace = scope.finish();
  return result;
}

BaseMlpShards shard_base_mlp(const ModelConfig& config, const FactorLayer& w, std::size_t world_size) {
  config.validate();
  BaseMlpShards s;
  s.up = shard_pair_naive(factor(w, LayerMatrix::kUp), world_size);
  if (config.mlp_variant == MlpVariant::kGlu) s.gate = shard_pair_naive(factor(w, LayerMatrix::kGate), world_size);
  s.down = shard_pair_naive(factor(w, LayerMatrix::kDown), world_size);
  return s;
}

ForwardResult forward_base_mlp(const ModelConfig& config, const BaseMlpShards& s, const DenseMatrix& x,
                               WorkerGroup& group, std::size_t layer) {
  check_input(config, x);
  if (s.up.down.shards.size() != group.size()) {
    throw Error(ErrorCode::kPartition, "shards built for a different group size");
  }
  TraceScope scope(group);
  const CollectiveTag tag{layer, Sublayer::kMlp};
  const std::vector<DenseMatrix> inputs(group.size(), x);
  const auto up = naive_pair_forward(s.up, inputs, group, tag);
  std::vector<DenseMatrix> gate;
  if (config.mlp_variant == MlpVariant::kGlu) gate = naive_pair_forward(s.gate, inputs, group, tag);
  std::vector<DenseMatrix> act;
  for (std::size_t r = 0; r < group.size(); ++r) {
    act.push_back(activate(config, up[r], gate.empty() ? nullptr : &gate[r]));
  }
  ForwardResult result;
  result.outputs = naive_pair_forward(s.down, act, group, tag);
  result.trace = scope.finish();
  return result;
}

// ------------------------------------------------------------------ latent

LatentAttentionShards shard_latent_attention(const ModelConfig& config, const FactorLayer& w,
                                             std::size_t world_size, const DecompositionPlan* plan,
                                             std::size_t layer) {
  config.validate();
  const auto& q = factor(w, LayerMatrix::kQ);
  const auto& k = factor(w, LayerMatrix::kK);
  const auto& v = factor(w, LayerMatrix::kV);
  const auto& o = factor(w, LayerMatrix::kO);
  check_rank(plan, layer, LayerMatrix::kQ, q.rank());
  check_rank(plan, layer, LayerMatrix::kK, k.rank());
  check_rank(plan, layer, LayerMatrix::kV, v.rank());
  check_rank(plan, layer, LayerMatrix::kO, o.rank());

  LatentAttentionShards s;
  s.rank_q = q.rank();
  s.rank_k = k.rank();
  s.rank_v = v.rank();
  s.rank_o = o.rank();
  s.heads = worker_heads(config, world_size);
  const DenseMatrix downs[] = {q.down, k.down, v.down};
  s.qkv_down = partition(downs, ShardScheme::kConcatSplit, world_size);
  s.q_up = partition_heads(q.up, config.num_heads, config.head_dim, world_size);
  s.k_up = partition_heads(k.up, config.num_kv_heads, config.head_dim, world_size);
  s.v_up = partition_heads(v.up, config.num_kv_heads, config.head_dim, world_size);
  s.o_down = partition(o.down, ShardScheme::kRowParallel, world_size);
  s.o_up = partition(o.up, ShardScheme::kReplicated, world_size);
  return s;
}

namespace {

struct LatentQkv {
  std::vector<DenseMatrix> gathered;  // tokens x (l_q + l_k + l_v), identical on all workers
};

LatentQkv latent_first_sublayer(const LatentAttentionShards& s, const DenseMatrix& x, WorkerGroup& group,
                                std::size_t layer) {
  std::vector<DenseMatrix> local;
  for (std::size_t r = 0; r < group.size(); ++r) local.push_back(group.matmul(r, x, s.qkv_down.shards[r]));
  return LatentQkv{group.all_gather(local, {layer, Sublayer::kAttention})};
}

// Upward products for one worker, issued as a single batch.
std::vector<DenseMatrix> latent_up_projections(const LatentAttentionShards& s, const DenseMatrix& gathered,
                                               WorkerGroup& group, std::size_t r, bool with_kv) {
  const std::size_t lq = s.rank_q, lk = s.rank_k, lv = s.rank_v;
  std::vector<std::pair<DenseMatrix, DenseMatrix>> batch;
  batch.emplace_back(gathered.columns(0, lq), s.q_up.shards[r]);
  if (with_kv) {
    batch.emplace_back(gathered.columns(lq, lq + lk), s.k_up.shards[r]);
    batch.emplace_back(gathered.columns(lq + lk, lq + lk + lv), s.v_up.shards[r]);
  }
  for (const auto& [a, b] : batch) group.counters(r).matmul_flops += 2ULL * a.rows() * a.cols() * b.cols();
  return batched_matmul(batch);
}

std::vector<DenseMatrix> latent_second_sublayer(const LatentAttentionShards& s, std::span<const DenseMatrix> attn,
                                                WorkerGroup& group, std::size_t layer) {
  std::vector<DenseMatrix> partial;
  for (std::size_t r = 0; r < group.size(); ++r) partial.push_back(group.matmul(r, attn[r], s.o_down.shards[r]));
  const auto reduced = group.reduce_sum(partial, {layer, Sublayer::kAttention});
  std::vector<DenseMatrix> out;
  for (std::size_t r = 0; r < group.size(); ++r) out.push_back(group.matmul(r, reduced[r], s.o_up.shards[r]));
  return out;
}

}  // namespace

ForwardResult forward_latent_attention(const ModelConfig& config, const LatentAttentionShards& s,
                                       const DenseMatrix& x, WorkerGroup& group, const AttentionOptions& options) {
  check_input(config, x);
  if (s.heads.size() != group.size()) throw Error(ErrorCode::kPartition, "shards built for a different group size");
  if (options.history != nullptr) {
    throw Error(ErrorCode::kParameter, "the latent pipeline caches through the paged low-rank cache");
  }
  TraceScope scope(group);
  const LatentQkv qkv = latent_first_sublayer(s, x, group, options.layer);
  const auto pos = positions_from(options.position_offset, x.rows());

  std::vector<DenseMatrix> attn;
  for (std::size_t r = 0; r < group.size(); ++r) {
    auto proj = latent_up_projections(s, qkv.gathered[r], group, r, /*with_kv=*/true);
    rope_rows(proj[0], config, pos);
    rope_rows(proj[1], config, pos);
    attn.push_back(attend(proj[0], proj[1], proj[2], s.heads[r], pos, pos, true, &group.counters(r).attention_flops));
  }
  ForwardResult result;
  result.outputs = latent_second_sublayer(s, attn, group, options.layer);
  result.trace = scope.finish();
  const auto& g = qkv.gathered.front();
  result.k_low_rank = g.columns(s.rank_q, s.rank_q + s.rank_k);
  result.v_low_rank = g.columns(s.rank_q + s.rank_k, s.rank_q + s.rank_k + s.rank_v);
  return result;
}

ForwardResult forward_latent_attention_cached(const ModelConfig& config, const LatentAttentionShards& s,
                                              const DenseMatrix& x, WorkerGroup& group,
                                              std::span<const std::unique_ptr<WorkerKvCache>> caches,
                                              std::span<const QueryChunk> batch, std::size_t layer) {
  check_input(config, x);
  if (s.heads.size() != group.size() || caches.size() != group.size()) {
    throw Error(ErrorCode::kPartition, "shards or caches built for a different group size");
  }
  std::size_t covered = 0;
  for (const auto& c : batch) covered += c.rows;
  if (covered != x.rows()) throw Error(ErrorCode::kShape, "batch chunks do not cover the input rows");

  TraceScope scope(group);
  const LatentQkv qkv = latent_first_sublayer(s, x, group, layer);
  const std::size_t lq = s.rank_q, lk = s.rank_k, lv = s.rank_v;

  // Positions continue each sequence's history (identical on all workers).
  std::vector<std::size_t> pos;
  {
    const BlockTable& table = caches.front()->table();
    for (const auto& c : batch) {
      const std::size_t start = table.contains(c.seq) ? table.at(c.seq).filled : 0;
      for (std::size_t i = 0; i < c.rows; ++i) pos.push_back(start + i);
    }
  }
  std::vector<SequenceId> seqs;
  for (const auto& c : batch) seqs.push_back(c.seq);
  const RopeSpec rope{config.use_rope, config.head_dim, config.rope_base};

  std::vector<DenseMatrix> attn;
  for (std::size_t r = 0; r < group.size(); ++r) {
    WorkerKvCache& cache = *caches[r];
    const DenseMatrix& g = qkv.gathered[r];

    // Preparation stage: cache writes, run scan, remapping list.
    std::size_t row = 0;
    for (const auto& c : batch) {
      for (std::size_t i = 0; i < c.rows; ++i, ++row) {
        const auto lr = g.row(row);
        append_kv(cache.pool(), cache.table(), c.seq, lr.subspan(lq, lk), lr.subspan(lq + lk, lv), pos[row]);
      }
    }
    const ReplayPlan plan =
        prepare_replay(cache.table(), seqs, cache.buffers().capacity_blocks(), cache.next_epoch());
    cache.buffers().stage(plan, cache.guard());

    auto proj = latent_up_projections(s, g, group, r, /*with_kv=*/false);
    rope_rows(proj[0], config, pos);

    // Replay stage.
    cache.guard().begin_replay();
    replay_reconstruct(cache.buffers(), cache.guard(), plan, cache.pool(), s.k_up.shards[r], s.v_up.shards[r], rope);
    group.counters(r).matmul_flops +=
        2ULL * cache.buffers().capacity_rows() * (lk + lv) * cache.buffers().kv_local_width();
    attn.push_back(paged_attention_reference(proj[0], cache.buffers(), plan, batch, pos, s.heads[r],
                                             &group.counters(r).attention_flops));
    cache.guard().end_replay();
  }
  ForwardResult result;
  result.outputs = latent_second_sublayer(s, attn, group, layer);
  result.trace = scope.finish();
  const auto& g = qkv.gathered.front();
  result.k_low_rank = g.columns(lq, lq + lk);
  result.v_low_rank = g.columns(lq + lk, lq + lk + lv);
  return result;
}

LatentMlpShards shard_latent_mlp(const ModelConfig& config, const FactorLayer& w, std::size_t world_size,
                                 const DecompositionPlan* plan, std::size_t layer) {
  config.validate();
  const bool glu = config.mlp_variant == MlpVariant::kGlu;
  const auto& up = factor(w, LayerMatrix::kUp);
  const auto& down = factor(w, LayerMatrix::kDown);
  check_rank(plan, layer, LayerMatrix::kUp, up.rank());
  check_rank(plan, layer, LayerMatrix::kDown, down.rank());

  LatentMlpShards s;
  s.rank_up = up.rank();
  s.rank_down = down.rank();
  if (glu) {
    const auto& gate = factor(w, LayerMatrix::kGate);
    check_rank(plan, layer, LayerMatrix::kGate, gate.rank());
    s.rank_gate = gate.rank();
    const DenseMatrix downs[] = {up.down, gate.down};
    s.input_down = partition(downs, ShardScheme::kConcatSplit, world_size);
    s.gate_up = partition(gate.up, ShardScheme::kColumnShard, world_size);
  } else {
    s.input_down = partition(std::span<const DenseMatrix>(&up.down, 1), ShardScheme::kConcatSplit, world_size);
  }
  s.up_up = partition(up.up, ShardScheme::kColumnShard, world_size);
  s.down_down = partition(down.down, ShardScheme::kRowParallel, world_size);
  s.down_up = partition(down.up, ShardScheme::kReplicated, world_size);
  return s;
}

ForwardResult forward_latent_mlp(const ModelConfig& config, const LatentMlpShards& s, const DenseMatrix& x,
                                 WorkerGroup& group, std::size_t layer) {
  check_input(config, x);
  if (s.up_up.shards.size() != group.size()) {
    throw Error(ErrorCode::kPartition, "shards built for a different group size");
  }
  TraceScope scope(group);
  const CollectiveTag tag{layer, Sublayer::kMlp};
  const bool glu = config.mlp_variant == MlpVariant::kGlu;

  std::vector<DenseMatrix> local;
  for (std::size_t r = 0; r < group.size(); ++r) local.push_back(group.matmul(r, x, s.input_down.shards[r]));
  const auto gathered = group.all_gather(local, tag);

  std::vector<DenseMatrix> partial;
  for (std::size_t r = 0; r < group.size(); ++r) {
    std::vector<std::pair<DenseMatrix, DenseMatrix>> batch;
    batch.emplace_back(gathered[r].columns(0, s.rank_up), s.up_up.shards[r]);
    if (glu) batch.emplace_back(gathered[r].columns(s.rank_up, s.rank_up + s.rank_gate), s.gate_up.shards[r]);
    for (const auto& [a, b] : batch) group.counters(r).matmul_flops += 2ULL * a.rows() * a.cols() * b.cols();
    const auto proj = batched_matmul(batch);
    const DenseMatrix act = activate(config, proj[0], glu ? &proj[1] : nullptr);
    partial.push_back(group.matmul(r, act, s.down_down.shards[r]));
  }
  const auto reduced = group.reduce_sum(partial, tag);
  ForwardResult result;
  for (std::size_t r = 0; r < group.size(); ++r) result.outputs.push_back(group.matmul(r, reduced[r], s.down_up.shards[r]));
  result.trace = scope.finish();
  return result;
}

}  // namespace lrtp
