#include "lrtp/parallel.hpp"

#include <algorithm>
#include <string>

namespace lrtp {

std::string_view to_string(CollectiveKind kind) {
  return kind == CollectiveKind::kAllGather ? "all_gather" : "reduce_sum";
}

std::string_view to_string(Sublayer sublayer) {
  switch (sublayer) {
    case Sublayer::kAttention: return "attention";
    case Sublayer::kMlp: return "mlp";
    case Sublayer::kOther: return "other";
  }
  return "?";
}

std::string_view to_string(ShardScheme scheme) {
  switch (scheme) {
    case ShardScheme::kConcatSplit: return "concat_split";
    case ShardScheme::kColumnShard: return "column_shard";
    case ShardScheme::kRowParallel: return "row_parallel";
    case ShardScheme::kReplicated: return "replicated";
  }
  return "?";
}

bool operator==(const CollectiveTag& a, const CollectiveTag& b) {
  return a.layer == b.layer && a.sublayer == b.sublayer;
}

bool operator==(const CollectiveRecord& a, const CollectiveRecord& b) {
  return a.kind == b.kind && a.tag == b.tag && a.per_token_volume == b.per_token_volume &&
         a.tokens == b.tokens && a.step == b.step;
}

bool operator==(const TrafficLedger& a, const TrafficLedger& b) { return a.records_ == b.records_; }

TrafficLedger TrafficLedger::since(std::size_t mark) const {
  TrafficLedger out;
  for (std::size_t i = std::min(mark, records_.size()); i < records_.size(); ++i) out.record(records_[i]);
  return out;
}

std::size_t TrafficLedger::call_count(CollectiveKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(), [&](const auto& r) { return r.kind == kind; }));
}

std::size_t TrafficLedger::call_count(CollectiveKind kind, Sublayer sublayer) const {
  return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(), [&](const auto& r) {
    return r.kind == kind && r.tag.sublayer == sublayer;
  }));
}

std::uint64_t TrafficLedger::per_token_volume() const {
  std::uint64_t v = 0;
  for (const auto& r : records_) v += r.per_token_volume;
  return v;
}

std::uint64_t TrafficLedger::per_token_volume(CollectiveKind kind) const {
  std::uint64_t v = 0;
  for (const auto& r : records_) {
    if (r.kind == kind) v += r.per_token_volume;
  }
  return v;
}

std::uint64_t TrafficLedger::per_token_volume(CollectiveKind kind, std::size_t layer,
                                              Sublayer sublayer) const {
  std::uint64_t v = 0;
  for (const auto& r : records_) {
    if (r.kind == kind && r.tag.layer == layer && r.tag.sublayer == sublayer) v += r.per_token_volume;
  }
  return v;
}

std::uint64_t TrafficLedger::total_volume() const {
  std::uint64_t v = 0;
  for (const auto& r : records_) v += r.per_token_volume * r.tokens;
  return v;
}

std::uint64_t TrafficLedger::total_volume(CollectiveKind kind, std::size_t layer, Sublayer sublayer) const {
  std::uint64_t v = 0;
  for (const auto& r : records_) {
    if (r.kind == kind && r.tag.layer == layer && r.tag.sublayer == sublayer) v += r.per_token_volume * r.tokens;
  }
  return v;
}

WorkerGroup::WorkerGroup(std::size_t world_size) {
  if (world_size < 1) throw Error(ErrorCode::kParameter, "world size must be at least 1");
  counters_.resize(world_size);
}

void WorkerGroup::check_locals(std::span<const DenseMatrix> locals, bool same_cols) const {
  if (locals.size() != size()) {
    throw Error(ErrorCode::kCollective, "expected " + std::to_string(size()) + " local buffers, got " +
                                            std::to_string(locals.size()));
  }
  for (const auto& m : locals) {
    if (m.rows() != locals.front().rows() || (same_cols && m.cols() != locals.front().cols())) {
      throw Error(ErrorCode::kCollective, "local buffer shapes differ across workers");
    }
  }
}

std::vector<DenseMatrix> WorkerGroup::all_gather(std::span<const DenseMatrix> locals, CollectiveTag tag) {
  check_locals(locals, /*same_cols=*/true);
  DenseMatrix gathered = hconcat(locals);
  const std::uint64_t volume = size() == 1 ? 0 : gathered.cols();
  ledger_.record({CollectiveKind::kAllGather, tag, volume, gathered.rows(), step_++});
  return std::vector<DenseMatrix>(size(), gathered);
}

std::vector<DenseMatrix> WorkerGroup::reduce_sum(std::span<const DenseMatrix> locals, CollectiveTag tag) {
  check_locals(locals, /*same_cols=*/true);
  DenseMatrix sum = locals.front();
  for (std::size_t r = 1; r < locals.size(); ++r) {
    auto acc = sum.data();
    auto src = locals[r].data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
  }
  const std::uint64_t volume = size() == 1 ? 0 : 2 * static_cast<std::uint64_t>(sum.cols());
  ledger_.record({CollectiveKind::kReduceSum, tag, volume, sum.rows(), step_++});
  return std::vector<DenseMatrix>(size(), sum);
}

DenseMatrix WorkerGroup::matmul(std::size_t rank, const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix c = lrtp::matmul(a, b);
  counters_.at(rank).matmul_flops += 2ULL * a.rows() * a.cols() * b.cols();
  return c;
}

ShardSpec ShardSpec::even(ShardScheme scheme, std::size_t extent, std::size_t world_size) {
  if (scheme == ShardScheme::kReplicated) return replicated(extent, world_size);
  if (world_size < 1 || extent % world_size != 0) {
    throw Error(ErrorCode::kPartition, std::string(to_string(scheme)) + ": dimension " +
                                           std::to_string(extent) + " not divisible by " +
                                           std::to_string(world_size) + " workers");
  }
  ShardSpec spec{scheme, world_size, extent, {}};
  const std::size_t chunk = extent / world_size;
  for (std::size_t r = 0; r < world_size; ++r) spec.owners.push_back({r * chunk, (r + 1) * chunk});
  return spec;
}

ShardSpec ShardSpec::replicated(std::size_t extent, std::size_t world_size) {
  ShardSpec spec{ShardScheme::kReplicated, world_size, extent, {}};
  spec.owners.assign(world_size, OwnerRange{0, extent});
  return spec;
}

ShardSpec ShardSpec::head_columns(std::size_t num_heads, std::size_t head_dim, std::size_t world_size) {
  if (num_heads >= world_size) {
    if (num_heads % world_size != 0) {
      throw Error(ErrorCode::kPartition, std::to_string(num_heads) + " heads not divisible by " +
                                             std::to_string(world_size) + " workers");
    }
    return even(ShardScheme::kColumnShard, num_heads * head_dim, world_size);
  }
  if (world_size % num_heads != 0) {
    throw Error(ErrorCode::kPartition, std::to_string(world_size) + " workers cannot share " +
                                           std::to_string(num_heads) + " heads evenly");
  }
  ShardSpec spec{ShardScheme::kColumnShard, world_size, num_heads * head_dim, {}};
  for (std::size_t r = 0; r < world_size; ++r) {
    const std::size_t head = r * num_heads / world_size;
    spec.owners.push_back({head * head_dim, (head + 1) * head_dim});
  }
  return spec;
}

bool ShardSpec::owns_each_element_once() const {
  if (scheme == ShardScheme::kReplicated) return world_size == 1;
  std::size_t cursor = 0;
  for (const auto& o : owners) {
    if (o.begin != cursor) return false;
    cursor = o.end;
  }
  return cursor == extent;
}

ShardedMatrix partition(std::span<const DenseMatrix> matrices, ShardScheme scheme, std::size_t world_size) {
  if (matrices.empty()) throw Error(ErrorCode::kPartition, "nothing to partition");
  if (scheme != ShardScheme::kConcatSplit && matrices.size() != 1) {
    throw Error(ErrorCode::kPartition, std::string(to_string(scheme)) + " takes exactly one matrix");
  }
  ShardedMatrix out;
  for (const auto& m : matrices) out.source_extents.push_back(m.cols());
  const DenseMatrix joined = matrices.size() == 1 ? matrices.front() : hconcat(matrices);

  switch (scheme) {
    case ShardScheme::kConcatSplit:
    case ShardScheme::kColumnShard:
      out.spec = ShardSpec::even(scheme, joined.cols(), world_size);
      for (const auto& o : out.spec.owners) out.shards.push_back(joined.columns(o.begin, o.end));
      break;
    case ShardScheme::kRowParallel:
      out.spec = ShardSpec::even(scheme, joined.rows(), world_size);
      for (const auto& o : out.spec.owners) out.shards.push_back(joined.row_range(o.begin, o.end));
      break;
    case ShardScheme::kReplicated:
      out.spec = ShardSpec::replicated(joined.cols(), world_size);
      out.shards.assign(world_size, joined);
      break;
  }
  return out;
}

ShardedMatrix partition(const DenseMatrix& matrix, ShardScheme scheme, std::size_t world_size) {
  return partition(std::span<const DenseMatrix>(&matrix, 1), scheme, world_size);
}

ShardedMatrix partition_heads(const DenseMatrix& matrix, std::size_t num_heads, std::size_t head_dim,
                              std::size_t world_size) {
  if (matrix.cols() != num_heads * head_dim) {
    throw Error(ErrorCode::kShape, "matrix has " + std::to_string(matrix.cols()) + " columns, expected " +
                                       std::to_string(num_heads * head_dim));
  }
  ShardedMatrix out;
  out.spec = ShardSpec::head_columns(num_heads, head_dim, world_size);
  out.source_extents = {matrix.cols()};
  for (const auto& o : out.spec.owners) out.shards.push_back(matrix.columns(o.begin, o.end));
  return out;
}

std::vector<DenseMatrix> reassemble(const ShardedMatrix& sharded) {
  if (sharded.shards.empty()) return {};
  const auto& spec = sharded.spec;
  if (spec.scheme == ShardScheme::kReplicated) return {sharded.shards.front()};
  if (spec.scheme == ShardScheme::kRowParallel) return {vconcat(sharded.shards)};

  // Column schemes: keep the first owner of each range so replicated heads
  // are not duplicated.
  std::vector<DenseMatrix> unique;
  std::size_t cursor = 0;
  for (std::size_t r = 0; r < spec.owners.size(); ++r) {
    if (spec.owners[r].begin == cursor) {
      unique.push_back(sharded.shards[r]);
      cursor = spec.owners[r].end;
    }
  }
  DenseMatrix joined = hconcat(unique);
  std::vector<DenseMatrix> out;
  std::size_t offset = 0;
  for (std::size_t extent : sharded.source_extents) {
    out.push_back(joined.columns(offset, offset + extent));
    offset += extent;
  }
  return out;
}

}  // namespace lrtp
