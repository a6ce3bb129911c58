#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrtp/linalg.hpp"

namespace lrtp {

enum class CollectiveKind { kAllGather, kReduceSum };
enum class Sublayer { kAttention, kMlp, kOther };

std::string_view to_string(CollectiveKind kind);
std::string_view to_string(Sublayer sublayer);

struct CollectiveTag {
  std::size_t layer = 0;
  Sublayer sublayer = Sublayer::kOther;
};

// Volumes follow the per-token element convention: an all-gather that leaves
// n elements per token on every worker costs n, a reduce-sum over n elements
// costs 2n. A group of one worker records the call with zero volume.
struct CollectiveRecord {
  CollectiveKind kind;
  CollectiveTag tag;
  std::uint64_t per_token_volume;
  std::size_t tokens;
  std::uint64_t step;
};

class TrafficLedger {
 public:
  void record(CollectiveRecord r) { records_.push_back(r); }

  const std::vector<CollectiveRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }

  // Records appended after position `mark`.
  TrafficLedger since(std::size_t mark) const;

  std::size_t call_count(CollectiveKind kind) const;
  std::size_t call_count(CollectiveKind kind, Sublayer sublayer) const;
  std::uint64_t per_token_volume() const;
  std::uint64_t per_token_volume(CollectiveKind kind) const;
  std::uint64_t per_token_volume(CollectiveKind kind, std::size_t layer, Sublayer sublayer) const;
  // Elements summed over tokens.
  std::uint64_t total_volume() const;
  std::uint64_t total_volume(CollectiveKind kind, std::size_t layer, Sublayer sublayer) const;

  friend bool operator==(const TrafficLedger&, const TrafficLedger&);

 private:
  std::vector<CollectiveRecord> records_;
};

bool operator==(const CollectiveTag& a, const CollectiveTag& b);
bool operator==(const CollectiveRecord& a, const CollectiveRecord& b);

struct WorkerCounters {
  std::uint64_t attention_flops = 0;
  std::uint64_t matmul_flops = 0;

  friend bool operator==(const WorkerCounters&, const WorkerCounters&) = default;
};

// Lockstep group of logical tensor-parallel workers. Workers are advanced
// round-robin by the caller; every collective is a barrier that consumes one
// local value from each worker and hands back one result per worker.
class WorkerGroup {
 public:
  explicit WorkerGroup(std::size_t world_size);

  std::size_t size() const noexcept { return counters_.size(); }
  std::uint64_t step() const noexcept { return step_; }

  TrafficLedger& ledger() noexcept { return ledger_; }
  const TrafficLedger& ledger() const noexcept { return ledger_; }
  WorkerCounters& counters(std::size_t rank) { return counters_.at(rank); }
  const std::vector<WorkerCounters>& counters() const noexcept { return counters_; }

  // Concatenates each worker's columns in rank order (rows are tokens).
  std::vector<DenseMatrix> all_gather(std::span<const DenseMatrix> locals, CollectiveTag tag);
  // Elementwise sum across workers, accumulated in rank order.
  std::vector<DenseMatrix> reduce_sum(std::span<const DenseMatrix> locals, CollectiveTag tag);

  // Local GEMM on one worker, metered as 2*m*k*n FLOPs.
  DenseMatrix matmul(std::size_t rank, const DenseMatrix& a, const DenseMatrix& b);

 private:
  void check_locals(std::span<const DenseMatrix> locals, bool same_cols) const;

  std::vector<WorkerCounters> counters_;
  TrafficLedger ledger_;
  std::uint64_t step_ = 0;
};

enum class ShardScheme { kConcatSplit, kColumnShard, kRowParallel, kReplicated };

std::string_view to_string(ShardScheme scheme);

// Half-open range along the partitioned dimension.
struct OwnerRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const noexcept { return end - begin; }
  friend bool operator==(const OwnerRange&, const OwnerRange&) = default;
};

struct ShardSpec {
  ShardScheme scheme = ShardScheme::kReplicated;
  std::size_t world_size = 1;
  std::size_t extent = 0;  // full length of the partitioned dimension
  std::vector<OwnerRange> owners;

  // Even split of `extent` into contiguous ranges; kPartition if indivisible.
  static ShardSpec even(ShardScheme scheme, std::size_t extent, std::size_t world_size);
  static ShardSpec replicated(std::size_t extent, std::size_t world_size);
  // Column shard along whole heads. With fewer heads than workers each head
  // is replicated on world_size / num_heads consecutive workers.
  static ShardSpec head_columns(std::size_t num_heads, std::size_t head_dim, std::size_t world_size);

  bool owns_each_element_once() const;
};

struct ShardedMatrix {
  ShardSpec spec;
  std::vector<DenseMatrix> shards;         // one per worker
  std::vector<std::size_t> source_extents;  // column counts of concatenated sources
};

// ConcatSplit concatenates `matrices` column-wise and splits evenly;
// the other schemes take exactly one matrix.
ShardedMatrix partition(std::span<const DenseMatrix> matrices, ShardScheme scheme, std::size_t world_size);
ShardedMatrix partition(const DenseMatrix& matrix, ShardScheme scheme, std::size_t world_size);
ShardedMatrix partition_heads(const DenseMatrix& matrix, std::size_t num_heads, std::size_t head_dim,
                              std::size_t world_size);

// Inverse of partition: the original matrices in source order.
std::vector<DenseMatrix> reassemble(const ShardedMatrix& sharded);

}  // namespace lrtp
