#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lrtp/attention.hpp"
#include "lrtp/linalg.hpp"

namespace lrtp {

using SequenceId = std::uint64_t;

// Identity tokens for cache memory. Stable for the lifetime of the owner.
std::uint64_t next_buffer_identity();

// Block pool holding per-token low-rank K/V vectors and their positions.
// Slots of one block are contiguous, and block b+1 follows block b, so a run
// of physically consecutive blocks is one contiguous region.
class PagedCachePool {
 public:
  PagedCachePool(std::size_t block_size, std::size_t num_blocks, std::size_t k_dim, std::size_t v_dim);
  // Free list seeded in the given order (must be a permutation of 0..num_blocks).
  PagedCachePool(std::size_t block_size, std::size_t num_blocks, std::size_t k_dim, std::size_t v_dim,
                 std::vector<std::size_t> free_order);

  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t num_blocks() const noexcept { return num_blocks_; }
  std::size_t k_dim() const noexcept { return k_dim_; }
  std::size_t v_dim() const noexcept { return v_dim_; }
  std::size_t slot_width() const noexcept { return k_dim_ + v_dim_; }
  std::size_t free_count() const noexcept { return free_.size(); }
  std::uint64_t identity() const noexcept { return identity_; }

  // Takes the head of the free list; kCapacity when empty.
  std::size_t take_block(SequenceId owner);
  // Returns a block to the head of the free list.
  void release_block(std::size_t block);
  std::optional<SequenceId> owner(std::size_t block) const { return owners_.at(block); }

  std::span<double> slot(std::size_t block, std::size_t slot_index);
  std::span<const double> slot(std::size_t block, std::size_t slot_index) const;
  std::size_t& position(std::size_t block, std::size_t slot_index);
  std::size_t position(std::size_t block, std::size_t slot_index) const;

  // First `tokens` slots starting at `first_block`, spanning consecutive blocks.
  std::span<const double> contiguous_payload(std::size_t first_block, std::size_t tokens) const;
  std::span<const std::size_t> contiguous_positions(std::size_t first_block, std::size_t tokens) const;

 private:
  std::size_t block_size_;
  std::size_t num_blocks_;
  std::size_t k_dim_;
  std::size_t v_dim_;
  std::uint64_t identity_;
  std::vector<double> payload_;
  std::vector<std::size_t> positions_;
  std::vector<std::optional<SequenceId>> owners_;
  std::deque<std::size_t> free_;
};

struct SequenceBlocks {
  std::vector<std::size_t> physical;  // logical block i -> physical block
  std::size_t filled = 0;             // tokens written
};

class BlockTable {
 public:
  explicit BlockTable(std::size_t block_size) : block_size_(block_size) {}

  std::size_t block_size() const noexcept { return block_size_; }
  bool contains(SequenceId seq) const { return sequences_.count(seq) != 0; }
  // kLookup for unknown sequences.
  const SequenceBlocks& at(SequenceId seq) const;
  SequenceBlocks& at(SequenceId seq);
  SequenceBlocks& ensure(SequenceId seq) { return sequences_[seq]; }
  void erase(SequenceId seq) { sequences_.erase(seq); }
  const std::map<SequenceId, SequenceBlocks>& sequences() const noexcept { return sequences_; }

 private:
  std::size_t block_size_;
  std::map<SequenceId, SequenceBlocks> sequences_;
};

struct SlotRef {
  std::size_t block = 0;
  std::size_t slot = 0;
};

// Appends `blocks_needed` blocks in free-list order; all-or-nothing.
void allocate_blocks(PagedCachePool& pool, BlockTable& table, SequenceId seq, std::size_t blocks_needed);

SlotRef append_kv(PagedCachePool& pool, BlockTable& table, SequenceId seq, std::span<const double> k_low_rank,
                  std::span<const double> v_low_rank, std::size_t position);

// Returns the sequence's blocks to the pool and drops it from the table.
void free_sequence(PagedCachePool& pool, BlockTable& table, SequenceId seq);

struct CachedToken {
  std::vector<double> k;
  std::vector<double> v;
  std::size_t position = 0;
};

// Logical-order read-back of one sequence.
std::vector<CachedToken> read_sequence(const PagedCachePool& pool, const BlockTable& table, SequenceId seq);

struct ContiguousRun {
  std::size_t physical_start = 0;
  std::size_t length = 0;         // in blocks
  std::size_t buffer_offset = 0;  // in buffer blocks
  std::size_t tokens = 0;         // filled slots covered by the run

  friend bool operator==(const ContiguousRun&, const ContiguousRun&) = default;
};

// Maximal physically-ascending runs of the sequence's blocks, in logical
// order. Buffer offsets are left at zero; the remapping step assigns them.
std::vector<ContiguousRun> scan_contiguous_runs(const BlockTable& table, SequenceId seq);

struct SequenceRuns {
  SequenceId seq = 0;
  std::vector<ContiguousRun> runs;
};

struct RemappingEntry {
  SequenceId seq = 0;
  std::vector<std::size_t> buffer_blocks;
  std::size_t tokens = 0;
};
using RemappingIndexList = std::vector<RemappingEntry>;

// Packs sequences back to back into the squeeze buffer (in the given order)
// and fills each run's buffer_offset. kCapacity past capacity_blocks.
RemappingIndexList build_remapping_index(std::span<SequenceRuns> batch, std::size_t capacity_blocks);

struct ReplayPlan {
  std::vector<SequenceRuns> sequences;
  RemappingIndexList remapping;
  std::size_t active_tokens = 0;
  std::size_t buffer_blocks_used = 0;
  std::uint64_t epoch = 0;
};

enum class ReplayMode { kPreparation, kReplay };

struct OpSignature {
  std::string kind;
  std::vector<std::uint64_t> buffers;
  std::vector<std::size_t> max_shape;

  friend bool operator==(const OpSignature&, const OpSignature&) = default;
};

// Models the fixed-argument discipline of graph replay. The first replay
// window captures the operation signatures; every later window must issue
// the same list. Allocations inside a replay window are violations.
class ReplayGuard {
 public:
  ReplayMode mode() const noexcept { return mode_; }
  void begin_replay();
  void end_replay();

  // Called by the arena; throws kReplay in replay mode.
  void note_allocation();
  // Called by every replayed operation; throws kReplay on drift.
  void record(const OpSignature& sig);
  void require_replay(const char* what) const;

  std::size_t allocation_count() const noexcept { return allocations_; }
  std::size_t replay_allocation_count() const noexcept { return replay_allocations_; }
  std::size_t replay_windows() const noexcept { return windows_; }
  const std::vector<OpSignature>& captured() const noexcept { return captured_; }

 private:
  ReplayMode mode_ = ReplayMode::kPreparation;
  std::size_t allocations_ = 0;
  std::size_t replay_allocations_ = 0;
  std::size_t windows_ = 0;
  bool captured_done_ = false;
  std::size_t cursor_ = 0;
  std::vector<OpSignature> captured_;
};

template <class T>
struct ArenaBuffer {
  std::uint64_t identity = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::unique_ptr<T[]> data;

  T* row(std::size_t r) { return data.get() + r * cols; }
  const T* row(std::size_t r) const { return data.get() + r * cols; }
};

// Instrumented allocator for cache buffers; every allocation is reported to
// the guard.
class BufferArena {
 public:
  explicit BufferArena(ReplayGuard& guard) : guard_(guard) {}

  template <class T>
  ArenaBuffer<T> allocate(std::size_t rows, std::size_t cols) {
    guard_.note_allocation();
    ArenaBuffer<T> b;
    b.identity = next_buffer_identity();
    b.rows = rows;
    b.cols = cols;
    b.data = std::make_unique<T[]>(rows * cols);  // value-initialized
    bytes_ += rows * cols * sizeof(T);
    return b;
  }

  std::size_t bytes() const noexcept { return bytes_; }

 private:
  ReplayGuard& guard_;
  std::size_t bytes_ = 0;
};

struct CopyStats {
  std::uint64_t copy_calls = 0;
  std::uint64_t copied_elements = 0;
};

// Squeeze and reconstruction buffers plus the fixed metadata tables the
// replay reads (run table, remapping table, sequence lengths). Everything is
// allocated once at construction.
class FixedBuffers {
 public:
  FixedBuffers(BufferArena& arena, std::size_t max_tokens, std::size_t block_size, std::size_t k_dim,
               std::size_t v_dim, std::size_t kv_local_width, std::size_t max_sequences);

  std::size_t capacity_blocks() const noexcept { return capacity_blocks_; }
  std::size_t capacity_rows() const noexcept { return capacity_blocks_ * block_size_; }
  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t k_dim() const noexcept { return k_dim_; }
  std::size_t v_dim() const noexcept { return v_dim_; }
  std::size_t kv_local_width() const noexcept { return kv_local_width_; }
  std::size_t max_sequences() const noexcept { return max_sequences_; }

  // Identity tokens of every buffer, in a fixed order.
  std::vector<std::uint64_t> identities() const;

  // Preparation stage: writes the plan into the fixed tables.
  void stage(const ReplayPlan& plan, const ReplayGuard& guard);
  std::uint64_t staged_epoch() const noexcept { return staged_epoch_; }
  std::uint64_t reconstructed_epoch() const noexcept { return reconstructed_epoch_; }
  std::size_t active_tokens() const noexcept { return active_tokens_; }

  // Reconstructed K row (post-RoPE) / V row for buffer row r.
  std::span<const double> k_row(std::size_t r) const;
  std::span<const double> v_row(std::size_t r) const;
  std::span<const double> squeezed_row(std::size_t r) const;
  std::size_t position(std::size_t r) const { return positions_.data[r]; }

  const CopyStats& copy_stats() const noexcept { return copy_stats_; }

 private:
  friend struct ReplayKernels;

  std::size_t block_size_;
  std::size_t k_dim_;
  std::size_t v_dim_;
  std::size_t kv_local_width_;
  std::size_t capacity_blocks_;
  std::size_t max_sequences_;

  ArenaBuffer<double> squeeze_;         // capacity_rows x (k_dim + v_dim)
  ArenaBuffer<std::size_t> positions_;  // capacity_rows x 1
  ArenaBuffer<double> reconstruction_;  // capacity_rows x 2 * kv_local_width
  ArenaBuffer<std::size_t> run_table_;  // capacity_blocks x 3 (physical, buffer offset, tokens)
  ArenaBuffer<std::size_t> remap_table_;  // capacity_blocks x 1
  ArenaBuffer<std::size_t> seq_table_;    // max_sequences x 3 (first remap index, blocks, tokens)

  std::size_t run_count_ = 0;
  std::size_t seq_count_ = 0;
  std::size_t active_tokens_ = 0;
  std::uint64_t staged_epoch_ = 0;
  std::uint64_t reconstructed_epoch_ = 0;
  CopyStats copy_stats_;
};

// Preparation stage: scan every sequence of the batch and build the
// remapping list over the squeeze buffer.
ReplayPlan prepare_replay(const BlockTable& table, std::span<const SequenceId> batch,
                          std::size_t capacity_blocks, std::uint64_t epoch);

struct RopeSpec {
  bool enabled = false;
  std::size_t head_dim = 0;
  double base = 10000.0;
};

struct ReconstructionView {
  std::size_t active_tokens = 0;
  const FixedBuffers* buffers = nullptr;
};

// Replay stage: run-by-run copy into the squeeze buffer, reconstruction GEMMs
// at full buffer capacity, in-place RoPE on K. The plan must already be
// staged into `buffers`.
ReconstructionView replay_reconstruct(FixedBuffers& buffers, ReplayGuard& guard, const ReplayPlan& plan,
                                      const PagedCachePool& pool, const DenseMatrix& k_up_shard,
                                      const DenseMatrix& v_up_shard, const RopeSpec& rope);

struct QueryChunk {
  SequenceId seq = 0;
  std::size_t rows = 0;  // consecutive query rows belonging to seq
};

// Causal attention of each chunk's query rows over its sequence's
// reconstructed K/V, reached through the remapping list.
DenseMatrix paged_attention_reference(const DenseMatrix& query_shard, const FixedBuffers& buffers,
                                      const ReplayPlan& plan, std::span<const QueryChunk> chunks,
                                      std::span<const std::size_t> query_positions, const HeadSlice& heads,
                                      std::uint64_t* flops = nullptr);

struct CacheSettings {
  std::size_t block_size = 4;
  std::size_t num_blocks = 64;
  std::size_t max_tokens = 128;
  std::size_t max_sequences = 8;
  // When set, the pool's free list starts as a seeded permutation.
  std::optional<std::uint64_t> scramble_seed;
};

// Everything one worker needs to cache one layer.
class WorkerKvCache {
 public:
  WorkerKvCache(const CacheSettings& settings, std::size_t k_dim, std::size_t v_dim,
                std::size_t kv_local_width);

  ReplayGuard& guard() noexcept { return guard_; }
  const ReplayGuard& guard() const noexcept { return guard_; }
  PagedCachePool& pool() noexcept { return pool_; }
  const PagedCachePool& pool() const noexcept { return pool_; }
  BlockTable& table() noexcept { return table_; }
  const BlockTable& table() const noexcept { return table_; }
  FixedBuffers& buffers() noexcept { return buffers_; }
  const FixedBuffers& buffers() const noexcept { return buffers_; }
  std::uint64_t next_epoch() noexcept { return ++epoch_; }

 private:
  ReplayGuard guard_;
  BufferArena arena_{guard_};
  PagedCachePool pool_;
  BlockTable table_{pool_.block_size()};
  FixedBuffers buffers_;
  std::uint64_t epoch_ = 0;
};

}  // namespace lrtp
