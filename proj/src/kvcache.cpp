#include "lrtp/kvcache.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>

namespace lrtp {

std::uint64_t next_buffer_identity() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

namespace {

std::string seq_name(SequenceId seq) { return "sequence " + std::to_string(seq); }

}  // namespace

PagedCachePool::PagedCachePool(std::size_t block_size, std::size_t num_blocks, std::size_t k_dim,
                               std::size_t v_dim)
    : PagedCachePool(block_size, num_blocks, k_dim, v_dim, [num_blocks] {
        std::vector<std::size_t> order(num_blocks);
        std::iota(order.begin(), order.end(), 0);
        return order;
      }()) {}

PagedCachePool::PagedCachePool(std::size_t block_size, std::size_t num_blocks, std::size_t k_dim,
                               std::size_t v_dim, std::vector<std::size_t> free_order)
    : block_size_(block_size),
      num_blocks_(num_blocks),
      k_dim_(k_dim),
      v_dim_(v_dim),
      identity_(next_buffer_identity()),
      payload_(block_size * num_blocks * (k_dim + v_dim), 0.0),
      positions_(block_size * num_blocks, 0),
      owners_(num_blocks) {
  if (block_size == 0) throw Error(ErrorCode::kParameter, "block_size must be positive");
  std::vector<std::size_t> sorted = free_order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != i || sorted.size() != num_blocks) {
      throw Error(ErrorCode::kParameter, "free order must be a permutation of the pool's blocks");
    }
  }
  free_.assign(free_order.begin(), free_order.end());
}

std::size_t PagedCachePool::take_block(SequenceId owner) {
  if (free_.empty()) throw Error(ErrorCode::kCapacity, "block pool exhausted");
  const std::size_t b = free_.front();
  free_.pop_front();
  owners_[b] = owner;
  return b;
}

void PagedCachePool::release_block(std::size_t block) {
  if (block >= num_blocks_ || !owners_[block]) {
    throw Error(ErrorCode::kLookup, "block " + std::to_string(block) + " is not allocated");
  }
  owners_[block].reset();
  free_.push_front(block);
}

std::span<double> PagedCachePool::slot(std::size_t block, std::size_t slot_index) {
  return {payload_.data() + (block * block_size_ + slot_index) * slot_width(), slot_width()};
}

std::span<const double> PagedCachePool::slot(std::size_t block, std::size_t slot_index) const {
  return {payload_.data() + (block * block_size_ + slot_index) * slot_width(), slot_width()};
}

std::size_t& PagedCachePool::position(std::size_t block, std::size_t slot_index) {
  return positions_[block * block_size_ + slot_index];
}

std::size_t PagedCachePool::position(std::size_t block, std::size_t slot_index) const {
  return positions_[block * block_size_ + slot_index];
}

std::span<const double> PagedCachePool::contiguous_payload(std::size_t first_block, std::size_t tokens) const {
  const std::size_t begin = first_block * block_size_;
  if (begin + tokens > block_size_ * num_blocks_) throw Error(ErrorCode::kCapacity, "run past end of pool");
  return {payload_.data() + begin * slot_width(), tokens * slot_width()};
}

std::span<const std::size_t> PagedCachePool::contiguous_positions(std::size_t first_block,
                                                                  std::size_t tokens) const {
  const std::size_t begin = first_block * block_size_;
  if (begin + tokens > block_size_ * num_blocks_) throw Error(ErrorCode::kCapacity, "run past end of pool");
  return {positions_.data() + begin, tokens};
}

const SequenceBlocks& BlockTable::at(SequenceId seq) const {
  auto it = sequences_.find(seq);
  if (it == sequences_.end()) throw Error(ErrorCode::kLookup, "unknown " + seq_name(seq));
  return it->second;
}

SequenceBlocks& BlockTable::at(SequenceId seq) {
  auto it = sequences_.find(seq);
  if (it == sequences_.end()) throw Error(ErrorCode::kLookup, "unknown " + seq_name(seq));
  return it->second;
}

void allocate_blocks(PagedCachePool& pool, BlockTable& table, SequenceId seq, std::size_t blocks_needed) {
  if (table.block_size() != pool.block_size()) throw Error(ErrorCode::kParameter, "table/pool block size mismatch");
  if (pool.free_count() < blocks_needed) {
    throw Error(ErrorCode::kCapacity, "requested " + std::to_string(blocks_needed) + " blocks, " +
                                          std::to_string(pool.free_count()) + " free");
  }
  auto& entry = table.ensure(seq);
  for (std::size_t i = 0; i < blocks_needed; ++i) entry.physical.push_back(pool.take_block(seq));
}

SlotRef append_kv(PagedCachePool& pool, BlockTable& table, SequenceId seq, std::span<const double> k_low_rank,
                  std::span<const double> v_low_rank, std::size_t position) {
  if (k_low_rank.size() != pool.k_dim() || v_low_rank.size() != pool.v_dim()) {
    throw Error(ErrorCode::kPayload, "payload dims (" + std::to_string(k_low_rank.size()) + ", " +
                                         std::to_string(v_low_rank.size()) + ") do not match pool (" +
                                         std::to_string(pool.k_dim()) + ", " + std::to_string(pool.v_dim()) +
                                         ")");
  }
  auto& entry = table.ensure(seq);
  if (entry.filled == entry.physical.size() * pool.block_size()) allocate_blocks(pool, table, seq, 1);
  const SlotRef ref{entry.physical[entry.filled / pool.block_size()], entry.filled % pool.block_size()};
  auto dst = pool.slot(ref.block, ref.slot);
  std::copy(k_low_rank.begin(), k_low_rank.end(), dst.begin());
  std::copy(v_low_rank.begin(), v_low_rank.end(), dst.begin() + static_cast<std::ptrdiff_t>(pool.k_dim()));
  pool.position(ref.block, ref.slot) = position;
  ++entry.filled;
  return ref;
}

void free_sequence(PagedCachePool& pool, BlockTable& table, SequenceId seq) {
  const auto& entry = table.at(seq);
  // Reverse order keeps the freed blocks at the head of the free list in
  // their logical order.
  for (auto it = entry.physical.rbegin(); it != entry.physical.rend(); ++it) pool.release_block(*it);
  table.erase(seq);
}

std::vector<CachedToken> read_sequence(const PagedCachePool& pool, const BlockTable& table, SequenceId seq) {
  const auto& entry = table.at(seq);
  std::vector<CachedToken> out;
  out.reserve(entry.filled);
  for (std::size_t t = 0; t < entry.filled; ++t) {
    const std::size_t block = entry.physical[t / pool.block_size()];
    const std::size_t s = t % pool.block_size();
    const auto payload = pool.slot(block, s);
    CachedToken tok;
    tok.k.assign(payload.begin(), payload.begin() + static_cast<std::ptrdiff_t>(pool.k_dim()));
    tok.v.assign(payload.begin() + static_cast<std::ptrdiff_t>(pool.k_dim()), payload.end());
    tok.position = pool.position(block, s);
    out.push_back(std::move(tok));
  }
  return out;
}

std::vector<ContiguousRun> scan_contiguous_runs(const BlockTable& table, SequenceId seq) {
  const auto& entry = table.at(seq);
  const std::size_t block_size = table.block_size();
  std::vector<ContiguousRun> runs;
  const std::size_t n = entry.physical.size();
  std::size_t start = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i == n || entry.physical[i] != entry.physical[i - 1] + 1) {
      const std::size_t first_token = start * block_size;
      const std::size_t span = (i - start) * block_size;
      const std::size_t tokens = entry.filled > first_token ? std::min(span, entry.filled - first_token) : 0;
      runs.push_back(ContiguousRun{entry.physical[start], i - start, 0, tokens});
      start = i;
    }
  }
  return runs;
}

RemappingIndexList build_remapping_index(std::span<SequenceRuns> batch, std::size_t capacity_blocks) {
  RemappingIndexList list;
  std::size_t offset = 0;
  for (auto& seq : batch) {
    RemappingEntry entry{seq.seq, {}, 0};
    for (auto& run : seq.runs) {
      run.buffer_offset = offset;
      for (std::size_t b = 0; b < run.length; ++b) entry.buffer_blocks.push_back(offset + b);
      offset += run.length;
      entry.tokens += run.tokens;
    }
    if (offset > capacity_blocks) {
      throw Error(ErrorCode::kCapacity, "batch needs " + std::to_string(offset) +
                                            " buffer blocks, capacity is " + std::to_string(capacity_blocks));
    }
    list.push_back(std::move(entry));
  }
  return list;
}

ReplayPlan prepare_replay(const BlockTable& table, std::span<const SequenceId> batch,
                          std::size_t capacity_blocks, std::uint64_t epoch) {
  ReplayPlan plan;
  plan.epoch = epoch;
  for (SequenceId seq : batch) {
    if (std::any_of(plan.sequences.begin(), plan.sequences.end(),
                    [&](const SequenceRuns& s) { return s.seq == seq; })) {
      throw Error(ErrorCode::kParameter, seq_name(seq) + " appears twice in the batch");
    }
    plan.sequences.push_back(SequenceRuns{seq, scan_contiguous_runs(table, seq)});
  }
  plan.remapping = build_remapping_index(plan.sequences, capacity_blocks);
  for (const auto& e : plan.remapping) {
    plan.active_tokens += e.tokens;
    plan.buffer_blocks_used += e.buffer_blocks.size();
  }
  return plan;
}

void ReplayGuard::begin_replay() {
  if (mode_ == ReplayMode::kReplay) throw Error(ErrorCode::kReplay, "replay window already open");
  mode_ = ReplayMode::kReplay;
  cursor_ = 0;
}

void ReplayGuard::end_replay() {
  if (mode_ != ReplayMode::kReplay) throw Error(ErrorCode::kReplay, "no replay window open");
  mode_ = ReplayMode::kPreparation;
  ++windows_;
  if (!captured_done_) {
    captured_done_ = true;
  } else if (cursor_ != captured_.size()) {
    throw Error(ErrorCode::kReplay, "replay issued " + std::to_string(cursor_) + " operations, captured " +
                                        std::to_string(captured_.size()));
  }
}

void ReplayGuard::note_allocation() {
  ++allocations_;
  if (mode_ == ReplayMode::kReplay) {
    ++replay_allocations_;
    throw Error(ErrorCode::kReplay, "allocation inside a replay window");
  }
}

void ReplayGuard::record(const OpSignature& sig) {
  require_replay(sig.kind.c_str());
  if (!captured_done_) {
    captured_.push_back(sig);
    ++cursor_;
    return;
  }
  if (cursor_ >= captured_.size() || !(captured_[cursor_] == sig)) {
    throw Error(ErrorCode::kReplay, "operation '" + sig.kind + "' at index " + std::to_string(cursor_) +
                                        " differs from the captured signature");
  }
  ++cursor_;
}

void ReplayGuard::require_replay(const char* what) const {
  if (mode_ != ReplayMode::kReplay) {
    throw Error(ErrorCode::kReplay, std::string(what) + " must run inside a replay window");
  }
}

FixedBuffers::FixedBuffers(BufferArena& arena, std::size_t max_tokens, std::size_t block_size, std::size_t k_dim,
                           std::size_t v_dim, std::size_t kv_local_width, std::size_t max_sequences)
    : block_size_(block_size),
      k_dim_(k_dim),
      v_dim_(v_dim),
      kv_local_width_(kv_local_width),
      capacity_blocks_(block_size == 0 ? 0 : (max_tokens + block_size - 1) / block_size),
      max_sequences_(max_sequences) {
  if (block_size == 0 || max_tokens == 0 || max_sequences == 0) {
    throw Error(ErrorCode::kParameter, "buffer sizes must be positive");
  }
  const std::size_t rows = capacity_rows();
  squeeze_ = arena.allocate<double>(rows, k_dim + v_dim);
  positions_ = arena.allocate<std::size_t>(rows, 1);
  reconstruction_ = arena.allocate<double>(rows, 2 * kv_local_width);
  run_table_ = arena.allocate<std::size_t>(capacity_blocks_, 3);
  remap_table_ = arena.allocate<std::size_t>(capacity_blocks_, 1);
  seq_table_ = arena.allocate<std::size_t>(max_sequences, 3);
}

std::vector<std::uint64_t> FixedBuffers::identities() const {
  return {squeeze_.identity,   positions_.identity,   reconstruction_.identity,
          run_table_.identity, remap_table_.identity, seq_table_.identity};
}

void FixedBuffers::stage(const ReplayPlan& plan, const ReplayGuard& guard) {
  if (guard.mode() != ReplayMode::kPreparation) {
    throw Error(ErrorCode::kReplay, "plans are staged in the preparation stage only");
  }
  if (plan.remapping.size() > max_sequences_) {
    throw Error(ErrorCode::kCapacity, std::to_string(plan.remapping.size()) + " sequences exceed table size " +
                                          std::to_string(max_sequences_));
  }
  if (plan.buffer_blocks_used > capacity_blocks_) {
    throw Error(ErrorCode::kCapacity, "plan needs " + std::to_string(plan.buffer_blocks_used) +
                                          " buffer blocks, capacity is " + std::to_string(capacity_blocks_));
  }
  run_count_ = 0;
  for (const auto& seq : plan.sequences) {
    for (const auto& run : seq.runs) {
      std::size_t* entry = run_table_.row(run_count_++);
      entry[0] = run.physical_start;
      entry[1] = run.buffer_offset;
      entry[2] = run.tokens;
    }
  }
  std::size_t remap_cursor = 0;
  seq_count_ = 0;
  for (const auto& e : plan.remapping) {
    std::size_t* s = seq_table_.row(seq_count_++);
    s[0] = remap_cursor;
    s[1] = e.buffer_blocks.size();
    s[2] = e.tokens;
    for (std::size_t b : e.buffer_blocks) remap_table_.data[remap_cursor++] = b;
  }
  active_tokens_ = plan.active_tokens;
  staged_epoch_ = plan.epoch;
}

std::span<const double> FixedBuffers::k_row(std::size_t r) const {
  return {reconstruction_.row(r), kv_local_width_};
}

std::span<const double> FixedBuffers::v_row(std::size_t r) const {
  return {reconstruction_.row(r) + kv_local_width_, kv_local_width_};
}

std::span<const double> FixedBuffers::squeezed_row(std::size_t r) const {
  return {squeeze_.row(r), k_dim_ + v_dim_};
}

// Replay-stage kernels. Each one works on fixed buffers at full capacity and
// reads its dynamic extent from the staged tables.
struct ReplayKernels {
  static void squeeze_copy(FixedBuffers& b, const PagedCachePool& pool) {
    const std::size_t width = b.k_dim_ + b.v_dim_;
    for (std::size_t r = 0; r < b.run_count_; ++r) {
      const std::size_t* run = b.run_table_.row(r);
      const std::size_t tokens = run[2];
      if (tokens == 0) continue;
      const auto payload = pool.contiguous_payload(run[0], tokens);
      const auto positions = pool.contiguous_positions(run[0], tokens);
      const std::size_t dst_row = run[1] * b.block_size_;
      std::copy(payload.begin(), payload.end(), b.squeeze_.row(dst_row));
      std::copy(positions.begin(), positions.end(), b.positions_.row(dst_row));
      ++b.copy_stats_.copy_calls;
      b.copy_stats_.copied_elements += tokens * width;
    }
  }

  // out[:, out_offset : out_offset + up.cols()] = squeeze[:, in_offset : in_offset + up.rows()] * up
  static void reconstruct(FixedBuffers& b, std::size_t in_offset, const DenseMatrix& up, std::size_t out_offset) {
    const std::size_t rank = up.rows();
    const std::size_t width = up.cols();
    for (std::size_t r = 0; r < b.capacity_rows(); ++r) {
      const double* src = b.squeeze_.row(r) + in_offset;
      double* dst = b.reconstruction_.row(r) + out_offset;
      std::fill(dst, dst + width, 0.0);
      for (std::size_t k = 0; k < rank; ++k) {
        const double s = src[k];
        const auto up_row = up.row(k);
        for (std::size_t j = 0; j < width; ++j) dst[j] += s * up_row[j];
      }
    }
  }

  static void mark_reconstructed(FixedBuffers& b, std::uint64_t epoch) { b.reconstructed_epoch_ = epoch; }

  static void rope_k(FixedBuffers& b, const RopeSpec& rope) {
    for (std::size_t r = 0; r < b.capacity_rows(); ++r) {
      rope_in_place(std::span<double>(b.reconstruction_.row(r), b.kv_local_width_), rope.head_dim,
                    b.positions_.data[r], rope.base);
    }
  }
};

namespace {

std::uint64_t weight_identity(const DenseMatrix& m) {
  return static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(m.data().data()));
}

}  // namespace

ReconstructionView replay_reconstruct(FixedBuffers& buffers, ReplayGuard& guard, const ReplayPlan& plan,
                                      const PagedCachePool& pool, const DenseMatrix& k_up_shard,
                                      const DenseMatrix& v_up_shard, const RopeSpec& rope) {
  guard.require_replay("replay_reconstruct");
  if (buffers.staged_epoch() != plan.epoch) {
    throw Error(ErrorCode::kReplay, "plan epoch " + std::to_string(plan.epoch) + " was not staged (staged " +
                                        std::to_string(buffers.staged_epoch()) + ")");
  }
  if (k_up_shard.rows() != buffers.k_dim() || v_up_shard.rows() != buffers.v_dim() ||
      k_up_shard.cols() != buffers.kv_local_width() || v_up_shard.cols() != buffers.kv_local_width()) {
    throw Error(ErrorCode::kShape, "upward shards do not match the reconstruction buffer");
  }
  if (pool.k_dim() != buffers.k_dim() || pool.v_dim() != buffers.v_dim() ||
      pool.block_size() != buffers.block_size()) {
    throw Error(ErrorCode::kShape, "pool layout does not match the squeeze buffer");
  }
  const auto ids = buffers.identities();  // squeeze, positions, reconstruction, runs, remap, seqs
  const std::size_t rows = buffers.capacity_rows();
  const std::size_t kv = buffers.kv_local_width();

  guard.record({"squeeze_copy", {ids[3], pool.identity(), ids[0], ids[1]},
                {buffers.capacity_blocks(), rows, buffers.k_dim() + buffers.v_dim()}});
  ReplayKernels::squeeze_copy(buffers, pool);

  guard.record({"reconstruct_k", {ids[0], weight_identity(k_up_shard), ids[2]}, {rows, buffers.k_dim(), kv}});
  ReplayKernels::reconstruct(buffers, 0, k_up_shard, 0);

  guard.record({"reconstruct_v", {ids[0], weight_identity(v_up_shard), ids[2]}, {rows, buffers.v_dim(), kv}});
  ReplayKernels::reconstruct(buffers, buffers.k_dim(), v_up_shard, kv);

  if (rope.enabled) {
    guard.record({"rope_k_in_place", {ids[2], ids[1]}, {rows, kv, rope.head_dim}});
    ReplayKernels::rope_k(buffers, rope);
  }
  ReplayKernels::mark_reconstructed(buffers, plan.epoch);
  return ReconstructionView{buffers.active_tokens(), &buffers};
}

DenseMatrix paged_attention_reference(const DenseMatrix& query_shard, const FixedBuffers& buffers,
                                      const ReplayPlan& plan, std::span<const QueryChunk> chunks,
                                      std::span<const std::size_t> query_positions, const HeadSlice& heads,
                                      std::uint64_t* flops) {
  if (plan.epoch != buffers.reconstructed_epoch()) {
    throw Error(ErrorCode::kReplay, "stale plan: epoch " + std::to_string(plan.epoch) +
                                        ", buffers reconstructed for " +
                                        std::to_string(buffers.reconstructed_epoch()));
  }
  if (query_positions.size() != query_shard.rows()) throw Error(ErrorCode::kShape, "one position per query row");
  const std::size_t bs = buffers.block_size();
  const std::size_t kv = buffers.kv_local_width();
  DenseMatrix out(query_shard.rows(), query_shard.cols());
  std::size_t cursor = 0;
  for (const auto& chunk : chunks) {
    auto it = std::find_if(plan.remapping.begin(), plan.remapping.end(),
                           [&](const RemappingEntry& e) { return e.seq == chunk.seq; });
    if (it == plan.remapping.end()) throw Error(ErrorCode::kLookup, seq_name(chunk.seq) + " not in plan");
    if (cursor + chunk.rows > query_shard.rows()) throw Error(ErrorCode::kShape, "query chunks overrun rows");

    DenseMatrix k(it->tokens, kv), v(it->tokens, kv);
    std::vector<std::size_t> key_pos(it->tokens);
    for (std::size_t t = 0; t < it->tokens; ++t) {
      const std::size_t row = it->buffer_blocks[t / bs] * bs + t % bs;
      std::copy(buffers.k_row(row).begin(), buffers.k_row(row).end(), k.row(t).begin());
      std::copy(buffers.v_row(row).begin(), buffers.v_row(row).end(), v.row(t).begin());
      key_pos[t] = buffers.position(row);
    }
    const DenseMatrix q = query_shard.row_range(cursor, cursor + chunk.rows);
    const DenseMatrix o =
        attend(q, k, v, heads, query_positions.subspan(cursor, chunk.rows), key_pos, /*causal=*/true, flops);
    for (std::size_t r = 0; r < chunk.rows; ++r) std::copy(o.row(r).begin(), o.row(r).end(), out.row(cursor + r).begin());
    cursor += chunk.rows;
  }
  if (cursor != query_shard.rows()) throw Error(ErrorCode::kShape, "query chunks do not cover every row");
  return out;
}

WorkerKvCache::WorkerKvCache(const CacheSettings& settings, std::size_t k_dim, std::size_t v_dim,
                             std::size_t kv_local_width)
    : pool_([&] {
        std::vector<std::size_t> order(settings.num_blocks);
        std::iota(order.begin(), order.end(), 0);
        if (settings.scramble_seed) {
          Rng rng(*settings.scramble_seed);
          for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
        }
        return PagedCachePool(settings.block_size, settings.num_blocks, k_dim, v_dim, std::move(order));
      }()),
      buffers_(arena_, settings.max_tokens, settings.block_size, k_dim, v_dim, kv_local_width,
               settings.max_sequences) {}

}  // namespace lrtp
