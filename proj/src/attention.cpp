#include "lrtp/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lrtp {

HeadSlice HeadSlice::full(const ModelConfig& config) {
  return HeadSlice{config.num_heads, config.num_kv_heads, config.head_dim, 0, config.num_heads, 0,
                   config.num_kv_heads};
}

HeadSlice HeadSlice::for_worker(const ModelConfig& config, std::size_t rank, std::size_t world_size) {
  const std::size_t heads = config.num_heads;
  const std::size_t kv_heads = config.num_kv_heads;
  if (world_size == 0 || heads % world_size != 0) {
    throw Error(ErrorCode::kPartition, std::to_string(heads) + " query heads not divisible by " +
                                           std::to_string(world_size) + " workers");
  }
  HeadSlice s = full(config);
  s.q_count = heads / world_size;
  s.q_begin = rank * s.q_count;
  if (kv_heads >= world_size) {
    if (kv_heads % world_size != 0) {
      throw Error(ErrorCode::kPartition, std::to_string(kv_heads) + " kv heads not divisible by " +
                                             std::to_string(world_size) + " workers");
    }
    s.kv_count = kv_heads / world_size;
    s.kv_begin = rank * s.kv_count;
  } else {
    if (world_size % kv_heads != 0) {
      throw Error(ErrorCode::kPartition, std::to_string(world_size) + " workers cannot share " +
                                             std::to_string(kv_heads) + " kv heads evenly");
    }
    s.kv_count = 1;
    s.kv_begin = rank * kv_heads / world_size;
  }
  return s;
}

void rope_in_place(std::span<double> row, std::size_t head_dim, std::size_t position, double base) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw Error(ErrorCode::kConfig, "rotary embedding needs an even head_dim, got " + std::to_string(head_dim));
  }
  if (row.size() % head_dim != 0) {
    throw Error(ErrorCode::kShape, "row width " + std::to_string(row.size()) + " is not a multiple of head_dim");
  }
  if (position == 0) return;
  const double pos = static_cast<double>(position);
  for (std::size_t i = 0; i < head_dim / 2; ++i) {
    const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    for (std::size_t h = 0; h < row.size(); h += head_dim) {
      double& x0 = row[h + 2 * i];
      double& x1 = row[h + 2 * i + 1];
      const double a = x0;
      const double b = x1;
      x0 = a * c - b * s;
      x1 = a * s + b * c;
    }
  }
}

DenseMatrix apply_rope(const DenseMatrix& x, std::size_t head_dim, std::span<const std::size_t> positions,
                       double base) {
  if (positions.size() != x.rows()) throw Error(ErrorCode::kShape, "one position per row required");
  DenseMatrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) rope_in_place(out.row(r), head_dim, positions[r], base);
  return out;
}

DenseMatrix attend(const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v, const HeadSlice& heads,
                   std::span<const std::size_t> query_positions, std::span<const std::size_t> key_positions,
                   bool causal, std::uint64_t* flops) {
  const std::size_t d = heads.head_dim;
  if (q.cols() != heads.q_width() || k.cols() != heads.kv_width() || v.cols() != heads.kv_width()) {
    throw Error(ErrorCode::kShape, "attention operand widths disagree with the head layout");
  }
  if (k.rows() != v.rows() || query_positions.size() != q.rows() || key_positions.size() != k.rows()) {
    throw Error(ErrorCode::kShape, "attention operand row counts disagree");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  DenseMatrix out(q.rows(), q.cols());
  std::vector<double> scores(k.rows());
  std::uint64_t visible_pairs = 0;

  for (std::size_t g = 0; g < heads.q_count; ++g) {
    const std::size_t qo = g * d;
    const std::size_t kvo = heads.local_kv_for(g) * d;
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const auto qi = q.row(i).subspan(qo, d);
      double max_score = -INFINITY;
      std::size_t visible = 0;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        if (causal && key_positions[j] > query_positions[i]) {
          scores[j] = -INFINITY;
          continue;
        }
        const auto kj = k.row(j).subspan(kvo, d);
        double dot = 0.0;
        for (std::size_t t = 0; t < d; ++t) dot += qi[t] * kj[t];
        scores[j] = dot * scale;
        max_score = std::max(max_score, scores[j]);
        ++visible;
      }
      visible_pairs += visible;
      if (visible == 0) continue;
      double denom = 0.0;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        scores[j] = std::isinf(scores[j]) ? 0.0 : std::exp(scores[j] - max_score);
        denom += scores[j];
      }
      auto oi = out.row(i).subspan(qo, d);
      for (std::size_t j = 0; j < k.rows(); ++j) {
        if (scores[j] == 0.0) continue;
        const double w = scores[j] / denom;
        const auto vj = v.row(j).subspan(kvo, d);
        for (std::size_t t = 0; t < d; ++t) oi[t] += w * vj[t];
      }
    }
  }
  if (flops != nullptr) *flops += 4ULL * d * visible_pairs;
  return out;
}

std::vector<DenseMatrix> self_attention_reference(std::span<const DenseMatrix> q_heads,
                                                  std::span<const DenseMatrix> k_heads,
                                                  std::span<const DenseMatrix> v_heads, bool causal) {
  if (q_heads.empty() || k_heads.empty() || k_heads.size() != v_heads.size() ||
      q_heads.size() % k_heads.size() != 0) {
    throw Error(ErrorCode::kShape, "query heads must be a positive multiple of kv heads");
  }
  const std::size_t d = q_heads.front().cols();
  const std::size_t tokens = q_heads.front().rows();
  const std::size_t keys = k_heads.front().rows();
  for (const auto& m : q_heads) {
    if (m.cols() != d || m.rows() != tokens) throw Error(ErrorCode::kShape, "query heads differ in shape");
  }
  for (std::size_t j = 0; j < k_heads.size(); ++j) {
    if (k_heads[j].cols() != d || v_heads[j].cols() != d || k_heads[j].rows() != keys ||
        v_heads[j].rows() != keys) {
      throw Error(ErrorCode::kShape, "key/value heads differ in shape");
    }
  }
  HeadSlice heads{q_heads.size(), k_heads.size(), d, 0, q_heads.size(), 0, k_heads.size()};
  std::vector<std::size_t> qpos(tokens), kpos(keys);
  for (std::size_t i = 0; i < tokens; ++i) qpos[i] = i;
  for (std::size_t j = 0; j < keys; ++j) kpos[j] = j;
  const DenseMatrix out = attend(hconcat(q_heads), hconcat(k_heads), hconcat(v_heads), heads, qpos, kpos, causal);
  std::vector<DenseMatrix> per_head;
  for (std::size_t g = 0; g < q_heads.size(); ++g) per_head.push_back(out.columns(g * d, (g + 1) * d));
  return per_head;
}

}  // namespace lrtp
