#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace lrtp {

enum class MlpVariant { kGlu, kNonGlu };
enum class AttentionVariant { kMha, kMqa, kGqa };

std::string_view to_string(MlpVariant v);
std::string_view to_string(AttentionVariant v);
MlpVariant parse_mlp_variant(std::string_view s);
AttentionVariant parse_attention_variant(std::string_view s);

struct ModelConfig {
  std::size_t hidden_dim = 0;        // h = num_heads * head_dim
  std::size_t kv_dim = 0;            // h_kv = num_kv_heads * head_dim
  std::size_t intermediate_dim = 0;  // m
  std::size_t num_heads = 0;
  std::size_t num_kv_heads = 0;
  std::size_t head_dim = 0;
  MlpVariant mlp_variant = MlpVariant::kGlu;
  AttentionVariant attention_variant = AttentionVariant::kMha;
  bool use_rope = false;
  double rope_base = 10000.0;
  std::size_t num_layers = 1;

  // Fills h, h_kv and the attention variant from the head counts.
  static ModelConfig from_heads(std::size_t num_heads, std::size_t num_kv_heads, std::size_t head_dim,
                                std::size_t intermediate_dim, MlpVariant mlp, bool use_rope,
                                std::size_t num_layers = 1);

  // Throws Error(kConfig) on any inconsistency.
  void validate() const;
};

}  // namespace lrtp
