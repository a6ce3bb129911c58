#include "lrtp/model_config.hpp"

#include "lrtp/error.hpp"

namespace lrtp {

std::string_view to_string(MlpVariant v) { return v == MlpVariant::kGlu ? "glu" : "non_glu"; }

std::string_view to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kMha: return "mha";
    case AttentionVariant::kMqa: return "mqa";
    case AttentionVariant::kGqa: return "gqa";
  }
  return "?";
}

MlpVariant parse_mlp_variant(std::string_view s) {
  if (s == "glu") return MlpVariant::kGlu;
  if (s == "non_glu" || s == "nonglu") return MlpVariant::kNonGlu;
  throw Error(ErrorCode::kConfig, "unknown mlp variant '" + std::string(s) + "'");
}

AttentionVariant parse_attention_variant(std::string_view s) {
  if (s == "mha") return AttentionVariant::kMha;
  if (s == "mqa") return AttentionVariant::kMqa;
  if (s == "gqa") return AttentionVariant::kGqa;
  throw Error(ErrorCode::kConfig, "unknown attention variant '" + std::string(s) + "'");
}

ModelConfig ModelConfig::from_heads(std::size_t num_heads, std::size_t num_kv_heads, std::size_t head_dim,
                                    std::size_t intermediate_dim, MlpVariant mlp, bool use_rope,
                                    std::size_t num_layers) {
  ModelConfig c;
  c.num_heads = num_heads;
  c.num_kv_heads = num_kv_heads;
  c.head_dim = head_dim;
  c.hidden_dim = num_heads * head_dim;
  c.kv_dim = num_kv_heads * head_dim;
  c.intermediate_dim = intermediate_dim;
  c.mlp_variant = mlp;
  c.use_rope = use_rope;
  c.num_layers = num_layers;
  if (num_kv_heads == num_heads) {
    c.attention_variant = AttentionVariant::kMha;
  } else if (num_kv_heads == 1) {
    c.attention_variant = AttentionVariant::kMqa;
  } else {
    c.attention_variant = AttentionVariant::kGqa;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (num_heads == 0 || num_kv_heads == 0 || head_dim == 0) fail("head counts and head_dim must be positive");
  if (intermediate_dim == 0) fail("intermediate_dim must be positive");
  if (num_layers == 0) fail("num_layers must be positive");
  if (num_heads % num_kv_heads != 0) fail("num_heads must be divisible by num_kv_heads");
  if (hidden_dim != num_heads * head_dim) fail("hidden_dim must equal num_heads * head_dim");
  if (kv_dim != num_kv_heads * head_dim) fail("kv_dim must equal num_kv_heads * head_dim");
  // A single head is simultaneously MHA and MQA.
  const bool mha = num_kv_heads == num_heads;
  const bool mqa = num_kv_heads == 1;
  switch (attention_variant) {
    case AttentionVariant::kMha:
      if (!mha) fail("MHA requires num_kv_heads == num_heads");
      break;
    case AttentionVariant::kMqa:
      if (!mqa) fail("MQA requires num_kv_heads == 1");
      break;
    case AttentionVariant::kGqa:
      if (mha || mqa) fail("GQA requires 1 < num_kv_heads < num_heads");
      break;
  }
  if (use_rope) {
    if (head_dim % 2 != 0) fail("rotary embedding needs an even head_dim");
    if (!(rope_base > 0.0)) fail("rope_base must be positive");
  }
}

}  // namespace lrtp
