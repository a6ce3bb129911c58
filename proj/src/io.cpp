#include "lrtp/io.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace lrtp {

using nlohmann::json;

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'D', 'L', 'R', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

[[noreturn]] void io_fail(const std::string& msg) { throw Error(ErrorCode::kIo, msg); }

}  // namespace

void WeightArchive::add(const std::string& name, DenseMatrix m) {
  if (name.empty()) throw Error(ErrorCode::kInput, "tensor name is empty");
  if (!tensors_.emplace(name, std::move(m)).second) {
    throw Error(ErrorCode::kInput, "duplicate tensor '" + name + "'");
  }
}

const DenseMatrix& WeightArchive::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::kPlan, "archive has no tensor '" + name + "'");
  return it->second;
}

std::vector<std::string> WeightArchive::names() const {
  std::vector<std::string> out;
  for (const auto& [name, m] : tensors_) out.push_back(name);
  return out;
}

std::vector<std::uint8_t> WeightArchive::serialize() const {
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors_) {
    json e;
    e["name"] = name;
    e["rows"] = m.rows();
    e["cols"] = m.cols();
    e["offset"] = offset;
    entries.push_back(std::move(e));
    offset += 8 * m.size();
  }
  json manifest;
  manifest["tensors"] = std::move(entries);
  const std::string text = manifest.dump();
  if (text.size() > 0xffffffffu) io_fail("manifest too large");

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, m] : tensors_) {
    for (double d : m.data()) put_f64(out, d);
  }
  return out;
}

WeightArchive WeightArchive::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    io_fail("missing DLR1 header");
  }
  const std::uint64_t manifest_len = get_le(bytes.data() + 4, 4);
  if (8 + manifest_len > bytes.size()) io_fail("manifest length runs past end of file");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const json::exception& e) {
    io_fail(std::string("manifest is not valid JSON: ") + e.what());
  }
  const auto payload = bytes.subspan(8 + manifest_len);

  std::vector<ArchiveEntry> entries;
  try {
    for (const auto& e : manifest.at("tensors")) {
      entries.push_back({e.at("name").get<std::string>(), e.at("rows").get<std::size_t>(),
                         e.at("cols").get<std::size_t>(), e.at("offset").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    io_fail(std::string("malformed manifest: ") + e.what());
  }

  std::vector<const ArchiveEntry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
  std::uint64_t end = 0;
  std::uint64_t total = 0;
  for (const ArchiveEntry* e : by_offset) {
    const std::uint64_t len = 8ull * e->rows * e->cols;
    if (e->offset < end) io_fail("tensor '" + e->name + "' overlaps its predecessor");
    if (e->offset + len > payload.size()) io_fail("tensor '" + e->name + "' runs past the payload");
    end = e->offset + len;
    total += len;
  }
  if (total != payload.size()) io_fail("payload length disagrees with the manifest");

  WeightArchive archive;
  for (const auto& e : entries) {
    DenseMatrix m(e.rows, e.cols);
    const std::uint8_t* p = payload.data() + e.offset;
    for (double& d : m.data()) {
      d = std::bit_cast<double>(get_le(p, 8));
      p += 8;
    }
    if (!archive.tensors_.emplace(e.name, std::move(m)).second) io_fail("duplicate tensor '" + e.name + "'");
  }
  return archive;
}

void WeightArchive::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) io_fail("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) io_fail("write to " + path.string() + " failed");
}

WeightArchive WeightArchive::read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) io_fail("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string tensor_name(std::size_t layer, LayerMatrix m) {
  return "layers." + std::to_string(layer) + "." + std::string(to_string(m));
}

WeightArchive archive_dense(std::span<const DenseLayer> layers) {
  WeightArchive a;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& [m, w] : layers[i]) a.add(tensor_name(i, m), w);
  }
  return a;
}

WeightArchive archive_factors(std::span<const FactorLayer> layers) {
  WeightArchive a;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& [m, f] : layers[i]) {
      a.add(tensor_name(i, m) + ".down", f.down);
      a.add(tensor_name(i, m) + ".up", f.up);
    }
  }
  return a;
}

std::vector<LayerMatrix> config_matrices(const ModelConfig& config) {
  std::vector<LayerMatrix> out;
  for (LayerMatrix m : kAllLayerMatrices) {
    if (m == LayerMatrix::kGate && config.mlp_variant != MlpVariant::kGlu) continue;
    out.push_back(m);
  }
  return out;
}

std::pair<std::size_t, std::size_t> matrix_shape(const ModelConfig& config, LayerMatrix m) {
  const std::size_t h = config.hidden_dim, kv = config.kv_dim, i = config.intermediate_dim;
  switch (m) {
    case LayerMatrix::kQ:
    case LayerMatrix::kO: return {h, h};
    case LayerMatrix::kK:
    case LayerMatrix::kV: return {h, kv};
    case LayerMatrix::kUp:
    case LayerMatrix::kGate: return {h, i};
    case LayerMatrix::kDown: return {i, h};
  }
  return {0, 0};
}

namespace {

void check_shape(const std::string& name, const DenseMatrix& w, std::size_t rows, std::size_t cols) {
  if (w.rows() != rows || w.cols() != cols) {
    throw Error(ErrorCode::kShape, "tensor '" + name + "' is " + std::to_string(w.rows()) + "x" +
                                       std::to_string(w.cols()) + ", expected " + std::to_string(rows) + "x" +
                                       std::to_string(cols));
  }
}

}  // namespace

std::vector<DenseLayer> dense_from_archive(const WeightArchive& archive, const ModelConfig& config) {
  config.validate();
  std::vector<DenseLayer> out(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    for (LayerMatrix m : config_matrices(config)) {
      const std::string name = tensor_name(i, m);
      const DenseMatrix& w = archive.at(name);
      const auto [r, c] = matrix_shape(config, m);
      check_shape(name, w, r, c);
      out[i][m] = w;
    }
  }
  return out;
}

std::vector<FactorLayer> factors_from_archive(const WeightArchive& archive, const ModelConfig& config) {
  config.validate();
  std::vector<FactorLayer> out(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    for (LayerMatrix m : config_matrices(config)) {
      const std::string base = tensor_name(i, m);
      FactorPair f{archive.at(base + ".down"), archive.at(base + ".up")};
      const auto [r, c] = matrix_shape(config, m);
      check_shape(base + ".down", f.down, r, f.down.cols());
      check_shape(base + ".up", f.up, f.down.cols(), c);
      out[i][m] = std::move(f);
    }
  }
  return out;
}

DecompositionPlan plan_from_ratio(const ModelConfig& config, double ratio) {
  DecompositionPlan plan(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    for (LayerMatrix m : config_matrices(config)) {
      const auto [r, c] = matrix_shape(config, m);
      plan.set(i, m, rank_from_ratio(ratio, r, c));
    }
  }
  return plan;
}

DecompositionPlan plan_lossless(const ModelConfig& config) {
  DecompositionPlan plan(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    for (LayerMatrix m : config_matrices(config)) {
      const auto [r, c] = matrix_shape(config, m);
      plan.set(i, m, std::min(r, c));
    }
  }
  return plan;
}

ConventionSelection parse_convention_selection(std::string_view s) {
  if (s == "tabulated") return ConventionSelection::kTabulated;
  if (s == "measured") return ConventionSelection::kMeasured;
  if (s == "both") return ConventionSelection::kBoth;
  throw Error(ErrorCode::kConfig, "unknown convention '" + std::string(s) + "'");
}

std::vector<CostConvention> conventions(ConventionSelection s) {
  switch (s) {
    case ConventionSelection::kTabulated: return {CostConvention::kTabulated};
    case ConventionSelection::kMeasured: return {CostConvention::kPipelineMeasured};
    case ConventionSelection::kBoth: return {CostConvention::kTabulated, CostConvention::kPipelineMeasured};
  }
  return {};
}

DecompositionPlan RunConfig::plan() const {
  if (!ranks.empty()) {
    DecompositionPlan p(model.num_layers);
    for (std::size_t i = 0; i < model.num_layers; ++i) {
      for (LayerMatrix m : config_matrices(model)) {
        auto it = ranks.find(m);
        if (it == ranks.end()) {
          throw Error(ErrorCode::kPlan, "no rank given for '" + std::string(to_string(m)) + "'");
        }
        p.set(i, m, it->second);
      }
    }
    return p;
  }
  if (ratio) return plan_from_ratio(model, *ratio);
  return plan_lossless(model);
}

CostInputs RunConfig::cost_inputs() const { return CostInputs::from_plan(model, plan(), 0); }

void RunConfig::validate() const {
  model.validate();
  if (tp.empty()) throw Error(ErrorCode::kConfig, "tp list is empty");
  for (std::size_t p : tp) {
    if (p == 0) throw Error(ErrorCode::kConfig, "tp degree must be positive");
  }
  if (bytes_per_element == 0) throw Error(ErrorCode::kConfig, "bytes_per_element must be positive");
  if (cache.block_size == 0 || cache.num_blocks == 0 || cache.max_tokens == 0 || cache.max_sequences == 0) {
    throw Error(ErrorCode::kConfig, "cache settings must be positive");
  }
  const DecompositionPlan p = plan();
  for (LayerMatrix m : config_matrices(model)) {
    const auto [r, c] = matrix_shape(model, m);
    const std::size_t rank = *p.rank(0, m);
    if (rank < 1 || rank > std::min(r, c)) {
      throw Error(ErrorCode::kPlan, "rank " + std::to_string(rank) + " for '" + std::string(to_string(m)) +
                                        "' outside [1, " + std::to_string(std::min(r, c)) + "]");
    }
  }
}

namespace {

std::map<LayerMatrix, std::size_t> ranks_from_json(const json& j) {
  std::map<LayerMatrix, std::size_t> out;
  for (const auto& [key, value] : j.items()) {
    const auto m = parse_layer_matrix(key);
    if (!m) throw Error(ErrorCode::kConfig, "unknown matrix '" + key + "' in ranks");
    out[*m] = value.get<std::size_t>();
  }
  return out;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) io_fail("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

RunConfig RunConfig::parse(const std::string& json_text) {
  RunConfig rc;
  try {
    const json j = json::parse(json_text);
    const json& m = j.at("model");
    const auto mlp = parse_mlp_variant(m.value("mlp", std::string("glu")));
    rc.model = ModelConfig::from_heads(m.at("num_heads").get<std::size_t>(), m.at("num_kv_heads").get<std::size_t>(),
                                       m.at("head_dim").get<std::size_t>(),
                                       m.at("intermediate_dim").get<std::size_t>(), mlp, m.value("rope", false),
                                       m.value("num_layers", std::size_t{1}));
    rc.model.rope_base = m.value("rope_base", 10000.0);
    if (m.contains("hidden_dim")) rc.model.hidden_dim = m.at("hidden_dim").get<std::size_t>();
    if (m.contains("kv_dim")) rc.model.kv_dim = m.at("kv_dim").get<std::size_t>();
    if (m.contains("attention")) rc.model.attention_variant = parse_attention_variant(m.at("attention").get<std::string>());

    if (j.contains("plan")) {
      const json& p = j.at("plan");
      if (p.contains("ranks")) rc.ranks = ranks_from_json(p.at("ranks"));
      if (p.contains("ratio")) rc.ratio = p.at("ratio").get<double>();
      rc.lossless = p.value("lossless", false);
    }
    if (j.contains("tp")) rc.tp = j.at("tp").get<std::vector<std::size_t>>();
    rc.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("cache")) {
      const json& c = j.at("cache");
      rc.cache.block_size = c.value("block_size", rc.cache.block_size);
      rc.cache.num_blocks = c.value("num_blocks", rc.cache.num_blocks);
      rc.cache.max_tokens = c.value("max_tokens", rc.cache.max_tokens);
      rc.cache.max_sequences = c.value("max_sequences", rc.cache.max_sequences);
      if (c.contains("scramble_seed")) rc.cache.scramble_seed = c.at("scramble_seed").get<std::uint64_t>();
    }
    rc.convention = parse_convention_selection(j.value("convention", std::string("both")));
    rc.bytes_per_element = j.value("bytes_per_element", rc.bytes_per_element);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad run config: ") + e.what());
  }
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return parse(slurp(path)); }

std::map<LayerMatrix, std::size_t> parse_ranks(const std::string& json_text) {
  try {
    const json j = json::parse(json_text);
    if (j.contains("ranks")) return ranks_from_json(j.at("ranks"));
    if (j.contains("plan") && j.at("plan").contains("ranks")) return ranks_from_json(j.at("plan").at("ranks"));
    return ranks_from_json(j);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad ranks file: ") + e.what());
  }
}

std::map<LayerMatrix, std::size_t> load_ranks(const std::filesystem::path& path) { return parse_ranks(slurp(path)); }

}  // namespace lrtp
