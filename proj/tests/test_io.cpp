#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>

#include "lrtp/io.hpp"
#include "lrtp/pipelines.hpp"

using namespace lrtp;

namespace {

void expect_code(ErrorCode want, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(want);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), want) << e.what();
  }
}

bool bit_equal(const DenseMatrix& a, const DenseMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data().data(), b.data().data(), 8 * a.size()) == 0;
}

const char* kToy = R"({
  "model": {"num_heads": 4, "num_kv_heads": 2, "head_dim": 8, "intermediate_dim": 64,
            "mlp": "glu", "rope": true, "num_layers": 2},
  "plan": {"ranks": {"q": 16, "k": 8, "v": 8, "o": 16, "up": 16, "gate": 16, "down": 16}},
  "tp": [1, 2, 4],
  "seed": 5,
  "cache": {"block_size": 2, "num_blocks": 32, "max_tokens": 64, "max_sequences": 4, "scramble_seed": 7}
})";

}  // namespace

TEST(WeightArchive, RoundTripIsBitExact) {
  WeightArchive a;
  DenseMatrix odd(2, 3);
  odd(0, 0) = std::numeric_limits<double>::quiet_NaN();
  odd(0, 1) = -0.0;
  odd(0, 2) = std::numeric_limits<double>::denorm_min();
  odd(1, 0) = std::numeric_limits<double>::infinity();
  odd(1, 1) = std::numeric_limits<double>::max();
  odd(1, 2) = 0.1;
  a.add("z.odd", odd);
  a.add("a.normal", Rng(1).normal_matrix(4, 5));
  a.add("m.empty", DenseMatrix(0, 3));
  const auto bytes = a.serialize();
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DLR1");
  const WeightArchive b = WeightArchive::deserialize(bytes);
  EXPECT_EQ(b.names(), (std::vector<std::string>{"a.normal", "m.empty", "z.odd"}));
  for (const auto& n : a.names()) EXPECT_TRUE(bit_equal(a.at(n), b.at(n))) << n;
  EXPECT_TRUE(std::signbit(b.at("z.odd")(0, 1)));
  EXPECT_EQ(b.serialize(), bytes);
}

TEST(WeightArchive, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "lrtp_io_roundtrip.dlr";
  const auto cfg = ModelConfig::from_heads(2, 1, 4, 8, MlpVariant::kNonGlu, false, 2);
  const WeightArchive a = archive_dense(random_dense_model(cfg, 3));
  a.write(path);
  EXPECT_EQ(WeightArchive::read(path), a);
  std::filesystem::remove(path);
  expect_code(ErrorCode::kIo, [&] { WeightArchive::read(path); });
}

TEST(WeightArchive, CorruptInputsAreIoErrors) {
  WeightArchive a;
  a.add("x", Rng(2).normal_matrix(2, 2));
  const auto good = a.serialize();

  auto bad = good;
  bad[0] = 'X';
  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(bad); });

  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(std::span(good).first(6)); });

  bad = good;
  bad[4] = 0xff;
  bad[5] = 0xff;
  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(bad); });

  bad = good;
  bad.pop_back();
  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(bad); });

  bad = good;
  bad.push_back(0);
  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(bad); });

  bad = good;
  bad[8] = '[';
  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(bad); });
}

TEST(WeightArchive, OverlappingTensorsRejected) {
  const std::string manifest =
      R"({"tensors":[{"name":"a","rows":1,"cols":2,"offset":0},{"name":"b","rows":1,"cols":2,"offset":8}]})";
  std::vector<std::uint8_t> bytes = {'D', 'L', 'R', '1'};
  const auto n = static_cast<std::uint32_t>(manifest.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  bytes.insert(bytes.end(), manifest.begin(), manifest.end());
  bytes.resize(bytes.size() + 32, 0);
  expect_code(ErrorCode::kIo, [&] { WeightArchive::deserialize(bytes); });
}

TEST(WeightArchive, LookupsAndDuplicates) {
  WeightArchive a;
  a.add("layers.0.q", DenseMatrix(2, 2));
  expect_code(ErrorCode::kInput, [&] { a.add("layers.0.q", DenseMatrix(2, 2)); });
  try {
    a.at("layers.0.k");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPlan);
    EXPECT_NE(std::string(e.what()).find("layers.0.k"), std::string::npos);
  }
}

TEST(ArchiveModels, DenseAndFactorsRoundTrip) {
  const auto cfg = ModelConfig::from_heads(4, 2, 2, 12, MlpVariant::kGlu, true, 2);
  const auto dense = random_dense_model(cfg, 4);
  EXPECT_EQ(tensor_name(1, LayerMatrix::kGate), "layers.1.gate");
  const auto back = dense_from_archive(archive_dense(dense), cfg);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(back[i], dense[i]);

  const auto model = decompose_model(dense, plan_from_ratio(cfg, 0.5));
  const auto fa = archive_factors(model.layers);
  EXPECT_TRUE(fa.contains("layers.0.q.down"));
  EXPECT_TRUE(fa.contains("layers.1.down.up"));
  const auto factors = factors_from_archive(fa, cfg);
  for (std::size_t i = 0; i < 2; ++i) {
    for (const auto& [m, f] : model.layers[i]) {
      EXPECT_EQ(factors[i].at(m).down, f.down);
      EXPECT_EQ(factors[i].at(m).up, f.up);
    }
  }
}

TEST(ArchiveModels, MissingOrMisshapenTensor) {
  const auto cfg = ModelConfig::from_heads(2, 2, 2, 8, MlpVariant::kNonGlu, false, 1);
  WeightArchive a = archive_dense(random_dense_model(cfg, 5));
  WeightArchive missing;
  for (const auto& n : a.names()) {
    if (n != "layers.0.v") missing.add(n, a.at(n));
  }
  expect_code(ErrorCode::kPlan, [&] { dense_from_archive(missing, cfg); });
  WeightArchive wrong;
  for (const auto& n : a.names()) wrong.add(n, n == "layers.0.v" ? DenseMatrix(3, 3) : a.at(n));
  expect_code(ErrorCode::kShape, [&] { dense_from_archive(wrong, cfg); });
}

TEST(Plans, RatioAndLossless) {
  const auto cfg = ModelConfig::from_heads(64, 8, 128, 28672, MlpVariant::kGlu, true, 1);
  EXPECT_EQ(matrix_shape(cfg, LayerMatrix::kK), (std::pair<std::size_t, std::size_t>{8192, 1024}));
  EXPECT_EQ(matrix_shape(cfg, LayerMatrix::kDown), (std::pair<std::size_t, std::size_t>{28672, 8192}));
  const auto plan = plan_from_ratio(cfg, 0.4);
  EXPECT_EQ(plan.rank(0, LayerMatrix::kK), 614u);
  EXPECT_EQ(plan.rank(0, LayerMatrix::kUp), 4915u);
  EXPECT_EQ(plan_lossless(cfg).rank(0, LayerMatrix::kV), 1024u);
  EXPECT_EQ(config_matrices(cfg).size(), 7u);
}

TEST(RunConfig, ParsesEveryField) {
  const RunConfig rc = RunConfig::parse(kToy);
  EXPECT_EQ(rc.model.hidden_dim, 32u);
  EXPECT_EQ(rc.model.kv_dim, 16u);
  EXPECT_EQ(rc.model.num_layers, 2u);
  EXPECT_EQ(rc.tp, (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(rc.seed, 5u);
  EXPECT_EQ(rc.cache.block_size, 2u);
  EXPECT_EQ(rc.cache.scramble_seed, std::optional<std::uint64_t>(7));
  EXPECT_EQ(rc.convention, ConventionSelection::kBoth);
  EXPECT_EQ(rc.plan().rank(1, LayerMatrix::kK), 8u);
  const CostInputs in = rc.cost_inputs();
  EXPECT_EQ(in.l_gate, 16u);
  EXPECT_EQ(in.num_layers, 2u);
}

TEST(RunConfig, Rejections) {
  expect_code(ErrorCode::kConfig, [] { RunConfig::parse("{"); });
  expect_code(ErrorCode::kConfig, [] { RunConfig::parse(R"({"plan": {"ratio": 0.4}})"); });
  std::string bad_mlp = kToy;
  bad_mlp.replace(bad_mlp.find("\"glu\""), 5, "\"gelu\"");
  EXPECT_THROW(RunConfig::parse(bad_mlp), Error);
  std::string zero_tp = kToy;
  zero_tp.replace(zero_tp.find("[1, 2, 4]"), 9, "[0]");
  expect_code(ErrorCode::kConfig, [&] { RunConfig::parse(zero_tp).validate(); });
  expect_code(ErrorCode::kIo, [] { RunConfig::load("/nonexistent/config.json"); });
}

TEST(Ranks, BareOrWrapped) {
  const auto bare = parse_ranks(R"({"q": 4916, "k": 614})");
  EXPECT_EQ(bare.at(LayerMatrix::kQ), 4916u);
  EXPECT_EQ(parse_ranks(R"({"ranks": {"k": 614}})").at(LayerMatrix::kK), 614u);
  EXPECT_THROW(parse_ranks(R"({"query": 3})"), Error);
}

TEST(Conventions, Selection) {
  EXPECT_EQ(conventions(ConventionSelection::kBoth).size(), 2u);
  EXPECT_EQ(conventions(parse_convention_selection("tabulated")),
            (std::vector<CostConvention>{CostConvention::kTabulated}));
  EXPECT_THROW(parse_convention_selection("all"), Error);
}
