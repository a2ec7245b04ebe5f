#include <gtest/gtest.h>

#include <cstring>

#include "properties.hpp"

using namespace sbnn;

namespace {
// Recompute the trailing CRC so structural errors are reached.
std::vector<std::uint8_t> reseal(std::vector<std::uint8_t> b) {
  const std::uint32_t c = crc32_of(b.data(), b.size() - 4);
  std::memcpy(&b[b.size() - 4], &c, 4);
  return b;
}

Checkpoint small() {
  Checkpoint ck;
  ck.header.stage = static_cast<std::uint8_t>(Stage::exported);
  ck.header.width = 8;
  ck.header.epoch = 3;
  ck.tensors.emplace("a", Tensor::from({1, 2, 3, 4}, {2, 2}));
  ck.bits.emplace("b", pack(Tensor::from({1, -1, -1, 1, 1, 1}, {2, 3})));
  return ck;
}

std::size_t offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return 0;
}

// header: magic 4, version 4, stage/scheme/arch/mode 4, width 4, epoch 4, count 4
constexpr std::size_t kFirstEntry = 24;
}  // namespace

TEST(Checkpoint, LayoutAndRoundtrip) {
  const auto bytes = serialize(small());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "S2BN");
  // a: 4+1+1+4+8+16, b: 4+1+1+4+8+2·8, crc 4
  EXPECT_EQ(bytes.size(), kFirstEntry + 34 + 34 + 4);
  const Checkpoint back = deserialize(bytes);
  EXPECT_EQ(back.header, small().header);
  EXPECT_EQ(back.tensor("a").shape(), (Shape{2, 2}));
  EXPECT_EQ(back.bits.at("b").words, small().bits.at("b").words);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_THROW(back.tensor("zzz"), ConfigError);
}

TEST(Checkpoint, ModelRoundtripCrcFuzzAndExport) {
  const auto v = props::checkpoint_suite();
  EXPECT_TRUE(v.ok) << v.detail;
}

TEST(Checkpoint, NormalizationTravelsWithWeights) {
  SslModel m = props::randomised_model(1);
  const Normalization n{{0.1f, 0.2f, 0.3f}, {1.0f, 2.0f, 3.0f}};
  const Checkpoint ck = deserialize(serialize(to_checkpoint(m, Stage::pretrain_step2, Scheme::cl_kd, 4, &n)));
  const auto back = normalization_from(ck);
  ASSERT_TRUE(back);
  EXPECT_EQ(back->mean, n.mean);
  EXPECT_EQ(back->std, n.std);
  EXPECT_EQ(ck.header.scheme, static_cast<std::uint8_t>(Scheme::cl_kd));
  EXPECT_FALSE(normalization_from(to_checkpoint(m, Stage::pretrain_step2, Scheme::cl, 4)));
}

TEST(Checkpoint, EveryHeaderByteIsCovered) {
  const auto bytes = serialize(small());
  for (std::size_t i = 0; i < kFirstEntry; ++i) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    EXPECT_THROW(deserialize(bad), FormatError) << "byte " << i;
  }
}

TEST(Checkpoint, UnknownDtypeReportsItsOffset) {
  auto b = serialize(small());
  const std::size_t dtype_at = kFirstEntry + 4 + 1;  // name length, "a"
  ASSERT_EQ(b[dtype_at], 0);
  b[dtype_at] = 7;
  EXPECT_EQ(offset_of(reseal(b)), dtype_at);
}

TEST(Checkpoint, DuplicateEntry) {
  auto b = serialize(small());
  const std::size_t second = kFirstEntry + 34;
  ASSERT_EQ(b[second + 4], 'b');
  b[second + 4] = 'a';
  EXPECT_EQ(offset_of(reseal(b)), second);
}

TEST(Checkpoint, TruncationAndTrailingBytes) {
  const auto b = serialize(small());
  for (std::size_t cut : {b.size() - 1, b.size() - 9, kFirstEntry + 10, std::size_t{30}}) {
    std::vector<std::uint8_t> t(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(cut));
    t.resize(t.size() + 4);
    EXPECT_THROW(deserialize(reseal(t)), FormatError) << cut;
  }
  auto longer = b;
  longer.insert(longer.end() - 4, 0);
  EXPECT_EQ(offset_of(reseal(longer)), b.size() - 4);
  EXPECT_THROW(deserialize(std::vector<std::uint8_t>(10)), FormatError);
}

TEST(Checkpoint, MagicAndVersion) {
  auto b = serialize(small());
  b[0] = 'X';
  EXPECT_EQ(offset_of(reseal(b)), 0u);
  b = serialize(small());
  b[4] = 2;
  EXPECT_EQ(offset_of(reseal(b)), 4u);
}

TEST(Checkpoint, NameStoredTwiceRejected) {
  Checkpoint ck = small();
  ck.tensors.emplace("b", Tensor::zeros({1}));
  EXPECT_THROW(serialize(ck), ConfigError);
}

TEST(Checkpoint, FileErrors) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.s2bn"), ConfigError);
  EXPECT_THROW(save_checkpoint(small(), "/nonexistent/dir/x.s2bn"), ConfigError);
}

TEST(Checkpoint, UnknownArchInHeader) {
  SslModel m = props::randomised_model(2);
  Checkpoint ck = to_checkpoint(m, Stage::pretrain_step2, Scheme::cl, 1);
  ck.header.arch = 9;
  EXPECT_THROW(model_from_checkpoint(deserialize(serialize(ck))), FormatError);
}
