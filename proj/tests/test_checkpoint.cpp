#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "recurlens/checkpoint.hpp"

using namespace recurlens;

namespace {

DepthRecurrentModel sample_model() {
  ModelConfig cfg = ModelConfig::toy(13, 8, 2);
  cfg.combiner = Combiner::Add;
  cfg.sigma = 0.3;
  return DepthRecurrentModel::init(cfg, 21);
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto m = sample_model();
  const auto bytes = serialize_checkpoint(m);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(config_to_json(back.config), config_to_json(m.config));
  EXPECT_EQ(back.config.sigma, 0.3);
  std::size_t n = 0;
  back.for_each_param([&](const std::string& name, const Tensor& t) {
    m.for_each_param([&](const std::string& other, const Tensor& u) {
      if (name == other) {
        EXPECT_EQ(t, u) << name;
        ++n;
      }
    });
  });
  EXPECT_EQ(n, 4u + 10u * 8u);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  const std::vector<std::size_t> ids{1, 5, 9};
  EXPECT_EQ(forward_unrolled(back, ids, 2, 3).logits, forward_unrolled(m, ids, 2, 3).logits);
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = serialize_checkpoint(sample_model());
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "RLCK");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  std::uint64_t cfg_len = 0;
  std::memcpy(&cfg_len, bytes.data() + 8, 8);
  const auto cfg = nlohmann::json::parse(bytes.substr(16, cfg_len));
  EXPECT_EQ(cfg.at("vocab_size"), 13);
  EXPECT_EQ(cfg.at("combiner"), "add");
}

TEST(Checkpoint, FileRoundTripAndFingerprint) {
  const auto m = sample_model();
  const auto path = (std::filesystem::temp_directory_path() / "recurlens_ckpt_test.bin").string();
  save_checkpoint(path, m);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(model_fingerprint(back), model_fingerprint(m));
  EXPECT_EQ(model_fingerprint(m).size(), 16u);
  EXPECT_NE(model_fingerprint(m), model_fingerprint(DepthRecurrentModel::init(m.config, 22)));
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, FingerprintMatchesReferenceVectors) {
  // Published FNV-1a 64 test vectors.
  EXPECT_EQ(fingerprint_bytes(""), "cbf29ce484222325");
  EXPECT_EQ(fingerprint_bytes("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fingerprint_bytes("foobar"), "85944171f73967e8");
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  const auto bytes = serialize_checkpoint(sample_model());
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), ParseError);
  EXPECT_THROW(deserialize_checkpoint("NOPE" + bytes.substr(4)), ParseError);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(deserialize_checkpoint(bad_version), ParseError);
  EXPECT_THROW(deserialize_checkpoint(""), ParseError);
}
