#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "simflow/checkpoint.hpp"
#include "simflow/experiment.hpp"
#include "tiny_run.hpp"

using namespace simflow;
using simflow::testing::scratch_dir;
using simflow::testing::tiny_config;

namespace {

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TrainState trained(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t steps) {
  auto st = make_train_state(cfg, data.shape, data.num_classes);
  auto c = cfg;
  c.steps = steps;
  train_loop(st, c, data, nullptr, "");
  return st;
}

}  // namespace

TEST(Checkpoint, EncodeDecodeIsByteIdentical) {
  auto cfg = tiny_config(scratch_dir("ckpt_rt"));
  cfg.align = true;
  const auto data = load_dataset(cfg);
  const auto st = trained(cfg, data, 5);
  const auto ck = capture(st, cfg, data.shape, data.num_classes);
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.config, cfg);
  EXPECT_EQ(back.step, 5u);
  const auto path = std::filesystem::path(cfg.out) / "a.sflw";
  save_checkpoint(path.string(), ck);
  EXPECT_EQ(file_bytes(path), bytes);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path.string())), bytes);
}

TEST(Checkpoint, RestoreThenCaptureIsIdentical) {
  const auto cfg = tiny_config(scratch_dir("ckpt_restore"));
  const auto data = load_dataset(cfg);
  const auto st = trained(cfg, data, 7);
  const auto ck = capture(st, cfg, data.shape, data.num_classes);
  auto fresh = make_train_state(cfg, data.shape, data.num_classes);
  restore(fresh, ck);
  EXPECT_EQ(encode_checkpoint(capture(fresh, cfg, data.shape, data.num_classes)), encode_checkpoint(ck));
}

TEST(Checkpoint, Diagnostics) {
  const auto cfg = tiny_config(scratch_dir("ckpt_diag"));
  const auto data = load_dataset(cfg);
  const auto ck = capture(make_train_state(cfg, data.shape, data.num_classes), cfg, data.shape, data.num_classes);
  auto bytes = encode_checkpoint(ck);

  auto bad_version = bytes;
  bad_version[4] = 9;
  try {
    decode_checkpoint(bad_version);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos) << e.what();
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), std::invalid_argument);
  const std::vector<unsigned char> cut(bytes.begin(), bytes.end() - 3);
  try {
    decode_checkpoint(cut);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos) << e.what();
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), std::invalid_argument);

  auto other = cfg;
  other.hidden_dim = 16;
  auto mismatched = make_train_state(other, data.shape, data.num_classes);
  try {
    restore(mismatched, ck);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("raw/flow/"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, LittleEndianHeader) {
  const auto cfg = tiny_config(scratch_dir("ckpt_le"));
  const auto data = load_dataset(cfg);
  const auto bytes =
      encode_checkpoint(capture(make_train_state(cfg, data.shape, data.num_classes), cfg, data.shape, data.num_classes));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SFLW");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  std::uint64_t hlen = 0;
  for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | bytes[8 + i];
  EXPECT_EQ(bytes[16], '{');
  EXPECT_EQ(bytes[16 + hlen - 1], '}');
}
