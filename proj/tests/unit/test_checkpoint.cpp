#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cappa/errors.hpp"
#include "cappa/train.hpp"
#include "tiny_setup.hpp"

using namespace cappa;
using namespace cappa::train;
using cappa::testing::tiny_config;
using cappa::testing::tiny_data;
using cappa::testing::tiny_train;

namespace {

Checkpoint trained_checkpoint(std::size_t steps) {
  const auto mcfg = tiny_config(model::Objective::kCapPa);
  const auto tcfg = tiny_train(steps);
  const auto data = tiny_data(8);
  const auto res = train::train(mcfg, tcfg, data);
  return make_checkpoint(mcfg, tcfg, data.vocab, res.state);
}

std::filesystem::path temp_file(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto ck = trained_checkpoint(3);
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.model, ck.model);
  EXPECT_EQ(back.train.to_kv(), ck.train.to_kv());
  EXPECT_EQ(back.vocab, ck.vocab);
  EXPECT_EQ(back.opt, ck.opt);
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.rng_seed, ck.rng_seed);
  ASSERT_EQ(back.params.entries().size(), ck.params.entries().size());
  for (const auto& p : ck.params.entries()) {
    const auto& q = back.params.get(p.name);
    EXPECT_EQ(q.shape(), p.value.shape());
    EXPECT_TRUE(std::equal(q.data().begin(), q.data().end(), p.value.data().begin())) << p.name;
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = temp_file("cappa_ckpt_roundtrip.capc");
  save_checkpoint(path, ck);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ResumeEqualsContinuous) {
  const auto mcfg = tiny_config(model::Objective::kCapPa);
  const auto tcfg = tiny_train(12);
  const auto data = tiny_data(10);

  const auto full = train::train(mcfg, tcfg, data);

  auto st = init_state(mcfg, tcfg);
  auto first = run_steps(mcfg, tcfg, st, data, 5);
  const auto path = temp_file("cappa_ckpt_resume.capc");
  save_checkpoint(path, make_checkpoint(mcfg, tcfg, data.vocab, st));
  auto resumed = state_from_checkpoint(load_checkpoint(path));
  std::filesystem::remove(path);
  EXPECT_EQ(resumed.step, 5u);
  const auto second = run_steps(mcfg, tcfg, resumed, data);
  first.insert(first.end(), second.begin(), second.end());

  EXPECT_EQ(metrics_csv(first), metrics_csv(full.metrics));
  EXPECT_EQ(encode_checkpoint(make_checkpoint(mcfg, tcfg, data.vocab, resumed)),
            encode_checkpoint(make_checkpoint(mcfg, tcfg, data.vocab, full.state)));
}

TEST(Checkpoint, RejectsCorruptInput) {
  const auto bytes = encode_checkpoint(trained_checkpoint(1));
  auto bad_magic = bytes;
  bad_magic[1] = 'Z';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 7;
  EXPECT_THROW(decode_checkpoint(bad_version), VersionError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(decode_checkpoint(""), FormatError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/model.capc"), IoError);
}
