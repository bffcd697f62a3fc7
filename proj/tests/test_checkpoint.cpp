#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "umr/checkpoint.hpp"

using namespace umr;
using namespace umr::testing;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "umr_test_checkpoint";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Checkpoint sample_checkpoint(bool with_optimizer) {
  auto cfg = tiny_encoder_config(tiny_spec(), 2);
  Checkpoint ck{Encoder::init(cfg, 3), std::nullopt, "stage = 1\nlr = 0.001\n"};
  if (with_optimizer) {
    auto st = AdamState::for_params(ck.encoder.parameters(), 0.02);
    Rng rng(1);
    std::vector<Tensor> grads;
    for (const auto& p : ck.encoder.parameters()) {
      std::vector<double> g(p.size());
      for (auto& x : g) x = rng.normal();
      grads.emplace_back(p.shape(), std::move(g));
    }
    ck.encoder = ck.encoder.with_parameters(adam_update(ck.encoder.parameters(), grads, st));
    ck.optimizer = st;
  }
  return ck;
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Checkpoint, RoundTripBitwise) {
  for (bool opt : {false, true}) {
    const auto ck = sample_checkpoint(opt);
    const auto path = temp_path(opt ? "with_opt.ckpt" : "plain.ckpt");
    save_checkpoint(ck, path);
    const auto back = load_checkpoint(path);
    EXPECT_TRUE(back.encoder.identical(ck.encoder));
    EXPECT_EQ(back.metadata, ck.metadata);
    ASSERT_EQ(back.optimizer.has_value(), opt);
    if (opt) {
      EXPECT_TRUE(back.optimizer->identical(*ck.optimizer));
    }
    save_checkpoint(back, temp_path("again.ckpt"));
    EXPECT_EQ(read_bytes(path), read_bytes(temp_path("again.ckpt")));
    EXPECT_EQ(checkpoint_id(ck), checkpoint_id(back));
  }
}

TEST(Checkpoint, TruncatedRejected) {
  const auto path = temp_path("trunc.ckpt");
  save_checkpoint(sample_checkpoint(true), path);
  const auto bytes = read_bytes(path);
  for (std::size_t cut : {std::size_t{3}, std::size_t{9}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
    write_bytes(path, std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
    std::optional<Checkpoint> loaded;
    try {
      loaded = load_checkpoint(path);
      FAIL() << "cut at " << cut;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
      EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
    }
    EXPECT_FALSE(loaded.has_value());
  }
}

TEST(Checkpoint, BadMagic) {
  const auto path = temp_path("magic.ckpt");
  save_checkpoint(sample_checkpoint(false), path);
  auto bytes = read_bytes(path);
  bytes[0] = 'X';
  write_bytes(path, bytes);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const VersionError&) {
    FAIL() << "magic error reported as version error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Checkpoint, VersionMismatch) {
  const auto path = temp_path("version.ckpt");
  save_checkpoint(sample_checkpoint(false), path);
  auto bytes = read_bytes(path);
  bytes[8] = 2;
  write_bytes(path, bytes);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const VersionError& e) {
    EXPECT_EQ(e.offset(), 8u);
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, TrailingBytesRejected) {
  const auto path = temp_path("trailing.ckpt");
  save_checkpoint(sample_checkpoint(false), path);
  auto bytes = read_bytes(path);
  bytes.push_back('\0');
  write_bytes(path, bytes);
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(Checkpoint, MissingFile) { EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), FormatError); }
