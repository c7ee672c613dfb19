#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "barstyle/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace barstyle;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("barstyle_ckpt_" + name);
  fs::remove_all(p);
  return p;
}

ad::ParameterStore sample_store(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ad::ParameterStore s;
  s.add("a.w", ad::gaussian_matrix(3, 5, 1.0, rng));
  s.add("b", ad::gaussian_matrix(1, 7, 1.0, rng));
  s.add("empty", ad::Matrix(0, 4));
  return s;
}

}  // namespace

TEST(Checkpoint, ParametersRoundTripAtFloatPrecision) {
  auto dir = scratch("params");
  auto src = sample_store(1);
  KeyValues cfg;
  cfg.set("d_model", 64);
  save_checkpoint(dir.string(), cfg, 1234, src);
  auto data = load_checkpoint(dir.string());
  EXPECT_EQ(data.step, 1234);
  EXPECT_EQ(data.config.get("d_model", ""), "64");
  EXPECT_FALSE(data.has_optimizer);
  auto dst = sample_store(2);
  apply_checkpoint(data, dst);
  for (std::size_t i = 0; i < src.size(); ++i) {
    ASSERT_EQ(dst[i].value.rows(), src[i].value.rows());
    for (Eigen::Index j = 0; j < src[i].value.size(); ++j)
      EXPECT_EQ(dst[i].value.data()[j], static_cast<double>(static_cast<float>(src[i].value.data()[j])));
  }
  // blob holds exactly the float32 payload
  EXPECT_EQ(fs::file_size(dir / "params.bin"), 4u * (15 + 7));
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  auto dir = scratch("adam");
  auto src = sample_store(3);
  ad::AdamState opt;
  opt.reset(src);
  for (std::size_t i = 0; i < src.size(); ++i) src[i].grad.setConstant(0.5);
  ad::adam_step(src, opt, 1e-3);
  ad::adam_step(src, opt, 1e-3);
  save_checkpoint(dir.string(), {}, 2, src, &opt);
  auto data = load_checkpoint(dir.string());
  ASSERT_TRUE(data.has_optimizer);
  auto dst = sample_store(3);
  ad::AdamState restored;
  apply_checkpoint(data, dst, &restored);
  EXPECT_EQ(restored.step, 2);
  for (std::size_t i = 0; i < src.size(); ++i) {
    EXPECT_TRUE(restored.m[i].isApprox(opt.m[i].cast<float>().cast<double>()));
    EXPECT_TRUE(restored.v[i].isApprox(opt.v[i].cast<float>().cast<double>()));
  }
}

TEST(Checkpoint, RejectsMissingOrMisshapenParameters) {
  auto dir = scratch("shape");
  ad::ParameterStore small;
  std::mt19937_64 rng(0);
  small.add("a.w", ad::gaussian_matrix(2, 2, 1.0, rng));
  save_checkpoint(dir.string(), {}, 0, small);
  auto data = load_checkpoint(dir.string());
  auto wrong = sample_store(4);
  EXPECT_THROW(apply_checkpoint(data, wrong), ShapeMismatch);
  ad::ParameterStore extra;
  extra.add("a.w", ad::Matrix::Zero(2, 2));
  extra.add("missing", ad::Matrix::Zero(1, 1));
  EXPECT_THROW(apply_checkpoint(data, extra), ConfigError);
}

TEST(Checkpoint, RejectsForeignDirectories) {
  auto dir = scratch("foreign");
  fs::create_directories(dir);
  EXPECT_THROW(load_checkpoint(dir.string()), IoError);
  KeyValues kv;
  kv.set("format", std::string("other"));
  kv.save((dir / "manifest.txt").string());
  EXPECT_THROW(load_checkpoint(dir.string()), ConfigError);
}
