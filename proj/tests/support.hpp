#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "barstyle/score.hpp"

namespace testsupport {

/// Random valid score: distinct (sub_beat, pitch) pairs per bar, occasional tempo changes.
inline barstyle::QuantizedScore random_score(std::mt19937_64& rng, int bars, int B = 16, double note_p = 0.15) {
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> pitch(barstyle::kMinPitch, barstyle::kMaxPitch);
  std::uniform_int_distribution<int> vel(0, barstyle::kVelocityClasses - 1);
  std::uniform_int_distribution<int> dur(1, barstyle::kMaxDuration);
  std::uniform_int_distribution<int> tempo(0, barstyle::kTempoClasses - 1);
  barstyle::QuantizedScore q;
  q.sub_beats_per_bar = B;
  q.bars.resize(bars);
  for (auto& bar : q.bars) {
    for (int p = 0; p < B; ++p) {
      if (u(rng) < 0.05) bar.tempos.push_back({p, tempo(rng)});
      if (u(rng) >= note_p) continue;
      int count = 1 + static_cast<int>(u(rng) * 3);
      for (int i = 0; i < count; ++i) bar.notes.push_back({p, pitch(rng), vel(rng), dur(rng)});
    }
  }
  barstyle::canonicalize(q);
  return q;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("barstyle_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
