/**
 * @file attributes.hpp
 * @brief Bar-level rhythmic intensity and polyphony scores and their 8 ordinal classes.
 */
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "barstyle/error.hpp"
#include "barstyle/score.hpp"

namespace barstyle {

inline constexpr int kAttributeClasses = 8;
using Cutoffs = std::array<double, kAttributeClasses - 1>;

struct BarAttributes {
  double s_rhym = 0;
  double s_poly = 0;
  int a_rhym = 0;
  int a_poly = 0;
  bool operator==(const BarAttributes&) const = default;
};

struct AttributeBins {
  Cutoffs rhym{};
  Cutoffs poly{};
  bool operator==(const AttributeBins&) const = default;

  /// Cut-offs measured on a large pop-piano corpus; a reasonable default when no corpus fit exists.
  static AttributeBins reference() {
    return {{.20, .25, .32, .38, .44, .50, .63}, {2.63, 3.06, 3.50, 4.00, 4.63, 5.44, 6.44}};
  }
};

/// Fraction of sub-beats carrying at least one onset.
inline double rhythmic_intensity(const Bar& bar, int B) {
  if (B <= 0) throw std::invalid_argument("B must be positive");
  std::vector<char> hit(B, 0);
  for (const auto& n : bar.notes)
    if (n.sub_beat >= 0 && n.sub_beat < B) hit[n.sub_beat] = 1;
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / B;
}

/**
 * Mean number of notes hit or held per sub-beat. A note lasting D sub-beats
 * from b is an onset at b and a hold at b+1..b+D-1; the part that spills past
 * the bar end is counted as holds in the following bar via `previous`.
 */
inline double polyphony(const Bar& bar, int B, const Bar* previous = nullptr) {
  if (B <= 0) throw std::invalid_argument("B must be positive");
  const int per_unit = std::max(1, B / 16);
  double total = 0;
  for (const auto& n : bar.notes) {
    int len = n.duration * per_unit;
    total += std::min(len, B - n.sub_beat);
  }
  if (previous) {
    for (const auto& n : previous->notes) {
      int end = n.sub_beat + n.duration * per_unit;
      if (end > B) total += std::min(end - B, B);
    }
  }
  return total / B;
}

/// Class = number of cut-offs <= score.
inline int classify(double score, const Cutoffs& cutoffs) {
  return static_cast<int>(std::upper_bound(cutoffs.begin(), cutoffs.end(), score) - cutoffs.begin());
}

/**
 * Nearest-rank 1/8..7/8 quantiles of the sorted scores (the value at 0-based index i*n/8). When a quantile repeats the
 * previous cut-off (mass atoms), it advances to the next larger observed value.
 */
inline Cutoffs fit_bins(std::vector<double> scores) {
  std::sort(scores.begin(), scores.end());
  std::size_t distinct = scores.empty() ? 0 : 1;
  for (std::size_t i = 1; i < scores.size(); ++i) distinct += scores[i] != scores[i - 1];
  if (distinct < kAttributeClasses)
    throw DegenerateDistribution("need at least 8 distinct scores, got " + std::to_string(distinct));
  const auto n = scores.size();
  Cutoffs cut{};
  for (int i = 1; i < kAttributeClasses; ++i) {
    // 0-based index i*n/8: exactly that many samples fall below the cut-off
    std::size_t rank = std::min(n - 1, static_cast<std::size_t>(i) * n / kAttributeClasses);
    double c = scores[rank];
    if (i > 1 && c <= cut[i - 2]) {
      auto it = std::upper_bound(scores.begin(), scores.end(), cut[i - 2]);
      if (it == scores.end()) throw DegenerateDistribution("too few distinct values above the lower cut-offs");
      c = *it;
    }
    cut[i - 1] = c;
  }
  return cut;
}

inline std::vector<BarAttributes> compute_attributes(const QuantizedScore& q, const AttributeBins& bins) {
  std::vector<BarAttributes> out;
  out.reserve(q.bars.size());
  for (std::size_t k = 0; k < q.bars.size(); ++k) {
    BarAttributes a;
    a.s_rhym = rhythmic_intensity(q.bars[k], q.sub_beats_per_bar);
    a.s_poly = polyphony(q.bars[k], q.sub_beats_per_bar, k > 0 ? &q.bars[k - 1] : nullptr);
    a.a_rhym = classify(a.s_rhym, bins.rhym);
    a.a_poly = classify(a.s_poly, bins.poly);
    out.push_back(a);
  }
  return out;
}

// ---- overrides -------------------------------------------------------------

/// "+n" / "-n" shift the source class, "=n" or bare "n" set it; results clamp to 0..7.
struct AttributeOverride {
  enum class Mode { Relative, Absolute } mode = Mode::Relative;
  int value = 0;

  int apply(int source_class) const {
    int v = mode == Mode::Absolute ? value : source_class + value;
    return std::clamp(v, 0, kAttributeClasses - 1);
  }
  static AttributeOverride keep() { return {}; }

  static AttributeOverride parse(const std::string& text) {
    if (text.empty()) throw std::invalid_argument("empty attribute override");
    AttributeOverride o;
    std::string digits = text;
    if (text[0] == '+' || text[0] == '-') {
      o.mode = Mode::Relative;
      digits = text.substr(1);
    } else if (text[0] == '=') {
      o.mode = Mode::Absolute;
      digits = text.substr(1);
    } else {
      o.mode = Mode::Absolute;
    }
    int v = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || digits.empty())
      throw std::invalid_argument("bad attribute override '" + text + "'");
    o.value = text[0] == '-' ? -v : v;
    return o;
  }
};

// ---- attribute file --------------------------------------------------------

inline std::string attributes_to_csv(const std::vector<BarAttributes>& attrs) {
  std::ostringstream os;
  os << "bar_index,s_rhym,s_poly,a_rhym,a_poly\n" << std::setprecision(17);
  for (std::size_t k = 0; k < attrs.size(); ++k)
    os << k << ',' << attrs[k].s_rhym << ',' << attrs[k].s_poly << ',' << attrs[k].a_rhym << ',' << attrs[k].a_poly
       << '\n';
  return os.str();
}

inline std::vector<BarAttributes> attributes_from_csv(const std::string& text) {
  std::vector<BarAttributes> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#' || line.rfind("bar_index", 0) == 0) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    std::size_t idx;
    BarAttributes a;
    if (!(fields >> idx >> a.s_rhym >> a.s_poly >> a.a_rhym >> a.a_poly))
      throw std::invalid_argument("malformed attribute record: " + line);
    if (idx != out.size()) throw std::invalid_argument("attribute records out of order at bar " + std::to_string(idx));
    a.a_rhym = std::clamp(a.a_rhym, 0, kAttributeClasses - 1);
    a.a_poly = std::clamp(a.a_poly, 0, kAttributeClasses - 1);
    out.push_back(a);
  }
  return out;
}

inline void write_attribute_file(const std::string& path, const std::vector<BarAttributes>& attrs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << attributes_to_csv(attrs);
}

inline std::vector<BarAttributes> read_attribute_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return attributes_from_csv(ss.str());
}

}  // namespace barstyle
