#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "barstyle/corpus.hpp"

namespace fs = std::filesystem;
using namespace barstyle;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("barstyle_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_piece(const fs::path& path, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto bytes = write_midi(synthetic_piece(4, rng));
  write_file_bytes(path.string(), bytes);
}

}  // namespace

TEST(Synthetic, SameSeedGivesIdenticalBytes) {
  std::mt19937_64 a(42), b(42);
  EXPECT_EQ(write_midi(synthetic_piece(4, a)), write_midi(synthetic_piece(4, b)));
  std::mt19937_64 c(43);
  std::mt19937_64 a2(42);
  EXPECT_NE(write_midi(synthetic_piece(4, a2)), write_midi(synthetic_piece(4, c)));
}

TEST(Synthetic, RhythmClassesAllCarryAtLeastTwoPercent) {
  Corpus c = generate_synthetic({200, 16, 16, 7});
  std::array<int, kAttributeClasses> rhythm{}, poly{};
  int bars = 0;
  for (const auto& p : c.pieces)
    for (const auto& a : p.attributes) {
      ++rhythm[a.a_rhym];
      ++poly[a.a_poly];
      ++bars;
    }
  for (int k = 0; k < kAttributeClasses; ++k) {
    EXPECT_GE(rhythm[k], 0.02 * bars) << "rhythm class " << k;
    EXPECT_GE(poly[k], 0.02 * bars) << "polyphony class " << k;
  }
}

TEST(Synthetic, PiecesRoundTripThroughTokens) {
  for (int B : {16, 32}) {
    std::mt19937_64 rng(B);
    Vocab vocab(B);
    for (int i = 0; i < 50; ++i) {
      auto q = synthetic_piece(8, rng, B);
      EXPECT_NO_THROW(validate(q));
      auto seq = tokenize(q, vocab);
      auto back = detokenize(seq, vocab);
      EXPECT_EQ(back.skipped, 0);
      EXPECT_EQ(back.score, q);
    }
  }
}

TEST(Synthetic, RhythmAndPolyphonyScoresAreNearlyUncorrelated) {
  Corpus c = generate_synthetic({100, 16, 16, 3});
  std::vector<double> r, p;
  for (const auto& piece : c.pieces)
    for (const auto& a : piece.attributes) {
      r.push_back(a.s_rhym);
      p.push_back(a.s_poly);
    }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  double mr = mean(r), mp = mean(p), sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    sxy += (r[i] - mr) * (p[i] - mp);
    sxx += (r[i] - mr) * (r[i] - mr);
    syy += (p[i] - mp) * (p[i] - mp);
  }
  EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.1);
}

TEST(Splits, DisjointCoveringAndSeedStable) {
  std::vector<std::string> ids;
  for (int i = 0; i < 200; ++i) ids.push_back(piece_id(i));
  auto a = assign_splits(ids, 9);
  auto b = assign_splits(std::vector<std::string>(ids.rbegin(), ids.rend()), 9);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), ids.size());
  std::map<Split, int> counts;
  for (auto& [id, s] : a) ++counts[s];
  EXPECT_EQ(counts[Split::Train], 180);
  EXPECT_EQ(counts[Split::Val], 10);
  EXPECT_EQ(counts[Split::Test], 10);
  EXPECT_NE(assign_splits(ids, 10), a);
  auto small = assign_splits({"x", "y", "z"}, 1);
  std::set<Split> kinds;
  for (auto& [id, s] : small) kinds.insert(s);
  EXPECT_EQ(kinds.size(), 3u);
  EXPECT_THROW(assign_splits(ids, 1, {0.5, 0.2, 0.2}), ConfigError);
}

TEST(CorpusStore, SaveLoadRoundTrip) {
  auto dir = scratch("store");
  Corpus c = generate_synthetic({12, 4, 16, 5});
  save_corpus(c, dir.string());
  Corpus back = load_corpus(dir.string());
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.bins, c.bins);
  ASSERT_EQ(back.pieces.size(), c.pieces.size());
  for (std::size_t i = 0; i < c.pieces.size(); ++i) {
    EXPECT_EQ(back.pieces[i].id, c.pieces[i].id);
    EXPECT_EQ(back.pieces[i].split, c.pieces[i].split);
    EXPECT_EQ(back.pieces[i].seq, c.pieces[i].seq);
    EXPECT_EQ(back.pieces[i].attributes, c.pieces[i].attributes);
  }
  EXPECT_TRUE(fs::exists(dir / "pieces" / (c.pieces[0].id + ".tokens")));
  EXPECT_TRUE(fs::exists(dir / "pieces" / (c.pieces[0].id + ".attrs.csv")));
}

TEST(Ingest, ThreeValidFiles) {
  auto dir = scratch("ingest3");
  for (int i = 0; i < 3; ++i) write_piece(dir / ("song" + std::to_string(i) + ".mid"), i);
  IngestReport report;
  Corpus c = ingest(dir.string(), 16, 1, &report);
  EXPECT_EQ(c.pieces.size(), 3u);
  EXPECT_TRUE(report.skipped.empty());
  // ingestion of a synthetic file recovers its score
  std::mt19937_64 rng(0);
  Vocab vocab(16);
  EXPECT_EQ(c.pieces[0].seq, tokenize(synthetic_piece(4, rng), vocab));
}

TEST(Ingest, CorruptFileIsSkippedAndReported) {
  auto dir = scratch("ingest_bad");
  write_piece(dir / "a.mid", 1);
  write_piece(dir / "b.mid", 2);
  std::ofstream(dir / "c.mid") << "not a midi file";
  IngestReport report;
  Corpus c = ingest(dir.string(), 16, 1, &report);
  EXPECT_EQ(c.pieces.size(), 2u);
  ASSERT_EQ(report.skipped.size(), 1u);
  EXPECT_NE(report.skipped[0].first.find("c.mid"), std::string::npos);
}

TEST(Ingest, SameFolderAndSeedGiveSameSplits) {
  auto dir = scratch("ingest_stable");
  for (int i = 0; i < 8; ++i) write_piece(dir / ("s" + std::to_string(i) + ".mid"), 10 + i);
  Corpus a = ingest(dir.string(), 16, 3), b = ingest(dir.string(), 16, 3);
  ASSERT_EQ(a.pieces.size(), b.pieces.size());
  for (std::size_t i = 0; i < a.pieces.size(); ++i) {
    EXPECT_EQ(a.pieces[i].source, b.pieces[i].source);
    EXPECT_EQ(a.pieces[i].split, b.pieces[i].split);
  }
}

TEST(Ingest, EmptyFolderIsAnError) {
  auto dir = scratch("ingest_empty");
  EXPECT_THROW(ingest(dir.string(), 16, 1), EmptyCorpus);
  std::ofstream(dir / "junk.mid") << "x";
  EXPECT_THROW(ingest(dir.string(), 16, 1), EmptyCorpus);
}
