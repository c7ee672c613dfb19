/**
 * @file service.hpp
 * @brief HTTP + JSON front end: piece uploads, piano-roll projections, queued style-transfer
 *        jobs and a hot-swappable inference checkpoint, backed by an on-disk record store.
 */
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "barstyle/attributes.hpp"
#include "barstyle/config.hpp"
#include "barstyle/corpus.hpp"
#include "barstyle/decode.hpp"
#include "barstyle/midi_io.hpp"
#include "barstyle/remi.hpp"
#include "barstyle/vae.hpp"

// after Eigen: httplib pulls in <resolv.h>, whose `_res` macro clashes with Eigen's parameter names
#include <httplib.h>
#include <json.hpp>

namespace barstyle {

using json = nlohmann::json;

/// Failure carrying the HTTP status it maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string kind, const std::string& what)
      : std::runtime_error(what), status_(status), kind_(std::move(kind)) {}
  int status() const noexcept { return status_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  int status_;
  std::string kind_;
};

struct ServiceConfig {
  std::string store_dir = "barstyle-store";
  int workers = 1;
  int sub_beats_per_bar = 16;
  AttributeBins bins = AttributeBins::reference();  ///< used until a checkpoint brings its own
  int window = 16;                                   ///< default decoding window in bars
  SamplingConfig sampling;                           ///< defaults for p, tau and the per-bar cap
};

struct PieceRecord {
  std::string id;
  std::string source;   ///< client-supplied name, may be empty
  std::string created;  ///< UTC, ISO 8601
  std::vector<int> tokens;
  std::vector<BarAttributes> attributes;
  std::size_t num_bars() const { return attributes.size(); }
};

enum class JobStatus { Queued, Running, Done, Failed };

inline const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Failed: return "failed";
  }
  return "?";
}

inline JobStatus parse_job_status(const std::string& s) {
  if (s == "queued") return JobStatus::Queued;
  if (s == "running") return JobStatus::Running;
  if (s == "done") return JobStatus::Done;
  if (s == "failed") return JobStatus::Failed;
  throw ConfigError("unknown job status '" + s + "'");
}

struct TransferJob {
  std::string id;
  std::string piece_id;
  std::vector<std::string> rhythm;     ///< one override per bar, or one applied to every bar, or empty
  std::vector<std::string> polyphony;
  SamplingConfig sampling;
  int window = 16;
  JobStatus status = JobStatus::Queued;
  std::string error;
  std::string checkpoint;  ///< path of the snapshot the job runs on
  std::string created;
  std::vector<int> requested_rhythm, requested_polyphony;
  std::vector<int> tokens;                ///< generated sequence
  std::vector<BarAttributes> achieved;    ///< recomputed on the generation
  std::vector<int> truncated_bars;
};

/// Immutable inference state shared by all jobs started while it was active.
struct ModelSnapshot {
  StyleVae model;
  std::string path;
  long step = 0;
  AttributeBins bins;
  int generation = 0;

  ModelSnapshot(StyleVae m, std::string p, long s, AttributeBins b, int g)
      : model(std::move(m)), path(std::move(p)), step(s), bins(b), generation(g) {}

  /// Posterior means per bar, computed once per piece for this snapshot.
  ad::Matrix latents(const PieceRecord& piece) const {
    {
      std::lock_guard lock(mu_);
      auto it = cache_.find(piece.id);
      if (it != cache_.end()) return it->second;
    }
    TokenSeq seq = make_token_seq(piece.tokens);
    ad::Matrix m = model.encode_means(seq.tokens, seq.bar_spans);
    std::lock_guard lock(mu_);
    return cache_.emplace(piece.id, std::move(m)).first->second;
  }
  bool has_latents(const std::string& piece_id) const {
    std::lock_guard lock(mu_);
    return cache_.count(piece_id) > 0;
  }

 private:
  mutable std::mutex mu_;
  mutable std::map<std::string, ad::Matrix> cache_;
};

namespace detail {

inline std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Write-then-rename so a crash never leaves a half-written record.
inline void write_text_atomic(const std::filesystem::path& p, const std::string& text) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, p);
}

inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

inline json attributes_json(const std::vector<BarAttributes>& attrs) {
  json rows = json::array();
  for (std::size_t k = 0; k < attrs.size(); ++k)
    rows.push_back({{"bar", k},
                    {"s_rhym", attrs[k].s_rhym},
                    {"s_poly", attrs[k].s_poly},
                    {"rhythm", attrs[k].a_rhym},
                    {"polyphony", attrs[k].a_poly}});
  return rows;
}

inline json job_json(const TransferJob& j, bool with_tokens = true) {
  json out{{"id", j.id},
           {"piece_id", j.piece_id},
           {"status", to_string(j.status)},
           {"rhythm", j.rhythm},
           {"polyphony", j.polyphony},
           {"seed", j.sampling.seed},
           {"p", j.sampling.p},
           {"tau", j.sampling.tau},
           {"max_bar_tokens", j.sampling.max_bar_tokens},
           {"window", j.window},
           {"checkpoint", j.checkpoint},
           {"created", j.created}};
  if (!j.error.empty()) out["error"] = j.error;
  if (!j.requested_rhythm.empty()) {
    json req = json::array();
    for (std::size_t k = 0; k < j.requested_rhythm.size(); ++k)
      req.push_back({{"bar", k}, {"rhythm", j.requested_rhythm[k]}, {"polyphony", j.requested_polyphony[k]}});
    out["requested"] = req;
  }
  if (j.status == JobStatus::Done) {
    out["achieved"] = attributes_json(j.achieved);
    out["bars"] = j.achieved.size();
    out["truncated_bars"] = j.truncated_bars;
    if (with_tokens) out["tokens"] = j.tokens;
  }
  return out;
}

inline TransferJob job_from_json(const json& in) {
  TransferJob j;
  j.id = in.at("id").get<std::string>();
  j.piece_id = in.at("piece_id").get<std::string>();
  j.status = parse_job_status(in.at("status").get<std::string>());
  j.rhythm = in.value("rhythm", std::vector<std::string>{});
  j.polyphony = in.value("polyphony", std::vector<std::string>{});
  j.sampling.seed = in.value("seed", std::uint64_t{0});
  j.sampling.p = in.value("p", 0.9);
  j.sampling.tau = in.value("tau", 1.2);
  j.sampling.max_bar_tokens = in.value("max_bar_tokens", 256);
  j.window = in.value("window", 16);
  j.checkpoint = in.value("checkpoint", std::string());
  j.created = in.value("created", std::string());
  j.error = in.value("error", std::string());
  if (in.contains("requested"))
    for (const auto& r : in["requested"]) {
      j.requested_rhythm.push_back(r.at("rhythm").get<int>());
      j.requested_polyphony.push_back(r.at("polyphony").get<int>());
    }
  if (in.contains("achieved"))
    for (const auto& r : in["achieved"])
      j.achieved.push_back({r.at("s_rhym").get<double>(), r.at("s_poly").get<double>(), r.at("rhythm").get<int>(),
                            r.at("polyphony").get<int>()});
  j.tokens = in.value("tokens", std::vector<int>{});
  j.truncated_bars = in.value("truncated_bars", std::vector<int>{});
  return j;
}

/// Notes as (bar, sub_beat, pitch, duration, velocity) records.
inline json notes_json(const QuantizedScore& q) {
  json notes = json::array();
  for (std::size_t k = 0; k < q.bars.size(); ++k)
    for (const auto& n : q.bars[k].notes)
      notes.push_back({{"bar", k}, {"sub_beat", n.sub_beat}, {"pitch", n.pitch}, {"duration", n.duration}, {"velocity", n.velocity}});
  return notes;
}

/**
 * Record store and job queue. Layout under the store directory:
 *   manifest.txt               format tag and id counters
 *   pieces/<id>.tokens         source tokens
 *   pieces/<id>.attrs.csv      per-bar attribute table
 *   pieces/<id>.meta           source name and creation time
 *   transfers/<id>.json        job record, result included once done
 */
class StyleService {
 public:
  static constexpr const char* kStoreFormat = "barstyle-store-1";

  explicit StyleService(ServiceConfig cfg) : cfg_(std::move(cfg)), vocab_(cfg_.sub_beats_per_bar) {
    if (cfg_.workers < 1) throw ConfigError("worker count must be >= 1");
    cfg_.sampling.validate();
    open_store();
    for (int i = 0; i < cfg_.workers; ++i) workers_.emplace_back([this] { work(); });
  }

  ~StyleService() {
    {
      std::lock_guard lock(queue_mu_);
      stopping_ = true;
    }
    queue_cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  StyleService(const StyleService&) = delete;
  StyleService& operator=(const StyleService&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }

  // ---- checkpoint -----------------------------------------------------------------

  /// Loads a checkpoint and makes it the active snapshot; running jobs keep the old one.
  std::shared_ptr<const ModelSnapshot> load_checkpoint(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ServiceError(404, "NotFound", "no checkpoint at " + path);
    CheckpointData data;
    std::optional<StyleVae> model;
    try {
      model.emplace(StyleVae::load(path, nullptr, &data));
    } catch (const Error& e) {
      throw ServiceError(422, e.kind(), e.what());
    }
    if (model->config().sub_beats_per_bar != cfg_.sub_beats_per_bar)
      throw ServiceError(422, "GridMismatch",
                         "checkpoint uses " + std::to_string(model->config().sub_beats_per_bar) +
                             " sub-beats per bar, the service " + std::to_string(cfg_.sub_beats_per_bar));
    std::lock_guard lock(snapshot_mu_);
    auto snap = std::make_shared<const ModelSnapshot>(std::move(*model), path, data.step, get_bins(data.config, cfg_.bins),
                                                      ++generation_);
    snapshot_ = snap;
    return snap;
  }

  std::shared_ptr<const ModelSnapshot> snapshot() const {
    std::lock_guard lock(snapshot_mu_);
    return snapshot_;
  }

  /// Bins for new attribute tables: the active checkpoint's, else the configured ones.
  AttributeBins active_bins() const {
    auto snap = snapshot();
    return snap ? snap->bins : cfg_.bins;
  }

  // ---- pieces ---------------------------------------------------------------------

  /// Parses, quantizes, tokenizes and annotates an uploaded SMF; identical uploads get distinct ids.
  PieceRecord upload_piece(const std::string& bytes, const std::string& source = {}) {
    QuantizedScore q;
    try {
      auto raw = parse_midi(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
      q = quantize(raw, cfg_.sub_beats_per_bar);
    } catch (const MalformedFile& e) {
      throw ServiceError(400, e.kind(), e.what());
    } catch (const UnsupportedMeter& e) {
      throw ServiceError(422, e.kind(), e.what());
    } catch (const UnsupportedFormat& e) {
      throw ServiceError(422, e.kind(), e.what());
    }
    if (q.bars.empty()) throw ServiceError(422, "NoBars", "the file contains no bars");
    PieceRecord p;
    p.source = source;
    p.created = detail::utc_now();
    p.tokens = tokenize(q, vocab_).tokens;
    p.attributes = compute_attributes(q, active_bins());
    std::lock_guard lock(records_mu_);
    p.id = next_id('p', next_piece_);
    save_piece(p);
    save_manifest();
    pieces_[p.id] = p;
    return p;
  }

  PieceRecord piece(const std::string& id) const {
    std::lock_guard lock(records_mu_);
    auto it = pieces_.find(id);
    if (it == pieces_.end()) throw ServiceError(404, "NotFound", "no piece " + id);
    return it->second;
  }

  QuantizedScore piece_score(const PieceRecord& p) const { return detokenize(p.tokens, vocab_).score; }

  // ---- transfers ------------------------------------------------------------------

  /**
   * Validates and enqueues a transfer. `body` fields: piece_id; rhythm / polyphony as one
   * override string for every bar or a per-bar array of strings or absolute classes;
   * optional seed, p, tau, window, max_bar_tokens.
   */
  TransferJob request_transfer(const json& body) {
    if (!body.is_object()) throw ServiceError(400, "BadRequest", "expected a JSON object");
    auto snap = snapshot();
    if (!snap) throw ServiceError(409, "NoCheckpoint", "no checkpoint is loaded");
    TransferJob job;
    try {
      job.piece_id = body.at("piece_id").get<std::string>();
    } catch (const json::exception&) {
      throw ServiceError(400, "BadRequest", "piece_id is required");
    }
    PieceRecord p = piece(job.piece_id);
    job.rhythm = parse_override_field(body, "rhythm", p.num_bars());
    job.polyphony = parse_override_field(body, "polyphony", p.num_bars());
    try {
      job.sampling = cfg_.sampling;
      job.sampling.p = body.value("p", cfg_.sampling.p);
      job.sampling.tau = body.value("tau", cfg_.sampling.tau);
      job.sampling.max_bar_tokens = body.value("max_bar_tokens", cfg_.sampling.max_bar_tokens);
      job.window = body.value("window", cfg_.window);
      if (body.contains("seed")) job.sampling.seed = body["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw ServiceError(400, "BadRequest", e.what());
    }
    try {
      job.sampling.validate();
    } catch (const ConfigError& e) {
      throw ServiceError(422, "BadSampling", e.what());
    }
    if (job.window < 2) throw ServiceError(422, "BadSampling", "window must be >= 2 bars");
    job.checkpoint = snap->path;
    job.created = detail::utc_now();
    {
      std::lock_guard lock(records_mu_);
      const long n = next_transfer_;
      job.id = next_id('t', next_transfer_);
      if (!body.contains("seed")) job.sampling.seed = detail::mix_seed(static_cast<std::uint64_t>(n));
      save_job(job);
      save_manifest();
      jobs_[job.id] = job;
    }
    {
      std::lock_guard lock(queue_mu_);
      queue_.push_back({job.id, snap});
    }
    queue_cv_.notify_one();
    return job;
  }

  TransferJob job(const std::string& id) const {
    std::lock_guard lock(records_mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw ServiceError(404, "NotFound", "no transfer " + id);
    return it->second;
  }

  /// Blocks until the job leaves queued/running or the timeout passes.
  TransferJob wait(const std::string& id, std::chrono::milliseconds timeout = std::chrono::minutes(5)) const {
    std::unique_lock lock(records_mu_);
    auto finished = [&] {
      auto it = jobs_.find(id);
      return it == jobs_.end() || it->second.status == JobStatus::Done || it->second.status == JobStatus::Failed;
    };
    done_cv_.wait_for(lock, timeout, finished);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw ServiceError(404, "NotFound", "no transfer " + id);
    return it->second;
  }

  /// Piano-roll payload of a piece or of a finished transfer.
  json pianoroll(const std::string& id) const {
    if (!id.empty() && id[0] == 't') {
      TransferJob j = job(id);
      if (j.status != JobStatus::Done)
        throw ServiceError(409, "NotReady", "transfer " + id + " is " + to_string(j.status));
      QuantizedScore q = detokenize(j.tokens, vocab_).score;
      json req = json::array();
      for (std::size_t k = 0; k < j.requested_rhythm.size(); ++k)
        req.push_back({{"bar", k}, {"rhythm", j.requested_rhythm[k]}, {"polyphony", j.requested_polyphony[k]}});
      return {{"id", id},
              {"kind", "transfer"},
              {"piece_id", j.piece_id},
              {"sub_beats_per_bar", q.sub_beats_per_bar},
              {"bars", q.bars.size()},
              {"notes", notes_json(q)},
              {"requested", req},
              {"achieved", attributes_json(j.achieved)}};
    }
    PieceRecord p = piece(id);
    QuantizedScore q = piece_score(p);
    return {{"id", id},
            {"kind", "piece"},
            {"sub_beats_per_bar", q.sub_beats_per_bar},
            {"bars", q.bars.size()},
            {"notes", notes_json(q)},
            {"attributes", attributes_json(p.attributes)}};
  }

  std::string transfer_midi(const std::string& id) const {
    TransferJob j = job(id);
    if (j.status != JobStatus::Done) throw ServiceError(409, "NotReady", "transfer " + id + " is " + to_string(j.status));
    auto bytes = write_midi(detokenize(j.tokens, vocab_).score);
    return {bytes.begin(), bytes.end()};
  }

  json status() const {
    auto snap = snapshot();
    json ck = nullptr;
    if (snap) ck = {{"path", snap->path}, {"step", snap->step}, {"generation", snap->generation}};
    std::size_t queued;
    {
      std::lock_guard lock(queue_mu_);
      queued = queue_.size();
    }
    std::lock_guard lock(records_mu_);
    return {{"checkpoint", ck},
            {"workers", cfg_.workers},
            {"queued", queued},
            {"pieces", pieces_.size()},
            {"transfers", jobs_.size()},
            {"sub_beats_per_bar", cfg_.sub_beats_per_bar}};
  }

 private:
  struct QueueItem {
    std::string job_id;
    std::shared_ptr<const ModelSnapshot> snapshot;
  };

  std::vector<std::string> parse_override_field(const json& body, const char* key, std::size_t K) const {
    if (!body.contains(key) || body[key].is_null()) return {};
    const json& v = body[key];
    std::vector<std::string> out;
    auto check = [&](const std::string& s) {
      try {
        AttributeOverride::parse(s);
      } catch (const std::invalid_argument& e) {
        throw ServiceError(422, "BadOverrides", std::string(key) + ": " + e.what());
      }
      return s;
    };
    if (v.is_string()) return {check(v.get<std::string>())};
    if (!v.is_array()) throw ServiceError(422, "BadOverrides", std::string(key) + " must be a string or an array");
    if (v.size() != K)
      throw ServiceError(422, "BadOverrides", std::string(key) + " has " + std::to_string(v.size()) +
                                                  " entries for " + std::to_string(K) + " bars");
    for (const auto& e : v) {
      if (e.is_number_integer())
        out.push_back(check("=" + std::to_string(e.get<int>())));
      else if (e.is_string())
        out.push_back(check(e.get<std::string>()));
      else
        throw ServiceError(422, "BadOverrides", std::string(key) + " entries must be strings or integers");
    }
    return out;
  }

  static std::vector<AttributeOverride> expand(const std::vector<std::string>& spec, std::size_t K) {
    std::vector<AttributeOverride> out;
    if (spec.empty()) return out;
    for (std::size_t k = 0; k < K; ++k) out.push_back(AttributeOverride::parse(spec.size() == 1 ? spec[0] : spec[k]));
    return out;
  }

  void work() {
    while (true) {
      QueueItem item;
      {
        std::unique_lock lock(queue_mu_);
        queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_ && queue_.empty()) return;
        item = std::move(queue_.front());
        queue_.pop_front();
      }
      run(item);
    }
  }

  void run(const QueueItem& item) {
    TransferJob j = update(item.job_id, [](TransferJob& x) { x.status = JobStatus::Running; });
    try {
      const ModelSnapshot& snap = *item.snapshot;
      PieceRecord p = piece(j.piece_id);
      TransferRequest req;
      req.tokens = p.tokens;
      for (const auto& a : p.attributes) {
        // classes under the snapshot's bins, which the model was trained with
        req.source_rhythm.push_back(classify(a.s_rhym, snap.bins.rhym));
        req.source_polyphony.push_back(classify(a.s_poly, snap.bins.poly));
      }
      req.rhythm = expand(j.rhythm, p.num_bars());
      req.polyphony = expand(j.polyphony, p.num_bars());
      req.window = j.window;
      req.sampling = j.sampling;
      ad::Matrix mu = snap.latents(p);
      TransferResult res = style_transfer(snap.model, req, &mu);
      QuantizedScore q = detokenize(res.seq.tokens, vocab_).score;
      auto achieved = compute_attributes(q, snap.bins);
      update(j.id, [&](TransferJob& x) {
        x.requested_rhythm = res.target_rhythm;
        x.requested_polyphony = res.target_polyphony;
        x.tokens = res.seq.tokens;
        x.achieved = achieved;
        x.truncated_bars = res.truncated_bars;
        x.status = JobStatus::Done;
      });
    } catch (const std::exception& e) {
      update(j.id, [&](TransferJob& x) {
        x.status = JobStatus::Failed;
        x.error = e.what();
      });
    }
  }

  template <class F>
  TransferJob update(const std::string& id, F&& f) {
    TransferJob copy;
    {
      std::lock_guard lock(records_mu_);
      TransferJob& j = jobs_.at(id);
      f(j);
      save_job(j);
      copy = j;
    }
    done_cv_.notify_all();
    return copy;
  }

  // ---- persistence ----------------------------------------------------------------

  std::filesystem::path root() const { return cfg_.store_dir; }

  std::string next_id(char prefix, long& counter) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%06ld", prefix, ++counter);
    return buf;
  }

  void save_manifest() const {
    KeyValues kv;
    kv.set("format", std::string(kStoreFormat));
    kv.set("sub_beats_per_bar", cfg_.sub_beats_per_bar);
    kv.set("next.piece", next_piece_);
    kv.set("next.transfer", next_transfer_);
    detail::write_text_atomic(root() / "manifest.txt", kv.to_text());
  }

  void save_piece(const PieceRecord& p) const {
    auto base = root() / "pieces" / p.id;
    write_token_file(base.string() + ".tokens", p.tokens, vocab_);
    write_attribute_file(base.string() + ".attrs.csv", p.attributes);
    KeyValues meta;
    meta.set("source", p.source);
    meta.set("created", p.created);
    detail::write_text_atomic(base.string() + ".meta", meta.to_text());
  }

  void save_job(const TransferJob& j) const {
    detail::write_text_atomic(root() / "transfers" / (j.id + ".json"), job_json(j).dump());
  }

  void open_store() {
    namespace fs = std::filesystem;
    fs::create_directories(root() / "pieces");
    fs::create_directories(root() / "transfers");
    auto manifest = root() / "manifest.txt";
    if (!fs::exists(manifest)) {
      save_manifest();
      return;
    }
    KeyValues kv = KeyValues::load(manifest.string());
    if (kv.get("format", "") != kStoreFormat) throw ConfigError(root().string() + " is not a service store");
    if (kv.require<int>("sub_beats_per_bar") != cfg_.sub_beats_per_bar)
      throw ConfigError("store was created with a different sub-beat grid");
    next_piece_ = kv.require<long>("next.piece");
    next_transfer_ = kv.require<long>("next.transfer");
    for (const auto& e : fs::directory_iterator(root() / "pieces")) {
      if (e.path().extension() != ".meta") continue;
      PieceRecord p;
      p.id = e.path().stem().string();
      auto base = (root() / "pieces" / p.id).string();
      KeyValues meta = KeyValues::load(e.path().string());
      p.source = meta.get("source", "");
      p.created = meta.get("created", "");
      p.tokens = read_token_file(base + ".tokens", vocab_);
      p.attributes = read_attribute_file(base + ".attrs.csv");
      pieces_[p.id] = std::move(p);
    }
    for (const auto& e : fs::directory_iterator(root() / "transfers")) {
      if (e.path().extension() != ".json") continue;
      TransferJob j = job_from_json(json::parse(detail::read_text(e.path())));
      if (j.status == JobStatus::Queued || j.status == JobStatus::Running) {
        // the process that owned it is gone
        j.status = JobStatus::Failed;
        j.error = "interrupted by a service restart";
        save_job(j);
      }
      jobs_[j.id] = std::move(j);
    }
  }

  ServiceConfig cfg_;
  Vocab vocab_;

  mutable std::mutex snapshot_mu_;
  std::shared_ptr<const ModelSnapshot> snapshot_;
  int generation_ = 0;

  mutable std::mutex records_mu_;
  mutable std::condition_variable done_cv_;
  std::map<std::string, PieceRecord> pieces_;
  std::map<std::string, TransferJob> jobs_;
  long next_piece_ = 0;
  long next_transfer_ = 0;

  mutable std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<QueueItem> queue_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

// ---- HTTP binding -----------------------------------------------------------------

/// Routes the wire API onto a StyleService. Responses are JSON except the MIDI download.
class HttpFrontend {
 public:
  explicit HttpFrontend(StyleService& svc) : svc_(svc) { routes(); }
  ~HttpFrontend() { stop(); }

  HttpFrontend(const HttpFrontend&) = delete;
  HttpFrontend& operator=(const HttpFrontend&) = delete;

  /// Binds (port 0 picks a free one) and serves on a background thread; returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  /// Serves on the calling thread until stop().
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  httplib::Server& server() { return server_; }

 private:
  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <class F>
  httplib::Server::Handler guarded(F&& f) {
    return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ServiceError& e) {
        reply(res, e.status(), {{"error", e.kind()}, {"message", e.what()}});
      } catch (const json::exception& e) {
        reply(res, 400, {{"error", "BadRequest"}, {"message", e.what()}});
      } catch (const std::exception& e) {
        reply(res, 500, {{"error", "Internal"}, {"message", e.what()}});
      }
    };
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/status", guarded([this](const httplib::Request&, httplib::Response& res) { reply(res, 200, svc_.status()); }));

    server_.Post("/pieces", guarded([this](const httplib::Request& req, httplib::Response& res) {
      PieceRecord p = svc_.upload_piece(req.body, req.get_param_value("name"));
      reply(res, 201, {{"id", p.id}, {"bars", p.num_bars()}});
    }));

    server_.Get(R"(/pieces/([A-Za-z0-9]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      PieceRecord p = svc_.piece(req.matches[1]);
      auto snap = svc_.snapshot();
      reply(res, 200,
            {{"id", p.id},
             {"source", p.source},
             {"created", p.created},
             {"bars", p.num_bars()},
             {"tokens", p.tokens},
             {"attributes", attributes_json(p.attributes)},
             {"latents_cached", snap && snap->has_latents(p.id)}});
    }));

    server_.Get(R"(/pieces/([A-Za-z0-9]+)/pianoroll)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, svc_.pianoroll(req.matches[1]));
    }));

    server_.Post("/transfers", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        throw ServiceError(400, "BadRequest", e.what());
      }
      reply(res, 202, job_json(svc_.request_transfer(body), false));
    }));

    server_.Get(R"(/transfers/([A-Za-z0-9]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, job_json(svc_.job(req.matches[1])));
    }));

    server_.Get(R"(/transfers/([A-Za-z0-9]+)/midi)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::string id = req.matches[1];
      res.set_content(svc_.transfer_midi(id), "audio/midi");
      res.set_header("Content-Disposition", "attachment; filename=\"" + id + ".mid\"");
      res.status = 200;
    }));

    server_.Post("/admin/checkpoint", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        throw ServiceError(400, "BadRequest", e.what());
      }
      if (!body.is_object() || !body.contains("path") || !body["path"].is_string())
        throw ServiceError(400, "BadRequest", "path is required");
      auto snap = svc_.load_checkpoint(body["path"].get<std::string>());
      reply(res, 200, {{"path", snap->path}, {"step", snap->step}, {"generation", snap->generation}});
    }));
  }

  StyleService& svc_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace barstyle
