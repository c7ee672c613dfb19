/**
 * @file vae.hpp
 * @brief Bar-level Transformer VAE with attribute-conditioned in-attention
 *        decoding: posterior, KL with free bits, cyclical KL weight, training.
 *
 * Each bar k is encoded to (mu_k, sigma_k); z_k = mu_k + sigma_k * eps feeds the
 * decoder together with learned embeddings of the bar's rhythm and polyphony
 * classes: c_k = [z_k; rhythm_emb; polyphony_emb].
 * Loss per sample = mean token NLL + beta * (1/K) sum_k sum_i max(lambda, KL_ki).
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "barstyle/attributes.hpp"
#include "barstyle/autodiff.hpp"
#include "barstyle/checkpoint.hpp"
#include "barstyle/config.hpp"
#include "barstyle/remi.hpp"
#include "barstyle/transformer.hpp"

namespace barstyle {

/// A token sequence with its bar partition and per-bar attribute classes.
struct AttributedSequence {
  std::vector<int> tokens;
  std::vector<BarSpan> spans;
  std::vector<int> rhythm;     ///< a_rhym per bar
  std::vector<int> polyphony;  ///< a_poly per bar

  std::size_t num_bars() const { return spans.size(); }

  /// Bars [first, first + count) re-based to start at token 0.
  AttributedSequence crop(std::size_t first, std::size_t count) const {
    if (first + count > spans.size() || count == 0) throw std::out_of_range("crop outside the piece");
    AttributedSequence out;
    std::size_t b = spans[first].begin, e = spans[first + count - 1].end;
    out.tokens.assign(tokens.begin() + static_cast<long>(b), tokens.begin() + static_cast<long>(e));
    for (std::size_t k = first; k < first + count; ++k) out.spans.push_back({spans[k].begin - b, spans[k].end - b});
    out.rhythm.assign(rhythm.begin() + static_cast<long>(first), rhythm.begin() + static_cast<long>(first + count));
    out.polyphony.assign(polyphony.begin() + static_cast<long>(first), polyphony.begin() + static_cast<long>(first + count));
    return out;
  }
};

inline AttributedSequence make_attributed(const TokenSeq& seq, const std::vector<BarAttributes>& attrs) {
  if (attrs.size() != seq.bar_spans.size())
    throw LengthMismatch(std::to_string(attrs.size()) + " attribute rows for " + std::to_string(seq.bar_spans.size()) + " bars");
  AttributedSequence a{seq.tokens, seq.bar_spans, {}, {}};
  for (const auto& r : attrs) {
    a.rhythm.push_back(r.a_rhym);
    a.polyphony.push_back(r.a_poly);
  }
  return a;
}

// ---- latent math ---------------------------------------------------------------

/// Closed-form KL(N(mu, sigma^2) || N(0, 1)) per dimension.
inline std::vector<double> kl_per_dim(const std::vector<double>& mu, const std::vector<double>& sigma) {
  if (mu.size() != sigma.size()) throw LengthMismatch("mu and sigma differ in length");
  std::vector<double> out(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0)) throw std::invalid_argument("sigma must be positive");
    out[i] = 0.5 * (mu[i] * mu[i] + sigma[i] * sigma[i] - 1.0) - std::log(sigma[i]);
  }
  return out;
}

/// sum_i max(lambda, kl_i).
inline double free_bits_kl(const std::vector<double>& kl, double lambda) {
  double s = 0;
  for (double v : kl) s += std::max(lambda, v);
  return s;
}

/// Graph version of kl_per_dim, row-wise over K x d_z matrices.
inline ad::Var kl_per_dim(ad::Var mu, ad::Var sigma) {
  ad::Var quad = ad::add(ad::mul(mu, mu), ad::mul(sigma, sigma));
  return ad::add(ad::affine(quad, 0.5, -0.5), ad::affine(ad::log(sigma), -1.0));
}

/// (1/K) sum_k sum_i max(lambda, KL_ki) as a 1x1 node.
inline ad::Var free_bits_kl(ad::Var kl, double lambda) {
  return ad::affine(ad::sum(ad::clamp_min(kl, lambda)), 1.0 / static_cast<double>(kl.rows()));
}

struct KlSchedule {
  double beta_max = 1.0;
  long cycle_length = 5000;
  long kl_free_steps = 10000;
};

/// 0 before kl_free_steps; then per cycle a linear ramp to beta_max over the first half and a hold.
inline double beta_schedule(long step, const KlSchedule& s) {
  if (step < 0) throw std::invalid_argument("negative step");
  if (step < s.kl_free_steps) return 0.0;
  long t = (step - s.kl_free_steps) % s.cycle_length;
  double ramp = static_cast<double>(s.cycle_length) / 2.0;
  return s.beta_max * std::min(1.0, static_cast<double>(t) / ramp);
}

// ---- model ---------------------------------------------------------------------

struct VaeConfig {
  int vocab_size = 0;
  int sub_beats_per_bar = 16;
  StackConfig encoder;
  StackConfig decoder;
  int d_z = 16;
  int d_attr = 16;

  int d_cond() const { return d_z + 2 * d_attr; }

  /// Small model for single-core training.
  static VaeConfig toy(int vocab_size, int sub_beats_per_bar = 16) {
    VaeConfig c;
    c.vocab_size = vocab_size;
    c.sub_beats_per_bar = sub_beats_per_bar;
    c.encoder.max_len = 256;
    c.decoder.max_len = 1024;
    return c;
  }

  /// Full-size shape: d = 512, d_z = 128, d_attr = 64, 12 layers each side.
  static VaeConfig reference(int vocab_size) {
    VaeConfig c;
    c.vocab_size = vocab_size;
    for (StackConfig* s : {&c.encoder, &c.decoder}) {
      s->layers = 12;
      s->heads = 8;
      s->d_model = 512;
      s->d_embed = 512;
      s->d_ff = 2048;
    }
    c.encoder.max_len = 256;
    c.decoder.max_len = 1280;
    c.d_z = 128;
    c.d_attr = 64;
    return c;
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("vocab_size", vocab_size);
    kv.set("sub_beats_per_bar", sub_beats_per_bar);
    kv.set("d_z", d_z);
    kv.set("d_attr", d_attr);
    encoder.to_kv(kv, "encoder.");
    decoder.to_kv(kv, "decoder.");
    return kv;
  }

  static VaeConfig from_kv(const KeyValues& kv) {
    VaeConfig c;
    c.vocab_size = kv.require<int>("vocab_size");
    c.sub_beats_per_bar = kv.get<int>("sub_beats_per_bar", 16);
    c.d_z = kv.get<int>("d_z", c.d_z);
    c.d_attr = kv.get<int>("d_attr", c.d_attr);
    c.encoder.max_len = 256;
    c.encoder.from_kv(kv, "encoder.");
    c.decoder.from_kv(kv, "decoder.");
    return c;
  }
};

/// Outputs of one teacher-forced pass.
struct VaeForward {
  ad::Var loss;
  ad::Var nll;
  ad::Var kl_clamped;
  double kl_raw = 0;  ///< (1/K) sum_k sum_i KL_ki without the floor
  ad::Var mu;
  ad::Var sigma;
};

class StyleVae {
 public:
  StyleVae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.encoder.d_embed != cfg.decoder.d_embed) throw ConfigError("encoder and decoder d_embed differ");
    std::mt19937_64 rng(seed);
    const double std = cfg.decoder.init_std;
    auto& emb = params_.add("embed.token", ad::gaussian_matrix(cfg.vocab_size, cfg.decoder.d_embed, std, rng));
    encoder_ = BarEncoder(params_, "encoder.", cfg.encoder, emb, rng);
    w_mu_ = &params_.add("latent.mu", ad::gaussian_matrix(cfg.encoder.d_model, cfg.d_z, std, rng));
    w_sigma_ = &params_.add("latent.sigma", ad::gaussian_matrix(cfg.encoder.d_model, cfg.d_z, std, rng));
    rhythm_emb_ = &params_.add("attr.rhythm", ad::gaussian_matrix(kAttributeClasses, cfg.d_attr, std, rng));
    poly_emb_ = &params_.add("attr.polyphony", ad::gaussian_matrix(kAttributeClasses, cfg.d_attr, std, rng));
    DecoderConfig dc{cfg.decoder, ConditioningMode::InAttention, cfg.d_cond(), cfg.vocab_size};
    decoder_ = Decoder(params_, "decoder.", dc, emb, rng);
  }
  StyleVae(const StyleVae&) = delete;
  StyleVae& operator=(const StyleVae&) = delete;
  StyleVae(StyleVae&&) noexcept = default;
  StyleVae& operator=(StyleVae&&) noexcept = default;

  const VaeConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const Decoder& decoder() const { return decoder_; }
  const BarEncoder& encoder() const { return encoder_; }

  /// mu = h W_mu, sigma = softplus(h W_sigma), row-wise over bar states.
  std::pair<ad::Var, ad::Var> posterior(ad::Graph& g, ad::Var bar_states) const {
    return {ad::matmul(bar_states, g.param(*w_mu_)), ad::softplus(ad::matmul(bar_states, g.param(*w_sigma_)))};
  }

  /// K x d bar states; bars longer than the encoder's window are truncated for encoding only.
  ad::Var encode(ad::Graph& g, const std::vector<int>& tokens, const std::vector<BarSpan>& spans) const {
    const auto cap = static_cast<std::size_t>(cfg_.encoder.max_len);
    bool fits = std::all_of(spans.begin(), spans.end(), [&](const BarSpan& s) { return s.size() <= cap; });
    if (fits) return encoder_.encode_bars(g, tokens, spans);
    std::vector<int> clipped;
    std::vector<BarSpan> clipped_spans;
    for (const auto& s : spans) {
      std::size_t b = clipped.size();
      std::size_t n = std::min(s.size(), cap);
      clipped.insert(clipped.end(), tokens.begin() + static_cast<long>(s.begin), tokens.begin() + static_cast<long>(s.begin + n));
      clipped_spans.push_back({b, clipped.size()});
    }
    return encoder_.encode_bars(g, clipped, clipped_spans);
  }

  /// K x d_c conditions from latents and attribute classes.
  ad::Var conditions(ad::Graph& g, ad::Var z, const std::vector<int>& rhythm, const std::vector<int>& polyphony) const {
    check_classes(rhythm, polyphony, static_cast<std::size_t>(z.rows()));
    return ad::concat_cols({z, ad::embedding(g.param(*rhythm_emb_), rhythm), ad::embedding(g.param(*poly_emb_), polyphony)});
  }

  ad::Matrix conditions(const ad::Matrix& z, const std::vector<int>& rhythm, const std::vector<int>& polyphony) const {
    check_classes(rhythm, polyphony, static_cast<std::size_t>(z.rows()));
    ad::Matrix c(z.rows(), cfg_.d_cond());
    for (Eigen::Index k = 0; k < z.rows(); ++k) {
      c.row(k) << z.row(k), rhythm_emb_->value.row(rhythm[k]), poly_emb_->value.row(polyphony[k]);
    }
    return c;
  }

  /// Posterior means (K x d_z), the inference-time latents.
  ad::Matrix encode_means(const std::vector<int>& tokens, const std::vector<BarSpan>& spans) const {
    ad::Graph g;
    return posterior(g, encode(g, tokens, spans)).first.value();
  }

  /**
   * Teacher-forced pass. With `rng`, z is sampled by reparameterization,
   * otherwise z = mu. The last token predicts `final_target`.
   */
  VaeForward forward(ad::Graph& g, const AttributedSequence& s, double beta, double free_bits,
                     std::mt19937_64* rng, int final_target = Vocab::kEos) const {
    VaeForward out;
    ad::Var states = encode(g, s.tokens, s.spans);
    auto [mu, sigma] = posterior(g, states);
    out.mu = mu;
    out.sigma = sigma;
    ad::Var z = rng ? ad::reparameterize(mu, sigma, ad::standard_normal(mu.rows(), mu.cols(), *rng)) : mu;
    ad::Var cond = conditions(g, z, s.rhythm, s.polyphony);
    ad::Var logits = decoder_.forward(g, s.tokens, s.spans, cond);
    out.nll = ad::cross_entropy(logits, LanguageModel::shifted_targets(s.tokens, final_target));
    ad::Var kl = kl_per_dim(mu, sigma);
    out.kl_raw = kl.value().sum() / static_cast<double>(kl.rows());
    out.kl_clamped = free_bits_kl(kl, free_bits);
    out.loss = beta == 0.0 ? out.nll : ad::add(out.nll, ad::affine(out.kl_clamped, beta));
    return out;
  }

  KeyValues config_kv() const {
    KeyValues kv = cfg_.to_kv();
    kv.set("model", std::string("style_vae"));
    return kv;
  }

  void save(const std::string& dir, long step, const ad::AdamState* opt = nullptr, const KeyValues& extra = {}) const {
    KeyValues kv = config_kv();
    kv.merge(extra);
    save_checkpoint(dir, kv, step, params_, opt);
  }

  /// Rebuilds a model from a checkpoint directory.
  static StyleVae load(const std::string& dir, ad::AdamState* opt = nullptr, CheckpointData* data_out = nullptr) {
    CheckpointData data = load_checkpoint(dir);
    if (data.config.get("model", "") != "style_vae") throw ConfigError(dir + " is not a style-transfer checkpoint");
    StyleVae m(VaeConfig::from_kv(data.config), 0);
    apply_checkpoint(data, m.params_, opt);
    if (data_out) *data_out = std::move(data);
    return m;
  }

 private:
  static void check_classes(const std::vector<int>& r, const std::vector<int>& p, std::size_t K) {
    if (r.size() != K || p.size() != K) throw LengthMismatch("attribute classes do not match bar count");
    for (std::size_t k = 0; k < K; ++k)
      if (r[k] < 0 || r[k] >= kAttributeClasses || p[k] < 0 || p[k] >= kAttributeClasses)
        throw std::invalid_argument("attribute class out of range");
  }

  VaeConfig cfg_;
  ad::ParameterStore params_;
  BarEncoder encoder_;
  Decoder decoder_;
  ad::Parameter *w_mu_ = nullptr, *w_sigma_ = nullptr, *rhythm_emb_ = nullptr, *poly_emb_ = nullptr;
};

// ---- training ----------------------------------------------------------------------

struct VaeTrainConfig {
  KlSchedule kl;
  double free_bits = 0.25;
  int crop_bars = 16;
  int max_tokens = 1280;
  int batch_size = 4;
  int transpose = 6;  ///< uniform key shift in [-transpose, transpose]
  ad::LrSchedule lr;
  double clip_norm = 0.0;
  std::uint64_t seed = 0;

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("beta_max", kl.beta_max);
    kv.set("cycle_length", kl.cycle_length);
    kv.set("kl_free_steps", kl.kl_free_steps);
    kv.set("free_bits", free_bits);
    kv.set("crop_bars", crop_bars);
    kv.set("max_tokens", max_tokens);
    kv.set("batch_size", batch_size);
    kv.set("transpose", transpose);
    kv.set("lr_peak", lr.peak);
    kv.set("lr_warmup", lr.warmup_steps);
    kv.set("lr_decay_steps", lr.decay_steps);
    kv.set("lr_final", lr.final_lr);
    kv.set("clip_norm", clip_norm);
    kv.set("seed", seed);
    return kv;
  }

  /// Overlays the keys present in `kv` onto `c`.
  static VaeTrainConfig from_kv(const KeyValues& kv, VaeTrainConfig c) {
    c.kl.beta_max = kv.get("beta_max", c.kl.beta_max);
    c.kl.cycle_length = kv.get("cycle_length", c.kl.cycle_length);
    c.kl.kl_free_steps = kv.get("kl_free_steps", c.kl.kl_free_steps);
    c.free_bits = kv.get("free_bits", c.free_bits);
    c.crop_bars = kv.get("crop_bars", c.crop_bars);
    c.max_tokens = kv.get("max_tokens", c.max_tokens);
    c.batch_size = kv.get("batch_size", c.batch_size);
    c.transpose = kv.get("transpose", c.transpose);
    c.lr.peak = kv.get("lr_peak", c.lr.peak);
    c.lr.warmup_steps = kv.get("lr_warmup", c.lr.warmup_steps);
    c.lr.decay_steps = kv.get("lr_decay_steps", c.lr.decay_steps);
    c.lr.final_lr = kv.get("lr_final", c.lr.final_lr);
    c.clip_norm = kv.get("clip_norm", c.clip_norm);
    c.seed = kv.get<std::uint64_t>("seed", c.seed);
    if (!(c.kl.beta_max > 0 && c.kl.beta_max <= 1)) throw ConfigError("beta_max must lie in (0, 1]");
    if (c.free_bits < 0) throw ConfigError("free_bits must be >= 0");
    if (c.kl.cycle_length <= 0 || c.crop_bars <= 0 || c.batch_size <= 0 || c.max_tokens <= 0)
      throw ConfigError("cycle_length, crop_bars, batch_size and max_tokens must be positive");
    return c;
  }
  static VaeTrainConfig from_kv(const KeyValues& kv) { return from_kv(kv, VaeTrainConfig{}); }
};

struct VaeStepStats {
  long step = 0;
  double lr = 0;
  double beta = 0;
  double nll = 0;
  double kl_raw = 0;
  double kl_clamped = 0;
};

/// Draws random crops with key transposition from a training set, epoch by epoch.
class CropSampler {
 public:
  CropSampler(const std::vector<AttributedSequence>& pieces, const Vocab& vocab, int crop_bars, int max_tokens,
              int transpose, std::uint64_t seed)
      : pieces_(&pieces), vocab_(vocab), crop_bars_(crop_bars), max_tokens_(max_tokens), transpose_(transpose), rng_(seed) {
    if (pieces.empty()) throw EmptyCorpus("no training pieces");
  }

  AttributedSequence next() {
    if (cursor_ >= order_.size()) {
      order_.resize(pieces_->size());
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const auto& piece = (*pieces_)[order_[cursor_++]];
    std::size_t count = std::min<std::size_t>(crop_bars_, piece.num_bars());
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, piece.num_bars() - count)(rng_);
    AttributedSequence s = piece.crop(first, count);
    while (s.tokens.size() > static_cast<std::size_t>(max_tokens_) && count > 1) s = piece.crop(first, --count);
    if (transpose_ > 0) {
      std::vector<int> shifts;
      for (int d = -transpose_; d <= transpose_; ++d) shifts.push_back(d);
      std::shuffle(shifts.begin(), shifts.end(), rng_);
      for (int d : shifts) {
        if (d == 0) break;
        if (auto t = transpose_tokens(s.tokens, vocab_, d)) {
          s.tokens = std::move(*t);
          break;
        }
      }
    }
    return s;
  }

 private:
  const std::vector<AttributedSequence>* pieces_;
  Vocab vocab_;
  int crop_bars_, max_tokens_, transpose_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

class VaeTrainer {
 public:
  VaeTrainer(StyleVae& model, const VaeTrainConfig& cfg) : model_(&model), cfg_(cfg), rng_(cfg.seed ^ 0x5eedULL) {
    opt_.config.clip_norm = cfg.clip_norm;
    opt_.reset(model.params());
  }

  ad::AdamState& optimizer() { return opt_; }
  const VaeTrainConfig& config() const { return cfg_; }

  /// Forward/backward over the batch (mean of per-sample losses) and one Adam update at `step`.
  VaeStepStats train_step(const std::vector<AttributedSequence>& batch, long step) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    VaeStepStats st;
    st.step = step;
    st.beta = beta_schedule(step, cfg_.kl);
    st.lr = ad::lr_schedule(step, cfg_.lr);
    auto& params = model_->params();
    params.zero_grad();
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) {
      if (s.tokens.size() > static_cast<std::size_t>(cfg_.max_tokens))
        throw OOMGuard("sample of " + std::to_string(s.tokens.size()) + " tokens exceeds max_tokens " +
                       std::to_string(cfg_.max_tokens));
      if (s.num_bars() > static_cast<std::size_t>(cfg_.crop_bars))
        throw OOMGuard("sample of " + std::to_string(s.num_bars()) + " bars exceeds crop_bars");
      ad::Graph g;
      VaeForward f = model_->forward(g, s, st.beta, cfg_.free_bits, &rng_);
      g.backward(ad::affine(f.loss, scale));
      st.nll += f.nll.value()(0, 0) * scale;
      st.kl_raw += f.kl_raw * scale;
      st.kl_clamped += f.kl_clamped.value()(0, 0) * scale;
    }
    ad::adam_step(params, opt_, st.lr);
    return st;
  }

 private:
  StyleVae* model_;
  VaeTrainConfig cfg_;
  ad::AdamState opt_;
  std::mt19937_64 rng_;
};

/// Mean per-token reconstruction NLL with z = mu (no sampling).
inline double reconstruction_nll(const StyleVae& model, const std::vector<AttributedSequence>& pieces) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& p : pieces) {
    ad::Graph g;
    VaeForward f = model.forward(g, p, 0.0, 0.0, nullptr);
    total += f.nll.value()(0, 0) * static_cast<double>(p.tokens.size());
    count += p.tokens.size();
  }
  if (count == 0) throw EmptySet("no pieces to evaluate");
  return total / static_cast<double>(count);
}

}  // namespace barstyle
