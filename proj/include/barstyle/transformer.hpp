/**
 * @file transformer.hpp
 * @brief Post-LN Transformer blocks, the bar-wise bidirectional encoder, the
 *        causal decoder with segment-level conditioning, and a plain causal
 *        language model used for bar embeddings and fluency scoring.
 *
 * Every module reads its weights from a ParameterStore by name. The graph path
 * (autodiff) is used for training; a separate key/value-cache path in plain
 * Eigen serves incremental decoding and matches the graph path to rounding.
 */
#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "barstyle/autodiff.hpp"
#include "barstyle/checkpoint.hpp"
#include "barstyle/config.hpp"
#include "barstyle/error.hpp"
#include "barstyle/remi.hpp"

namespace barstyle {

enum class ConditioningMode { Unconditional, Memory, PreAttention, InAttention, PostAttention };

inline std::string to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::Unconditional: return "unconditional";
    case ConditioningMode::Memory: return "memory";
    case ConditioningMode::PreAttention: return "pre_attention";
    case ConditioningMode::InAttention: return "in_attention";
    case ConditioningMode::PostAttention: return "post_attention";
  }
  return "?";
}

inline ConditioningMode parse_mode(const std::string& s) {
  for (auto m : {ConditioningMode::Unconditional, ConditioningMode::Memory, ConditioningMode::PreAttention,
                 ConditioningMode::InAttention, ConditioningMode::PostAttention})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown conditioning mode '" + s + "'");
}

enum class Activation { Relu, Gelu };

/// Shape of one decoder or encoder stack and its embeddings.
struct StackConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_embed = 64;  ///< token embedding width; projected to d_model when different (except pre-attention)
  int d_ff = 256;
  int max_len = 1024;  ///< learned positions
  Activation activation = Activation::Relu;
  double init_std = 0.01;

  /// Writes every field as `<prefix>name`.
  void to_kv(KeyValues& kv, const std::string& prefix) const {
    kv.set(prefix + "layers", layers);
    kv.set(prefix + "heads", heads);
    kv.set(prefix + "d_model", d_model);
    kv.set(prefix + "d_embed", d_embed);
    kv.set(prefix + "d_ff", d_ff);
    kv.set(prefix + "max_len", max_len);
    kv.set(prefix + "activation", std::string(activation == Activation::Gelu ? "gelu" : "relu"));
    kv.set(prefix + "init_std", init_std);
  }

  /// Overlays the `<prefix>name` keys present in `kv`.
  void from_kv(const KeyValues& kv, const std::string& prefix) {
    layers = kv.get<int>(prefix + "layers", layers);
    heads = kv.get<int>(prefix + "heads", heads);
    d_model = kv.get<int>(prefix + "d_model", d_model);
    d_embed = kv.get<int>(prefix + "d_embed", d_embed);
    d_ff = kv.get<int>(prefix + "d_ff", d_ff);
    max_len = kv.get<int>(prefix + "max_len", max_len);
    std::string act = kv.get(prefix + "activation", activation == Activation::Gelu ? "gelu" : "relu");
    if (act != "relu" && act != "gelu") throw ConfigError("activation must be relu or gelu");
    activation = act == "gelu" ? Activation::Gelu : Activation::Relu;
    init_std = kv.get<double>(prefix + "init_std", init_std);
    if (layers < 1 || heads < 1 || d_model < 1 || d_embed < 1 || d_ff < 1 || max_len < 1)
      throw ConfigError("stack sizes must be positive");
  }
};

// ---- parameter bundles -------------------------------------------------------

struct LayerParams {
  ad::Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  ad::Parameter *ln1_g, *ln1_b;
  ad::Parameter *w1, *b1, *w2, *b2;
  ad::Parameter *ln2_g, *ln2_b;
};

namespace detail {

inline ad::Parameter& weight(ad::ParameterStore& s, const std::string& name, int in, int out, double std,
                             std::mt19937_64& rng) {
  return s.add(name, ad::gaussian_matrix(in, out, std, rng));
}
inline ad::Parameter& zeros(ad::ParameterStore& s, const std::string& name, int rows, int cols) {
  return s.add(name, ad::Matrix::Zero(rows, cols));
}
inline ad::Parameter& ones(ad::ParameterStore& s, const std::string& name, int rows, int cols) {
  return s.add(name, ad::Matrix::Ones(rows, cols));
}

}  // namespace detail

inline std::vector<LayerParams> make_layers(ad::ParameterStore& s, const std::string& prefix, const StackConfig& c,
                                            std::mt19937_64& rng) {
  if (c.d_model % c.heads != 0) throw ConfigError("d_model must be divisible by heads");
  std::vector<LayerParams> out;
  const int d = c.d_model;
  for (int l = 0; l < c.layers; ++l) {
    std::string p = prefix + "layer" + std::to_string(l) + ".";
    LayerParams lp{};
    lp.wq = &detail::weight(s, p + "attn.wq", d, d, c.init_std, rng);
    lp.bq = &detail::zeros(s, p + "attn.bq", 1, d);
    lp.wk = &detail::weight(s, p + "attn.wk", d, d, c.init_std, rng);
    lp.bk = &detail::zeros(s, p + "attn.bk", 1, d);
    lp.wv = &detail::weight(s, p + "attn.wv", d, d, c.init_std, rng);
    lp.bv = &detail::zeros(s, p + "attn.bv", 1, d);
    lp.wo = &detail::weight(s, p + "attn.wo", d, d, c.init_std, rng);
    lp.bo = &detail::zeros(s, p + "attn.bo", 1, d);
    lp.ln1_g = &detail::ones(s, p + "ln1.gain", 1, d);
    lp.ln1_b = &detail::zeros(s, p + "ln1.bias", 1, d);
    lp.w1 = &detail::weight(s, p + "ffn.w1", d, c.d_ff, c.init_std, rng);
    lp.b1 = &detail::zeros(s, p + "ffn.b1", 1, c.d_ff);
    lp.w2 = &detail::weight(s, p + "ffn.w2", c.d_ff, d, c.init_std, rng);
    lp.b2 = &detail::zeros(s, p + "ffn.b2", 1, d);
    lp.ln2_g = &detail::ones(s, p + "ln2.gain", 1, d);
    lp.ln2_b = &detail::zeros(s, p + "ln2.bias", 1, d);
    out.push_back(lp);
  }
  return out;
}

// ---- masks -------------------------------------------------------------------

/// Token t may attend to positions <= t; `memory` extra leading columns are visible to all.
inline std::shared_ptr<const ad::Matrix> causal_mask(Eigen::Index T, Eigen::Index memory = 0) {
  auto m = std::make_shared<ad::Matrix>(ad::Matrix::Zero(T, memory + T));
  for (Eigen::Index r = 0; r < T; ++r)
    for (Eigen::Index c = r + 1; c < T; ++c) (*m)(r, memory + c) = ad::kNegInf;
  return m;
}

/// Tokens attend only within their own bar, in both directions.
inline std::shared_ptr<const ad::Matrix> block_mask(const std::vector<BarSpan>& spans, Eigen::Index T) {
  auto m = std::make_shared<ad::Matrix>(ad::Matrix::Constant(T, T, ad::kNegInf));
  for (const auto& s : spans) {
    auto b = static_cast<Eigen::Index>(s.begin), n = static_cast<Eigen::Index>(s.size());
    m->block(b, b, n, n).setZero();
  }
  return m;
}

/// Bar index of every token; throws BadPartition unless spans tile [0, T) in order.
inline std::vector<int> bar_index_of_tokens(const std::vector<BarSpan>& spans, std::size_t T) {
  std::vector<int> bar_of(T, -1);
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    if (spans[k].begin != cursor || spans[k].end <= spans[k].begin)
      throw BadPartition("bar span " + std::to_string(k) + " does not continue the partition");
    for (std::size_t t = spans[k].begin; t < spans[k].end; ++t) bar_of[t] = static_cast<int>(k);
    cursor = spans[k].end;
  }
  if (cursor != T) throw BadPartition("bar spans cover " + std::to_string(cursor) + " of " + std::to_string(T) + " tokens");
  return bar_of;
}

// ---- graph building blocks -----------------------------------------------------

inline ad::Var linear(ad::Graph& g, ad::Var x, ad::Parameter& w, ad::Parameter* b = nullptr) {
  ad::Var y = ad::matmul(x, g.param(w));
  return b ? ad::add(y, g.param(*b)) : y;
}

inline ad::Var activate(ad::Var x, Activation a) { return a == Activation::Gelu ? ad::gelu(x) : ad::relu(x); }

/// Records attention probabilities (first head) per layer for inspection.
struct AttentionTrace {
  std::vector<ad::Matrix> probs;
};

/**
 * Multi-head attention + residual + LayerNorm, then feed-forward + residual +
 * LayerNorm. With `memory`, keys and values run over [memory; h].
 */
inline ad::Var attention_block(ad::Graph& g, const LayerParams& p, ad::Var h,
                               const std::shared_ptr<const ad::Matrix>& mask, int heads, Activation act,
                               std::optional<ad::Var> memory = std::nullopt, AttentionTrace* trace = nullptr) {
  const Eigen::Index d = h.cols();
  if (d != p.wq->value.rows()) throw ShapeMismatch("attention input width " + std::to_string(d));
  ad::Var src = memory ? ad::concat_rows({*memory, h}) : h;
  ad::Var q = linear(g, h, *p.wq, p.bq);
  ad::Var k = linear(g, src, *p.wk, p.bk);
  ad::Var v = linear(g, src, *p.wv, p.bv);
  const Eigen::Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (int i = 0; i < heads; ++i) {
    ad::Var qh = heads == 1 ? q : ad::split_cols(q, i * dh, dh);
    ad::Var kh = heads == 1 ? k : ad::split_cols(k, i * dh, dh);
    ad::Var vh = heads == 1 ? v : ad::split_cols(v, i * dh, dh);
    ad::Var a = ad::softmax(ad::affine(ad::matmul_nt(qh, kh), scale), mask);
    if (trace && i == 0) trace->probs.push_back(a.value());
    outs.push_back(ad::matmul(a, vh));
  }
  ad::Var o = linear(g, heads == 1 ? outs[0] : ad::concat_cols(outs), *p.wo, p.bo);
  ad::Var h1 = ad::layer_norm(ad::add(h, o), g.param(*p.ln1_g), g.param(*p.ln1_b));
  ad::Var f = linear(g, activate(linear(g, h1, *p.w1, p.b1), act), *p.w2, p.b2);
  return ad::layer_norm(ad::add(h1, f), g.param(*p.ln2_g), g.param(*p.ln2_b));
}

// ---- plain Eigen mirror for incremental inference ------------------------------

namespace infer {

using ad::Matrix;
using ad::RowVector;

inline Matrix linear(const Matrix& x, const ad::Parameter& w, const ad::Parameter* b = nullptr) {
  Matrix y = x * w.value;
  if (b) y.rowwise() += b->value.row(0);
  return y;
}

inline Matrix layer_norm(const Matrix& x, const ad::Parameter& gain, const ad::Parameter& bias) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + ad::kLayerNormEps);
    out.row(r) = ((x.row(r).array() - mu) * inv) * gain.value.row(0).array() + bias.value.row(0).array();
  }
  return out;
}

inline Matrix activate(const Matrix& x, Activation a) {
  if (a == Activation::Gelu) return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
  return x.cwiseMax(0.0);
}

inline Matrix prelu(const Matrix& x, const ad::Parameter& slope) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (x(r, c) <= 0) out(r, c) = slope.value(0, c) * x(r, c);
  return out;
}

inline Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

/// Per-layer key/value rows for positions decoded so far (memory rows first).
struct LayerCache {
  Matrix keys;
  Matrix values;
};

/// One new row through a block, attending over cached keys/values (which it extends).
inline Matrix attention_step(const LayerParams& p, const Matrix& h, LayerCache& cache, int heads, Activation act) {
  const Eigen::Index d = h.cols();
  Matrix q = linear(h, *p.wq, p.bq);
  Matrix k = linear(h, *p.wk, p.bk);
  Matrix v = linear(h, *p.wv, p.bv);
  cache.keys.conservativeResize(cache.keys.rows() + 1, d);
  cache.values.conservativeResize(cache.values.rows() + 1, d);
  cache.keys.bottomRows(1) = k;
  cache.values.bottomRows(1) = v;
  const Eigen::Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix o(1, d);
  for (int i = 0; i < heads; ++i) {
    RowVector s = (q.middleCols(i * dh, dh) * cache.keys.middleCols(i * dh, dh).transpose()) * scale;
    double m = s.maxCoeff();
    RowVector e = (s.array() - m).exp().matrix();
    e /= e.sum();
    o.middleCols(i * dh, dh) = e * cache.values.middleCols(i * dh, dh);
  }
  Matrix h1 = layer_norm(h + linear(o, *p.wo, p.bo), *p.ln1_g, *p.ln1_b);
  Matrix f = linear(activate(linear(h1, *p.w1, p.b1), act), *p.w2, p.b2);
  return layer_norm(h1 + f, *p.ln2_g, *p.ln2_b);
}

}  // namespace infer

// ---- decoder -------------------------------------------------------------------

struct DecoderConfig {
  StackConfig stack;
  ConditioningMode mode = ConditioningMode::Unconditional;
  int d_cond = 0;  ///< width of each bar condition c_k
  int vocab_size = 0;
};

/// Incremental decoding state.
struct DecodeCache {
  std::vector<infer::LayerCache> layers;
  int length = 0;  ///< tokens consumed (positions used)
};

/**
 * Causal Transformer decoder over REMI tokens with one of the segment-level
 * conditioning modes. Bar k's condition row c_k applies to the tokens of bar k.
 */
class Decoder {
 public:
  Decoder() = default;

  /// Registers its parameters under `prefix`; the token embedding may be shared with other modules.
  Decoder(ad::ParameterStore& s, const std::string& prefix, const DecoderConfig& cfg, ad::Parameter& token_embedding,
          std::mt19937_64& rng)
      : cfg_(cfg), tok_(&token_embedding) {
    const auto& c = cfg.stack;
    const int d = c.d_model;
    if (cfg.vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (token_embedding.value.rows() != cfg.vocab_size || token_embedding.value.cols() != c.d_embed)
      throw ShapeMismatch("token embedding table " + ad::shape_str(token_embedding.value));
    if (cfg.mode != ConditioningMode::Unconditional && cfg.d_cond <= 0)
      throw ConfigError("conditional decoder needs d_cond > 0");
    if (cfg.mode == ConditioningMode::PreAttention) {
      if (d != 2 * c.d_embed)
        throw ModeDimensionError("pre-attention requires d_model = 2 * d_embed, got d_model=" + std::to_string(d) +
                                 " d_embed=" + std::to_string(c.d_embed));
      w_pre_ = &detail::weight(s, prefix + "cond.pre", cfg.d_cond, c.d_embed, c.init_std, rng);
    } else if (c.d_embed != d) {
      in_proj_ = &detail::weight(s, prefix + "embed.proj", c.d_embed, d, c.init_std, rng);
    }
    pos_ = &detail::weight(s, prefix + "embed.pos", c.max_len, d, c.init_std, rng);
    layers_ = make_layers(s, prefix, c, rng);
    switch (cfg.mode) {
      case ConditioningMode::InAttention:
        w_in_ = &detail::weight(s, prefix + "cond.in", cfg.d_cond, d, c.init_std, rng);
        break;
      case ConditioningMode::Memory:
        w_mem_ = &detail::weight(s, prefix + "cond.memory", cfg.d_cond, c.layers * d, c.init_std, rng);
        break;
      case ConditioningMode::PostAttention:
        // bias net B: c -> d -> d; gate net G: [h; c] -> d -> d
        b1_ = &detail::weight(s, prefix + "cond.bias_net.w1", cfg.d_cond, d, c.init_std, rng);
        b1b_ = &detail::zeros(s, prefix + "cond.bias_net.b1", 1, d);
        bslope_ = &s.add(prefix + "cond.bias_net.slope", ad::Matrix::Constant(1, d, 0.25));
        b2_ = &detail::weight(s, prefix + "cond.bias_net.w2", d, d, c.init_std, rng);
        b2b_ = &detail::zeros(s, prefix + "cond.bias_net.b2", 1, d);
        g1_ = &detail::weight(s, prefix + "cond.gate_net.w1", d + cfg.d_cond, d, c.init_std, rng);
        g1b_ = &detail::zeros(s, prefix + "cond.gate_net.b1", 1, d);
        gslope_ = &s.add(prefix + "cond.gate_net.slope", ad::Matrix::Constant(1, d, 0.25));
        g2_ = &detail::weight(s, prefix + "cond.gate_net.w2", d, d, c.init_std, rng);
        g2b_ = &detail::zeros(s, prefix + "cond.gate_net.b2", 1, d);
        break;
      default:
        break;
    }
    out_w_ = &detail::weight(s, prefix + "out.w", d, cfg.vocab_size, c.init_std, rng);
    out_b_ = &detail::zeros(s, prefix + "out.b", 1, cfg.vocab_size);
  }

  const DecoderConfig& config() const { return cfg_; }
  ConditioningMode mode() const { return cfg_.mode; }
  ad::Parameter* gate_output_bias() const { return g2b_; }
  ad::Parameter* in_attention_projection() const { return w_in_; }

  /**
   * Teacher-forced pass: logits (T x vocab) where row t predicts token t+1.
   * `cond` is K x d_cond (ignored when unconditional); `hidden_layer` >= 0
   * additionally returns that layer's hidden states (0 = embedding output).
   */
  ad::Var forward(ad::Graph& g, const std::vector<int>& tokens, const std::vector<BarSpan>& spans,
                  std::optional<ad::Var> cond, AttentionTrace* trace = nullptr, int hidden_layer = -1,
                  ad::Var* hidden_out = nullptr) const {
    const auto T = static_cast<Eigen::Index>(tokens.size());
    if (T == 0) throw EmptyBar("empty token sequence");
    if (T > cfg_.stack.max_len)
      throw OOMGuard("sequence of " + std::to_string(T) + " tokens exceeds max_len " + std::to_string(cfg_.stack.max_len));
    const auto& c = cfg_.stack;
    const bool conditioned = cfg_.mode != ConditioningMode::Unconditional;
    std::vector<int> bar_of;
    ad::Var ck_tok{};  // per-token condition rows
    if (conditioned) {
      if (!cond) throw ShapeMismatch("conditional decoder called without conditions");
      bar_of = bar_index_of_tokens(spans, tokens.size());
      if (cond->rows() != static_cast<Eigen::Index>(spans.size()) || cond->cols() != cfg_.d_cond)
        throw ShapeMismatch("conditions " + ad::shape_str(cond->value()) + " for " + std::to_string(spans.size()) +
                            " bars of width " + std::to_string(cfg_.d_cond));
      if (cfg_.mode != ConditioningMode::Memory) ck_tok = ad::embedding(*cond, bar_of);
    }

    ad::Var x = ad::embedding(g.param(*tok_), tokens);
    ad::Var h;
    if (cfg_.mode == ConditioningMode::PreAttention) {
      h = ad::concat_cols({x, linear(g, ck_tok, *w_pre_)});
    } else {
      h = in_proj_ ? linear(g, x, *in_proj_) : x;
    }
    h = ad::add(h, ad::split_rows(g.param(*pos_), 0, T));

    std::vector<ad::Var> memory;
    if (cfg_.mode == ConditioningMode::Memory) {
      ad::Var all = linear(g, *cond, *w_mem_);
      for (int l = 0; l < c.layers; ++l) memory.push_back(ad::split_cols(all, l * c.d_model, c.d_model));
    }
    ad::Var e_k{};
    if (cfg_.mode == ConditioningMode::InAttention) e_k = linear(g, ck_tok, *w_in_);

    auto mask = causal_mask(T, cfg_.mode == ConditioningMode::Memory ? cond->rows() : 0);
    for (int l = 0; l < c.layers; ++l) {
      if (cfg_.mode == ConditioningMode::InAttention) h = ad::add(h, e_k);
      if (hidden_out && hidden_layer == l) *hidden_out = h;
      std::optional<ad::Var> mem;
      if (!memory.empty()) mem = memory[l];
      h = attention_block(g, layers_[l], h, mask, c.heads, c.activation, mem, trace);
    }
    if (hidden_out && hidden_layer == c.layers) *hidden_out = h;

    if (cfg_.mode == ConditioningMode::PostAttention) {
      ad::Var b = linear(g, ad::prelu(linear(g, ck_tok, *b1_, b1b_), g.param(*bslope_)), *b2_, b2b_);
      ad::Var gate_in = ad::concat_cols({h, ck_tok});
      ad::Var alpha = ad::sigmoid(linear(g, ad::prelu(linear(g, gate_in, *g1_, g1b_), g.param(*gslope_)), *g2_, g2b_));
      h = ad::add(ad::mul(ad::affine(alpha, -1.0, 1.0), h), ad::mul(alpha, b));
    }
    return linear(g, h, *out_w_, out_b_);
  }

  /// Empty cache; memory mode needs all K conditions up front.
  DecodeCache start(const ad::Matrix* cond = nullptr) const {
    DecodeCache cache;
    const int d = cfg_.stack.d_model;
    cache.layers.resize(cfg_.stack.layers);
    for (auto& lc : cache.layers) {
      lc.keys.resize(0, d);
      lc.values.resize(0, d);
    }
    if (cfg_.mode == ConditioningMode::Memory) {
      if (!cond) throw ShapeMismatch("memory mode needs conditions at start");
      ad::Matrix all = *cond * w_mem_->value;
      for (int l = 0; l < cfg_.stack.layers; ++l) {
        ad::Matrix mem = all.middleCols(l * d, d);
        cache.layers[l].keys = infer::linear(mem, *layers_[l].wk, layers_[l].bk);
        cache.layers[l].values = infer::linear(mem, *layers_[l].wv, layers_[l].bv);
      }
    }
    return cache;
  }

  /// Consumes one token under condition row `c_k` (1 x d_cond) and returns next-token logits (1 x vocab).
  ad::Matrix step(DecodeCache& cache, int token, const ad::Matrix* c_k = nullptr) const {
    const auto& c = cfg_.stack;
    if (cache.length >= c.max_len) throw OOMGuard("decode position exceeds max_len " + std::to_string(c.max_len));
    if (token < 0 || token >= cfg_.vocab_size) throw VocabMiss("token id " + std::to_string(token));
    const bool conditioned = cfg_.mode != ConditioningMode::Unconditional && cfg_.mode != ConditioningMode::Memory;
    if (conditioned && (!c_k || c_k->cols() != cfg_.d_cond)) throw ShapeMismatch("step needs a condition row");
    ad::Matrix x = tok_->value.row(token);
    ad::Matrix h;
    if (cfg_.mode == ConditioningMode::PreAttention) {
      h.resize(1, c.d_model);
      h << x, *c_k * w_pre_->value;
    } else {
      h = in_proj_ ? ad::Matrix(x * in_proj_->value) : x;
    }
    h += pos_->value.row(cache.length);
    ad::Matrix e_k;
    if (cfg_.mode == ConditioningMode::InAttention) e_k = *c_k * w_in_->value;
    for (int l = 0; l < c.layers; ++l) {
      if (cfg_.mode == ConditioningMode::InAttention) h += e_k;
      h = infer::attention_step(layers_[l], h, cache.layers[l], c.heads, c.activation);
    }
    if (cfg_.mode == ConditioningMode::PostAttention) {
      ad::Matrix b = infer::linear(infer::prelu(infer::linear(*c_k, *b1_, b1b_), *bslope_), *b2_, b2b_);
      ad::Matrix gate_in(1, h.cols() + c_k->cols());
      gate_in << h, *c_k;
      ad::Matrix alpha = infer::sigmoid(infer::linear(infer::prelu(infer::linear(gate_in, *g1_, g1b_), *gslope_), *g2_, g2b_));
      h = ((1.0 - alpha.array()) * h.array() + alpha.array() * b.array()).matrix();
    }
    ++cache.length;
    return infer::linear(h, *out_w_, out_b_);
  }

 private:
  DecoderConfig cfg_;
  ad::Parameter* tok_ = nullptr;
  ad::Parameter* in_proj_ = nullptr;
  ad::Parameter* pos_ = nullptr;
  std::vector<LayerParams> layers_;
  ad::Parameter *w_pre_ = nullptr, *w_in_ = nullptr, *w_mem_ = nullptr;
  ad::Parameter *b1_ = nullptr, *b1b_ = nullptr, *bslope_ = nullptr, *b2_ = nullptr, *b2b_ = nullptr;
  ad::Parameter *g1_ = nullptr, *g1b_ = nullptr, *gslope_ = nullptr, *g2_ = nullptr, *g2b_ = nullptr;
  ad::Parameter *out_w_ = nullptr, *out_b_ = nullptr;
};

// ---- encoder -------------------------------------------------------------------

/// Bidirectional encoder applied to each bar independently; a bar's state sits above its Bar token.
class BarEncoder {
 public:
  BarEncoder() = default;
  BarEncoder(ad::ParameterStore& s, const std::string& prefix, const StackConfig& cfg, ad::Parameter& token_embedding,
             std::mt19937_64& rng)
      : cfg_(cfg), tok_(&token_embedding) {
    if (cfg.d_embed != cfg.d_model) in_proj_ = &detail::weight(s, prefix + "embed.proj", cfg.d_embed, cfg.d_model, cfg.init_std, rng);
    pos_ = &detail::weight(s, prefix + "embed.pos", cfg.max_len, cfg.d_model, cfg.init_std, rng);
    layers_ = make_layers(s, prefix, cfg, rng);
  }

  const StackConfig& config() const { return cfg_; }

  /// K x d bar states for a packed multi-bar sequence (positions restart per bar).
  ad::Var encode_bars(ad::Graph& g, const std::vector<int>& tokens, const std::vector<BarSpan>& spans) const {
    bar_index_of_tokens(spans, tokens.size());
    std::vector<int> positions(tokens.size());
    std::vector<int> firsts;
    for (const auto& s : spans) {
      if (s.size() > static_cast<std::size_t>(cfg_.max_len))
        throw OOMGuard("bar of " + std::to_string(s.size()) + " tokens exceeds encoder max_len");
      if (tokens[s.begin] != Vocab::kBar) throw EmptyBar("bar does not begin with a Bar token");
      for (std::size_t t = s.begin; t < s.end; ++t) positions[t] = static_cast<int>(t - s.begin);
      firsts.push_back(static_cast<int>(s.begin));
    }
    ad::Var x = ad::embedding(g.param(*tok_), tokens);
    ad::Var h = in_proj_ ? linear(g, x, *in_proj_) : x;
    h = ad::add(h, ad::embedding(g.param(*pos_), positions));
    auto mask = block_mask(spans, static_cast<Eigen::Index>(tokens.size()));
    for (const auto& lp : layers_) h = attention_block(g, lp, h, mask, cfg_.heads, cfg_.activation);
    return ad::embedding(h, firsts);
  }

  /// Single bar (must begin with Bar); returns 1 x d.
  ad::Matrix encode_bar(const std::vector<int>& bar_tokens) const {
    if (bar_tokens.empty()) throw EmptyBar("empty bar");
    ad::Graph g;
    return encode_bars(g, bar_tokens, {{0, bar_tokens.size()}}).value();
  }

 private:
  StackConfig cfg_;
  ad::Parameter* tok_ = nullptr;
  ad::Parameter* in_proj_ = nullptr;
  ad::Parameter* pos_ = nullptr;
  std::vector<LayerParams> layers_;
};

// ---- causal language model -------------------------------------------------------

/// Self-contained unconditional decoder with its own parameters (bar-embedding extractor, fluency LM).
class LanguageModel {
 public:
  LanguageModel(const StackConfig& cfg, int vocab_size, std::uint64_t seed) : vocab_size_(vocab_size) {
    std::mt19937_64 rng(seed);
    auto& emb = params_.add("lm.embed.token", ad::gaussian_matrix(vocab_size, cfg.d_embed, cfg.init_std, rng));
    DecoderConfig dc{cfg, ConditioningMode::Unconditional, 0, vocab_size};
    decoder_ = Decoder(params_, "lm.", dc, emb, rng);
  }
  LanguageModel(const LanguageModel&) = delete;
  LanguageModel& operator=(const LanguageModel&) = delete;
  LanguageModel(LanguageModel&&) noexcept = default;
  LanguageModel& operator=(LanguageModel&&) noexcept = default;

  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const Decoder& decoder() const { return decoder_; }
  const StackConfig& config() const { return decoder_.config().stack; }
  int vocab_size() const { return vocab_size_; }

  /// Mean next-token NLL; the last token predicts `final_target` (EOS by default, negative to skip).
  ad::Var loss(ad::Graph& g, const std::vector<int>& tokens, int final_target = Vocab::kEos) const {
    ad::Var logits = decoder_.forward(g, tokens, {{0, tokens.size()}}, std::nullopt);
    return ad::cross_entropy(logits, shifted_targets(tokens, final_target));
  }

  /// log p(x_t | x_<t) for t = 1..T-1 and, if final_target >= 0, for the final target.
  std::vector<double> token_log_probs(const std::vector<int>& tokens, int final_target = -1) const {
    DecodeCache cache = decoder_.start();
    std::vector<double> out;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      ad::Matrix logits = decoder_.step(cache, tokens[t]);
      int target = t + 1 < tokens.size() ? tokens[t + 1] : final_target;
      if (target < 0) break;
      double m = logits.maxCoeff();
      double lse = m + std::log((logits.array() - m).exp().sum());
      out.push_back(logits(0, target) - lse);
    }
    return out;
  }

  /// Average over the bar of the layer-`layer` hidden states (0 = embedding output).
  ad::Matrix bar_embedding(const std::vector<int>& bar_tokens, int layer) const {
    if (bar_tokens.empty()) throw EmptyBar("empty bar");
    if (layer < 0 || layer > config().layers) throw ConfigError("extractor layer out of range");
    ad::Graph g;
    ad::Var hidden;
    decoder_.forward(g, bar_tokens, {{0, bar_tokens.size()}}, std::nullopt, nullptr, layer, &hidden);
    return hidden.value().colwise().mean();
  }

  KeyValues config_kv() const {
    KeyValues kv;
    kv.set("model", std::string("language_model"));
    kv.set("vocab_size", vocab_size_);
    config().to_kv(kv, "stack.");
    return kv;
  }

  void save(const std::string& dir, long step, const ad::AdamState* opt = nullptr) const {
    save_checkpoint(dir, config_kv(), step, params_, opt);
  }

  static LanguageModel load(const std::string& dir, ad::AdamState* opt = nullptr) {
    CheckpointData data = load_checkpoint(dir);
    if (data.config.get("model", "") != "language_model") throw ConfigError(dir + " is not a language-model checkpoint");
    StackConfig sc;
    sc.from_kv(data.config, "stack.");
    LanguageModel lm(sc, data.config.require<int>("vocab_size"), 0);
    apply_checkpoint(data, lm.params_, opt);
    return lm;
  }

  static std::vector<int> shifted_targets(const std::vector<int>& tokens, int final_target) {
    std::vector<int> t(tokens.begin() + 1, tokens.end());
    t.push_back(final_target);
    return t;
  }

 private:
  ad::ParameterStore params_;
  Decoder decoder_;
  int vocab_size_ = 0;
};

}  // namespace barstyle
