#pragma once

// Tower encoders mapping token sequences to k-dimensional embeddings.
//
//   Transformer: token + learned position embeddings, pre-LN blocks of
//                multi-head self-attention and a GELU feed-forward layer,
//                final LayerNorm, linear projection of the [CLS] state.
//   BowMlp:      mean of token embeddings over non-PAD positions, then
//                Linear -> tanh -> Linear.
//
// Parameters live in one flat array per tower so the optimizer, checkpoint
// writer and gradient checks can treat them uniformly. Weight matrices are
// stored [in, out] row-major.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "twotower/common.hpp"
#include "twotower/tensor.hpp"
#include "twotower/vocab.hpp"

namespace twotower {

enum class Arch { BowMlp, Transformer };

inline const char* arch_name(Arch a) { return a == Arch::BowMlp ? "BoW-MLP" : "Transformer"; }

inline Arch parse_arch(std::string_view s) {
  const auto l = detail::ascii_lower(s);
  if (l == "transformer") return Arch::Transformer;
  if (l == "bow-mlp" || l == "bowmlp" || l == "bow") return Arch::BowMlp;
  throw ConfigError("unknown encoder architecture '" + std::string(s) + "'");
}

struct EncoderConfig {
  Arch arch = Arch::Transformer;
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t emb_dim = 32;
  std::size_t vocab_size = 0;
  std::size_t query_max_len = 16;
  std::size_t doc_max_len = 48;
  bool share_towers = false;
  double ln_epsilon = 1e-12;

  void validate() const {
    if (vocab_size <= kNumSpecial) throw ConfigError("encoder: vocab_size too small");
    if (hidden_dim == 0) throw ConfigError("encoder: hidden_dim must be >= 1");
    if (emb_dim == 0) throw ConfigError("encoder: emb_dim must be >= 1");
    if (query_max_len < 2 || doc_max_len < 2) throw ConfigError("encoder: max lengths must be >= 2");
    if (!(ln_epsilon > 0)) throw ConfigError("encoder: ln_epsilon must be positive");
    if (arch == Arch::Transformer) {
      if (num_heads == 0 || hidden_dim % num_heads != 0)
        throw ConfigError("encoder: hidden_dim must be divisible by num_heads");
      if (ff_dim == 0) throw ConfigError("encoder: ff_dim must be >= 1");
    }
  }

  nlohmann::json to_json() const {
    return {{"arch", arch == Arch::BowMlp ? "bow-mlp" : "transformer"},
            {"num_layers", num_layers},
            {"hidden_dim", hidden_dim},
            {"num_heads", num_heads},
            {"ff_dim", ff_dim},
            {"emb_dim", emb_dim},
            {"vocab_size", vocab_size},
            {"query_max_len", query_max_len},
            {"doc_max_len", doc_max_len},
            {"share_towers", share_towers},
            {"ln_epsilon", ln_epsilon}};
  }

  /// Missing keys keep their defaults.
  static EncoderConfig from_json(const nlohmann::json& j) { return from_json(j, EncoderConfig{}); }
  static EncoderConfig from_json(const nlohmann::json& j, EncoderConfig c) {
    if (j.contains("arch")) c.arch = parse_arch(j["arch"].get<std::string>());
    auto get = [&](const char* k, auto& v) {
      if (j.contains(k)) v = j[k].get<std::decay_t<decltype(v)>>();
    };
    get("num_layers", c.num_layers);
    get("hidden_dim", c.hidden_dim);
    get("num_heads", c.num_heads);
    get("ff_dim", c.ff_dim);
    get("emb_dim", c.emb_dim);
    get("vocab_size", c.vocab_size);
    get("query_max_len", c.query_max_len);
    get("doc_max_len", c.doc_max_len);
    get("share_towers", c.share_towers);
    get("ln_epsilon", c.ln_epsilon);
    return c;
  }

  bool operator==(const EncoderConfig&) const = default;
};

enum class TensorInit { Weight, Bias, Gain };

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
  TensorInit init = TensorInit::Weight;
};

struct LayerSlots {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Offsets of every named tensor inside the flat parameter array.
struct ParamLayout {
  std::vector<TensorInfo> tensors;
  std::size_t total = 0;
  std::size_t tok = 0, pos = 0, lnf_g = 0, lnf_b = 0, proj_w = 0, proj_b = 0;
  std::size_t mlp_w1 = 0, mlp_b1 = 0, mlp_w2 = 0, mlp_b2 = 0;
  std::vector<LayerSlots> layers;

  std::size_t add(std::string name, std::vector<std::size_t> shape, TensorInit init) {
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    tensors.push_back({std::move(name), std::move(shape), total, count, init});
    total += count;
    return tensors.back().offset;
  }

  static ParamLayout make(const EncoderConfig& c, std::size_t max_len) {
    ParamLayout l;
    const std::size_t h = c.hidden_dim;
    l.tok = l.add("token_embeddings", {c.vocab_size, h}, TensorInit::Weight);
    if (c.arch == Arch::BowMlp) {
      l.mlp_w1 = l.add("mlp/w1", {h, h}, TensorInit::Weight);
      l.mlp_b1 = l.add("mlp/b1", {h}, TensorInit::Bias);
      l.mlp_w2 = l.add("mlp/w2", {h, c.emb_dim}, TensorInit::Weight);
      l.mlp_b2 = l.add("mlp/b2", {c.emb_dim}, TensorInit::Bias);
      return l;
    }
    l.pos = l.add("position_embeddings", {max_len, h}, TensorInit::Weight);
    for (std::size_t i = 0; i < c.num_layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + "/";
      LayerSlots s{};
      s.ln1_g = l.add(p + "ln1/gain", {h}, TensorInit::Gain);
      s.ln1_b = l.add(p + "ln1/shift", {h}, TensorInit::Bias);
      s.wq = l.add(p + "attn/wq", {h, h}, TensorInit::Weight);
      s.bq = l.add(p + "attn/bq", {h}, TensorInit::Bias);
      s.wk = l.add(p + "attn/wk", {h, h}, TensorInit::Weight);
      s.bk = l.add(p + "attn/bk", {h}, TensorInit::Bias);
      s.wv = l.add(p + "attn/wv", {h, h}, TensorInit::Weight);
      s.bv = l.add(p + "attn/bv", {h}, TensorInit::Bias);
      s.wo = l.add(p + "attn/wo", {h, h}, TensorInit::Weight);
      s.bo = l.add(p + "attn/bo", {h}, TensorInit::Bias);
      s.ln2_g = l.add(p + "ln2/gain", {h}, TensorInit::Gain);
      s.ln2_b = l.add(p + "ln2/shift", {h}, TensorInit::Bias);
      s.w1 = l.add(p + "ffn/w1", {h, c.ff_dim}, TensorInit::Weight);
      s.b1 = l.add(p + "ffn/b1", {c.ff_dim}, TensorInit::Bias);
      s.w2 = l.add(p + "ffn/w2", {c.ff_dim, h}, TensorInit::Weight);
      s.b2 = l.add(p + "ffn/b2", {h}, TensorInit::Bias);
      l.layers.push_back(s);
    }
    l.lnf_g = l.add("final_ln/gain", {h}, TensorInit::Gain);
    l.lnf_b = l.add("final_ln/shift", {h}, TensorInit::Bias);
    l.proj_w = l.add("proj/w", {h, c.emb_dim}, TensorInit::Weight);
    l.proj_b = l.add("proj/b", {c.emb_dim}, TensorInit::Bias);
    return l;
  }

  const TensorInfo* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

/// Parameters of one tower.
template <class T>
struct EncoderParams {
  EncoderConfig config;
  std::size_t max_len = 0;
  ParamLayout layout;
  std::vector<T> values;

  const T* at(std::size_t off) const { return values.data() + off; }
  T* at(std::size_t off) { return values.data() + off; }

  std::span<const T> tensor(std::string_view name) const {
    const auto* t = layout.find(name);
    if (!t) throw Error("no tensor named " + std::string(name));
    return {values.data() + t->offset, t->count};
  }

  bool operator==(const EncoderParams& o) const {
    return config == o.config && max_len == o.max_len && values == o.values;
  }
};

/// Truncated normal(0, 0.02) rejected outside +-2 sigma for weights and
/// embeddings, zero biases, unit LayerNorm gains.
template <class T>
EncoderParams<T> init_params(const EncoderConfig& config, std::size_t max_len, Rng& rng) {
  config.validate();
  if (max_len < 2) throw ConfigError("init_params: max_len must be >= 2");
  EncoderParams<T> p;
  p.config = config;
  p.max_len = max_len;
  p.layout = ParamLayout::make(config, max_len);
  p.values.assign(p.layout.total, T(0));
  constexpr double sigma = 0.02;
  for (const auto& t : p.layout.tensors) {
    T* v = p.values.data() + t.offset;
    switch (t.init) {
      case TensorInit::Gain: std::fill(v, v + t.count, T(1)); break;
      case TensorInit::Bias: break;
      case TensorInit::Weight:
        for (std::size_t i = 0; i < t.count; ++i) {
          double z;
          do {
            z = rng.normal();
          } while (std::abs(z) > 2.0);
          v[i] = static_cast<T>(sigma * z);
        }
        break;
    }
  }
  return p;
}

template <class T, class U>
EncoderParams<T> cast_params(const EncoderParams<U>& src) {
  EncoderParams<T> p;
  p.config = src.config;
  p.max_len = src.max_len;
  p.layout = src.layout;
  p.values.assign(src.values.begin(), src.values.end());
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <class T>
struct LayerCache {
  std::size_t nq = 0;  // rows carried forward (all, or just [CLS] in the top layer)
  std::vector<T> x_in, xhat1, rstd1, a, q, k, v, p, ctx, x_mid, xhat2, rstd2, f, h1, g;
};

/// Activations of one sequence, kept for the backward pass.
template <class T>
struct SeqCache {
  std::vector<TokenId> ids;
  std::vector<char> key_valid;
  std::size_t len = 0;
  std::size_t rows = 0;  // rows of the final hidden state
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_final, xhat_f, rstd_f, hidden;
  std::vector<T> mean, act;  // BoW-MLP
  std::size_t count = 0;     // BoW-MLP non-PAD tokens
  std::vector<T> emb;
};

namespace detail {

template <class T>
void check_sequence(const EncoderParams<T>& p, const std::vector<TokenId>& ids) {
  if (ids.size() > p.max_len)
    throw Error("sequence of length " + std::to_string(ids.size()) + " exceeds max_len " +
                std::to_string(p.max_len));
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= p.config.vocab_size)
      throw Error("token id " + std::to_string(id) + " outside vocabulary");
}

template <class T>
void transformer_layer_forward(const EncoderParams<T>& P, const LayerSlots& s, LayerCache<T>& c,
                               std::size_t L, const std::vector<char>& key_valid,
                               std::vector<T>& out) {
  const auto& cfg = P.config;
  const std::size_t h = cfg.hidden_dim, H = cfg.num_heads, dh = h / H, ff = cfg.ff_dim;
  const std::size_t nq = c.nq;
  const T eps = static_cast<T>(cfg.ln_epsilon);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  c.xhat1.resize(L * h);
  c.rstd1.resize(L);
  c.a.resize(L * h);
  kernels::layer_norm(c.x_in.data(), L, h, P.at(s.ln1_g), P.at(s.ln1_b), eps, c.xhat1.data(),
                      c.rstd1.data(), c.a.data());
  c.q.resize(nq * h);
  c.k.resize(L * h);
  c.v.resize(L * h);
  kernels::linear(c.a.data(), nq, h, P.at(s.wq), P.at(s.bq), h, c.q.data());
  kernels::linear(c.a.data(), L, h, P.at(s.wk), P.at(s.bk), h, c.k.data());
  kernels::linear(c.a.data(), L, h, P.at(s.wv), P.at(s.bv), h, c.v.data());

  c.p.assign(H * nq * L, T(0));
  c.ctx.assign(nq * h, T(0));
  for (std::size_t hd = 0; hd < H; ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      T* prow = c.p.data() + (hd * nq + i) * L;
      const T* qi = c.q.data() + i * h + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < L; ++j) {
        if (!key_valid[j]) continue;
        prow[j] = kernels::dot(qi, c.k.data() + j * h + off, dh) * scale;
        mx = std::max(mx, prow[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j < L; ++j) {
        if (!key_valid[j]) continue;
        prow[j] = std::exp(prow[j] - mx);
        sum += prow[j];
      }
      T* ci = c.ctx.data() + i * h + off;
      for (std::size_t j = 0; j < L; ++j) {
        if (!key_valid[j]) continue;
        prow[j] /= sum;
        kernels::axpy(prow[j], c.v.data() + j * h + off, ci, dh);
      }
    }
  }

  c.x_mid.resize(nq * h);
  kernels::linear(c.ctx.data(), nq, h, P.at(s.wo), P.at(s.bo), h, c.x_mid.data());
  for (std::size_t i = 0; i < nq * h; ++i) c.x_mid[i] += c.x_in[i];

  c.xhat2.resize(nq * h);
  c.rstd2.resize(nq);
  c.f.resize(nq * h);
  kernels::layer_norm(c.x_mid.data(), nq, h, P.at(s.ln2_g), P.at(s.ln2_b), eps, c.xhat2.data(),
                      c.rstd2.data(), c.f.data());
  c.h1.resize(nq * ff);
  c.g.resize(nq * ff);
  kernels::linear(c.f.data(), nq, h, P.at(s.w1), P.at(s.b1), ff, c.h1.data());
  for (std::size_t i = 0; i < nq * ff; ++i) c.g[i] = kernels::gelu(c.h1[i]);
  out.resize(nq * h);
  kernels::linear(c.g.data(), nq, ff, P.at(s.w2), P.at(s.b2), h, out.data());
  for (std::size_t i = 0; i < nq * h; ++i) out[i] += c.x_mid[i];
}

/// dout: [nq, h] gradient of the layer output. Writes dx: [L, h].
template <class T>
void transformer_layer_backward(const EncoderParams<T>& P, const LayerSlots& s,
                                const LayerCache<T>& c, std::size_t L,
                                const std::vector<char>& key_valid, const std::vector<T>& dout,
                                std::vector<T>& dx, std::vector<T>& G) {
  const auto& cfg = P.config;
  const std::size_t h = cfg.hidden_dim, H = cfg.num_heads, dh = h / H, ff = cfg.ff_dim;
  const std::size_t nq = c.nq;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  T* g = G.data();

  // feed-forward
  std::vector<T> dmid(dout);
  std::vector<T> dg(nq * ff);
  kernels::linear_backward(c.g.data(), nq, ff, P.at(s.w2), h, dout.data(), dg.data(), false,
                           g + s.w2, g + s.b2);
  for (std::size_t i = 0; i < nq * ff; ++i) dg[i] *= kernels::gelu_grad(c.h1[i]);
  std::vector<T> df(nq * h);
  kernels::linear_backward(c.f.data(), nq, h, P.at(s.w1), ff, dg.data(), df.data(), false,
                           g + s.w1, g + s.b1);
  kernels::layer_norm_backward(c.xhat2.data(), c.rstd2.data(), nq, h, P.at(s.ln2_g), df.data(),
                               dmid.data(), true, g + s.ln2_g, g + s.ln2_b);

  // attention output projection and residual
  dx.assign(L * h, T(0));
  std::copy(dmid.begin(), dmid.end(), dx.begin());
  std::vector<T> dctx(nq * h);
  kernels::linear_backward(c.ctx.data(), nq, h, P.at(s.wo), h, dmid.data(), dctx.data(), false,
                           g + s.wo, g + s.bo);

  std::vector<T> dq(nq * h, T(0)), dk(L * h, T(0)), dv(L * h, T(0));
  std::vector<T> dp(L);
  for (std::size_t hd = 0; hd < H; ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      const T* prow = c.p.data() + (hd * nq + i) * L;
      const T* dci = dctx.data() + i * h + off;
      T acc = 0;
      for (std::size_t j = 0; j < L; ++j) {
        if (!key_valid[j]) continue;
        dp[j] = kernels::dot(dci, c.v.data() + j * h + off, dh);
        kernels::axpy(prow[j], dci, dv.data() + j * h + off, dh);
        acc += prow[j] * dp[j];
      }
      const T* qi = c.q.data() + i * h + off;
      T* dqi = dq.data() + i * h + off;
      for (std::size_t j = 0; j < L; ++j) {
        if (!key_valid[j]) continue;
        const T ds = prow[j] * (dp[j] - acc) * scale;
        kernels::axpy(ds, c.k.data() + j * h + off, dqi, dh);
        kernels::axpy(ds, qi, dk.data() + j * h + off, dh);
      }
    }
  }

  std::vector<T> da(L * h, T(0));
  kernels::linear_backward(c.a.data(), nq, h, P.at(s.wq), h, dq.data(), da.data(), true,
                           g + s.wq, g + s.bq);
  kernels::linear_backward(c.a.data(), L, h, P.at(s.wk), h, dk.data(), da.data(), true,
                           g + s.wk, g + s.bk);
  kernels::linear_backward(c.a.data(), L, h, P.at(s.wv), h, dv.data(), da.data(), true,
                           g + s.wv, g + s.bv);
  kernels::layer_norm_backward(c.xhat1.data(), c.rstd1.data(), L, h, P.at(s.ln1_g), da.data(),
                               dx.data(), true, g + s.ln1_g, g + s.ln1_b);
}

}  // namespace detail

/// Encodes one sequence, filling `c`. With all_rows the final hidden state of
/// every position is kept (needed by the masked-LM head); otherwise only the
/// [CLS] row is carried through the top layer.
template <class T>
void forward_sequence(const EncoderParams<T>& P, const std::vector<TokenId>& input, SeqCache<T>& c,
                      bool all_rows = false) {
  detail::check_sequence(P, input);
  const auto& cfg = P.config;
  const auto& lay = P.layout;
  const std::size_t h = cfg.hidden_dim, k = cfg.emb_dim;
  c.ids = input;
  while (!c.ids.empty() && c.ids.back() == kPad) c.ids.pop_back();
  c.emb.assign(k, T(0));

  if (cfg.arch == Arch::BowMlp) {
    c.mean.assign(h, T(0));
    c.count = 0;
    for (TokenId id : c.ids) {
      if (id == kPad) continue;
      kernels::axpy(T(1), P.at(lay.tok + static_cast<std::size_t>(id) * h), c.mean.data(), h);
      ++c.count;
    }
    if (c.count) for (auto& v : c.mean) v /= static_cast<T>(c.count);
    c.act.resize(h);
    kernels::linear(c.mean.data(), 1, h, P.at(lay.mlp_w1), P.at(lay.mlp_b1), h, c.act.data());
    for (auto& v : c.act) v = std::tanh(v);
    kernels::linear(c.act.data(), 1, h, P.at(lay.mlp_w2), P.at(lay.mlp_b2), k, c.emb.data());
    return;
  }

  const std::size_t L = c.ids.size();
  if (L == 0) throw Error("cannot encode an empty sequence");
  c.len = L;
  c.key_valid.assign(L, 1);
  for (std::size_t j = 0; j < L; ++j) c.key_valid[j] = c.ids[j] != kPad;

  std::vector<T> x(L * h);
  for (std::size_t r = 0; r < L; ++r) {
    const T* te = P.at(lay.tok + static_cast<std::size_t>(c.ids[r]) * h);
    const T* pe = P.at(lay.pos + r * h);
    for (std::size_t i = 0; i < h; ++i) x[r * h + i] = te[i] + pe[i];
  }

  const std::size_t nl = cfg.num_layers;
  c.layers.resize(nl);
  c.rows = all_rows ? L : 1;
  for (std::size_t l = 0; l < nl; ++l) {
    auto& lc = c.layers[l];
    lc.nq = (l + 1 == nl) ? c.rows : L;
    lc.x_in = std::move(x);
    detail::transformer_layer_forward(P, lay.layers[l], lc, L, c.key_valid, x);
  }
  x.resize(c.rows * h);
  c.x_final = std::move(x);
  c.xhat_f.resize(c.rows * h);
  c.rstd_f.resize(c.rows);
  c.hidden.resize(c.rows * h);
  kernels::layer_norm(c.x_final.data(), c.rows, h, P.at(lay.lnf_g), P.at(lay.lnf_b),
                      static_cast<T>(cfg.ln_epsilon), c.xhat_f.data(), c.rstd_f.data(),
                      c.hidden.data());
  kernels::linear(c.hidden.data(), 1, h, P.at(lay.proj_w), P.at(lay.proj_b), k, c.emb.data());
}

/// Accumulates into G the gradient of <d_emb, emb> + <d_hidden, hidden>.
/// Either span may be empty.
template <class T>
void backward_sequence(const EncoderParams<T>& P, const SeqCache<T>& c, std::span<const T> d_emb,
                       std::span<const T> d_hidden, std::vector<T>& G) {
  const auto& cfg = P.config;
  const auto& lay = P.layout;
  const std::size_t h = cfg.hidden_dim, k = cfg.emb_dim;
  T* g = G.data();

  if (cfg.arch == Arch::BowMlp) {
    if (d_emb.empty() || c.count == 0) return;
    std::vector<T> da(h);
    kernels::linear_backward(c.act.data(), 1, h, P.at(lay.mlp_w2), k, d_emb.data(), da.data(),
                             false, g + lay.mlp_w2, g + lay.mlp_b2);
    for (std::size_t i = 0; i < h; ++i) da[i] *= T(1) - c.act[i] * c.act[i];
    std::vector<T> dmean(h);
    kernels::linear_backward(c.mean.data(), 1, h, P.at(lay.mlp_w1), h, da.data(), dmean.data(),
                             false, g + lay.mlp_w1, g + lay.mlp_b1);
    const T inv = T(1) / static_cast<T>(c.count);
    for (TokenId id : c.ids) {
      if (id == kPad) continue;
      kernels::axpy(inv, dmean.data(), g + lay.tok + static_cast<std::size_t>(id) * h, h);
    }
    return;
  }

  const std::size_t L = c.len;
  std::vector<T> dh(c.rows * h, T(0));
  if (!d_hidden.empty()) {
    if (d_hidden.size() != c.rows * h) throw Error("backward: d_hidden shape mismatch");
    std::copy(d_hidden.begin(), d_hidden.end(), dh.begin());
  }
  if (!d_emb.empty()) {
    if (d_emb.size() != k) throw Error("backward: d_emb shape mismatch");
    kernels::linear_backward(c.hidden.data(), 1, h, P.at(lay.proj_w), k, d_emb.data(), dh.data(),
                             true, g + lay.proj_w, g + lay.proj_b);
  }
  std::vector<T> dx(c.rows * h);
  kernels::layer_norm_backward(c.xhat_f.data(), c.rstd_f.data(), c.rows, h, P.at(lay.lnf_g),
                               dh.data(), dx.data(), false, g + lay.lnf_g, g + lay.lnf_b);
  if (cfg.num_layers == 0) dx.resize(L * h, T(0));
  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    std::vector<T> dprev;
    detail::transformer_layer_backward(P, lay.layers[l], c.layers[l], L, c.key_valid, dx, dprev,
                                       G);
    dx = std::move(dprev);
  }
  for (std::size_t r = 0; r < L; ++r) {
    if (c.ids[r] == kPad) continue;
    kernels::axpy(T(1), dx.data() + r * h, g + lay.tok + static_cast<std::size_t>(c.ids[r]) * h, h);
    kernels::axpy(T(1), dx.data() + r * h, g + lay.pos + r * h, h);
  }
}

/// Embeddings [B, k]; row order follows the batch.
template <class T>
Matrix<T> encode(const EncoderParams<T>& P, std::span<const TokenSeq> batch,
                 std::size_t threads = 1) {
  Matrix<T> out(batch.size(), P.config.emb_dim);
  parallel_chunks(batch.size(), threads, [&](std::size_t b, std::size_t e, std::size_t) {
    SeqCache<T> c;
    for (std::size_t i = b; i < e; ++i) {
      forward_sequence(P, batch[i].ids, c);
      std::copy(c.emb.begin(), c.emb.end(), out.row(i).begin());
    }
  });
  return out;
}

/// Forward pass that keeps activations for a later backward_batch.
template <class T>
Matrix<T> forward_batch(const EncoderParams<T>& P, std::span<const TokenSeq> batch,
                        std::vector<SeqCache<T>>& caches, std::size_t threads = 1) {
  caches.resize(batch.size());
  Matrix<T> out(batch.size(), P.config.emb_dim);
  parallel_chunks(batch.size(), threads, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i) {
      forward_sequence(P, batch[i].ids, caches[i]);
      std::copy(caches[i].emb.begin(), caches[i].emb.end(), out.row(i).begin());
    }
  });
  return out;
}

/// Gradient of sum_{b,j} grad_out[b,j] * emb[b,j] w.r.t. every parameter.
/// Worker shards are reduced in shard order.
template <class T>
std::vector<T> backward_batch(const EncoderParams<T>& P, const std::vector<SeqCache<T>>& caches,
                              const Matrix<T>& grad_out, std::size_t threads = 1) {
  if (grad_out.rows != caches.size() || grad_out.cols != P.config.emb_dim)
    throw Error("backward: grad_out shape mismatch");
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, caches.size()));
  std::vector<std::vector<T>> shards(workers);
  parallel_chunks(caches.size(), workers, [&](std::size_t b, std::size_t e, std::size_t w) {
    shards[w].assign(P.values.size(), T(0));
    for (std::size_t i = b; i < e; ++i)
      backward_sequence<T>(P, caches[i], grad_out.row(i), {}, shards[w]);
  });
  std::vector<T> G(P.values.size(), T(0));
  for (const auto& s : shards)
    if (!s.empty())
      for (std::size_t i = 0; i < G.size(); ++i) G[i] += s[i];
  return G;
}

/// Recomputes the forward pass, then returns parameter gradients.
template <class T>
std::vector<T> backward(const EncoderParams<T>& P, std::span<const TokenSeq> batch,
                        const Matrix<T>& grad_out, std::size_t threads = 1) {
  if (grad_out.rows != batch.size() || grad_out.cols != P.config.emb_dim)
    throw Error("backward: grad_out shape mismatch");
  std::vector<SeqCache<T>> caches;
  forward_batch(P, batch, caches, threads);
  return backward_batch(P, caches, grad_out, threads);
}

/// Inner-product score.
template <class T>
T score(std::span<const T> q, std::span<const T> d) {
  if (q.size() != d.size())
    throw Error("score: dimension mismatch (" + std::to_string(q.size()) + " vs " +
                std::to_string(d.size()) + ")");
  return kernels::dot(q.data(), d.data(), q.size());
}

}  // namespace twotower
