#include "tsae/lm.hpp"

#include <algorithm>
#include <cmath>

#include "tsae/binary_io.hpp"
#include "tsae/errors.hpp"

namespace tsae {
namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
struct LnCache {
  BasicMatrix<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
BasicMatrix<T> layer_norm(const BasicMatrix<T>& x, const BasicMatrix<T>& gain,
                          const BasicMatrix<T>& bias, LnCache<T>* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  BasicMatrix<T> y(n, d);
  if (cache) {
    cache->xhat = BasicMatrix<T>(n, d);
    cache->rstd.assign(n, T{0});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto xr = x.row(i);
    T mean{0};
    for (T v : xr) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(kLnEps));
    auto yr = y.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xr[j] - mean) * rstd;
      if (cache) cache->xhat(i, j) = xh;
      yr[j] = xh * gain(0, j) + bias(0, j);
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

template <typename T>
BasicMatrix<T> layer_norm_backward(const BasicMatrix<T>& dy, const LnCache<T>& cache,
                                   const BasicMatrix<T>& gain, BasicMatrix<T>& dgain,
                                   BasicMatrix<T>& dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  BasicMatrix<T> dx(n, d);
  std::vector<T> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_dxhat{0}, mean_dxhat_xhat{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T g = dy(i, j);
      const T xh = cache.xhat(i, j);
      dgain(0, j) += g * xh;
      dbias(0, j) += g;
      dxhat[j] = g * gain(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh;
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = cache.rstd[i] * (dxhat[j] - mean_dxhat - cache.xhat(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

// tanh-approximated GELU, as in GPT-2.
template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T{0.5} * x * (T{1} + std::tanh(c * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T a = static_cast<T>(0.044715);
  const T inner = c * (x + a * x * x * x);
  const T th = std::tanh(inner);
  const T sech2 = T{1} - th * th;
  return T{0.5} * (T{1} + th) + T{0.5} * x * sech2 * c * (T{1} + T{3} * a * x * x);
}

template <typename T>
struct LayerCache {
  LnCache<T> ln1;
  BasicMatrix<T> h1, q, k, v;
  std::vector<BasicMatrix<T>> probs;  // per head, N x N lower triangle
  BasicMatrix<T> attn;                // concatenated head outputs
  LnCache<T> ln2;
  BasicMatrix<T> h2, u, g;
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  LnCache<T> lnf;
  BasicMatrix<T> hf;
};

template <typename T>
BasicMatrix<T> causal_attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k,
                                const BasicMatrix<T>& v, std::size_t n_heads,
                                std::vector<BasicMatrix<T>>* probs) {
  const std::size_t n = q.rows(), d = q.cols(), dh = d / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  BasicMatrix<T> out(n, d);
  if (probs) probs->assign(n_heads, BasicMatrix<T>(n, n));
  std::vector<T> p(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = q.data() + i * d + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = k.data() + j * d + off;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      T sum{0};
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      T* oi = out.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= sum;
        const T* vj = v.data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        if (probs) (*probs)[h](i, j) = p[j];
      }
    }
  }
  return out;
}

template <typename T>
void causal_attention_backward(const BasicMatrix<T>& dout, const BasicMatrix<T>& q,
                               const BasicMatrix<T>& k, const BasicMatrix<T>& v,
                               const std::vector<BasicMatrix<T>>& probs, std::size_t n_heads,
                               BasicMatrix<T>& dq, BasicMatrix<T>& dk, BasicMatrix<T>& dv) {
  const std::size_t n = q.rows(), d = q.cols(), dh = d / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  dq = BasicMatrix<T>(n, d);
  dk = BasicMatrix<T>(n, d);
  dv = BasicMatrix<T>(n, d);
  std::vector<T> dp(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    const auto& P = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      const T* doi = dout.data() + i * d + off;
      T dot_pdp{0};
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = v.data() + j * d + off;
        T* dvj = dv.data() + j * d + off;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) {
          s += doi[c] * vj[c];
          dvj[c] += P(i, j) * doi[c];
        }
        dp[j] = s;
        dot_pdp += P(i, j) * s;
      }
      const T* qi = q.data() + i * d + off;
      T* dqi = dq.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const T ds = P(i, j) * (dp[j] - dot_pdp) * scale;
        if (ds == T{0}) continue;
        const T* kj = k.data() + j * d + off;
        T* dkj = dk.data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
}

template <typename T>
void check_tokens(const LmConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ArgumentError("lm_forward: empty token sequence");
  if (tokens.size() > cfg.ctx_len) {
    throw RangeError("lm_forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds ctx_len " + std::to_string(cfg.ctx_len));
  }
  if (tokens[0] != 0) throw ArgumentError("lm_forward: sequence must start with BOS");
  for (TokenId t : tokens) {
    if (t >= cfg.vocab_size) throw RangeError("lm_forward: token id " + std::to_string(t) + " out of vocabulary");
  }
}

template <typename T>
BasicMatrix<T> embed(const LmParams<T>& params, std::span<const TokenId> tokens) {
  const std::size_t d = params.config.d_model;
  BasicMatrix<T> x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto te = params.tok_emb.row(tokens[i]);
    const auto pe = params.pos_emb.row(i);
    for (std::size_t j = 0; j < d; ++j) x(i, j) = te[j] + pe[j];
  }
  return x;
}

template <typename T>
BasicMatrix<T> run_layer(const LmLayer<T>& L, const LmConfig& cfg, const BasicMatrix<T>& x,
                         LayerCache<T>* cache) {
  LayerCache<T> local;
  LayerCache<T>& c = cache ? *cache : local;
  c.h1 = layer_norm(x, L.ln1_gain, L.ln1_bias, cache ? &c.ln1 : nullptr);
  c.q = matmul(c.h1, L.w_q);
  c.k = matmul(c.h1, L.w_k);
  c.v = matmul(c.h1, L.w_v);
  c.attn = causal_attention(c.q, c.k, c.v, cfg.n_heads, cache ? &c.probs : nullptr);
  BasicMatrix<T> x_mid = x;
  matmul_acc(c.attn, L.w_o, x_mid);
  c.h2 = layer_norm(x_mid, L.ln2_gain, L.ln2_bias, cache ? &c.ln2 : nullptr);
  c.u = matmul(c.h2, L.w_in);
  c.g = c.u;
  for (T& v : c.g.values()) v = gelu(v);
  BasicMatrix<T> out = x_mid;
  matmul_acc(c.g, L.w_out, out);
  return out;
}

template <typename T>
BasicMatrix<T> logits_of(const LmParams<T>& params, const BasicMatrix<T>& x,
                         ForwardCache<T>* cache) {
  BasicMatrix<T> hf = layer_norm(x, params.lnf_gain, params.lnf_bias, cache ? &cache->lnf : nullptr);
  BasicMatrix<T> logits = matmul(hf, params.unembed);
  if (cache) cache->hf = std::move(hf);
  return logits;
}

// Runs layers [from, n_layers) starting from residual x; records taps when
// requested.
template <typename T>
BasicMatrix<T> run_from(const LmParams<T>& params, BasicMatrix<T> x, std::size_t from,
                        std::vector<BasicMatrix<T>>* taps, ForwardCache<T>* cache) {
  for (std::size_t l = from; l < params.config.n_layers; ++l) {
    if (taps) taps->push_back(x);
    x = run_layer(params.layers[l], params.config, x, cache ? &cache->layers[l] : nullptr);
  }
  if (taps) taps->push_back(x);
  return logits_of(params, x, cache);
}

template <typename T>
BasicMatrix<T> forward_with_cache(const LmParams<T>& params, std::span<const TokenId> tokens,
                                  ForwardCache<T>& cache) {
  check_tokens<T>(params.config, tokens);
  cache.layers.resize(params.config.n_layers);
  return run_from<T>(params, embed(params, tokens), 0, nullptr, &cache);
}

template <typename T>
void backward(const LmParams<T>& params, std::span<const TokenId> tokens,
              const ForwardCache<T>& cache, const BasicMatrix<T>& dlogits, LmParams<T>& grad) {
  matmul_tn_acc(cache.hf, dlogits, grad.unembed);
  BasicMatrix<T> dhf = matmul_nt(dlogits, params.unembed);
  BasicMatrix<T> dx = layer_norm_backward(dhf, cache.lnf, params.lnf_gain, grad.lnf_gain, grad.lnf_bias);

  for (std::size_t l = params.config.n_layers; l-- > 0;) {
    const auto& L = params.layers[l];
    auto& G = grad.layers[l];
    const auto& c = cache.layers[l];

    // out = x_mid + gelu(h2 W_in) W_out
    BasicMatrix<T> dx_mid = dx;
    matmul_tn_acc(c.g, dx, G.w_out);
    BasicMatrix<T> du = matmul_nt(dx, L.w_out);
    for (std::size_t i = 0; i < du.size(); ++i) du.data()[i] *= gelu_grad(c.u.data()[i]);
    matmul_tn_acc(c.h2, du, G.w_in);
    const BasicMatrix<T> dh2 = matmul_nt(du, L.w_in);
    const BasicMatrix<T> dln2 = layer_norm_backward(dh2, c.ln2, L.ln2_gain, G.ln2_gain, G.ln2_bias);
    for (std::size_t i = 0; i < dx_mid.size(); ++i) dx_mid.data()[i] += dln2.data()[i];

    // x_mid = x + attn W_o
    BasicMatrix<T> dx_in = dx_mid;
    matmul_tn_acc(c.attn, dx_mid, G.w_o);
    const BasicMatrix<T> dattn = matmul_nt(dx_mid, L.w_o);
    BasicMatrix<T> dq, dk, dv;
    causal_attention_backward(dattn, c.q, c.k, c.v, c.probs, params.config.n_heads, dq, dk, dv);
    matmul_tn_acc(c.h1, dq, G.w_q);
    matmul_tn_acc(c.h1, dk, G.w_k);
    matmul_tn_acc(c.h1, dv, G.w_v);
    BasicMatrix<T> dh1 = matmul_nt(dq, L.w_q);
    const BasicMatrix<T> dh1k = matmul_nt(dk, L.w_k);
    const BasicMatrix<T> dh1v = matmul_nt(dv, L.w_v);
    for (std::size_t i = 0; i < dh1.size(); ++i) dh1.data()[i] += dh1k.data()[i] + dh1v.data()[i];
    const BasicMatrix<T> dln1 = layer_norm_backward(dh1, c.ln1, L.ln1_gain, G.ln1_gain, G.ln1_bias);
    for (std::size_t i = 0; i < dx_in.size(); ++i) dx_in.data()[i] += dln1.data()[i];
    dx = std::move(dx_in);
  }

  for (std::size_t i = 0; i < tokens.size(); ++i) {
    axpy(T{1}, std::span<const T>(dx.row(i)), grad.tok_emb.row(tokens[i]));
    axpy(T{1}, std::span<const T>(dx.row(i)), grad.pos_emb.row(i));
  }
}

}  // namespace

void LmConfig::validate() const {
  if (vocab_size < 2) throw ArgumentError("lm: vocab_size must be at least 2");
  if (d_model == 0 || n_heads == 0 || d_mlp == 0) throw ArgumentError("lm: zero-sized dimension");
  if (d_model % n_heads != 0) {
    throw ArgumentError("lm: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (ctx_len < 2) throw ArgumentError("lm: ctx_len must be at least 2");
}

template <typename T>
LmParams<T> LmParams<T>::zeros(const LmConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  LmParams<T> p;
  p.config = cfg;
  p.tok_emb = BasicMatrix<T>(cfg.vocab_size, d);
  p.pos_emb = BasicMatrix<T>(cfg.ctx_len, d);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.ln1_gain = BasicMatrix<T>(1, d);
    L.ln1_bias = BasicMatrix<T>(1, d);
    L.w_q = BasicMatrix<T>(d, d);
    L.w_k = BasicMatrix<T>(d, d);
    L.w_v = BasicMatrix<T>(d, d);
    L.w_o = BasicMatrix<T>(d, d);
    L.ln2_gain = BasicMatrix<T>(1, d);
    L.ln2_bias = BasicMatrix<T>(1, d);
    L.w_in = BasicMatrix<T>(d, cfg.d_mlp);
    L.w_out = BasicMatrix<T>(cfg.d_mlp, d);
  }
  p.lnf_gain = BasicMatrix<T>(1, d);
  p.lnf_bias = BasicMatrix<T>(1, d);
  p.unembed = BasicMatrix<T>(d, cfg.vocab_size);
  return p;
}

LmParams<float> init_lm(const LmConfig& cfg, Rng& rng, const LmInit& init) {
  auto p = LmParams<float>::zeros(cfg);
  auto fill_normal = [&](Matrix& m, double std) {
    for (float& v : m.values()) v = static_cast<float>(std * rng.normal());
  };
  // Residual-writing projections are scaled down with depth (GPT-2).
  const double out_std = init.weight_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  fill_normal(p.tok_emb, init.tok_emb_std);
  fill_normal(p.pos_emb, init.pos_emb_std);
  for (auto& L : p.layers) {
    L.ln1_gain.fill(1.0f);
    L.ln2_gain.fill(1.0f);
    fill_normal(L.w_q, init.weight_std);
    fill_normal(L.w_k, init.weight_std);
    fill_normal(L.w_v, init.weight_std);
    fill_normal(L.w_o, out_std);
    fill_normal(L.w_in, init.weight_std);
    fill_normal(L.w_out, out_std);
  }
  p.lnf_gain.fill(1.0f);
  fill_normal(p.unembed, init.weight_std);
  return p;
}

template <typename T>
LmOutput<T> lm_forward(const LmParams<T>& params, std::span<const TokenId> tokens) {
  check_tokens<T>(params.config, tokens);
  LmOutput<T> out;
  out.taps.reserve(params.config.n_layers + 1);
  out.logits = run_from<T>(params, embed(params, tokens), 0, &out.taps, nullptr);
  return out;
}

template <typename T>
BasicMatrix<T> lm_tap(const LmParams<T>& params, std::span<const TokenId> tokens, TapLocation p) {
  check_tokens<T>(params.config, tokens);
  if (p.layer > params.config.n_layers) {
    throw RangeError("lm_tap: tap location " + std::to_string(p.layer) + " beyond n_layers");
  }
  BasicMatrix<T> x = embed(params, tokens);
  for (std::size_t l = 0; l < p.layer; ++l) x = run_layer<T>(params.layers[l], params.config, x, nullptr);
  return x;
}

template <typename T>
BasicMatrix<T> patched_forward(const LmParams<T>& params, std::span<const TokenId> tokens,
                               TapLocation p, const BasicMatrix<T>& replacement) {
  check_tokens<T>(params.config, tokens);
  if (p.layer > params.config.n_layers) {
    throw RangeError("patched_forward: tap location " + std::to_string(p.layer) + " beyond n_layers");
  }
  if (replacement.rows() != tokens.size() || replacement.cols() != params.config.d_model) {
    throw DimensionError("patched_forward: replacement " + replacement.shape() + " for taps of shape " +
                         BasicMatrix<T>::shape_string(tokens.size(), params.config.d_model));
  }
  return run_from<T>(params, replacement, p.layer, nullptr, nullptr);
}

template <typename T>
double sequence_cross_entropy(const BasicMatrix<T>& logits, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw ArgumentError("cross-entropy needs at least two tokens");
  if (logits.rows() != tokens.size()) throw DimensionError("cross-entropy: logits/token length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const auto row = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    total += mx + std::log(sum) - static_cast<double>(row[tokens[i + 1]]);
  }
  return total / static_cast<double>(tokens.size() - 1);
}

std::vector<float> unigram_activation(const LmParams<float>& params, TokenId t, TapLocation p) {
  if (t >= params.config.vocab_size) throw RangeError("unigram_activation: token out of vocabulary");
  if (p.layer > params.config.n_layers) throw RangeError("unigram_activation: bad tap location");
  const TokenId seq[2] = {0, t};
  const auto tap = lm_tap(params, std::span<const TokenId>(seq, 2), p);
  const auto row = tap.row(1);
  return {row.begin(), row.end()};
}

Matrix unigram_table(const LmParams<float>& params, TapLocation p) {
  Matrix table(params.config.vocab_size, params.config.d_model);
  for (TokenId t = 0; t < params.config.vocab_size; ++t) {
    const auto a = unigram_activation(params, t, p);
    std::copy(a.begin(), a.end(), table.row(t).begin());
  }
  return table;
}

std::vector<float> truncated_activation(const LmParams<float>& params,
                                        std::span<const TokenId> tokens, std::size_t i,
                                        std::size_t n, TapLocation p) {
  if (i >= tokens.size()) throw RangeError("truncated_activation: position beyond sequence");
  if (n == 0) throw RangeError("truncated_activation: n must be at least 1");
  if (p.layer > params.config.n_layers) throw RangeError("truncated_activation: bad tap location");
  const std::size_t m = std::min(n, i);
  std::vector<TokenId> seq;
  seq.reserve(m + 1);
  seq.push_back(0);
  seq.insert(seq.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i + 1 - m),
             tokens.begin() + static_cast<std::ptrdiff_t>(i + 1));
  const auto tap = lm_tap(params, std::span<const TokenId>(seq), p);
  const auto row = tap.row(seq.size() - 1);
  return {row.begin(), row.end()};
}

template <typename T>
double lm_loss_and_grad(const LmParams<T>& params, const std::vector<std::vector<TokenId>>& batch,
                        LmParams<T>* grad) {
  if (batch.empty()) throw ArgumentError("lm_loss_and_grad: empty batch");
  std::size_t predictions = 0;
  for (const auto& s : batch) {
    if (s.size() < 2) throw ArgumentError("lm_loss_and_grad: sequences need at least two tokens");
    predictions += s.size() - 1;
  }
  const double inv = 1.0 / static_cast<double>(predictions);
  double total = 0.0;
  for (const auto& seq : batch) {
    ForwardCache<T> cache;
    const std::span<const TokenId> tokens(seq);
    BasicMatrix<T> logits = forward_with_cache(params, tokens, cache);
    const std::size_t n = tokens.size(), v = params.config.vocab_size;
    BasicMatrix<T> dlogits(n, v);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const auto row = logits.row(i);
      double mx = -std::numeric_limits<double>::infinity();
      for (T x : row) mx = std::max(mx, static_cast<double>(x));
      double sum = 0.0;
      for (T x : row) sum += std::exp(static_cast<double>(x) - mx);
      const double lse = mx + std::log(sum);
      const TokenId target = tokens[i + 1];
      total += lse - static_cast<double>(row[target]);
      for (std::size_t j = 0; j < v; ++j) {
        double g = std::exp(static_cast<double>(row[j]) - lse);
        if (j == target) g -= 1.0;
        dlogits(i, j) = static_cast<T>(g * inv);
      }
    }
    if (grad) backward(params, tokens, cache, dlogits, *grad);
  }
  return total * inv;
}

std::vector<TokenId> window_with_bos(std::span<const TokenId> ids, std::size_t start,
                                     std::size_t ctx_len) {
  const std::size_t len = ctx_len - 1;
  if (start + len > ids.size()) throw RangeError("training window runs past the end of the corpus");
  std::vector<TokenId> seq;
  seq.reserve(ctx_len);
  seq.push_back(0);
  seq.insert(seq.end(), ids.begin() + static_cast<std::ptrdiff_t>(start),
             ids.begin() + static_cast<std::ptrdiff_t>(start + len));
  return seq;
}

LmTrainResult lm_train(LmParams<float> params, std::span<const TokenId> corpus,
                       const LmTrainConfig& cfg, Rng& rng) {
  const std::size_t ctx = params.config.ctx_len;
  if (corpus.size() < ctx - 1) {
    throw RangeError("lm_train: corpus of " + std::to_string(corpus.size()) +
                     " tokens is shorter than one window");
  }
  if (cfg.batch == 0) throw ArgumentError("lm_train: batch must be positive");
  LmTrainResult result;
  if (cfg.steps == 0) {
    result.params = std::move(params);
    return result;
  }
  std::vector<AdamState<float>> states;
  params.visit([&](const std::string&, const Matrix& m) { states.emplace_back(m); });

  const std::size_t n_starts = corpus.size() - (ctx - 1) + 1;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<TokenId>> batch;
    batch.reserve(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      batch.push_back(window_with_bos(corpus, static_cast<std::size_t>(rng.below(n_starts)), ctx));
    }
    auto grad = LmParams<float>::zeros(params.config);
    const double loss = lm_loss_and_grad(params, batch, &grad);
    if (!std::isfinite(loss)) throw TrainingError("lm_train: non-finite loss", step);
    const double lr = lr_at(step, cfg.steps, cfg.lr);
    std::vector<Matrix*> grads;
    grad.visit([&](const std::string&, Matrix& m) { grads.push_back(&m); });
    std::size_t i = 0;
    params.visit([&](const std::string&, Matrix& m) {
      adam_step(m, *grads[i], states[i], lr);
      ++i;
    });
    if (cfg.log_interval && (step % cfg.log_interval == 0 || step + 1 == cfg.steps)) {
      result.loss_log.emplace_back(step, loss);
    }
  }
  result.params = std::move(params);
  return result;
}

std::string encode_lm(const LmParams<float>& params) {
  io::TaggedFile file;
  file.version = kLmFormatVersion;
  const auto& c = params.config;
  file.header = {{"vocab_size", std::to_string(c.vocab_size)}, {"d_model", std::to_string(c.d_model)},
                 {"n_layers", std::to_string(c.n_layers)},     {"n_heads", std::to_string(c.n_heads)},
                 {"d_mlp", std::to_string(c.d_mlp)},           {"ctx_len", std::to_string(c.ctx_len)}};
  params.visit([&](const std::string& name, const Matrix& m) { file.arrays.push_back({name, m}); });
  return io::encode_tagged("TSLM", file);
}

LmParams<float> decode_lm(std::string bytes, const std::string& context) {
  const auto file = io::decode_tagged(std::move(bytes), "TSLM", kLmFormatVersion, context);
  LmConfig cfg;
  auto count = [&](const char* key) { return io::parse_count(file.field(key), context + " " + key); };
  cfg.vocab_size = static_cast<std::uint32_t>(count("vocab_size"));
  cfg.d_model = count("d_model");
  cfg.n_layers = count("n_layers");
  cfg.n_heads = count("n_heads");
  cfg.d_mlp = count("d_mlp");
  cfg.ctx_len = count("ctx_len");
  try {
    cfg.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(context + ": invalid config: " + e.what());
  }
  auto params = LmParams<float>::zeros(cfg);
  std::size_t expected = 0;
  params.visit([&](const std::string& name, Matrix& m) {
    const Matrix& src = file.array(name);
    if (!src.same_shape(m)) throw FormatError(context + ": array '" + name + "' has shape " + src.shape());
    m = src;
    ++expected;
  });
  if (file.arrays.size() != expected) throw FormatError(context + ": unexpected extra arrays");
  return params;
}

void save_lm(const LmParams<float>& params, const std::filesystem::path& path) {
  io::write_file(path, encode_lm(params));
}

LmParams<float> load_lm(const std::filesystem::path& path) {
  return decode_lm(io::read_file(path), path.string());
}

template struct LmParams<float>;
template struct LmParams<double>;
template LmOutput<float> lm_forward(const LmParams<float>&, std::span<const TokenId>);
template LmOutput<double> lm_forward(const LmParams<double>&, std::span<const TokenId>);
template Matrix lm_tap(const LmParams<float>&, std::span<const TokenId>, TapLocation);
template MatrixD lm_tap(const LmParams<double>&, std::span<const TokenId>, TapLocation);
template Matrix patched_forward(const LmParams<float>&, std::span<const TokenId>, TapLocation, const Matrix&);
template MatrixD patched_forward(const LmParams<double>&, std::span<const TokenId>, TapLocation, const MatrixD&);
template double sequence_cross_entropy(const Matrix&, std::span<const TokenId>);
template double sequence_cross_entropy(const MatrixD&, std::span<const TokenId>);
template double lm_loss_and_grad(const LmParams<float>&, const std::vector<std::vector<TokenId>>&, LmParams<float>*);
template double lm_loss_and_grad(const LmParams<double>&, const std::vector<std::vector<TokenId>>&, LmParams<double>*);

}  // namespace tsae
