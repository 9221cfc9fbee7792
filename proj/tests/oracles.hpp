#pragma once

// Independent reference implementations used as test oracles: a naive
// 64-bit transformer forward, a direct SAE loss, and central finite
// differences against the library's hand-derived gradients.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tsae/lm.hpp"
#include "tsae/rng.hpp"
#include "tsae/sae.hpp"

namespace oracle {

using tsae::MatrixD;
using tsae::TokenId;
using Vec = std::vector<double>;

inline Vec layer_norm(const Vec& x, const MatrixD& g, const MatrixD& b) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  Vec y(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) y[j] = (x[j] - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
  return y;
}

// y = x W for a row vector x.
inline Vec vecmat(const Vec& x, const MatrixD& w) {
  Vec y(w.cols(), 0.0);
  for (std::size_t c = 0; c < w.cols(); ++c)
    for (std::size_t r = 0; r < w.rows(); ++r) y[c] += x[r] * w(r, c);
  return y;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

/// Logits and the residual stream entering each layer, position by position.
struct RefOut {
  std::vector<Vec> logits;
  std::vector<std::vector<Vec>> taps;  // [layer][position]
};

inline RefOut lm_forward(const tsae::LmParams<double>& P, const std::vector<TokenId>& toks) {
  const auto& cfg = P.config;
  const std::size_t n = toks.size(), d = cfg.d_model, H = cfg.n_heads, dh = d / H;
  std::vector<Vec> x(n, Vec(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] = P.tok_emb(toks[i], j) + P.pos_emb(i, j);
  RefOut out;
  for (const auto& L : P.layers) {
    out.taps.push_back(x);
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec h = layer_norm(x[i], L.ln1_gain, L.ln1_bias);
      q[i] = vecmat(h, L.w_q);
      k[i] = vecmat(h, L.w_k);
      v[i] = vecmat(h, L.w_v);
    }
    std::vector<Vec> attn(n, Vec(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        Vec s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          double a = 0.0;
          for (std::size_t c = 0; c < dh; ++c) a += q[i][h * dh + c] * k[j][h * dh + c];
          s[j] = a / std::sqrt(static_cast<double>(dh));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < dh; ++c) attn[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Vec o = vecmat(attn[i], L.w_o);
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[j];
      Vec u = vecmat(layer_norm(x[i], L.ln2_gain, L.ln2_bias), L.w_in);
      for (double& e : u) e = gelu(e);
      const Vec m = vecmat(u, L.w_out);
      for (std::size_t j = 0; j < d; ++j) x[i][j] += m[j];
    }
  }
  out.taps.push_back(x);
  for (std::size_t i = 0; i < n; ++i) out.logits.push_back(vecmat(layer_norm(x[i], P.lnf_gain, P.lnf_bias), P.unembed));
  return out;
}

inline double lm_loss(const tsae::LmParams<double>& P, const std::vector<std::vector<TokenId>>& batch) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : batch) {
    const auto out = lm_forward(P, seq);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const auto& l = out.logits[i];
      const double mx = *std::max_element(l.begin(), l.end());
      double z = 0.0;
      for (double e : l) z += std::exp(e - mx);
      total += mx + std::log(z) - l[seq[i + 1]];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Encoder output straight from the definition: ReLU, then keep the k
/// largest entries (lower index wins ties).
inline Vec sae_encode(const tsae::SaeParams<double>& P, const Vec& a, const tsae::SaeConfig& cfg) {
  const std::size_t d = a.size(), F = P.n_features();
  Vec f(F);
  for (std::size_t j = 0; j < F; ++j) {
    double z = P.b_enc(0, j);
    for (std::size_t c = 0; c < d; ++c) z += (a[c] - P.b_dec(0, c)) * P.w_enc(c, j);
    f[j] = std::max(z, 0.0);
  }
  if (cfg.variant == tsae::SaeVariant::topk) {
    std::vector<std::size_t> idx(F);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return f[x] > f[y]; });
    for (std::size_t r = cfg.k; r < F; ++r) f[idx[r]] = 0.0;
  }
  return f;
}

inline double sae_loss(const tsae::SaeParams<double>& P, const MatrixD& acts, const std::vector<TokenId>& toks,
                       const tsae::SaeConfig& cfg) {
  const std::size_t d = acts.cols(), F = P.n_features();
  double total = 0.0;
  for (std::size_t r = 0; r < acts.rows(); ++r) {
    const Vec a(acts.row(r).begin(), acts.row(r).end());
    const Vec f = sae_encode(P, a, cfg);
    double se = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double rec = P.b_dec(0, c);
      for (std::size_t j = 0; j < F; ++j) rec += f[j] * P.w_dec(j, c);
      if (P.w_lookup) rec += (*P.w_lookup)(toks[r], c);
      se += (a[c] - rec) * (a[c] - rec);
    }
    total += se / static_cast<double>(d);
    if (cfg.variant == tsae::SaeVariant::vanilla) {
      for (std::size_t j = 0; j < F; ++j) {
        double nr = 0.0;
        for (std::size_t c = 0; c < d; ++c) nr += P.w_dec(j, c) * P.w_dec(j, c);
        total += cfg.lambda * f[j] * std::sqrt(nr);
      }
    }
  }
  return total / static_cast<double>(acts.rows());
}

inline std::vector<bool> active_mask(const tsae::SaeParams<double>& P, const MatrixD& acts,
                                     const tsae::SaeConfig& cfg) {
  std::vector<bool> m;
  for (std::size_t r = 0; r < acts.rows(); ++r) {
    const Vec f = sae_encode(P, Vec(acts.row(r).begin(), acts.row(r).end()), cfg);
    for (double v : f) m.push_back(v > 0.0);
  }
  return m;
}

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // entries whose perturbation moved a ReLU/top-k boundary
  std::string worst;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

inline void record(GradCheck& gc, double a, double n, const std::string& name) {
  const double e = rel_err(a, n);
  ++gc.checked;
  if (e > gc.max_rel_err) {
    gc.max_rel_err = e;
    gc.worst = name;
  }
}

/// Tiny 2-layer model with every tensor randomized (layer-norm gains included).
inline tsae::LmParams<double> tiny_lm(std::uint64_t seed) {
  tsae::LmConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_mlp = 16;
  cfg.ctx_len = 6;
  auto P = tsae::LmParams<double>::zeros(cfg);
  tsae::Rng rng(seed);
  P.visit([&](const std::string& name, MatrixD& m) {
    const bool gain = name.find("gain") != std::string::npos;
    for (double& v : m.values()) v = gain ? 1.0 + 0.2 * rng.normal() : 0.5 * rng.normal();
  });
  return P;
}

inline GradCheck lm_grad_check(std::uint64_t seed) {
  auto P = tiny_lm(seed);
  const std::vector<std::vector<TokenId>> batch{{0, 3, 7, 1, 9, 4}, {0, 10, 2, 2, 5, 8}};
  auto G = tsae::LmParams<double>::zeros(P.config);
  tsae::lm_loss_and_grad(P, batch, &G);
  std::vector<MatrixD*> grads;
  G.visit([&](const std::string&, MatrixD& m) { grads.push_back(&m); });
  GradCheck gc;
  const double h = 1e-5;
  std::size_t t = 0;
  P.visit([&](const std::string& name, MatrixD& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double keep = m.values()[i];
      m.values()[i] = keep + h;
      const double up = lm_loss(P, batch);
      m.values()[i] = keep - h;
      const double dn = lm_loss(P, batch);
      m.values()[i] = keep;
      record(gc, grads[t]->values()[i], (up - dn) / (2 * h), name + "[" + std::to_string(i) + "]");
    }
    ++t;
  });
  return gc;
}

/// d_model 8, 16 features, 12 rows over 5 tokens.
inline GradCheck sae_grad_check(tsae::SaeVariant variant, bool tokenized, std::uint64_t seed) {
  tsae::SaeConfig cfg;
  cfg.d_model = 8;
  cfg.expansion = 2;
  cfg.variant = variant;
  cfg.k = 4;
  cfg.lambda = variant == tsae::SaeVariant::vanilla ? 0.05 : 0.0;
  cfg.tokenized = tokenized;
  tsae::Rng rng(seed);
  const std::size_t V = 5, B = 12;
  tsae::Matrix table(V, 8);
  for (float& v : table.values()) v = static_cast<float>(rng.normal());
  auto sae = tsae::init_sae(cfg, tokenized ? &table : nullptr, rng);
  auto P = sae.params.cast<double>();
  P.visit([&](const std::string&, MatrixD& m) {
    for (double& v : m.values()) v += 0.3 * rng.normal();
  });
  MatrixD acts(B, 8);
  for (double& v : acts.values()) v = 2.0 * rng.normal();
  std::vector<TokenId> toks(B);
  for (auto& t : toks) t = static_cast<TokenId>(rng.below(V - 1));  // id V-1 never appears

  const auto G = tsae::backward(P, acts, toks, cfg);
  std::vector<const MatrixD*> grads;
  G.visit([&](const std::string&, const MatrixD& m) { grads.push_back(&m); });
  GradCheck gc;
  const double h = 1e-6;
  std::size_t t = 0;
  P.visit([&](const std::string& name, MatrixD& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double keep = m.values()[i];
      m.values()[i] = keep + h;
      const double up = sae_loss(P, acts, toks, cfg);
      const auto mask_up = active_mask(P, acts, cfg);
      m.values()[i] = keep - h;
      const double dn = sae_loss(P, acts, toks, cfg);
      const auto mask_dn = active_mask(P, acts, cfg);
      m.values()[i] = keep;
      if (mask_up != mask_dn) {
        ++gc.skipped;
        continue;
      }
      record(gc, grads[t]->values()[i], (up - dn) / (2 * h), name + "[" + std::to_string(i) + "]");
    }
    ++t;
  });
  return gc;
}

}  // namespace oracle
