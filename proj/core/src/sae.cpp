#include "tsae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsae/binary_io.hpp"
#include "tsae/errors.hpp"

namespace tsae {
namespace {

template <typename T>
void check_acts(const SaeParams<T>& params, const BasicMatrix<T>& acts, const char* what) {
  if (acts.cols() != params.d_model()) {
    throw DimensionError(std::string(what) + ": activation rows of width " + std::to_string(acts.cols()) +
                         " for an SAE with d_model " + std::to_string(params.d_model()));
  }
}

template <typename T>
void check_tokens(const SaeParams<T>& params, std::span<const TokenId> tokens, std::size_t rows,
                  const char* what) {
  if (!params.tokenized()) return;
  if (tokens.size() != rows) {
    throw ArgumentError(std::string(what) + ": tokenized SAE needs one token id per row (" +
                        std::to_string(tokens.size()) + " ids for " + std::to_string(rows) + " rows)");
  }
  for (TokenId t : tokens) {
    if (t >= params.w_lookup->rows()) throw RangeError(std::string(what) + ": token id outside lookup table");
  }
}

// Zeroes all but the k largest entries (ties toward lower index) of a
// non-negative row.
template <typename T>
void keep_top_k(std::span<T> row, std::size_t k, std::vector<std::uint32_t>& scratch) {
  scratch.clear();
  for (std::size_t i = 0; i < row.size(); ++i)
    if (row[i] > T{0}) scratch.push_back(static_cast<std::uint32_t>(i));
  if (scratch.size() <= k) return;
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    return row[a] != row[b] ? row[a] > row[b] : a < b;
  };
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k), scratch.end(), better);
  for (std::size_t j = k; j < scratch.size(); ++j) row[scratch[j]] = T{0};
}

template <typename T>
std::vector<T> decoder_row_norms(const BasicMatrix<T>& w_dec) {
  std::vector<T> norms(w_dec.rows());
  for (std::size_t i = 0; i < w_dec.rows(); ++i) norms[i] = norm2(std::span<const T>(w_dec.row(i)));
  return norms;
}

template <typename T>
BasicMatrix<T> centered(const SaeParams<T>& params, const BasicMatrix<T>& acts) {
  BasicMatrix<T> x = acts;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= params.b_dec(0, c);
  }
  return x;
}

}  // namespace

std::string to_string(SaeVariant v) { return v == SaeVariant::vanilla ? "vanilla" : "topk"; }

SaeVariant parse_variant(const std::string& s) {
  if (s == "vanilla") return SaeVariant::vanilla;
  if (s == "topk") return SaeVariant::topk;
  throw ArgumentError("unknown SAE variant '" + s + "' (expected vanilla or topk)");
}

void SaeConfig::validate() const {
  if (d_model == 0 || expansion == 0) throw ArgumentError("sae: d_model and expansion must be positive");
  if (variant == SaeVariant::topk && (k == 0 || k > n_features())) {
    throw ArgumentError("sae: k=" + std::to_string(k) + " must lie in [1, n_features=" +
                        std::to_string(n_features()) + "]");
  }
  if (!(lambda >= 0.0)) throw ArgumentError("sae: lambda must be non-negative");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("sae: alpha must lie in [0, 1]");
  if (!(lookup_lr_multiplier > 0.0)) throw ArgumentError("sae: lookup_lr_multiplier must be positive");
  if (lookup_truncation && *lookup_truncation == 0) throw ArgumentError("sae: lookup_truncation must be positive");
}

template <typename T>
SaeParams<T> SaeParams<T>::zeros_like(const SaeParams& like) {
  SaeParams out;
  out.w_enc = BasicMatrix<T>(like.w_enc.rows(), like.w_enc.cols());
  out.b_enc = BasicMatrix<T>(like.b_enc.rows(), like.b_enc.cols());
  out.w_dec = BasicMatrix<T>(like.w_dec.rows(), like.w_dec.cols());
  out.b_dec = BasicMatrix<T>(like.b_dec.rows(), like.b_dec.cols());
  if (like.w_lookup) out.w_lookup = BasicMatrix<T>(like.w_lookup->rows(), like.w_lookup->cols());
  return out;
}

template <typename T>
BasicMatrix<T> encode_batch(const SaeParams<T>& params, const BasicMatrix<T>& acts, const SaeConfig& cfg) {
  check_acts(params, acts, "encode");
  BasicMatrix<T> z = matmul(centered(params, acts), params.w_enc);
  std::vector<std::uint32_t> scratch;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      const T v = row[j] + params.b_enc(0, j);
      row[j] = v > T{0} ? v : T{0};
    }
    if (cfg.variant == SaeVariant::topk) keep_top_k(row, cfg.k, scratch);
  }
  return z;
}

template <typename T>
std::vector<T> encode(const SaeParams<T>& params, std::span<const T> a, const SaeConfig& cfg) {
  BasicMatrix<T> acts(1, a.size(), std::vector<T>(a.begin(), a.end()));
  const auto f = encode_batch(params, acts, cfg);
  return {f.values().begin(), f.values().end()};
}

template <typename T>
BasicMatrix<T> decode_batch(const SaeParams<T>& params, const BasicMatrix<T>& features,
                            std::span<const TokenId> tokens, const SaeConfig&) {
  if (features.cols() != params.n_features()) {
    throw DimensionError("decode: feature rows of width " + std::to_string(features.cols()) +
                         " for an SAE with " + std::to_string(params.n_features()) + " features");
  }
  check_tokens(params, tokens, features.rows(), "decode");
  BasicMatrix<T> out(features.rows(), params.d_model());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = params.b_dec(0, c);
  }
  matmul_acc(features, params.w_dec, out);
  if (params.tokenized()) {
    for (std::size_t r = 0; r < out.rows(); ++r) {
      axpy(T{1}, std::span<const T>(params.w_lookup->row(tokens[r])), out.row(r));
    }
  }
  return out;
}

template <typename T>
std::vector<T> decode(const SaeParams<T>& params, std::span<const T> f, std::optional<TokenId> token,
                      const SaeConfig& cfg) {
  if (params.tokenized() && !token) throw ArgumentError("decode: tokenized SAE requires a token id");
  BasicMatrix<T> feats(1, f.size(), std::vector<T>(f.begin(), f.end()));
  std::vector<TokenId> toks;
  if (token) toks.push_back(*token);
  const auto out = decode_batch(params, feats, std::span<const TokenId>(toks), cfg);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
SaeBatch<T> forward_batch(const SaeParams<T>& params, const BasicMatrix<T>& acts,
                          std::span<const TokenId> tokens, const SaeConfig& cfg) {
  check_acts(params, acts, "forward");
  check_tokens(params, tokens, acts.rows(), "forward");
  SaeBatch<T> out;
  out.features = encode_batch(params, acts, cfg);
  out.recon = decode_batch(params, out.features, tokens, cfg);
  const std::size_t d = params.d_model();
  const std::vector<T> norms = decoder_row_norms(params.w_dec);
  double mse = 0.0, sparsity = 0.0;
  for (std::size_t r = 0; r < acts.rows(); ++r) {
    double se = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double e = static_cast<double>(acts(r, c)) - static_cast<double>(out.recon(r, c));
      se += e * e;
    }
    mse += se / static_cast<double>(d);
    if (cfg.variant == SaeVariant::vanilla) {
      double s = 0.0;
      const auto f = out.features.row(r);
      for (std::size_t i = 0; i < f.size(); ++i)
        if (f[i] != T{0}) s += static_cast<double>(f[i]) * static_cast<double>(norms[i]);
      sparsity += cfg.lambda * s;
    }
  }
  const double n = acts.rows() ? static_cast<double>(acts.rows()) : 1.0;
  out.loss.mse_part = mse / n;
  out.loss.sparsity_part = sparsity / n;
  out.loss.total = out.loss.mse_part + out.loss.sparsity_part;
  return out;
}

template <typename T>
SaeLoss loss(const SaeParams<T>& params, std::span<const T> a, std::optional<TokenId> token,
             const SaeConfig& cfg) {
  if (params.tokenized() && !token) throw ArgumentError("loss: tokenized SAE requires a token id");
  BasicMatrix<T> acts(1, a.size(), std::vector<T>(a.begin(), a.end()));
  std::vector<TokenId> toks;
  if (token) toks.push_back(*token);
  return forward_batch(params, acts, std::span<const TokenId>(toks), cfg).loss;
}

template <typename T>
SaeParams<T> backward(const SaeParams<T>& params, const BasicMatrix<T>& acts,
                      std::span<const TokenId> tokens, const SaeConfig& cfg, const SaeBatch<T>& fwd) {
  const std::size_t B = acts.rows(), d = params.d_model(), F = params.n_features();
  if (B == 0) throw ArgumentError("backward: empty batch");
  SaeParams<T> g = SaeParams<T>::zeros_like(params);
  const T inv = T{1} / static_cast<T>(B);
  const T mse_scale = T{2} / static_cast<T>(d) * inv;

  BasicMatrix<T> d_recon(B, d);
  for (std::size_t i = 0; i < d_recon.size(); ++i) {
    d_recon.data()[i] = mse_scale * (fwd.recon.data()[i] - acts.data()[i]);
  }

  matmul_tn_acc(fwd.features, d_recon, g.w_dec);
  for (std::size_t r = 0; r < B; ++r) {
    axpy(T{1}, std::span<const T>(d_recon.row(r)), g.b_dec.row(0));
    if (params.tokenized()) axpy(T{1}, std::span<const T>(d_recon.row(r)), g.w_lookup->row(tokens[r]));
  }

  const bool penalized = cfg.variant == SaeVariant::vanilla && cfg.lambda > 0.0;
  const std::vector<T> norms = decoder_row_norms(params.w_dec);
  const T lam = static_cast<T>(cfg.lambda);
  if (penalized) {
    // d/dW_dec[i] of λ f_i ||W_dec[i]|| = λ f_i W_dec[i] / ||W_dec[i]||.
    std::vector<T> feature_mass(F, T{0});
    for (std::size_t r = 0; r < B; ++r) {
      const auto f = fwd.features.row(r);
      for (std::size_t i = 0; i < F; ++i) feature_mass[i] += f[i];
    }
    for (std::size_t i = 0; i < F; ++i) {
      if (feature_mass[i] == T{0} || norms[i] == T{0}) continue;
      axpy(lam * inv * feature_mass[i] / norms[i], std::span<const T>(params.w_dec.row(i)), g.w_dec.row(i));
    }
  }

  // Pre-activation gradient, nonzero only where the feature fired.
  BasicMatrix<T> dz(B, F);
  for (std::size_t r = 0; r < B; ++r) {
    const auto f = fwd.features.row(r);
    const auto dr = std::span<const T>(d_recon.row(r));
    auto dzr = dz.row(r);
    for (std::size_t j = 0; j < F; ++j) {
      if (f[j] <= T{0}) continue;
      T v = dot(dr, std::span<const T>(params.w_dec.row(j)));
      if (penalized) v += lam * inv * norms[j];
      dzr[j] = v;
    }
  }
  std::vector<T> dz_sum(F, T{0});
  for (std::size_t r = 0; r < B; ++r) axpy(T{1}, std::span<const T>(dz.row(r)), std::span<T>(dz_sum));
  for (std::size_t j = 0; j < F; ++j) g.b_enc(0, j) = dz_sum[j];
  // b_dec enters the encoder as -(b_dec · W_enc).
  for (std::size_t c = 0; c < d; ++c) {
    const auto wr = params.w_enc.row(c);
    T s{0};
    for (std::size_t j = 0; j < F; ++j) s += wr[j] * dz_sum[j];
    g.b_dec(0, c) -= s;
  }
  g.w_enc = transpose(matmul_tn(dz, centered(params, acts)));
  return g;
}

template <typename T>
SaeParams<T> backward(const SaeParams<T>& params, const BasicMatrix<T>& acts,
                      std::span<const TokenId> tokens, const SaeConfig& cfg) {
  return backward(params, acts, tokens, cfg, forward_batch(params, acts, tokens, cfg));
}

std::vector<bool> lookup_keep_mask(const SaeConfig& cfg, std::size_t V, std::span<const std::uint64_t> token_counts) {
  std::vector<bool> keep(V, true);
  if (!cfg.lookup_truncation || *cfg.lookup_truncation >= V) return keep;
  if (token_counts.size() != V) {
    throw ArgumentError("init_sae: truncated lookup needs per-token counts for all " + std::to_string(V) + " ids");
  }
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return token_counts[a] > token_counts[b]; });
  keep.assign(V, false);
  for (std::size_t i = 0; i < *cfg.lookup_truncation; ++i) keep[order[i]] = true;
  return keep;
}

Sae init_sae(const SaeConfig& cfg, const Matrix* unigram_table, Rng& rng,
             std::span<const std::uint64_t> token_counts) {
  cfg.validate();
  if (cfg.tokenized && !unigram_table) throw ArgumentError("init_sae: tokenized SAE needs a unigram table");
  if (!cfg.tokenized && unigram_table) throw ArgumentError("init_sae: unigram table given for a plain SAE");
  const std::size_t d = cfg.d_model, F = cfg.n_features();
  Sae sae;
  sae.config = cfg;
  auto& p = sae.params;
  p.w_dec = Matrix(F, d);
  for (std::size_t i = 0; i < F; ++i) {
    auto row = p.w_dec.row(i);
    for (float& v : row) v = static_cast<float>(rng.normal());
    const float n = norm2(std::span<const float>(row));
    for (float& v : row) v /= n;
  }
  const float enc_scale = cfg.tokenized ? static_cast<float>(1.0 - cfg.alpha) : 1.0f;
  p.w_enc = transpose(p.w_dec);
  for (float& v : p.w_enc.values()) v *= enc_scale;
  p.b_enc = Matrix(1, F);
  p.b_dec = Matrix(1, d);
  if (cfg.tokenized) {
    if (unigram_table->cols() != d) {
      throw DimensionError("init_sae: unigram table " + unigram_table->shape() + " for d_model " + std::to_string(d));
    }
    const std::size_t V = unigram_table->rows();
    Matrix lookup(V, d);
    const std::vector<bool> keep = lookup_keep_mask(cfg, V, token_counts);
    const float a = static_cast<float>(cfg.alpha);
    for (std::size_t t = 0; t < V; ++t) {
      if (!keep[t]) continue;
      for (std::size_t c = 0; c < d; ++c) lookup(t, c) = a * (*unigram_table)(t, c);
    }
    p.w_lookup = std::move(lookup);
  }
  return sae;
}

double estimate_alpha(const Matrix& lookup, const Matrix& original) {
  require_same_shape(lookup, original, "estimate_alpha");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < original.rows(); ++i) {
    double oo = 0.0, ol = 0.0;
    for (std::size_t c = 0; c < original.cols(); ++c) {
      const double o = original(i, c);
      oo += o * o;
      ol += o * static_cast<double>(lookup(i, c));
    }
    if (oo == 0.0) continue;
    sum += ol / oo;
    ++n;
  }
  if (n == 0) throw UndefinedError("estimate_alpha: every original lookup row is zero");
  return sum / static_cast<double>(n);
}

std::string encode_sae(const Sae& sae) {
  const auto& c = sae.config;
  io::TaggedFile file;
  file.version = kSaeFormatVersion;
  file.header = {{"d_model", std::to_string(c.d_model)},
                 {"expansion", std::to_string(c.expansion)},
                 {"variant", to_string(c.variant)},
                 {"k", std::to_string(c.k)},
                 {"lambda", io::format_real(c.lambda)},
                 {"tokenized", c.tokenized ? "1" : "0"},
                 {"alpha", io::format_real(c.alpha)},
                 {"lookup_lr_multiplier", io::format_real(c.lookup_lr_multiplier)},
                 {"lookup_truncation", c.lookup_truncation ? std::to_string(*c.lookup_truncation) : "none"}};
  sae.params.visit([&](const std::string& name, const Matrix& m) { file.arrays.push_back({name, m}); });
  return io::encode_tagged("TSAE", file);
}

Sae decode_sae(std::string bytes, const std::string& context) {
  const auto file = io::decode_tagged(std::move(bytes), "TSAE", kSaeFormatVersion, context);
  Sae sae;
  auto& c = sae.config;
  try {
    c.d_model = io::parse_count(file.field("d_model"), context);
    c.expansion = io::parse_count(file.field("expansion"), context);
    c.variant = parse_variant(file.field("variant"));
    c.k = io::parse_count(file.field("k"), context);
    c.lambda = io::parse_real(file.field("lambda"), context);
    c.tokenized = file.field("tokenized") == "1";
    c.alpha = io::parse_real(file.field("alpha"), context);
    c.lookup_lr_multiplier = io::parse_real(file.field("lookup_lr_multiplier"), context);
    const auto& trunc = file.field("lookup_truncation");
    if (trunc != "none") c.lookup_truncation = io::parse_count(trunc, context);
    c.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(context + ": invalid header: " + e.what());
  }
  auto& p = sae.params;
  const std::size_t d = c.d_model, F = c.n_features();
  auto take = [&](const char* name, std::size_t rows, std::size_t cols) {
    const Matrix& m = file.array(name);
    if (m.rows() != rows || m.cols() != cols) {
      throw FormatError(context + ": array '" + name + "' has shape " + m.shape());
    }
    return m;
  };
  p.w_enc = take("W_enc", d, F);
  p.b_enc = take("b_enc", 1, F);
  p.w_dec = take("W_dec", F, d);
  p.b_dec = take("b_dec", 1, d);
  if (c.tokenized) {
    const Matrix& lk = file.array("W_lookup");
    if (lk.cols() != d) throw FormatError(context + ": W_lookup has shape " + lk.shape());
    p.w_lookup = lk;
  } else if (file.has_array("W_lookup")) {
    throw FormatError(context + ": plain SAE carries a W_lookup array");
  }
  if (file.arrays.size() != (c.tokenized ? 5u : 4u)) throw FormatError(context + ": unexpected extra arrays");
  return sae;
}

#define TSAE_INSTANTIATE(T)                                                                                  \
  template struct SaeParams<T>;                                                                              \
  template std::vector<T> encode(const SaeParams<T>&, std::span<const T>, const SaeConfig&);                 \
  template BasicMatrix<T> encode_batch(const SaeParams<T>&, const BasicMatrix<T>&, const SaeConfig&);       \
  template std::vector<T> decode(const SaeParams<T>&, std::span<const T>, std::optional<TokenId>,            \
                                 const SaeConfig&);                                                          \
  template BasicMatrix<T> decode_batch(const SaeParams<T>&, const BasicMatrix<T>&, std::span<const TokenId>, \
                                       const SaeConfig&);                                                    \
  template SaeLoss loss(const SaeParams<T>&, std::span<const T>, std::optional<TokenId>, const SaeConfig&);  \
  template SaeBatch<T> forward_batch(const SaeParams<T>&, const BasicMatrix<T>&, std::span<const TokenId>,   \
                                     const SaeConfig&);                                                      \
  template SaeParams<T> backward(const SaeParams<T>&, const BasicMatrix<T>&, std::span<const TokenId>,       \
                                 const SaeConfig&, const SaeBatch<T>&);                                      \
  template SaeParams<T> backward(const SaeParams<T>&, const BasicMatrix<T>&, std::span<const TokenId>,       \
                                 const SaeConfig&);

TSAE_INSTANTIATE(float)
TSAE_INSTANTIATE(double)
#undef TSAE_INSTANTIATE

}  // namespace tsae
