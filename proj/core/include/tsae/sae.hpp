#pragma once

// Sparse auto-encoders over residual-stream rows, with an optional per-token
// lookup table added to the reconstruction:
//
//   f(a) = ReLU((a - b_dec) · W_enc + b_enc)     top-k keeps the k largest
//   â    = f · W_dec + b_dec + W_lookup[t]
//
// Activations are row vectors: W_enc is d x F and W_dec is F x d. The lookup
// never enters the encoder.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsae/corpus.hpp"
#include "tsae/numerics.hpp"
#include "tsae/rng.hpp"

namespace tsae {

enum class SaeVariant { vanilla, topk };

std::string to_string(SaeVariant v);
SaeVariant parse_variant(const std::string& s);

struct SaeConfig {
  std::size_t d_model = 64;
  std::size_t expansion = 16;
  SaeVariant variant = SaeVariant::topk;
  std::size_t k = 8;
  double lambda = 0.0;
  bool tokenized = false;
  double alpha = 0.5;
  /// Lookup learning rate = multiplier x base rate (100 x 1e-4 = 0.01).
  double lookup_lr_multiplier = 100.0;
  /// Keep lookup rows only for this many most frequent tokens.
  std::optional<std::size_t> lookup_truncation;

  std::size_t n_features() const { return expansion * d_model; }
  void validate() const;
  friend bool operator==(const SaeConfig&, const SaeConfig&) = default;
};

template <typename T>
struct SaeParams {
  BasicMatrix<T> w_enc;  // d x F
  BasicMatrix<T> b_enc;  // 1 x F
  BasicMatrix<T> w_dec;  // F x d
  BasicMatrix<T> b_dec;  // 1 x d
  std::optional<BasicMatrix<T>> w_lookup;  // V x d, tokenized only

  bool tokenized() const noexcept { return w_lookup.has_value(); }
  std::size_t n_features() const noexcept { return w_dec.rows(); }
  std::size_t d_model() const noexcept { return w_dec.cols(); }

  /// Zero tensors with the shapes of `like`.
  static SaeParams zeros_like(const SaeParams& like);

  template <typename F>
  void visit(F&& f) {
    f(std::string("W_enc"), w_enc);
    f(std::string("b_enc"), b_enc);
    f(std::string("W_dec"), w_dec);
    f(std::string("b_dec"), b_dec);
    if (w_lookup) f(std::string("W_lookup"), *w_lookup);
  }
  template <typename F>
  void visit(F&& f) const {
    f(std::string("W_enc"), w_enc);
    f(std::string("b_enc"), b_enc);
    f(std::string("W_dec"), w_dec);
    f(std::string("b_dec"), b_dec);
    if (w_lookup) f(std::string("W_lookup"), *w_lookup);
  }

  template <typename U>
  SaeParams<U> cast() const {
    SaeParams<U> out;
    out.w_enc = w_enc.template cast<U>();
    out.b_enc = b_enc.template cast<U>();
    out.w_dec = w_dec.template cast<U>();
    out.b_dec = b_dec.template cast<U>();
    if (w_lookup) out.w_lookup = w_lookup->template cast<U>();
    return out;
  }

  friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

/// A configured SAE: what checkpoints hold.
struct Sae {
  SaeConfig config;
  SaeParams<float> params;
  friend bool operator==(const Sae&, const Sae&) = default;
};

/// Feature activations for one activation row.
template <typename T>
std::vector<T> encode(const SaeParams<T>& params, std::span<const T> a, const SaeConfig& cfg);

/// Batched encode: one feature row per activation row.
template <typename T>
BasicMatrix<T> encode_batch(const SaeParams<T>& params, const BasicMatrix<T>& acts, const SaeConfig& cfg);

/// Reconstruction of one row. `token` is the id at the activation's own
/// position and is required when the SAE is tokenized.
template <typename T>
std::vector<T> decode(const SaeParams<T>& params, std::span<const T> f, std::optional<TokenId> token,
                      const SaeConfig& cfg);

template <typename T>
BasicMatrix<T> decode_batch(const SaeParams<T>& params, const BasicMatrix<T>& features,
                            std::span<const TokenId> tokens, const SaeConfig& cfg);

struct SaeLoss {
  double total = 0.0;
  double mse_part = 0.0;
  double sparsity_part = 0.0;
};

/// mse_part = ||a - â||² / d; vanilla adds λ Σ f_i ||W_dec row i||.
template <typename T>
SaeLoss loss(const SaeParams<T>& params, std::span<const T> a, std::optional<TokenId> token,
             const SaeConfig& cfg);

template <typename T>
struct SaeBatch {
  SaeLoss loss;              // batch means
  BasicMatrix<T> features;   // B x F
  BasicMatrix<T> recon;      // B x d
};

template <typename T>
SaeBatch<T> forward_batch(const SaeParams<T>& params, const BasicMatrix<T>& acts,
                          std::span<const TokenId> tokens, const SaeConfig& cfg);

/// Gradient of the mean batch loss with respect to every tensor. Inactive
/// ReLU units and unselected top-k units pass no gradient.
template <typename T>
SaeParams<T> backward(const SaeParams<T>& params, const BasicMatrix<T>& acts,
                      std::span<const TokenId> tokens, const SaeConfig& cfg, const SaeBatch<T>& fwd);

template <typename T>
SaeParams<T> backward(const SaeParams<T>& params, const BasicMatrix<T>& acts,
                      std::span<const TokenId> tokens, const SaeConfig& cfg);

/// Transpose-tied initialization balanced against the lookup:
/// unit-norm random decoder rows, W_enc = (1-α)·W_decᵀ (α=0 when not
/// tokenized), zero biases, W_lookup = α·unigram_table. With truncation m
/// only the m most frequent ids in `token_counts` keep a lookup row.
Sae init_sae(const SaeConfig& cfg, const Matrix* unigram_table, Rng& rng,
             std::span<const std::uint64_t> token_counts = {});

/// Rows of the V-row lookup that survive truncation (all when untruncated).
std::vector<bool> lookup_keep_mask(const SaeConfig& cfg, std::size_t V, std::span<const std::uint64_t> token_counts);

/// Mean per-row projection coefficient of `lookup` onto `original`, over
/// rows where `original` is nonzero.
double estimate_alpha(const Matrix& lookup, const Matrix& original);

// "TSAE" checkpoints.
inline constexpr std::uint32_t kSaeFormatVersion = 1;
std::string encode_sae(const Sae& sae);
Sae decode_sae(std::string bytes, const std::string& context = "sae checkpoint");

}  // namespace tsae
