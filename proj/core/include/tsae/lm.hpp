#pragma once

// A small pre-norm decoder-only transformer (GPT-2 style, learned positional
// embeddings, no biases outside layer norms, no weight tying) whose
// residual stream is exposed at every layer boundary.
//
// taps[p] is the residual stream entering layer p; taps[n_layers] is the
// stream after the last layer, before the final layer norm.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsae/corpus.hpp"
#include "tsae/numerics.hpp"
#include "tsae/rng.hpp"

namespace tsae {

struct LmConfig {
  std::uint32_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t ctx_len = 64;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  friend bool operator==(const LmConfig&, const LmConfig&) = default;
};

/// Residual stream location: the input of layer `layer` (0..n_layers).
struct TapLocation {
  std::size_t layer = 0;
};

template <typename T>
struct LmLayer {
  BasicMatrix<T> ln1_gain, ln1_bias;  // 1 x d
  BasicMatrix<T> w_q, w_k, w_v, w_o;  // d x d
  BasicMatrix<T> ln2_gain, ln2_bias;  // 1 x d
  BasicMatrix<T> w_in;                // d x d_mlp
  BasicMatrix<T> w_out;               // d_mlp x d

  friend bool operator==(const LmLayer&, const LmLayer&) = default;
};

template <typename T>
struct LmParams {
  LmConfig config;
  BasicMatrix<T> tok_emb;  // V x d
  BasicMatrix<T> pos_emb;  // ctx_len x d
  std::vector<LmLayer<T>> layers;
  BasicMatrix<T> lnf_gain, lnf_bias;  // 1 x d
  BasicMatrix<T> unembed;             // d x V

  /// All-zero parameters of the right shapes (layer-norm gains included).
  static LmParams zeros(const LmConfig& cfg);

  /// Visits every tensor in the fixed checkpoint order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <typename U>
  LmParams<U> cast() const {
    LmParams<U> out = LmParams<U>::zeros(config);
    std::vector<const BasicMatrix<T>*> src;
    visit([&](const std::string&, const BasicMatrix<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, BasicMatrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const BasicMatrix<T>& m) { n += m.size(); });
    return n;
  }

  friend bool operator==(const LmParams&, const LmParams&) = default;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("tok_emb"), self.tok_emb);
    f(std::string("pos_emb"), self.pos_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_gain", L.ln1_gain);
      f(p + "ln1_bias", L.ln1_bias);
      f(p + "w_q", L.w_q);
      f(p + "w_k", L.w_k);
      f(p + "w_v", L.w_v);
      f(p + "w_o", L.w_o);
      f(p + "ln2_gain", L.ln2_gain);
      f(p + "ln2_bias", L.ln2_bias);
      f(p + "w_in", L.w_in);
      f(p + "w_out", L.w_out);
    }
    f(std::string("lnf_gain"), self.lnf_gain);
    f(std::string("lnf_bias"), self.lnf_bias);
    f(std::string("unembed"), self.unembed);
  }
};

/// Initialization scales. Token embeddings are large relative to GPT-2's so
/// that residual norms (and hence SAE feature activations) sit in a similar
/// range to a full-size model's.
struct LmInit {
  double tok_emb_std = 1.0;
  double pos_emb_std = 0.1;
  double weight_std = 0.02;
};

LmParams<float> init_lm(const LmConfig& cfg, Rng& rng, const LmInit& init = {});

template <typename T>
struct LmOutput {
  BasicMatrix<T> logits;              // N x V
  std::vector<BasicMatrix<T>> taps;   // n_layers + 1 entries, each N x d
};

/// Full forward pass. tokens[0] must be BOS and 1 <= N <= ctx_len.
template <typename T>
LmOutput<T> lm_forward(const LmParams<T>& params, std::span<const TokenId> tokens);

/// taps[p] alone; layers at or after p are not run.
template <typename T>
BasicMatrix<T> lm_tap(const LmParams<T>& params, std::span<const TokenId> tokens, TapLocation p);

/// Forward pass with the residual stream entering layer p replaced by
/// `replacement` (N x d) at every position.
template <typename T>
BasicMatrix<T> patched_forward(const LmParams<T>& params, std::span<const TokenId> tokens,
                               TapLocation p, const BasicMatrix<T>& replacement);

/// Mean next-token cross-entropy (nats) of positions 0..N-2.
template <typename T>
double sequence_cross_entropy(const BasicMatrix<T>& logits, std::span<const TokenId> tokens);

/// Activation of [BOS, t] at position 1.
std::vector<float> unigram_activation(const LmParams<float>& params, TokenId t, TapLocation p);

/// unigram_activation for every token id, stacked (V x d).
Matrix unigram_table(const LmParams<float>& params, TapLocation p);

/// Activation at position i as if only the last n tokens up to i existed,
/// with BOS prepended. n is clipped to the i non-BOS tokens available, so
/// n >= i reproduces the untruncated activation.
std::vector<float> truncated_activation(const LmParams<float>& params,
                                        std::span<const TokenId> tokens, std::size_t i,
                                        std::size_t n, TapLocation p);

/// Mean cross-entropy over `batch` (all sequences BOS-led, equal length) and
/// its gradient, accumulated into `grad` when non-null.
template <typename T>
double lm_loss_and_grad(const LmParams<T>& params, const std::vector<std::vector<TokenId>>& batch,
                        LmParams<T>* grad);

struct LmTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 3e-3;
  std::size_t log_interval = 50;
};

struct LmTrainResult {
  LmParams<float> params;
  std::vector<std::pair<std::size_t, double>> loss_log;  // (step, mean CE)
};

/// BOS-prefixed training window of ctx_len - 1 corpus tokens at `start`.
std::vector<TokenId> window_with_bos(std::span<const TokenId> ids, std::size_t start,
                                     std::size_t ctx_len);

/// Adam with cosine annealing on next-token cross-entropy over random windows.
LmTrainResult lm_train(LmParams<float> params, std::span<const TokenId> corpus,
                       const LmTrainConfig& cfg, Rng& rng);

// "TSLM" checkpoints.
inline constexpr std::uint32_t kLmFormatVersion = 1;
std::string encode_lm(const LmParams<float>& params);
LmParams<float> decode_lm(std::string bytes, const std::string& context = "lm checkpoint");
void save_lm(const LmParams<float>& params, const std::filesystem::path& path);
LmParams<float> load_lm(const std::filesystem::path& path);

}  // namespace tsae
