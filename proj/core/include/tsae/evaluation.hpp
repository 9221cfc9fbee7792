#pragma once

// Reconstruction and downstream metrics, Pareto sweeps and per-n-gram error.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsae/corpus.hpp"
#include "tsae/lm.hpp"
#include "tsae/sae.hpp"
#include "tsae/training.hpp"

namespace tsae {

struct NmseResult {
  double value = 0.0;
  /// Rows skipped because ||a|| = 0.
  std::size_t excluded = 0;
};

/// Mean over rows of ||a - â|| / ||a||.
NmseResult nmse(const Matrix& acts, const Matrix& recon);

/// Mean number of strictly positive entries per row.
double l0(const Matrix& features);

/// Mean over rows of ||a - â||² / d.
double recon_mse(const Matrix& acts, const Matrix& recon);

/// Evenly spaced BOS-led windows (ctx_len - 1 tokens each) from `ids`.
std::vector<std::vector<TokenId>> make_prompts(std::span<const TokenId> ids, std::size_t ctx_len,
                                               std::size_t count);

/// Activation rows at tap p over every prompt (rows 1..N-1 unless include_bos).
struct ActivationSet {
  Matrix acts;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> prompt_index;
  std::vector<std::size_t> position;
};
ActivationSet collect_activations(const LmParams<float>& lm,
                                  const std::vector<std::vector<TokenId>>& prompts, TapLocation p,
                                  bool include_bos = false);

/// Reconstruction of every row of `set`.
Matrix reconstruct(const Sae& sae, const ActivationSet& set);

struct EvalReport {
  double nmse = 0.0;
  std::size_t nmse_excluded = 0;
  double l0 = 0.0;
  double ce_clean = 0.0;
  double ce_patched = 0.0;
  double ce_added = 0.0;
  std::size_t n_rows = 0;
};

/// NMSE, L0 and relative cross-entropy increase when the SAE reconstruction
/// replaces the stream at p (the BOS row stays unpatched).
EvalReport evaluate_sae(const LmParams<float>& lm, const Sae& sae,
                        const std::vector<std::vector<TokenId>>& prompts, TapLocation p);

struct ParetoPoint {
  SaeVariant variant = SaeVariant::topk;
  bool tokenized = false;
  double knob = 0.0;  // k or lambda
  double l0 = 0.0;
  double nmse = 0.0;
  double ce_added = 0.0;
};

/// Trains one SAE per (knob, plain/tokenized) and evaluates each on `prompts`.
std::vector<ParetoPoint> pareto_sweep(const LmParams<float>& lm, std::span<const TokenId> train_ids,
                                      const std::vector<std::vector<TokenId>>& prompts, TapLocation p,
                                      const SaeConfig& base, const std::vector<double>& knobs,
                                      const BufferConfig& buf, const SaeTrainConfig& train);

std::string pareto_csv(const std::vector<ParetoPoint>& points);

/// L0 at `target_nmse` by linear interpolation along a curve sorted by NMSE.
/// Throws RangeError when the target lies outside the curve.
double interpolate_l0_at_nmse(std::vector<ParetoPoint> curve, double target_nmse);

/// Tokenized L0 at each plain point's NMSE. Past the tokenized curve's
/// largest NMSE the L0 of that endpoint is used (`clamped`); plain points
/// below its smallest NMSE have no match and are omitted.
struct MatchedL0 {
  double knob = 0.0;
  double nmse = 0.0;
  double plain_l0 = 0.0;
  double tokenized_l0 = 0.0;
  double ratio = 0.0;  // tokenized_l0 / plain_l0
  bool clamped = false;
};
std::vector<MatchedL0> matched_l0(const std::vector<ParetoPoint>& points);

struct FrequencyRow {
  std::vector<TokenId> gram;
  double rel_freq = 0.0;
  double recon_mse = 0.0;
};

struct FrequencyReport {
  std::vector<FrequencyRow> rows;
  /// Grams outside the model vocabulary or with a zero-norm activation.
  std::size_t skipped = 0;
};

/// Reconstruction error of the final-position activation of [BOS] + gram for
/// the `top` most frequent entries of `table`.
FrequencyReport mse_vs_frequency(const LmParams<float>& lm, const Sae& sae, const NgramTable& table,
                                 TapLocation p, std::size_t top);

std::string frequency_csv(const FrequencyReport& report);

}  // namespace tsae
