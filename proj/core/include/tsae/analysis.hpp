#pragma once

// Feature-level diagnostics: unigram activation scans, dead features,
// feature complexity, context patching and final-token geometry.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsae/evaluation.hpp"
#include "tsae/lm.hpp"
#include "tsae/sae.hpp"

namespace tsae {

// Unigram scan -------------------------------------------------------------

struct UnigramFeature {
  std::vector<TokenId> strong;  // unigrams whose activation exceeds the threshold
  double max_unigram_act = 0.0;
  TokenId max_unigram_token = 0;
  double max_test_act = 0.0;
  TokenId top_test_token = 0;  // final token of the top-activating test row
  bool live = false;           // fires on at least one test row
  bool top_match = false;      // top_test_token is among `strong`
};

struct UnigramScanReport {
  double threshold = 0.0;
  std::vector<UnigramFeature> features;
  std::size_t n_live = 0;
  /// Over live features.
  double frac_strong = 0.0;
  double frac_top_match = 0.0;

  std::string csv() const;
};

/// Encodes every non-BOS unigram row of `unigram_table` and every test row.
UnigramScanReport unigram_activation_scan(const Sae& sae, const Matrix& unigram_table,
                                          const ActivationSet& test, double threshold = 5.0);

// Dead features ------------------------------------------------------------

struct DeadFeature {
  double max_act = 0.0;
  double enc_dec_cos = 0.0;
  bool dead = false;     // max_act < act_threshold
  bool flagged = false;  // enc_dec_cos > cut
};

struct DeadFeatureReport {
  double act_threshold = 0.0;
  double cut = 0.0;
  std::vector<DeadFeature> features;
  std::size_t n_dead = 0;
  std::size_t n_flagged = 0;
  std::size_t n_both = 0;
  /// 40 bins of width 0.05 over [-1, 1].
  std::vector<std::size_t> cos_histogram;

  /// Agreement of `flagged` with an arbitrary ground-truth set.
  struct Agreement {
    double precision = 0.0;
    double recall = 0.0;
  };
  Agreement agreement(const std::vector<bool>& truth) const;

  std::string csv() const;
};

DeadFeatureReport dead_feature_scan(const Sae& sae, const Matrix& eval_acts, double act_threshold = 3.0,
                                    double cut = 0.85);

// Complexity ---------------------------------------------------------------

struct SuffixResult {
  std::size_t n_positive = 0;
  std::size_t n_90 = 0;
  bool saturated = false;  // a criterion was only met with the whole prefix
};

/// Smallest suffix lengths at which `feature` fires at all and reaches 90% of
/// its full-context activation at `position` of `prompt`.
SuffixResult min_suffix_ngram(const Sae& sae, const LmParams<float>& lm, std::size_t feature,
                              std::span<const TokenId> prompt, std::size_t position, TapLocation p);

struct ComplexityRow {
  std::size_t feature = 0;
  double max_act = 0.0;
  std::size_t prompt = 0;
  std::size_t position = 0;
  SuffixResult suffix;
};

struct ComplexityReport {
  double min_act = 0.0;
  std::vector<ComplexityRow> rows;
  /// Fractions of qualifying features with n > 2.
  double frac_positive_above_2 = 0.0;
  double frac_90_above_2 = 0.0;

  std::string csv() const;
};

/// min_suffix_ngram for every feature whose maximum over `test` reaches min_act.
ComplexityReport complexity_scan(const Sae& sae, const LmParams<float>& lm,
                                 const std::vector<std::vector<TokenId>>& prompts, const ActivationSet& test,
                                 TapLocation p, double min_act = 10.0);

// Patching curve -----------------------------------------------------------

struct PatchingCurve {
  std::vector<double> mean_cos;  // index n-1
  std::size_t n_samples = 0;     // (prompt, position) pairs

  std::string csv() const;
};

/// Mean cosine between truncated and full activations at every non-BOS
/// position of every prompt, for n = 1..n_max.
PatchingCurve patching_curve(const LmParams<float>& lm, const std::vector<std::vector<TokenId>>& prompts,
                             TapLocation p, std::size_t n_max);

// Final-token closeness ----------------------------------------------------

struct FinalTokenStats {
  double mean_nearest_cos = 0.0;
  double mean_final_cos = 0.0;
  double mean_first_cos = 0.0;
  double pct_final_closest = 0.0;
  std::size_t n_prompts = 0;

  std::string csv() const;
};

/// Compares each prompt's last activation with the non-BOS unigram rows.
FinalTokenStats final_token_closeness(const LmParams<float>& lm,
                                      const std::vector<std::vector<TokenId>>& prompts, TapLocation p,
                                      const Matrix& unigram_table);

// Activation vs cosine -----------------------------------------------------

struct ActCosReport {
  std::optional<double> r;           // empty when undefined
  std::optional<double> shuffled_r;  // permutation control
  std::size_t n_pairs = 0;

  std::string csv() const;
};

/// Correlation between positive feature activations and cosine(a - b_dec, W_enc column).
ActCosReport activation_vs_cossim(const Sae& sae, const Matrix& eval_acts, std::uint64_t seed = 0);

// Encoder vs unigrams ------------------------------------------------------

/// Per feature: max over non-BOS tokens of cosine(W_enc column, unigram row - b_dec).
std::vector<double> encoder_unigram_similarity(const Sae& sae, const Matrix& unigram_table);

std::string values_csv(const std::string& column, const std::vector<double>& values);

}  // namespace tsae
