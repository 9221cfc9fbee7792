#include "tsae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tsae/binary_io.hpp"
#include "tsae/errors.hpp"
#include "tsae/stats.hpp"

namespace tsae {

namespace {

double cos_d(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

std::vector<float> encoder_column(const Sae& sae, std::size_t j) {
  const Matrix& w = sae.params.w_enc;
  std::vector<float> col(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) col[i] = w(i, j);
  return col;
}

// Non-BOS unigram rows as a matrix.
Matrix unigram_inputs(const Matrix& table) {
  if (table.rows() < 2) throw ArgumentError("unigram table needs at least one non-BOS row");
  std::vector<float> rows(table.data() + table.cols(), table.data() + table.size());
  return Matrix(table.rows() - 1, table.cols(), std::move(rows));
}

std::string real(double v) { return io::format_real(v); }

}  // namespace

UnigramScanReport unigram_activation_scan(const Sae& sae, const Matrix& unigram_table,
                                          const ActivationSet& test, double threshold) {
  if (!(threshold > 0.0)) throw ArgumentError("threshold must be positive");
  if (unigram_table.cols() != sae.config.d_model) throw DimensionError("unigram table width mismatch");
  const std::size_t F = sae.config.n_features();
  const auto fu = encode_batch(sae.params, unigram_inputs(unigram_table), sae.config);
  const auto ft = encode_batch(sae.params, test.acts, sae.config);

  UnigramScanReport rep;
  rep.threshold = threshold;
  rep.features.resize(F);
  for (std::size_t r = 0; r < fu.rows(); ++r) {
    const auto t = static_cast<TokenId>(r + 1);
    for (std::size_t j = 0; j < F; ++j) {
      const double v = fu(r, j);
      auto& feat = rep.features[j];
      if (v > threshold) feat.strong.push_back(t);
      if (v > feat.max_unigram_act) {
        feat.max_unigram_act = v;
        feat.max_unigram_token = t;
      }
    }
  }
  for (std::size_t r = 0; r < ft.rows(); ++r) {
    for (std::size_t j = 0; j < F; ++j) {
      const double v = ft(r, j);
      auto& feat = rep.features[j];
      if (v > feat.max_test_act) {
        feat.max_test_act = v;
        feat.top_test_token = test.tokens[r];
        feat.live = true;
      }
    }
  }
  std::size_t strong = 0, match = 0;
  for (auto& feat : rep.features) {
    if (!feat.live) continue;
    ++rep.n_live;
    strong += !feat.strong.empty();
    feat.top_match = std::binary_search(feat.strong.begin(), feat.strong.end(), feat.top_test_token);
    match += feat.top_match;
  }
  if (rep.n_live) {
    rep.frac_strong = static_cast<double>(strong) / static_cast<double>(rep.n_live);
    rep.frac_top_match = static_cast<double>(match) / static_cast<double>(rep.n_live);
  }
  return rep;
}

std::string UnigramScanReport::csv() const {
  std::ostringstream os;
  os << "feature,live,n_strong,max_unigram_act,max_unigram_token,max_test_act,top_test_token,top_match\n";
  for (std::size_t j = 0; j < features.size(); ++j) {
    const auto& f = features[j];
    os << j << ',' << f.live << ',' << f.strong.size() << ',' << real(f.max_unigram_act) << ','
       << f.max_unigram_token << ',' << real(f.max_test_act) << ',' << f.top_test_token << ',' << f.top_match
       << '\n';
  }
  return os.str();
}

DeadFeatureReport dead_feature_scan(const Sae& sae, const Matrix& eval_acts, double act_threshold, double cut) {
  if (eval_acts.rows() == 0) throw ArgumentError("dead_feature_scan: no eval rows");
  const std::size_t F = sae.config.n_features();
  const auto f = encode_batch(sae.params, eval_acts, sae.config);
  DeadFeatureReport rep;
  rep.act_threshold = act_threshold;
  rep.cut = cut;
  rep.features.resize(F);
  rep.cos_histogram.assign(40, 0);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    for (std::size_t j = 0; j < F; ++j) rep.features[j].max_act = std::max<double>(rep.features[j].max_act, f(r, j));
  }
  for (std::size_t j = 0; j < F; ++j) {
    auto& feat = rep.features[j];
    const auto col = encoder_column(sae, j);
    feat.enc_dec_cos = cos_d(col, sae.params.w_dec.row(j));
    feat.dead = feat.max_act < act_threshold;
    feat.flagged = feat.enc_dec_cos > cut;
    rep.n_dead += feat.dead;
    rep.n_flagged += feat.flagged;
    rep.n_both += feat.dead && feat.flagged;
    const auto bin = static_cast<std::size_t>(std::clamp((feat.enc_dec_cos + 1.0) / 0.05, 0.0, 39.0));
    ++rep.cos_histogram[bin];
  }
  return rep;
}

DeadFeatureReport::Agreement DeadFeatureReport::agreement(const std::vector<bool>& truth) const {
  if (truth.size() != features.size()) throw DimensionError("agreement: truth length mismatch");
  std::size_t tp = 0, flagged = 0, positives = 0;
  for (std::size_t j = 0; j < features.size(); ++j) {
    flagged += features[j].flagged;
    positives += truth[j];
    tp += features[j].flagged && truth[j];
  }
  Agreement a;
  a.precision = flagged ? static_cast<double>(tp) / static_cast<double>(flagged) : 1.0;
  a.recall = positives ? static_cast<double>(tp) / static_cast<double>(positives) : 1.0;
  return a;
}

std::string DeadFeatureReport::csv() const {
  std::ostringstream os;
  os << "feature,max_act,enc_dec_cos,dead,flagged\n";
  for (std::size_t j = 0; j < features.size(); ++j) {
    const auto& f = features[j];
    os << j << ',' << real(f.max_act) << ',' << real(f.enc_dec_cos) << ',' << f.dead << ',' << f.flagged << '\n';
  }
  return os.str();
}

SuffixResult min_suffix_ngram(const Sae& sae, const LmParams<float>& lm, std::size_t feature,
                              std::span<const TokenId> prompt, std::size_t position, TapLocation p) {
  if (feature >= sae.config.n_features()) throw RangeError("feature index out of range");
  if (position == 0 || position >= prompt.size()) throw RangeError("position must be a non-BOS prompt index");
  auto act_at = [&](std::size_t n) {
    const auto a = truncated_activation(lm, prompt, position, n, p);
    return static_cast<double>(encode<float>(sae.params, a, sae.config)[feature]);
  };
  const double full = act_at(position);
  SuffixResult out;
  for (std::size_t n = 1; n <= position; ++n) {
    const double v = n == position ? full : act_at(n);
    if (!out.n_positive && v > 0.0) out.n_positive = n;
    if (v >= 0.9 * full && full > 0.0) {
      out.n_90 = n;
      break;
    }
  }
  if (!out.n_positive) out.n_positive = position;
  if (!out.n_90) out.n_90 = position;
  out.n_90 = std::max(out.n_90, out.n_positive);
  out.saturated = out.n_90 == position && position > 1;
  return out;
}

ComplexityReport complexity_scan(const Sae& sae, const LmParams<float>& lm,
                                 const std::vector<std::vector<TokenId>>& prompts, const ActivationSet& test,
                                 TapLocation p, double min_act) {
  const std::size_t F = sae.config.n_features();
  const auto f = encode_batch(sae.params, test.acts, sae.config);
  std::vector<double> best(F, 0.0);
  std::vector<std::size_t> best_row(F, 0);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    for (std::size_t j = 0; j < F; ++j) {
      if (f(r, j) > best[j]) {
        best[j] = f(r, j);
        best_row[j] = r;
      }
    }
  }
  ComplexityReport rep;
  rep.min_act = min_act;
  std::size_t pos_above = 0, n90_above = 0;
  for (std::size_t j = 0; j < F; ++j) {
    if (best[j] < min_act) continue;
    ComplexityRow row;
    row.feature = j;
    row.max_act = best[j];
    row.prompt = test.prompt_index.at(best_row[j]);
    row.position = test.position.at(best_row[j]);
    row.suffix = min_suffix_ngram(sae, lm, j, prompts.at(row.prompt), row.position, p);
    pos_above += row.suffix.n_positive > 2;
    n90_above += row.suffix.n_90 > 2;
    rep.rows.push_back(row);
  }
  if (!rep.rows.empty()) {
    const double n = static_cast<double>(rep.rows.size());
    rep.frac_positive_above_2 = static_cast<double>(pos_above) / n;
    rep.frac_90_above_2 = static_cast<double>(n90_above) / n;
  }
  return rep;
}

std::string ComplexityReport::csv() const {
  std::ostringstream os;
  os << "feature,max_act,prompt,position,n_positive,n_90,saturated\n";
  for (const auto& r : rows) {
    os << r.feature << ',' << real(r.max_act) << ',' << r.prompt << ',' << r.position << ','
       << r.suffix.n_positive << ',' << r.suffix.n_90 << ',' << r.suffix.saturated << '\n';
  }
  return os.str();
}

PatchingCurve patching_curve(const LmParams<float>& lm, const std::vector<std::vector<TokenId>>& prompts,
                             TapLocation p, std::size_t n_max) {
  if (n_max == 0) throw ArgumentError("n_max must be positive");
  if (prompts.empty()) throw ArgumentError("patching_curve: no prompts");
  PatchingCurve curve;
  curve.mean_cos.assign(n_max, 0.0);
  for (const auto& prompt : prompts) {
    const Matrix tap = lm_tap(lm, prompt, p);
    for (std::size_t i = 1; i < prompt.size(); ++i) {
      const auto full = tap.row(i);
      for (std::size_t n = 1; n <= n_max; ++n) {
        if (n >= i) {
          // the truncation keeps the whole prefix
          curve.mean_cos[n - 1] += 1.0;
          continue;
        }
        const auto a = truncated_activation(lm, prompt, i, n, p);
        curve.mean_cos[n - 1] += cos_d(a, full);
      }
      ++curve.n_samples;
    }
  }
  if (curve.n_samples == 0) throw ArgumentError("patching_curve: prompts have no non-BOS positions");
  for (double& v : curve.mean_cos) v /= static_cast<double>(curve.n_samples);
  return curve;
}

std::string PatchingCurve::csv() const {
  std::ostringstream os;
  os << "n,mean_cos\n";
  for (std::size_t n = 0; n < mean_cos.size(); ++n) os << n + 1 << ',' << real(mean_cos[n]) << '\n';
  return os.str();
}

FinalTokenStats final_token_closeness(const LmParams<float>& lm,
                                      const std::vector<std::vector<TokenId>>& prompts, TapLocation p,
                                      const Matrix& unigram_table) {
  if (prompts.empty()) throw ArgumentError("final_token_closeness: no prompts");
  if (unigram_table.rows() != lm.config.vocab_size || unigram_table.cols() != lm.config.d_model) {
    throw DimensionError("unigram table shape does not match the model");
  }
  FinalTokenStats st;
  std::size_t closest = 0;
  for (const auto& prompt : prompts) {
    if (prompt.size() < 2) throw ArgumentError("final_token_closeness: prompts need at least two tokens");
    const Matrix tap = lm_tap(lm, prompt, p);
    const auto a = tap.row(prompt.size() - 1);
    double nearest = -2.0;
    for (std::size_t t = 1; t < unigram_table.rows(); ++t) nearest = std::max(nearest, cos_d(a, unigram_table.row(t)));
    const TokenId last = prompt.back();
    const double final_cos = cos_d(a, unigram_table.row(last));
    nearest = std::max(nearest, final_cos);
    st.mean_nearest_cos += nearest;
    st.mean_final_cos += final_cos;
    st.mean_first_cos += cos_d(a, unigram_table.row(prompt[1]));
    closest += final_cos >= nearest;
    ++st.n_prompts;
  }
  const double n = static_cast<double>(st.n_prompts);
  st.mean_nearest_cos /= n;
  st.mean_final_cos /= n;
  st.mean_first_cos /= n;
  st.pct_final_closest = 100.0 * static_cast<double>(closest) / n;
  return st;
}

std::string FinalTokenStats::csv() const {
  std::ostringstream os;
  os << "n_prompts,mean_nearest_cos,mean_final_cos,mean_first_cos,pct_final_closest\n";
  os << n_prompts << ',' << real(mean_nearest_cos) << ',' << real(mean_final_cos) << ',' << real(mean_first_cos)
     << ',' << real(pct_final_closest) << '\n';
  return os.str();
}

ActCosReport activation_vs_cossim(const Sae& sae, const Matrix& eval_acts, std::uint64_t seed) {
  if (eval_acts.rows() == 0) throw ArgumentError("activation_vs_cossim: no eval rows");
  const std::size_t F = sae.config.n_features(), d = sae.config.d_model;
  const auto f = encode_batch(sae.params, eval_acts, sae.config);
  const Matrix wt = transpose(sae.params.w_enc);  // F x d
  std::vector<double> acts, coss;
  std::vector<float> centered(d);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    const auto a = eval_acts.row(r);
    for (std::size_t i = 0; i < d; ++i) centered[i] = a[i] - sae.params.b_dec(0, i);
    for (std::size_t j = 0; j < F; ++j) {
      if (f(r, j) <= 0.0f) continue;
      acts.push_back(f(r, j));
      coss.push_back(cos_d(centered, wt.row(j)));
    }
  }
  ActCosReport rep;
  rep.n_pairs = acts.size();
  try {
    rep.r = pearson(acts, coss);
    Rng rng(seed);
    rng.shuffle(std::span<double>(acts));
    rep.shuffled_r = pearson(acts, coss);
  } catch (const UndefinedError&) {
  }
  return rep;
}

std::string ActCosReport::csv() const {
  std::ostringstream os;
  os << "n_pairs,r,shuffled_r\n";
  os << n_pairs << ',' << (r ? real(*r) : "nan") << ',' << (shuffled_r ? real(*shuffled_r) : "nan") << '\n';
  return os.str();
}

std::vector<double> encoder_unigram_similarity(const Sae& sae, const Matrix& unigram_table) {
  if (unigram_table.cols() != sae.config.d_model) throw DimensionError("unigram table width mismatch");
  const std::size_t F = sae.config.n_features(), d = sae.config.d_model;
  Matrix centered = unigram_inputs(unigram_table);
  for (std::size_t t = 0; t < centered.rows(); ++t) {
    for (std::size_t i = 0; i < d; ++i) centered(t, i) -= sae.params.b_dec(0, i);
  }
  const Matrix wt = transpose(sae.params.w_enc);
  std::vector<double> out(F, -1.0);
  for (std::size_t j = 0; j < F; ++j) {
    for (std::size_t t = 0; t < centered.rows(); ++t) out[j] = std::max(out[j], cos_d(wt.row(j), centered.row(t)));
  }
  return out;
}

std::string values_csv(const std::string& column, const std::vector<double>& values) {
  std::ostringstream os;
  os << "feature," << column << '\n';
  for (std::size_t j = 0; j < values.size(); ++j) os << j << ',' << real(values[j]) << '\n';
  return os.str();
}

}  // namespace tsae
