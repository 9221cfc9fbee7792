#include "tsae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "tsae/binary_io.hpp"
#include "tsae/errors.hpp"

namespace tsae {

NmseResult nmse(const Matrix& acts, const Matrix& recon) {
  require_same_shape(acts, recon, "nmse");
  NmseResult out;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t r = 0; r < acts.rows(); ++r) {
    const auto a = acts.row(r);
    const auto b = recon.row(r);
    double aa = 0.0, ee = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double x = a[i], e = static_cast<double>(a[i]) - b[i];
      aa += x * x;
      ee += e * e;
    }
    if (aa == 0.0) {
      ++out.excluded;
      continue;
    }
    sum += std::sqrt(ee) / std::sqrt(aa);
    ++used;
  }
  if (used == 0) throw UndefinedError("nmse: every activation row has zero norm");
  out.value = sum / static_cast<double>(used);
  return out;
}

double l0(const Matrix& features) {
  if (features.rows() == 0) throw UndefinedError("l0: no rows");
  std::size_t n = 0;
  for (float v : features.values()) n += v > 0.0f;
  return static_cast<double>(n) / static_cast<double>(features.rows());
}

double recon_mse(const Matrix& acts, const Matrix& recon) {
  require_same_shape(acts, recon, "recon_mse");
  if (acts.rows() == 0 || acts.cols() == 0) throw UndefinedError("recon_mse: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const double e = static_cast<double>(acts.values()[i]) - recon.values()[i];
    sum += e * e;
  }
  return sum / static_cast<double>(acts.size());
}

std::vector<std::vector<TokenId>> make_prompts(std::span<const TokenId> ids, std::size_t ctx_len,
                                               std::size_t count) {
  if (ctx_len < 2) throw ArgumentError("prompt length must be at least 2");
  if (ids.size() < ctx_len - 1) throw ArgumentError("corpus shorter than one prompt");
  const std::size_t span_starts = ids.size() - (ctx_len - 1);
  std::vector<std::vector<TokenId>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t start = count > 1 ? span_starts * i / (count - 1) : 0;
    out.push_back(window_with_bos(ids, start, ctx_len));
  }
  return out;
}

ActivationSet collect_activations(const LmParams<float>& lm,
                                  const std::vector<std::vector<TokenId>>& prompts, TapLocation p,
                                  bool include_bos) {
  std::vector<float> acts;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> index, position;
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    append_window_rows(lm, prompts[k], p, include_bos, acts, tokens);
    for (std::size_t i = include_bos ? 0 : 1; i < prompts[k].size(); ++i) {
      index.push_back(k);
      position.push_back(i);
    }
  }
  const std::size_t rows = tokens.size();
  return {Matrix(rows, lm.config.d_model, std::move(acts)), std::move(tokens), std::move(index),
          std::move(position)};
}

Matrix reconstruct(const Sae& sae, const ActivationSet& set) {
  const auto f = encode_batch(sae.params, set.acts, sae.config);
  return decode_batch(sae.params, f, set.tokens, sae.config);
}

EvalReport evaluate_sae(const LmParams<float>& lm, const Sae& sae,
                        const std::vector<std::vector<TokenId>>& prompts, TapLocation p) {
  if (prompts.empty()) throw ArgumentError("evaluate_sae: no prompts");
  if (sae.config.d_model != lm.config.d_model) throw DimensionError("SAE d_model does not match the model");
  EvalReport rep;
  std::vector<float> all_a, all_r, all_f;
  std::size_t n_rows = 0;
  double ce_clean = 0.0, ce_patched = 0.0;
  for (const auto& prompt : prompts) {
    const auto out = lm_forward(lm, prompt);
    Matrix replacement = out.taps.at(p.layer);
    const std::size_t n = prompt.size();
    if (n < 2) throw ArgumentError("evaluate_sae: prompts need at least two tokens");
    std::vector<float> rows(replacement.data() + replacement.cols(), replacement.data() + replacement.size());
    Matrix acts(n - 1, replacement.cols(), std::move(rows));
    const auto f = encode_batch(sae.params, acts, sae.config);
    const std::span<const TokenId> toks(prompt.data() + 1, n - 1);
    const auto recon = decode_batch(sae.params, f, toks, sae.config);
    std::copy(recon.values().begin(), recon.values().end(), replacement.data() + replacement.cols());
    const auto logits = patched_forward(lm, prompt, p, replacement);
    ce_clean += sequence_cross_entropy(out.logits, prompt);
    ce_patched += sequence_cross_entropy(logits, prompt);
    all_a.insert(all_a.end(), acts.values().begin(), acts.values().end());
    all_r.insert(all_r.end(), recon.values().begin(), recon.values().end());
    all_f.insert(all_f.end(), f.values().begin(), f.values().end());
    n_rows += n - 1;
  }
  const std::size_t d = lm.config.d_model;
  const auto m = nmse(Matrix(n_rows, d, std::move(all_a)), Matrix(n_rows, d, std::move(all_r)));
  rep.nmse = m.value;
  rep.nmse_excluded = m.excluded;
  rep.l0 = l0(Matrix(n_rows, sae.config.n_features(), std::move(all_f)));
  rep.ce_clean = ce_clean / static_cast<double>(prompts.size());
  rep.ce_patched = ce_patched / static_cast<double>(prompts.size());
  rep.ce_added = (rep.ce_patched - rep.ce_clean) / rep.ce_clean;
  rep.n_rows = n_rows;
  return rep;
}

std::vector<ParetoPoint> pareto_sweep(const LmParams<float>& lm, std::span<const TokenId> train_ids,
                                      const std::vector<std::vector<TokenId>>& prompts, TapLocation p,
                                      const SaeConfig& base, const std::vector<double>& knobs,
                                      const BufferConfig& buf, const SaeTrainConfig& train) {
  if (knobs.empty()) throw ArgumentError("pareto_sweep: empty grid");
  std::vector<SaeConfig> configs;
  for (double knob : knobs) {
    for (bool tokenized : {false, true}) {
      SaeConfig cfg = base;
      cfg.tokenized = tokenized;
      if (cfg.variant == SaeVariant::topk) {
        if (knob < 1.0 || knob != std::floor(knob)) throw ArgumentError("top-k knob must be a positive integer");
        cfg.k = static_cast<std::size_t>(knob);
      } else {
        cfg.lambda = knob;
      }
      configs.push_back(cfg);
    }
  }
  std::vector<SaeTrainResult> trained;
  try {
    trained = train_sae_group(lm, train_ids, p, configs, buf, train);
  } catch (const TrainingError& e) {
    const std::size_t m = e.model();
    throw TrainingError("grid point " + io::format_real(knobs.at(m / 2)) + (m % 2 ? " tokenized: " : " plain: ") +
                            e.message(),
                        e.step(), m);
  }
  std::vector<ParetoPoint> out;
  for (std::size_t m = 0; m < configs.size(); ++m) {
    const auto rep = evaluate_sae(lm, trained[m].sae, prompts, p);
    out.push_back({configs[m].variant, configs[m].tokenized, knobs[m / 2], rep.l0, rep.nmse, rep.ce_added});
  }
  return out;
}

std::string pareto_csv(const std::vector<ParetoPoint>& points) {
  std::ostringstream os;
  os << "variant,tokenized,knob,l0,nmse,ce_added\n";
  for (const auto& pt : points) {
    os << to_string(pt.variant) << ',' << (pt.tokenized ? 1 : 0) << ',' << io::format_real(pt.knob) << ','
       << io::format_real(pt.l0) << ',' << io::format_real(pt.nmse) << ',' << io::format_real(pt.ce_added)
       << '\n';
  }
  return os.str();
}

double interpolate_l0_at_nmse(std::vector<ParetoPoint> curve, double target) {
  if (curve.empty()) throw ArgumentError("interpolate_l0_at_nmse: empty curve");
  std::sort(curve.begin(), curve.end(), [](const auto& a, const auto& b) { return a.nmse < b.nmse; });
  if (target < curve.front().nmse || target > curve.back().nmse) {
    throw RangeError("target NMSE outside the curve");
  }
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const auto& a = curve[i];
    const auto& b = curve[i + 1];
    if (target <= b.nmse) {
      if (b.nmse == a.nmse) return std::min(a.l0, b.l0);
      const double t = (target - a.nmse) / (b.nmse - a.nmse);
      return a.l0 + t * (b.l0 - a.l0);
    }
  }
  return curve.back().l0;
}

std::vector<MatchedL0> matched_l0(const std::vector<ParetoPoint>& points) {
  std::vector<ParetoPoint> tok;
  for (const auto& pt : points)
    if (pt.tokenized) tok.push_back(pt);
  if (tok.empty()) throw ArgumentError("matched_l0: no tokenized points");
  const auto top = *std::max_element(tok.begin(), tok.end(), [](const auto& a, const auto& b) { return a.nmse < b.nmse; });
  std::vector<MatchedL0> out;
  for (const auto& pt : points) {
    if (pt.tokenized) continue;
    MatchedL0 m{pt.knob, pt.nmse, pt.l0, 0.0, 0.0, false};
    if (pt.nmse > top.nmse) {
      m.tokenized_l0 = top.l0;
      m.clamped = true;
    } else {
      try {
        m.tokenized_l0 = interpolate_l0_at_nmse(tok, pt.nmse);
      } catch (const RangeError&) {
        continue;
      }
    }
    m.ratio = pt.l0 > 0.0 ? m.tokenized_l0 / pt.l0 : std::numeric_limits<double>::quiet_NaN();
    out.push_back(m);
  }
  return out;
}

FrequencyReport mse_vs_frequency(const LmParams<float>& lm, const Sae& sae, const NgramTable& table,
                                 TapLocation p, std::size_t top) {
  if (table.total() == 0) throw UndefinedError("mse_vs_frequency: empty n-gram table");
  if (table.n() + 1 > lm.config.ctx_len) throw RangeError("n-gram longer than the model context");
  FrequencyReport rep;
  const std::size_t d = lm.config.d_model;
  for (const auto& e : table.top(top)) {
    if (std::any_of(e.gram.begin(), e.gram.end(), [&](TokenId t) { return t >= lm.config.vocab_size; })) {
      ++rep.skipped;
      continue;
    }
    std::vector<TokenId> seq{0};
    seq.insert(seq.end(), e.gram.begin(), e.gram.end());
    const Matrix tap = lm_tap(lm, seq, p);
    const auto r = tap.row(seq.size() - 1);
    Matrix a(1, d, std::vector<float>(r.begin(), r.end()));
    if (norm2<float>(a.row(0)) == 0.0f) {
      ++rep.skipped;
      continue;
    }
    const auto f = encode_batch(sae.params, a, sae.config);
    const TokenId last = e.gram.back();
    const auto recon = decode_batch(sae.params, f, std::span<const TokenId>(&last, 1), sae.config);
    rep.rows.push_back({e.gram, static_cast<double>(e.count) / static_cast<double>(table.total()),
                        recon_mse(a, recon)});
  }
  return rep;
}

std::string frequency_csv(const FrequencyReport& report) {
  std::ostringstream os;
  os << "n_gram,rel_freq,recon_mse\n";
  for (const auto& r : report.rows) {
    for (std::size_t i = 0; i < r.gram.size(); ++i) os << (i ? " " : "") << r.gram[i];
    os << ',' << io::format_real(r.rel_freq) << ',' << io::format_real(r.recon_mse) << '\n';
  }
  return os.str();
}

}  // namespace tsae
