#include "commands.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "manifest.hpp"
#include "tsae/analysis.hpp"
#include "tsae/binary_io.hpp"
#include "tsae/stats.hpp"

namespace tsae::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kCorpusFile = "corpus.tsac";
const char* kLmFile = "lm.tslm";

json real_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string dump(const json& j) { return j.dump(2) + "\n"; }

int finish(Step& step, const Options& o, const std::string& name) {
  step.finish();
  if (o.self_check) {
    const auto v = verify_manifest(o.out, name);
    for (const auto& p : v.problems) std::cerr << "self-check: " << p << '\n';
    if (!v.problems.empty()) return 1;
    std::cerr << "self-check: " << v.checked << " files verified\n";
  }
  return 0;
}

TokenCorpus read_corpus(Step& step, const Options& o) {
  return decode_corpus(io::read_file(step.input(o.corpus, kCorpusFile)), "corpus");
}

LmParams<float> read_lm(Step& step, const Options& o) {
  auto lm = decode_lm(io::read_file(step.input(o.lm, kLmFile)), "lm checkpoint");
  if (o.cfg.tap().layer > lm.config.n_layers) {
    throw ConfigError("sae.tap " + std::to_string(o.cfg.tap().layer) + " exceeds the model's " +
                      std::to_string(lm.config.n_layers) + " layers");
  }
  return lm;
}

Sae read_sae(Step& step, const std::string& given, const std::string& fallback) {
  return decode_sae(io::read_file(step.input(given, fallback)), "sae checkpoint");
}

std::string sae_stem(const Options& o) { return o.sae.empty() ? o.name : fs::path(o.sae).stem().string(); }

CorpusSplit split(const TokenCorpus& c, const Options& o) {
  const double f = o.cfg.real("corpus.heldout_fraction");
  if (!(f > 0.0 && f < 1.0)) throw ConfigError("corpus.heldout_fraction must lie in (0, 1)");
  return split_corpus(c, f);
}

std::vector<std::vector<TokenId>> eval_prompts(const CorpusSplit& s, const Options& o) {
  const auto n = o.cfg.count("eval.prompts");
  if (n == 0) throw ConfigError("eval.prompts must be positive");
  return make_prompts(s.heldout, o.cfg.count("eval.ctx_len"), n);
}

json eval_json(const EvalReport& r) {
  return {{"nmse", real_or_null(r.nmse)},       {"nmse_excluded", r.nmse_excluded},
          {"l0", r.l0},                          {"ce_clean", r.ce_clean},
          {"ce_patched", r.ce_patched},          {"ce_added", real_or_null(r.ce_added)},
          {"n_rows", r.n_rows}};
}

}  // namespace

int gen_corpus(const Options& o) {
  const auto cc = o.cfg.corpus();
  Step step("gen-corpus", o.cfg, o.out);
  const auto corpus = gen_corpus(cc);
  step.write(kCorpusFile, encode_corpus(corpus));
  const auto rows = o.cfg.count("corpus.table_rows");
  json summary{{"length", corpus.size()}, {"vocab_size", corpus.vocab.size}};
  const char* names[] = {"unigrams", "bigrams", "trigrams"};
  for (std::size_t n = 1; n <= 3; ++n) {
    const auto t = count_ngrams(corpus, n);
    step.write(std::string("corpus_") + names[n - 1] + ".csv", ngram_csv(t, rows));
    const auto top = t.top(1);
    const double med = t.median_relative_frequency();
    summary[names[n - 1]] = {
        {"distinct", t.distinct()},
        {"median_rel_freq", med},
        {"top_over_median", top.empty() ? json(nullptr)
                                        : json(static_cast<double>(top[0].count) / static_cast<double>(t.total()) / med)}};
  }
  summary["unigram_entropy"] = unigram_entropy(corpus);
  step.write("corpus_summary.json", dump(summary));
  return finish(step, o, "gen-corpus");
}

int train_lm(const Options& o) {
  const auto lc = o.cfg.lm();
  const auto tc = o.cfg.lm_train();
  Step step("train-lm", o.cfg, o.out);
  const auto corpus = read_corpus(step, o);
  if (corpus.vocab.size != lc.vocab_size) {
    throw ConfigError("corpus.vocab_size " + std::to_string(lc.vocab_size) + " does not match the corpus file's " +
                      std::to_string(corpus.vocab.size));
  }
  const auto s = split(corpus, o);
  Rng rng(o.cfg.seed());
  auto res = lm_train(init_lm(lc, rng), s.train, tc, rng);
  step.write(kLmFile, encode_lm(res.params));
  std::ostringstream log;
  log << "step,ce\n";
  for (const auto& [st, ce] : res.loss_log) log << st << ',' << io::format_real(ce) << '\n';
  step.write("lm_loss.csv", log.str());
  const auto prompts = eval_prompts(s, o);
  double ce = 0.0;
  for (const auto& p : prompts) ce += sequence_cross_entropy(lm_forward(res.params, p).logits, p);
  step.write("lm_summary.json", dump({{"heldout_ce", ce / static_cast<double>(prompts.size())},
                                      {"unigram_entropy", unigram_entropy(corpus)},
                                      {"final_train_ce", res.loss_log.empty() ? json(nullptr)
                                                                              : json(res.loss_log.back().second)}}));
  return finish(step, o, "train-lm");
}

int train_sae(const Options& o) {
  const auto bc = o.cfg.buffer();
  auto tc = o.cfg.sae_train();
  Step step("train-sae." + o.name, o.cfg, o.out);
  const auto corpus = read_corpus(step, o);
  const auto lm = read_lm(step, o);
  const auto sc = o.cfg.sae(lm.config.d_model);
  tc.frozen_features = o.cfg.frozen_features(sc.n_features());
  const auto s = split(corpus, o);
  const auto res = tsae::train_sae(lm, s.train, o.cfg.tap(), sc, bc, tc);
  step.write(o.name + ".tsae", encode_sae(res.sae));
  step.write(o.name + "_log.csv", res.log.to_csv());
  return finish(step, o, "train-sae." + o.name);
}

int eval_sae(const Options& o) {
  const std::string stem = sae_stem(o);
  Step step("eval-sae." + stem, o.cfg, o.out);
  const auto corpus = read_corpus(step, o);
  const auto lm = read_lm(step, o);
  const auto sae = read_sae(step, o.sae, o.name + ".tsae");
  const auto rep = evaluate_sae(lm, sae, eval_prompts(split(corpus, o), o), o.cfg.tap());
  std::ostringstream csv;
  csv << "nmse,nmse_excluded,l0,ce_clean,ce_patched,ce_added,n_rows\n"
      << io::format_real(rep.nmse) << ',' << rep.nmse_excluded << ',' << io::format_real(rep.l0) << ','
      << io::format_real(rep.ce_clean) << ',' << io::format_real(rep.ce_patched) << ','
      << io::format_real(rep.ce_added) << ',' << rep.n_rows << '\n';
  step.write(stem + "_eval.csv", csv.str());
  step.write(stem + "_eval.json", dump(eval_json(rep)));
  return finish(step, o, "eval-sae." + stem);
}

int pareto(const Options& o) {
  const auto bc = o.cfg.buffer();
  const auto tc = o.cfg.sae_train();
  Step step("pareto", o.cfg, o.out);
  const auto corpus = read_corpus(step, o);
  const auto lm = read_lm(step, o);
  const auto base = o.cfg.sae(lm.config.d_model);
  const auto grid = o.cfg.reals(base.variant == SaeVariant::topk ? "pareto.topk_grid" : "pareto.vanilla_grid");
  const auto s = split(corpus, o);
  std::vector<ParetoPoint> pts;
  try {
    pts = pareto_sweep(lm, s.train, eval_prompts(s, o), o.cfg.tap(), base, grid, bc, tc);
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  step.write("pareto.csv", pareto_csv(pts));
  json records = json::array();
  for (const auto& p : pts) {
    records.push_back({{"variant", to_string(p.variant)},
                       {"tokenized", p.tokenized},
                       {"knob", p.knob},
                       {"l0", p.l0},
                       {"nmse", real_or_null(p.nmse)},
                       {"ce_added", real_or_null(p.ce_added)}});
  }
  json matched = json::array();
  for (const auto& m : matched_l0(pts)) {
    matched.push_back({{"knob", m.knob},
                       {"nmse", m.nmse},
                       {"plain_l0", m.plain_l0},
                       {"tokenized_l0", m.tokenized_l0},
                       {"ratio", real_or_null(m.ratio)},
                       {"clamped", m.clamped}});
  }
  step.write("pareto.json", dump({{"points", records}, {"matched_l0", matched}}));
  return finish(step, o, "pareto");
}

int analyze(const Options& o) {
  const std::string& kind = o.kind;
  const bool needs_sae = kind != "patching" && kind != "final-token";
  const std::string prefix = needs_sae ? sae_stem(o) + "_" : "";
  const std::string name = "analyze." + prefix + kind;
  Step step(name, o.cfg, o.out);
  const auto corpus = read_corpus(step, o);
  const auto lm = read_lm(step, o);
  const TapLocation p = o.cfg.tap();
  const auto prompts = eval_prompts(split(corpus, o), o);
  const std::string base = "analysis/" + prefix + kind;
  json summary{{"kind", kind}};
  std::string csv;

  if (kind == "patching") {
    const auto n_max = o.cfg.count("analysis.patch_n_max");
    if (n_max == 0) throw ConfigError("analysis.patch_n_max must be positive");
    std::vector<std::vector<TokenId>> sub(prompts.begin(),
                                          prompts.begin() + std::min<std::size_t>(prompts.size(),
                                                                                  o.cfg.count("analysis.patch_prompts")));
    const auto c = patching_curve(lm, sub, p, n_max);
    csv = c.csv();
    std::vector<double> ns;
    for (std::size_t n = 1; n <= c.mean_cos.size(); ++n) ns.push_back(static_cast<double>(n));
    summary["n_samples"] = c.n_samples;
    summary["mean_cos"] = c.mean_cos;
    if (ns.size() >= 2) {
      try {
        summary["spearman_n_cos"] = spearman(ns, c.mean_cos);
      } catch (const UndefinedError&) {
        summary["spearman_n_cos"] = nullptr;
      }
    }
  } else if (kind == "final-token") {
    const auto f = final_token_closeness(lm, prompts, p, unigram_table(lm, p));
    csv = f.csv();
    summary.update({{"n_prompts", f.n_prompts},
                    {"mean_nearest_cos", f.mean_nearest_cos},
                    {"mean_final_cos", f.mean_final_cos},
                    {"mean_first_cos", f.mean_first_cos},
                    {"pct_final_closest", f.pct_final_closest}});
  } else {
    const auto sae = read_sae(step, o.sae, o.name + ".tsae");
    if (sae.config.d_model != lm.config.d_model) throw ConfigError("SAE d_model does not match the model");
    const auto test = collect_activations(lm, prompts, p);
    if (kind == "unigram-scan") {
      const auto r = unigram_activation_scan(sae, unigram_table(lm, p), test, o.cfg.real("analysis.strong_threshold"));
      csv = r.csv();
      summary.update({{"threshold", r.threshold},
                      {"n_live", r.n_live},
                      {"frac_strong", r.frac_strong},
                      {"frac_top_match", r.frac_top_match}});
    } else if (kind == "dead-features") {
      const auto r = dead_feature_scan(sae, test.acts, o.cfg.real("analysis.dead_act_threshold"),
                                       o.cfg.real("analysis.dead_cos_cut"));
      csv = r.csv();
      summary.update({{"act_threshold", r.act_threshold},
                      {"cut", r.cut},
                      {"n_dead", r.n_dead},
                      {"n_flagged", r.n_flagged},
                      {"n_both", r.n_both},
                      {"cos_histogram", r.cos_histogram}});
      const auto frozen = o.cfg.frozen_features(sae.config.n_features());
      if (!frozen.empty()) {
        // Ground truth: planted features plus those that never reach the threshold.
        std::vector<bool> truth(sae.config.n_features(), false);
        for (auto j : frozen) truth[j] = true;
        for (std::size_t j = 0; j < truth.size(); ++j) truth[j] = truth[j] || r.features[j].dead;
        const auto a = r.agreement(truth);
        summary["planted"] = frozen.size();
        summary["precision"] = a.precision;
        summary["recall"] = a.recall;
      }
    } else if (kind == "complexity") {
      const auto r = complexity_scan(sae, lm, prompts, test, p, o.cfg.real("analysis.complexity_min_act"));
      csv = r.csv();
      summary.update({{"min_act", r.min_act},
                      {"n_features", r.rows.size()},
                      {"frac_positive_above_2", r.frac_positive_above_2},
                      {"frac_90_above_2", r.frac_90_above_2}});
    } else if (kind == "act-cossim") {
      const auto r = activation_vs_cossim(sae, test.acts, o.cfg.seed());
      csv = r.csv();
      summary.update({{"n_pairs", r.n_pairs},
                      {"r", r.r ? json(*r.r) : json(nullptr)},
                      {"shuffled_r", r.shuffled_r ? json(*r.shuffled_r) : json(nullptr)}});
    } else if (kind == "enc-unigram") {
      const auto table = unigram_table(lm, p);
      const auto v = encoder_unigram_similarity(sae, table);
      csv = values_csv("max_cos", v);
      double mean = 0.0;
      for (double x : v) mean += x;
      summary["n_features"] = v.size();
      summary["mean_max_cos"] = v.empty() ? json(nullptr) : json(mean / static_cast<double>(v.size()));
      if (!o.baseline.empty()) {
        const auto other = read_sae(step, o.baseline, "");
        const auto w = encoder_unigram_similarity(other, table);
        const auto t = rank_sum_less(v, w);
        summary["baseline"] = {{"n_features", w.size()}, {"u", t.u}, {"z", t.z}, {"p_value", t.p_value}};
      }
    } else if (kind == "mse-vs-freq") {
      const auto n = o.cfg.count("analysis.mse_n");
      if (n != 1 && n != 2) throw ConfigError("analysis.mse_n must be 1 or 2");
      const auto r = mse_vs_frequency(lm, sae, count_ngrams(corpus, n), p, o.cfg.count("analysis.mse_top"));
      csv = frequency_csv(r);
      summary["rows"] = r.rows.size();
      summary["skipped"] = r.skipped;
      std::vector<double> lf, mse;
      for (const auto& row : r.rows) {
        lf.push_back(std::log(row.rel_freq));
        mse.push_back(row.recon_mse);
      }
      try {
        summary["pearson_logfreq_mse"] = pearson(lf, mse);
      } catch (const UndefinedError&) {
        summary["pearson_logfreq_mse"] = nullptr;
      }
    } else {
      throw ConfigError("unknown analysis kind '" + kind + "'");
    }
  }
  step.write(base + ".csv", csv);
  step.write(base + ".json", dump(summary));
  return finish(step, o, name);
}

int verify(const Options& o) {
  const auto v = verify_manifest(o.out);
  for (const auto& p : v.problems) std::cerr << p << '\n';
  std::cout << v.checked << " files checked, " << v.problems.size() << " problems\n";
  return v.problems.empty() ? 0 : 1;
}

}  // namespace tsae::cli
