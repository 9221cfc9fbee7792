#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "tsae/errors.hpp"
#include "tsae/evaluation.hpp"
#include "tsae/stats.hpp"

using namespace tsae;

TEST_SUITE("evaluation") {

TEST_CASE("nmse examples") {
  const auto a = Matrix::from_rows({{3, 4}});
  CHECK(nmse(a, a).value == 0.0);
  CHECK(nmse(a, Matrix(1, 2)).value == 1.0);
  CHECK(nmse(a, Matrix::from_rows({{0, 4}})).value == doctest::Approx(0.6).epsilon(1e-12));

  const auto z = Matrix::from_rows({{0, 0}, {3, 4}});
  const auto r = nmse(z, Matrix::from_rows({{1, 1}, {3, 4}}));
  CHECK(r.excluded == 1);
  CHECK(r.value == 0.0);
  CHECK_THROWS_AS(nmse(Matrix(2, 2), Matrix(2, 2)), UndefinedError);
  CHECK_THROWS_AS(nmse(a, Matrix(2, 2)), DimensionError);
}

TEST_CASE("nmse is scale-equivariant in its error") {
  Rng rng(1);
  Matrix a(20, 6);
  for (float& v : a.values()) v = static_cast<float>(rng.normal());
  for (double c : {-2.0, -0.5, 0.25, 3.0}) {
    Matrix b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b.values()[i] = static_cast<float>(a.values()[i] * (1.0 + c));
    CHECK(nmse(a, b).value == doctest::Approx(std::abs(c)).epsilon(1e-6));
  }
}

TEST_CASE("l0 and recon_mse") {
  CHECK(l0(Matrix::from_rows({{0, 1, 2}, {0, 0, 3}})) == 1.5);
  CHECK(l0(Matrix(4, 5)) == 0.0);
  CHECK(recon_mse(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{0, 0}})) == 2.5);
  CHECK_THROWS_AS(l0(Matrix(0, 3)), UndefinedError);
}

TEST_CASE("top-k codes have exactly k actives") {
  Rng rng(2);
  SaeConfig cfg;
  cfg.d_model = 8;
  cfg.expansion = 4;
  cfg.k = 5;
  const auto sae = init_sae(cfg, nullptr, rng);
  Matrix acts(50, 8);
  for (float& v : acts.values()) v = static_cast<float>(rng.normal());
  CHECK(l0(encode_batch(sae.params, acts, cfg)) == 5.0);
}

TEST_CASE("prompts and activation sets") {
  const auto corpus = fixture::small_corpus();
  const auto prompts = make_prompts(corpus.ids, 16, 7);
  REQUIRE(prompts.size() == 7);
  for (const auto& p : prompts) {
    CHECK(p.size() == 16);
    CHECK(p[0] == 0);
  }
  CHECK(std::equal(prompts.back().begin() + 1, prompts.back().end(), corpus.ids.end() - 15));
  const auto lm = fixture::small_lm();
  const auto set = collect_activations(lm, prompts, TapLocation{1});
  CHECK(set.acts.rows() == 7 * 15);
  CHECK(set.tokens[0] == prompts[0][1]);
  CHECK(set.position[0] == 1);
  CHECK(set.prompt_index.back() == 6);
}

TEST_CASE("identity patch adds no cross-entropy") {
  const auto lm = fixture::small_lm();
  const auto corpus = fixture::small_corpus();
  const auto prompts = make_prompts(corpus.ids, 16, 10);
  const auto sae = fixture::identity_sae(16);
  for (std::size_t p = 0; p <= 2; ++p) {
    const auto rep = evaluate_sae(lm, sae, prompts, TapLocation{p});
    CHECK(rep.nmse == 0.0);
    CHECK(rep.ce_added == 0.0);
    CHECK(rep.ce_patched == rep.ce_clean);
    CHECK(rep.n_rows == 150);
    CHECK(rep.ce_added == doctest::Approx((rep.ce_patched - rep.ce_clean) / rep.ce_clean).epsilon(1e-9));
  }
}

TEST_CASE("evaluation does not mutate its inputs") {
  const auto lm = fixture::small_lm();
  const auto corpus = fixture::small_corpus();
  const auto prompts = make_prompts(corpus.ids, 16, 4);
  Rng rng(3);
  SaeConfig cfg;
  cfg.d_model = 16;
  cfg.expansion = 2;
  const auto sae = init_sae(cfg, nullptr, rng);
  const auto lm_copy = lm;
  const auto sae_copy = sae;
  const auto r1 = evaluate_sae(lm, sae, prompts, TapLocation{1});
  const auto r2 = evaluate_sae(lm, sae, prompts, TapLocation{1});
  CHECK(lm == lm_copy);
  CHECK(sae == sae_copy);
  CHECK(r1.ce_added == r2.ce_added);
  CHECK(r1.ce_added != 0.0);
}

TEST_CASE("pareto sweep shape and errors") {
  const auto lm = fixture::small_lm();
  const auto corpus = fixture::small_corpus();
  const auto split = split_corpus(corpus);
  const auto prompts = make_prompts(split.heldout, 16, 4);
  SaeConfig base;
  base.d_model = 16;
  base.expansion = 2;
  base.lookup_lr_multiplier = 10;
  BufferConfig buf;
  buf.buffer_rows = 256;
  buf.batch_rows = 32;
  buf.ctx_len = 16;
  SaeTrainConfig tc;
  tc.steps = 5;
  tc.lr0 = 1e-3;

  const auto one = pareto_sweep(lm, split.train, prompts, TapLocation{1}, base, {4}, buf, tc);
  REQUIRE(one.size() == 2);
  CHECK(!one[0].tokenized);
  CHECK(one[1].tokenized);
  const auto two = pareto_sweep(lm, split.train, prompts, TapLocation{1}, base, {4, 8}, buf, tc);
  CHECK(two.size() == 4);
  CHECK(two[2].knob == 8);
  const auto csv = pareto_csv(two);
  CHECK(csv.rfind("variant,tokenized,knob,l0,nmse,ce_added\ntopk,0,4,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  CHECK_THROWS_AS(pareto_sweep(lm, split.train, prompts, TapLocation{1}, base, {}, buf, tc), ArgumentError);
  CHECK_THROWS_AS(pareto_sweep(lm, split.train, prompts, TapLocation{1}, base, {2.5}, buf, tc), ArgumentError);

  auto bad_lm = lm;
  bad_lm.tok_emb(3, 0) = 1e30f;
  try {
    (void)pareto_sweep(bad_lm, split.train, prompts, TapLocation{1}, base, {4}, buf, tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("grid point 4 plain") != std::string::npos);
  }
}

TEST_CASE("vanilla sweep L0 falls with lambda") {
  const auto lm = fixture::small_lm();
  const auto corpus = fixture::small_corpus();
  const auto split = split_corpus(corpus);
  const auto prompts = make_prompts(split.heldout, 16, 8);
  SaeConfig base;
  base.d_model = 16;
  base.expansion = 2;
  base.variant = SaeVariant::vanilla;
  base.lookup_lr_multiplier = 10;
  BufferConfig buf;
  buf.buffer_rows = 1024;
  buf.batch_rows = 64;
  buf.ctx_len = 16;
  SaeTrainConfig tc;
  tc.steps = 150;
  tc.lr0 = 3e-3;
  const std::vector<double> grid{1e-4, 1e-3, 1e-2, 1e-1};
  const auto pts = pareto_sweep(lm, split.train, prompts, TapLocation{1}, base, grid, buf, tc);
  for (bool tok : {false, true}) {
    std::vector<double> lam, l0s;
    for (const auto& p : pts)
      if (p.tokenized == tok) {
        lam.push_back(p.knob);
        l0s.push_back(p.l0);
      }
    CHECK(spearman(lam, l0s) <= 0.0);
  }
}

TEST_CASE("interpolation at matched nmse") {
  std::vector<ParetoPoint> curve{{SaeVariant::vanilla, true, 0, 40, 0.1, 0},
                                 {SaeVariant::vanilla, true, 0, 10, 0.3, 0},
                                 {SaeVariant::vanilla, true, 0, 20, 0.2, 0}};
  CHECK(interpolate_l0_at_nmse(curve, 0.25) == doctest::Approx(15.0));
  CHECK(interpolate_l0_at_nmse(curve, 0.1) == doctest::Approx(40.0));
  CHECK(interpolate_l0_at_nmse(curve, 0.3) == doctest::Approx(10.0));
  CHECK_THROWS_AS(interpolate_l0_at_nmse(curve, 0.05), RangeError);
  CHECK_THROWS_AS(interpolate_l0_at_nmse({}, 0.2), ArgumentError);
}

TEST_CASE("matched l0 pairs plain points with the tokenized curve") {
  std::vector<ParetoPoint> pts{{SaeVariant::vanilla, false, 1, 50, 0.25, 0}, {SaeVariant::vanilla, true, 1, 20, 0.2, 0},
                               {SaeVariant::vanilla, false, 2, 30, 0.5, 0},  {SaeVariant::vanilla, true, 2, 10, 0.3, 0},
                               {SaeVariant::vanilla, false, 3, 90, 0.05, 0}, {SaeVariant::vanilla, true, 3, 40, 0.1, 0}};
  const auto m = matched_l0(pts);
  REQUIRE(m.size() == 2);  // the 0.05 point lies below the tokenized curve
  CHECK(m[0].knob == 1);
  CHECK(m[0].tokenized_l0 == doctest::Approx(15.0));
  CHECK(m[0].ratio == doctest::Approx(0.3));
  CHECK_FALSE(m[0].clamped);
  CHECK(m[1].knob == 2);
  CHECK(m[1].clamped);
  CHECK(m[1].tokenized_l0 == 10.0);
  CHECK(m[1].ratio == doctest::Approx(1.0 / 3.0));
  pts.erase(std::remove_if(pts.begin(), pts.end(), [](const auto& p) { return p.tokenized; }), pts.end());
  CHECK_THROWS_AS(matched_l0(pts), ArgumentError);
}

TEST_CASE("mse vs frequency") {
  const auto lm = fixture::small_lm();
  const auto corpus = fixture::small_corpus();
  const auto sae = fixture::identity_sae(16);
  const auto uni = count_ngrams(corpus, 1);
  const auto rep = mse_vs_frequency(lm, sae, uni, TapLocation{1}, 10);
  CHECK(rep.rows.size() == 10);
  CHECK(rep.skipped == 0);
  for (const auto& r : rep.rows) CHECK(r.recon_mse == 0.0);
  CHECK(rep.rows[0].rel_freq >= rep.rows[9].rel_freq);
  const auto bi = count_ngrams(corpus, 2);
  CHECK(mse_vs_frequency(lm, sae, bi, TapLocation{1}, 1'000'000).rows.size() == bi.distinct());

  // grams outside the model vocabulary are skipped and counted
  NgramTable wide(1, 64);
  const std::vector<TokenId> in{5}, out{40};
  wide.add(in, 3);
  wide.add(out, 2);
  const auto sk = mse_vs_frequency(lm, sae, wide, TapLocation{1}, 5);
  CHECK(sk.rows.size() == 1);
  CHECK(sk.skipped == 1);
  CHECK(frequency_csv(sk).rfind("n_gram,rel_freq,recon_mse\n5,0.6,0\n", 0) == 0);
}

}  // TEST_SUITE
