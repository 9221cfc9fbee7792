#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "tsae/errors.hpp"
#include "tsae/lm.hpp"

using namespace tsae;

namespace {

LmConfig small_config() {
  LmConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.ctx_len = 12;
  return c;
}

std::vector<TokenId> random_prompt(Rng& rng, std::size_t n, std::uint32_t V) {
  std::vector<TokenId> t{0};
  while (t.size() < n) t.push_back(static_cast<TokenId>(1 + rng.below(V - 1)));
  return t;
}

}  // namespace

TEST_SUITE("lm") {

TEST_CASE("forward matches the 64-bit reference") {
  LmConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.ctx_len = 8;
  Rng rng(7);
  const auto lm = init_lm(cfg, rng);
  const std::vector<TokenId> toks{0, 3, 5};
  const auto ref = oracle::lm_forward(lm.cast<double>(), toks);
  const auto out = lm_forward(lm, std::span<const TokenId>(toks));
  REQUIRE(out.logits.rows() == 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) CHECK(std::abs(out.logits(i, j) - ref.logits[i][j]) < 1e-4);
  for (std::size_t p = 0; p <= cfg.n_layers; ++p)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(std::abs(out.taps[p](i, j) - ref.taps[p][i][j]) < 1e-4);

  // the double instantiation agrees to near machine precision
  const auto outd = lm_forward(lm.cast<double>(), std::span<const TokenId>(toks));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) CHECK(std::abs(outd.logits(i, j) - ref.logits[i][j]) < 1e-10);
}

TEST_CASE("randomized parameters also match the reference") {
  const auto P = oracle::tiny_lm(21);
  const std::vector<TokenId> toks{0, 4, 4, 9, 1};
  const auto ref = oracle::lm_forward(P, toks);
  const auto out = lm_forward(P, std::span<const TokenId>(toks));
  for (std::size_t i = 0; i < toks.size(); ++i)
    for (std::size_t j = 0; j < 11; ++j) CHECK(out.logits(i, j) == doctest::Approx(ref.logits[i][j]).epsilon(1e-10));
}

TEST_CASE("BOS-only prompt gives a normalized row") {
  Rng rng(1);
  const auto lm = init_lm(small_config(), rng);
  const std::vector<TokenId> toks{0};
  const auto out = lm_forward(lm, std::span<const TokenId>(toks));
  CHECK(out.logits.rows() == 1);
  CHECK(out.logits.cols() == 32);
  double mx = -1e300, z = 0.0;
  for (float v : out.logits.row(0)) mx = std::max(mx, double(v));
  for (float v : out.logits.row(0)) z += std::exp(v - mx);
  double s = 0.0;
  for (float v : out.logits.row(0)) s += std::exp(v - mx) / z;
  CHECK(std::abs(s - 1.0) < 1e-5);
}

TEST_CASE("input validation") {
  Rng rng(1);
  const auto lm = init_lm(small_config(), rng);
  const std::vector<TokenId> no_bos{3, 4};
  CHECK_THROWS_AS(lm_forward(lm, std::span<const TokenId>(no_bos)), ArgumentError);
  std::vector<TokenId> too_long(13, 1);
  too_long[0] = 0;
  CHECK_THROWS_AS(lm_forward(lm, std::span<const TokenId>(too_long)), RangeError);
  LmConfig bad = small_config();
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("causality: taps are bit-identical under future truncation") {
  Rng rng(2);
  const auto lm = init_lm(small_config(), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const auto toks = random_prompt(rng, 12, 32);
    const auto full = lm_forward(lm, std::span<const TokenId>(toks));
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const auto prefix = lm_forward(lm, std::span<const TokenId>(toks.data(), i + 1));
      for (std::size_t p = 0; p <= 2; ++p) {
        const auto a = full.taps[p].row(i), b = prefix.taps[p].row(i);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
      }
    }
  }
}

TEST_CASE("lm_tap equals the full forward tap") {
  Rng rng(3);
  const auto lm = init_lm(small_config(), rng);
  const auto toks = random_prompt(rng, 10, 32);
  const auto full = lm_forward(lm, std::span<const TokenId>(toks));
  for (std::size_t p = 0; p <= 2; ++p) CHECK(lm_tap(lm, std::span<const TokenId>(toks), TapLocation{p}) == full.taps[p]);
}

TEST_CASE("patched forward") {
  Rng rng(4);
  const auto lm = init_lm(small_config(), rng);
  const auto toks = random_prompt(rng, 10, 32);
  const auto clean = lm_forward(lm, std::span<const TokenId>(toks));
  for (std::size_t p = 0; p <= 2; ++p) {
    const auto patched = patched_forward(lm, std::span<const TokenId>(toks), TapLocation{p}, clean.taps[p]);
    CHECK(patched == clean.logits);
    CHECK(sequence_cross_entropy(patched, std::span<const TokenId>(toks)) ==
          sequence_cross_entropy(clean.logits, std::span<const TokenId>(toks)));
  }
  const auto zeroed = patched_forward(lm, std::span<const TokenId>(toks), TapLocation{1}, Matrix(10, 16));
  double diff = 0.0;
  for (std::size_t i = 0; i < zeroed.size(); ++i)
    diff = std::max(diff, double(std::abs(zeroed.values()[i] - clean.logits.values()[i])));
  CHECK(diff > 0.0);
  CHECK_THROWS_AS(patched_forward(lm, std::span<const TokenId>(toks), TapLocation{1}, Matrix(9, 16)), DimensionError);
}

TEST_CASE("unigram and truncated activations") {
  Rng rng(7);
  auto lm = init_lm(small_config(), rng);
  const TapLocation p{2};
  const std::vector<TokenId> bt{0, 5};
  const auto direct_out = lm_forward(lm, std::span<const TokenId>(bt));
  const auto direct = direct_out.taps[2].row(1);
  const auto u = unigram_activation(lm, 5, p);
  CHECK(std::equal(u.begin(), u.end(), direct.begin()));
  CHECK(unigram_table(lm, p).rows() == 32);

  const auto toks = random_prompt(rng, 12, 32);
  const auto full = lm_forward(lm, std::span<const TokenId>(toks)).taps[2];
  for (std::size_t i = 1; i < toks.size(); ++i) {
    const auto t1 = truncated_activation(lm, std::span<const TokenId>(toks), i, 1, p);
    CHECK(t1 == unigram_activation(lm, toks[i], p));
    for (std::size_t n : {i, i + 1, i + 5}) {
      const auto tf = truncated_activation(lm, std::span<const TokenId>(toks), i, n, p);
      CHECK(std::equal(tf.begin(), tf.end(), full.row(i).begin()));
    }
  }

  // zero positional embedding at position 1: distinct tokens give distinct rows
  for (float& v : lm.pos_emb.row(1)) v = 0.0f;
  const auto table = unigram_table(lm, p);
  for (TokenId a = 0; a < 32; ++a)
    for (TokenId b = a + 1; b < 32; ++b) {
      double dist = 0.0;
      for (std::size_t c = 0; c < 16; ++c) dist += std::pow(table(a, c) - table(b, c), 2);
      CHECK(dist > 0.0);
    }
}

TEST_CASE("hand gradients match finite differences") {
  const auto gc = oracle::lm_grad_check(5);
  INFO("worst entry " << gc.worst);
  CHECK(gc.checked > 1000);
  CHECK(gc.max_rel_err < 1e-3);
}

TEST_CASE("training") {
  const auto cfg = small_config();
  Rng init_rng(8);
  const auto lm0 = init_lm(cfg, init_rng);
  std::vector<TokenId> corpus;
  Rng crng(9);
  for (int i = 0; i < 3000; ++i) corpus.push_back(static_cast<TokenId>(1 + crng.below(31)));

  LmTrainConfig tc;
  tc.steps = 0;
  Rng r0(1);
  CHECK(lm_train(lm0, corpus, tc, r0).params == lm0);

  tc.steps = 5;
  tc.batch = 2;
  Rng r1(1), r2(1);
  const auto a = lm_train(lm0, corpus, tc, r1);
  const auto b = lm_train(lm0, corpus, tc, r2);
  CHECK(a.params == b.params);
  CHECK(!(a.params == lm0));

  CHECK_THROWS_AS(lm_train(lm0, std::span<const TokenId>(corpus.data(), 5), tc, r1), RangeError);

  auto broken = lm0;
  broken.unembed(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    (void)lm_train(broken, corpus, tc, r1);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("training beats the unigram baseline on a structured corpus") {
  // deterministic successor with noise: a learnable bigram structure
  CorpusConfig cc;
  cc.vocab_size = 32;
  cc.length = 20000;
  cc.motifs = {{{3, 4}, 0.2}, {{5, 6, 7}, 0.2}};
  const auto corpus = gen_corpus(cc);
  Rng rng(1);
  auto lm = init_lm(small_config(), rng);
  LmTrainConfig tc;
  tc.steps = 150;
  tc.batch = 8;
  tc.lr = 3e-3;
  const auto res = lm_train(lm, corpus.ids, tc, rng);
  CHECK(res.loss_log.back().second < unigram_entropy(corpus));
}

TEST_CASE("checkpoint round trip and corruption") {
  Rng rng(3);
  const auto lm = init_lm(small_config(), rng);
  const auto path = std::filesystem::temp_directory_path() / "tsae_test_lm.tslm";
  save_lm(lm, path);
  CHECK(load_lm(path) == lm);
  auto bytes = encode_lm(lm);
  CHECK(bytes.substr(0, 4) == "TSLM");
  auto bad = bytes;
  bad[1] = 'Z';
  CHECK_THROWS_AS(decode_lm(bad), FormatError);
  auto ver = bytes;
  ver[4] = 9;
  CHECK_THROWS_AS(decode_lm(ver), FormatError);
  CHECK_THROWS_AS(decode_lm(bytes.substr(0, bytes.size() / 2)), FormatError);
  std::filesystem::remove(path);
}

}  // TEST_SUITE
