#pragma once

#include "tsae/corpus.hpp"
#include "tsae/lm.hpp"
#include "tsae/sae.hpp"

namespace fixture {

inline tsae::LmParams<float> small_lm(std::uint64_t seed = 1) {
  tsae::LmConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.ctx_len = 16;
  tsae::Rng rng(seed);
  return tsae::init_lm(c, rng);
}

inline tsae::TokenCorpus small_corpus(std::uint64_t seed = 0) {
  tsae::CorpusConfig cc;
  cc.vocab_size = 32;
  cc.length = 5000;
  cc.seed = seed;
  cc.motifs = {{{3, 4}, 0.05}, {{6, 7, 8}, 0.03}};
  return tsae::gen_corpus(cc);
}

/// Vanilla SAE with F = 2d that reconstructs every input exactly:
/// f = [ReLU(a), ReLU(-a)], â = f · [I; -I].
inline tsae::Sae identity_sae(std::size_t d) {
  tsae::Sae s;
  s.config.d_model = d;
  s.config.expansion = 2;
  s.config.variant = tsae::SaeVariant::vanilla;
  s.config.lambda = 0.0;
  auto& p = s.params;
  p.w_enc = tsae::Matrix(d, 2 * d);
  p.w_dec = tsae::Matrix(2 * d, d);
  for (std::size_t i = 0; i < d; ++i) {
    p.w_enc(i, i) = 1.0f;
    p.w_enc(i, d + i) = -1.0f;
    p.w_dec(i, i) = 1.0f;
    p.w_dec(d + i, i) = -1.0f;
  }
  p.b_enc = tsae::Matrix(1, 2 * d);
  p.b_dec = tsae::Matrix(1, d);
  return s;
}

}  // namespace fixture
