#include "tsae/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "tsae/binary_io.hpp"
#include "tsae/errors.hpp"
#include "tsae/evaluation.hpp"

namespace tsae {

void BufferConfig::validate() const {
  if (batch_rows == 0) throw ArgumentError("batch_rows must be positive");
  if (buffer_rows < batch_rows) throw ArgumentError("buffer_rows must be at least batch_rows");
  if (ctx_len < 2) throw ArgumentError("buffer ctx_len must be at least 2");
  if (!(refill_threshold > 0.0 && refill_threshold < 1.0)) {
    throw ArgumentError("refill_threshold must lie in (0, 1)");
  }
}

void append_window_rows(const LmParams<float>& lm, std::span<const TokenId> window, TapLocation p,
                        bool include_bos, std::vector<float>& acts, std::vector<TokenId>& tokens) {
  const Matrix tap = lm_tap(lm, window, p);
  for (std::size_t i = include_bos ? 0 : 1; i < window.size(); ++i) {
    const auto r = tap.row(i);
    acts.insert(acts.end(), r.begin(), r.end());
    tokens.push_back(window[i]);
  }
}

namespace {

void check_source(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
                  const BufferConfig& cfg) {
  cfg.validate();
  if (cfg.ctx_len > lm.config.ctx_len) throw ArgumentError("buffer ctx_len exceeds the model context");
  if (p.layer > lm.config.n_layers) throw RangeError("tap layer out of range");
  if (corpus.size() < cfg.ctx_len - 1) throw RangeError("corpus shorter than one buffer window");
}

// Appends rows from random windows until `want` rows have been added.
void draw_rows(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
               const BufferConfig& cfg, Rng& rng, std::size_t want, std::vector<float>& acts,
               std::vector<TokenId>& tokens) {
  const std::size_t d = lm.config.d_model;
  const std::size_t target = tokens.size() + want;
  const std::uint64_t n_starts = corpus.size() - (cfg.ctx_len - 1) + 1;
  while (tokens.size() < target) {
    const auto start = static_cast<std::size_t>(rng.below(n_starts));
    append_window_rows(lm, window_with_bos(corpus, start, cfg.ctx_len), p, cfg.include_bos, acts, tokens);
  }
  acts.resize(target * d);
  tokens.resize(target);
}

void shuffle_rows(Matrix& acts, std::vector<TokenId>& tokens, Rng& rng) {
  std::vector<std::size_t> perm(tokens.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  Matrix out(acts.rows(), acts.cols());
  std::vector<TokenId> tok(tokens.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto src = acts.row(perm[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
    tok[i] = tokens[perm[i]];
  }
  acts = std::move(out);
  tokens = std::move(tok);
}

}  // namespace

BufferRows fill_buffer(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
                       const BufferConfig& cfg, Rng& rng) {
  check_source(lm, corpus, p, cfg);
  std::vector<float> acts;
  std::vector<TokenId> tokens;
  acts.reserve(cfg.buffer_rows * lm.config.d_model);
  tokens.reserve(cfg.buffer_rows);
  draw_rows(lm, corpus, p, cfg, rng, cfg.buffer_rows, acts, tokens);
  BufferRows out{Matrix(cfg.buffer_rows, lm.config.d_model, std::move(acts)), std::move(tokens)};
  shuffle_rows(out.acts, out.tokens, rng);
  return out;
}

ActivationBuffer::ActivationBuffer(const LmParams<float>& lm, std::span<const TokenId> corpus,
                                   TapLocation p, BufferConfig cfg, Rng rng)
    : lm_(lm), corpus_(corpus), tap_(p), cfg_(cfg), rng_(rng) {
  auto rows = fill_buffer(lm_, corpus_, tap_, cfg_, rng_);
  acts_ = std::move(rows.acts);
  tokens_ = std::move(rows.tokens);
}

void ActivationBuffer::top_up() {
  const std::size_t d = lm_.config.d_model;
  const std::size_t keep = remaining();
  std::vector<float> acts(acts_.data() + cursor_ * d, acts_.data() + acts_.rows() * d);
  std::vector<TokenId> tokens(tokens_.begin() + static_cast<std::ptrdiff_t>(cursor_), tokens_.end());
  draw_rows(lm_, corpus_, tap_, cfg_, rng_, cfg_.buffer_rows - keep, acts, tokens);
  acts_ = Matrix(cfg_.buffer_rows, d, std::move(acts));
  tokens_ = std::move(tokens);
  cursor_ = 0;
  shuffle_rows(acts_, tokens_, rng_);
  ++refills_;
}

std::pair<Matrix, std::vector<TokenId>> ActivationBuffer::take(std::size_t rows) {
  if (rows == 0 || rows > cfg_.buffer_rows) throw ArgumentError("take: bad row count");
  const double low = cfg_.refill_threshold * static_cast<double>(cfg_.buffer_rows);
  if (remaining() < rows || static_cast<double>(remaining()) < low) top_up();
  const std::size_t d = acts_.cols();
  std::vector<float> a(acts_.data() + cursor_ * d, acts_.data() + (cursor_ + rows) * d);
  std::vector<TokenId> t(tokens_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                         tokens_.begin() + static_cast<std::ptrdiff_t>(cursor_ + rows));
  cursor_ += rows;
  return {Matrix(rows, d, std::move(a)), std::move(t)};
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "step,lr,nmse,l0,alpha_hat,mse_part,sparsity_part\n";
  for (const auto& e : entries) {
    os << e.step << ',' << io::format_real(e.lr) << ',' << io::format_real(e.nmse) << ','
       << io::format_real(e.l0) << ',' << (std::isnan(e.alpha_hat) ? "nan" : io::format_real(e.alpha_hat))
       << ',' << io::format_real(e.mse_part) << ',' << io::format_real(e.sparsity_part) << '\n';
  }
  return os.str();
}

namespace {

struct Trainee {
  SaeConfig cfg;
  SaeTrainResult result;
  std::optional<Matrix> lookup0;
  std::vector<bool> lookup_live;  // rows zeroed by truncation stay zero
  std::vector<AdamState<float>> states;
};

void train_step(Trainee& tr, const Matrix& acts, std::span<const TokenId> tokens, std::size_t step,
                const SaeTrainConfig& tc) {
  Sae& sae = tr.result.sae;
  const auto fwd = forward_batch(sae.params, acts, tokens, tr.cfg);
  if (!std::isfinite(fwd.loss.total)) throw TrainingError("train_sae: non-finite loss", step);

  const double lr = lr_at(step, tc.steps, tc.lr0);
  if (tc.log_interval && (step % tc.log_interval == 0 || step + 1 == tc.steps)) {
    TrainLogEntry e;
    e.step = step;
    e.lr = lr;
    e.nmse = nmse(acts, fwd.recon).value;
    e.l0 = l0(fwd.features);
    e.alpha_hat = tr.lookup0 ? estimate_alpha(*sae.params.w_lookup, *tr.lookup0)
                             : std::numeric_limits<double>::quiet_NaN();
    e.mse_part = fwd.loss.mse_part;
    e.sparsity_part = fwd.loss.sparsity_part;
    tr.result.log.entries.push_back(e);
  }

  auto grad = backward(sae.params, acts, tokens, tr.cfg, fwd);
  const std::size_t d = tr.cfg.d_model;
  for (std::size_t j : tc.frozen_features) {
    for (std::size_t i = 0; i < d; ++i) grad.w_enc(i, j) = 0.0f;
    grad.b_enc(0, j) = 0.0f;
    for (std::size_t i = 0; i < d; ++i) grad.w_dec(j, i) = 0.0f;
  }
  if (grad.w_lookup) {
    for (std::size_t t = 0; t < tr.lookup_live.size(); ++t) {
      if (!tr.lookup_live[t]) std::fill(grad.w_lookup->row(t).begin(), grad.w_lookup->row(t).end(), 0.0f);
    }
  }

  std::vector<Matrix*> grads;
  grad.visit([&](const std::string&, Matrix& m) { grads.push_back(&m); });
  const double lookup_lr = lr_at(step, tc.steps, tc.lr0 * tr.cfg.lookup_lr_multiplier);
  std::size_t i = 0;
  sae.params.visit([&](const std::string& name, Matrix& m) {
    adam_step(m, *grads[i], tr.states[i], name == "W_lookup" ? lookup_lr : lr);
    ++i;
  });
  bool finite = true;
  sae.params.visit([&](const std::string&, const Matrix& m) { finite = finite && all_finite(m); });
  if (!finite) throw TrainingError("train_sae: non-finite parameters", step);
}

}  // namespace

std::vector<SaeTrainResult> train_sae_group(const LmParams<float>& lm, std::span<const TokenId> corpus,
                                            TapLocation p, const std::vector<SaeConfig>& configs,
                                            const BufferConfig& buf_cfg, const SaeTrainConfig& tc) {
  if (configs.empty()) throw ArgumentError("train_sae_group: no configs");
  if (tc.lr0 <= 0.0) throw RangeError("lr0 must be positive");
  for (const auto& cfg : configs) {
    cfg.validate();
    if (cfg.d_model != lm.config.d_model) throw DimensionError("SAE d_model does not match the model");
    for (std::size_t j : tc.frozen_features) {
      if (j >= cfg.n_features()) throw RangeError("frozen feature index out of range");
    }
  }
  check_source(lm, corpus, p, buf_cfg);

  std::optional<Matrix> table;
  std::vector<std::uint64_t> counts;
  std::vector<Trainee> group;
  group.reserve(configs.size());
  for (const auto& cfg : configs) {
    // Every member sees the same initialization and buffer streams it would see alone.
    Rng root(tc.seed);
    Rng init_rng = root.fork();
    if (cfg.tokenized && !table) {
      table = unigram_table(lm, p);
      counts.assign(lm.config.vocab_size, 0);
      for (TokenId t : corpus) ++counts.at(t);
    }
    Trainee tr{cfg, {init_sae(cfg, cfg.tokenized ? &*table : nullptr, init_rng, counts), {}}, {}, {}, {}};
    if (cfg.tokenized) {
      // α̂ reference: the unscaled unigram rows the lookup was built from.
      tr.lookup0 = *table;
      const Matrix& init = *tr.result.sae.params.w_lookup;
      tr.lookup_live.assign(init.rows(), true);
      if (cfg.lookup_truncation) {
        const std::vector<bool> kept = lookup_keep_mask(cfg, init.rows(), counts);
        for (std::size_t t = 0; t < init.rows(); ++t) {
          tr.lookup_live[t] = kept[t];
          if (!kept[t]) std::fill(tr.lookup0->row(t).begin(), tr.lookup0->row(t).end(), 0.0f);
        }
      }
    }
    tr.result.sae.params.visit([&](const std::string&, const Matrix& m) { tr.states.emplace_back(m); });
    group.push_back(std::move(tr));
  }

  Rng root(tc.seed);
  root.fork();
  ActivationBuffer buffer(lm, corpus, p, buf_cfg, root.fork());
  for (std::size_t step = 0; step < tc.steps; ++step) {
    if (tc.on_eval && tc.eval_interval && step % tc.eval_interval == 0) {
      for (std::size_t m = 0; m < group.size(); ++m) tc.on_eval(step, m, group[m].result.sae);
    }
    const auto [acts, tokens] = buffer.take(buf_cfg.batch_rows);
    for (std::size_t m = 0; m < group.size(); ++m) {
      try {
        train_step(group[m], acts, tokens, step, tc);
      } catch (const TrainingError& e) {
        throw TrainingError(e.message(), e.step(), m);
      }
    }
  }
  std::vector<SaeTrainResult> out;
  out.reserve(group.size());
  for (std::size_t m = 0; m < group.size(); ++m) {
    if (tc.on_eval) tc.on_eval(tc.steps, m, group[m].result.sae);
    out.push_back(std::move(group[m].result));
  }
  return out;
}

SaeTrainResult train_sae(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
                         const SaeConfig& sae_cfg, const BufferConfig& buf_cfg, const SaeTrainConfig& tc) {
  return std::move(train_sae_group(lm, corpus, p, {sae_cfg}, buf_cfg, tc).front());
}

std::vector<std::size_t> sample_features(std::size_t n_features, std::size_t count, Rng& rng) {
  if (count > n_features) throw ArgumentError("sample_features: more features requested than exist");
  std::vector<bool> taken(n_features, false);
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    const auto j = static_cast<std::size_t>(rng.below(n_features));
    if (taken[j]) continue;
    taken[j] = true;
    out.push_back(j);
  }
  return out;
}

void save_checkpoint(const Sae& sae, const std::filesystem::path& path) {
  io::write_file(path, encode_sae(sae));
}

Sae load_checkpoint(const std::filesystem::path& path) {
  return decode_sae(io::read_file(path), path.string());
}

}  // namespace tsae
