#pragma once

// Activation buffer and the SAE training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsae/lm.hpp"
#include "tsae/sae.hpp"

namespace tsae {

struct BufferConfig {
  std::size_t buffer_rows = 131072;
  std::size_t batch_rows = 4096;
  std::size_t ctx_len = 64;
  double refill_threshold = 0.5;
  /// Also store the position-0 (pure BOS) row of every window.
  bool include_bos = false;

  void validate() const;
};

/// Shuffled (activation, token id) rows drawn from random BOS-led corpus
/// windows. Rows are handed out front to back, each at most once; once fewer
/// than refill_threshold x buffer_rows remain, fresh rows are appended and
/// everything left is reshuffled.
class ActivationBuffer {
 public:
  ActivationBuffer(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
                   BufferConfig cfg, Rng rng);

  std::size_t remaining() const noexcept { return acts_.rows() - cursor_; }
  std::size_t refills() const noexcept { return refills_; }
  const Matrix& acts() const noexcept { return acts_; }
  const std::vector<TokenId>& tokens() const noexcept { return tokens_; }

  /// Next `rows` rows (acts, token ids); refills first when low.
  std::pair<Matrix, std::vector<TokenId>> take(std::size_t rows);

 private:
  void top_up();

  const LmParams<float>& lm_;
  std::span<const TokenId> corpus_;
  TapLocation tap_;
  BufferConfig cfg_;
  Rng rng_;
  Matrix acts_;
  std::vector<TokenId> tokens_;
  std::size_t cursor_ = 0;
  std::size_t refills_ = 0;
};

/// Rows of taps[p] for one BOS-led window (rows 1..N-1 unless include_bos).
void append_window_rows(const LmParams<float>& lm, std::span<const TokenId> window, TapLocation p,
                        bool include_bos, std::vector<float>& acts, std::vector<TokenId>& tokens);

/// One full, shuffled buffer.
struct BufferRows {
  Matrix acts;
  std::vector<TokenId> tokens;
};
BufferRows fill_buffer(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
                       const BufferConfig& cfg, Rng& rng);

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double nmse = 0.0;
  double l0 = 0.0;
  double alpha_hat = 0.0;  // NaN for plain SAEs
  double mse_part = 0.0;
  double sparsity_part = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  /// step,lr,nmse,l0,alpha_hat,mse_part,sparsity_part
  std::string to_csv() const;
};

struct SaeTrainConfig {
  std::size_t steps = 3000;
  double lr0 = 1e-4;
  std::uint64_t seed = 0;
  std::size_t log_interval = 50;
  /// Features whose gradients are zeroed every step.
  std::vector<std::size_t> frozen_features;
  /// Called with each model's current SAE every eval_interval steps and at
  /// the end; `model` indexes the group (0 for train_sae).
  std::function<void(std::size_t step, std::size_t model, const Sae&)> on_eval;
  std::size_t eval_interval = 0;
};

/// `count` distinct feature indices below n_features, in draw order.
std::vector<std::size_t> sample_features(std::size_t n_features, std::size_t count, Rng& rng);

struct SaeTrainResult {
  Sae sae;
  TrainLog log;
};

/// Adam on the dictionary at cosine-annealed lr0 and a second Adam group on
/// the lookup at lookup_lr_multiplier x lr0 on the same schedule.
SaeTrainResult train_sae(const LmParams<float>& lm, std::span<const TokenId> corpus, TapLocation p,
                         const SaeConfig& sae_cfg, const BufferConfig& buf_cfg,
                         const SaeTrainConfig& train_cfg);

/// Trains one SAE per config in lockstep on a single shared buffer. Each
/// result is bit-identical to train_sae with the same config.
std::vector<SaeTrainResult> train_sae_group(const LmParams<float>& lm, std::span<const TokenId> corpus,
                                            TapLocation p, const std::vector<SaeConfig>& configs,
                                            const BufferConfig& buf_cfg, const SaeTrainConfig& train_cfg);

void save_checkpoint(const Sae& sae, const std::filesystem::path& path);
Sae load_checkpoint(const std::filesystem::path& path);

}  // namespace tsae
