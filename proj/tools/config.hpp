#pragma once

// Sectioned key-value run configuration:
//
//   [section]
//   key = value      # comment
//
// Every key has a built-in default; files and --set overrides may only
// assign known keys.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsae/corpus.hpp"
#include "tsae/evaluation.hpp"
#include "tsae/lm.hpp"
#include "tsae/sae.hpp"
#include "tsae/training.hpp"

namespace tsae::cli {

// Bad configuration or command line (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  RunConfig();

  /// Applies a config file on top of the current values.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin);
  /// "section.key=value".
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  /// Parses every key; throws ConfigError on the first bad value.
  void validate() const;

  const std::string& raw(const std::string& key) const;
  std::string str(const std::string& key) const { return raw(key); }
  double real(const std::string& key) const;
  std::uint64_t count(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;

  /// Every key in canonical order, in the file format.
  std::string resolved() const;

  CorpusConfig corpus() const;
  LmConfig lm() const;
  LmTrainConfig lm_train() const;
  SaeConfig sae(std::size_t d_model) const;
  SaeTrainConfig sae_train() const;
  /// Features held at their initial values (sae.freeze_count of them).
  std::vector<std::size_t> frozen_features(std::size_t n_features) const;
  BufferConfig buffer() const;
  TapLocation tap() const;
  std::uint64_t seed() const { return count("run.seed"); }

 private:
  std::map<std::string, std::string> values_;
};

std::vector<Motif> parse_motifs(const std::string& text);

}  // namespace tsae::cli
