#pragma once

#include <filesystem>
#include <string>

#include "config.hpp"

namespace tsae::cli {

struct Options {
  RunConfig cfg;
  std::filesystem::path out;
  // Input overrides; empty means the run directory's default file.
  std::string corpus;
  std::string lm;
  std::string sae;
  std::string baseline;
  std::string name = "sae";
  std::string kind;
  bool self_check = false;
};

int gen_corpus(const Options& o);
int train_lm(const Options& o);
int train_sae(const Options& o);
int eval_sae(const Options& o);
int pareto(const Options& o);
int analyze(const Options& o);
int verify(const Options& o);

inline constexpr const char* kAnalyzeKinds[] = {"unigram-scan", "dead-features", "complexity", "patching",
                                                "final-token",  "act-cossim",    "enc-unigram", "mse-vs-freq"};

}  // namespace tsae::cli
