#pragma once

// Synthetic token corpora with planted n-gram imbalance, and exact n-gram
// frequency tables over them.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace tsae {

using TokenId = std::uint32_t;

struct Vocab {
  std::uint32_t size = 256;
  TokenId bos_id = 0;
};

/// A token sequence that is emitted verbatim with probability `boost` at any
/// emission point.
struct Motif {
  std::vector<TokenId> tokens;
  double boost = 0.0;
};

struct CorpusConfig {
  std::uint32_t vocab_size = 256;
  double zipf_exponent = 1.1;
  std::vector<Motif> motifs;
  std::uint64_t length = 4'000'000;
  std::uint64_t seed = 0;

  /// Throws ArgumentError describing the first violated constraint.
  void validate() const;

  /// V=256, s=1.1, 8 bigram and 4 trigram motifs, 4M tokens.
  static CorpusConfig defaults();
};

struct TokenCorpus {
  std::vector<TokenId> ids;
  Vocab vocab;

  std::size_t size() const noexcept { return ids.size(); }
};

/// Unigram base is Zipf over the non-BOS ids, with id r having rank r. At each
/// emission point one uniform draw selects at most one motif (cumulative
/// boosts); otherwise a single Zipf token is emitted. BOS never appears.
TokenCorpus gen_corpus(const CorpusConfig& cfg);

/// Exact sliding-window n-gram counts. Keys are packed in base vocab_size, so
/// vocab_size^n must fit in 64 bits.
class NgramTable {
 public:
  struct Entry {
    std::vector<TokenId> gram;
    std::uint64_t count = 0;
  };

  NgramTable(std::size_t n, std::uint32_t vocab_size);

  std::size_t n() const noexcept { return n_; }
  std::uint32_t vocab_size() const noexcept { return vocab_size_; }
  std::uint64_t total() const noexcept { return total_; }
  /// Number of distinct n-grams observed.
  std::size_t distinct() const noexcept { return counts_.size(); }

  std::uint64_t count(std::span<const TokenId> gram) const;
  void add(std::span<const TokenId> gram, std::uint64_t count = 1);
  /// Adds every count of `other` (same n and vocabulary).
  void merge(const NgramTable& other);

  /// All entries, most frequent first; ties in increasing key order.
  std::vector<Entry> sorted_entries() const;
  /// First `m` of sorted_entries().
  std::vector<Entry> top(std::size_t m) const;

  /// Median relative frequency over observed n-grams.
  double median_relative_frequency() const;

 private:
  std::uint64_t pack(std::span<const TokenId> gram) const;
  std::vector<TokenId> unpack(std::uint64_t key) const;

  std::size_t n_;
  std::uint32_t vocab_size_;
  std::uint64_t total_ = 0;
  std::unordered_map<std::uint64_t, std::uint64_t> counts_;
};

NgramTable count_ngrams(const TokenCorpus& corpus, std::size_t n);

/// count(gram)/total; 0 for grams never seen.
double relative_frequency(const NgramTable& table, std::span<const TokenId> gram);

/// Per-id occurrence counts (length vocab.size).
std::vector<std::uint64_t> token_counts(const TokenCorpus& corpus);

/// Entropy in nats of the empirical unigram distribution: the cross-entropy of
/// the best constant next-token predictor.
double unigram_entropy(const TokenCorpus& corpus);

/// Splits off the final `fraction` of the corpus as a held-out slice.
struct CorpusSplit {
  std::span<const TokenId> train;
  std::span<const TokenId> heldout;
};
CorpusSplit split_corpus(const TokenCorpus& corpus, double heldout_fraction = 0.05);

// "TSAC" files: magic, u32 version, u32 vocab_size, u64 length, u32 ids.
inline constexpr std::uint32_t kCorpusFormatVersion = 1;
std::string encode_corpus(const TokenCorpus& corpus);
TokenCorpus decode_corpus(std::string bytes, const std::string& context = "corpus");
void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path);
TokenCorpus load_corpus(const std::filesystem::path& path);

/// CSV with header `n_gram,count,rel_freq`, rows in sorted_entries() order.
std::string ngram_csv(const NgramTable& table, std::size_t max_rows = 0);

}  // namespace tsae
