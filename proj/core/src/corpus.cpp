#include "tsae/corpus.hpp"

#include <algorithm>
#include <cmath>

#include "tsae/binary_io.hpp"
#include "tsae/errors.hpp"
#include "tsae/rng.hpp"

namespace tsae {

void CorpusConfig::validate() const {
  if (vocab_size < 2) throw ArgumentError("corpus: vocab_size must be at least 2");
  if (!(zipf_exponent > 0.0)) throw ArgumentError("corpus: zipf_exponent must be positive");
  double total_boost = 0.0;
  for (std::size_t i = 0; i < motifs.size(); ++i) {
    const auto& m = motifs[i];
    const std::string tag = "corpus: motif " + std::to_string(i);
    if (m.tokens.empty()) throw ArgumentError(tag + " is empty");
    if (!(m.boost >= 0.0 && m.boost <= 1.0)) throw ArgumentError(tag + " boost outside [0,1]");
    for (TokenId t : m.tokens) {
      if (t >= vocab_size) throw ArgumentError(tag + " token " + std::to_string(t) + " >= vocab_size");
      if (t == 0) throw ArgumentError(tag + " contains the BOS id");
    }
    total_boost += m.boost;
  }
  if (total_boost > 1.0 + 1e-12) throw ArgumentError("corpus: motif boosts sum above 1");
}

CorpusConfig CorpusConfig::defaults() {
  CorpusConfig cfg;
  cfg.motifs = {
      {{17, 42}, 0.020},  {{23, 9}, 0.015},   {{61, 88}, 0.012},  {{5, 130}, 0.010},
      {{74, 31}, 0.008},  {{102, 56}, 0.005}, {{140, 12}, 0.003}, {{200, 27}, 0.002},
      {{36, 8, 95}, 0.010}, {{51, 160, 70}, 0.006}, {{14, 111, 3}, 0.004},
      {{180, 66, 222}, 0.002},
  };
  return cfg;
}

TokenCorpus gen_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  TokenCorpus corpus;
  corpus.vocab = Vocab{cfg.vocab_size, 0};
  corpus.ids.reserve(cfg.length);

  // Cumulative distribution over ids 1..V-1, id r having weight r^-s.
  std::vector<double> cdf(cfg.vocab_size - 1);
  double acc = 0.0;
  for (std::uint32_t r = 1; r < cfg.vocab_size; ++r) {
    acc += std::pow(static_cast<double>(r), -cfg.zipf_exponent);
    cdf[r - 1] = acc;
  }
  for (auto& c : cdf) c /= acc;
  cdf.back() = 1.0;

  std::vector<double> motif_cdf;
  double boost_acc = 0.0;
  for (const auto& m : cfg.motifs) {
    boost_acc += m.boost;
    motif_cdf.push_back(boost_acc);
  }

  Rng rng(cfg.seed);
  while (corpus.ids.size() < cfg.length) {
    const double u = rng.uniform();
    const auto motif = std::upper_bound(motif_cdf.begin(), motif_cdf.end(), u);
    if (motif != motif_cdf.end()) {
      const auto& toks = cfg.motifs[static_cast<std::size_t>(motif - motif_cdf.begin())].tokens;
      for (TokenId t : toks) {
        if (corpus.ids.size() == cfg.length) break;
        corpus.ids.push_back(t);
      }
      continue;
    }
    const double z = rng.uniform();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), z);
    corpus.ids.push_back(static_cast<TokenId>(it - cdf.begin()) + 1);
  }
  return corpus;
}

NgramTable::NgramTable(std::size_t n, std::uint32_t vocab_size) : n_(n), vocab_size_(vocab_size) {
  if (n == 0) throw RangeError("n-gram order must be at least 1");
  if (vocab_size < 2) throw ArgumentError("n-gram table needs vocab_size >= 2");
  const double bits = static_cast<double>(n) * std::log2(static_cast<double>(vocab_size));
  if (bits > 64.0) {
    throw RangeError("n-gram order " + std::to_string(n) + " too large for vocab size " +
                     std::to_string(vocab_size));
  }
}

std::uint64_t NgramTable::pack(std::span<const TokenId> gram) const {
  if (gram.size() != n_) {
    throw ArgumentError("n-gram of length " + std::to_string(gram.size()) + " queried in a table of n=" +
                        std::to_string(n_));
  }
  std::uint64_t key = 0;
  for (TokenId t : gram) key = key * vocab_size_ + t;
  return key;
}

std::vector<TokenId> NgramTable::unpack(std::uint64_t key) const {
  std::vector<TokenId> gram(n_);
  for (std::size_t i = n_; i-- > 0;) {
    gram[i] = static_cast<TokenId>(key % vocab_size_);
    key /= vocab_size_;
  }
  return gram;
}

std::uint64_t NgramTable::count(std::span<const TokenId> gram) const {
  for (TokenId t : gram)
    if (t >= vocab_size_) return 0;
  auto it = counts_.find(pack(gram));
  return it == counts_.end() ? 0 : it->second;
}

void NgramTable::add(std::span<const TokenId> gram, std::uint64_t count) {
  for (TokenId t : gram)
    if (t >= vocab_size_) throw RangeError("token id out of vocabulary in n-gram");
  counts_[pack(gram)] += count;
  total_ += count;
}

void NgramTable::merge(const NgramTable& other) {
  if (other.n_ != n_ || other.vocab_size_ != vocab_size_) {
    throw ArgumentError("cannot merge n-gram tables of different order or vocabulary");
  }
  for (const auto& [k, c] : other.counts_) counts_[k] += c;
  total_ += other.total_;
}

std::vector<NgramTable::Entry> NgramTable::sorted_entries() const {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> kv(counts_.begin(), counts_.end());
  std::sort(kv.begin(), kv.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<Entry> out;
  out.reserve(kv.size());
  for (const auto& [k, c] : kv) out.push_back({unpack(k), c});
  return out;
}

std::vector<NgramTable::Entry> NgramTable::top(std::size_t m) const {
  auto all = sorted_entries();
  if (all.size() > m) all.resize(m);
  return all;
}

double NgramTable::median_relative_frequency() const {
  if (counts_.empty() || total_ == 0) return 0.0;
  std::vector<std::uint64_t> c;
  c.reserve(counts_.size());
  for (const auto& [k, v] : counts_) c.push_back(v);
  std::sort(c.begin(), c.end());
  const std::size_t mid = c.size() / 2;
  const double med = c.size() % 2 ? static_cast<double>(c[mid])
                                  : 0.5 * (static_cast<double>(c[mid - 1]) + static_cast<double>(c[mid]));
  return med / static_cast<double>(total_);
}

NgramTable count_ngrams(const TokenCorpus& corpus, std::size_t n) {
  NgramTable table(n, corpus.vocab.size);
  if (corpus.size() < n) {
    throw RangeError("corpus of length " + std::to_string(corpus.size()) + " is shorter than n=" +
                     std::to_string(n));
  }
  const std::span<const TokenId> ids(corpus.ids);
  for (std::size_t i = 0; i + n <= ids.size(); ++i) table.add(ids.subspan(i, n));
  return table;
}

double relative_frequency(const NgramTable& table, std::span<const TokenId> gram) {
  if (gram.size() != table.n()) {
    throw ArgumentError("relative_frequency: gram length " + std::to_string(gram.size()) +
                        " != table order " + std::to_string(table.n()));
  }
  if (table.total() == 0) return 0.0;
  return static_cast<double>(table.count(gram)) / static_cast<double>(table.total());
}

std::vector<std::uint64_t> token_counts(const TokenCorpus& corpus) {
  std::vector<std::uint64_t> counts(corpus.vocab.size, 0);
  for (TokenId t : corpus.ids) ++counts.at(t);
  return counts;
}

double unigram_entropy(const TokenCorpus& corpus) {
  const auto counts = token_counts(corpus);
  const double n = static_cast<double>(corpus.size());
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

CorpusSplit split_corpus(const TokenCorpus& corpus, double heldout_fraction) {
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw ArgumentError("held-out fraction must lie in [0, 1)");
  }
  const std::span<const TokenId> all(corpus.ids);
  const auto held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(all.size())));
  return {all.first(all.size() - held), all.last(held)};
}

std::string encode_corpus(const TokenCorpus& corpus) {
  io::ByteWriter w;
  w.bytes("TSAC");
  w.u32(kCorpusFormatVersion);
  w.u32(corpus.vocab.size);
  w.u64(corpus.ids.size());
  for (TokenId t : corpus.ids) w.u32(t);
  return w.buffer();
}

TokenCorpus decode_corpus(std::string bytes, const std::string& context) {
  io::ByteReader r(std::move(bytes), context);
  if (r.remaining() < 4 || r.bytes(4) != "TSAC") throw FormatError(context + ": bad magic, expected 'TSAC'");
  const auto version = r.u32();
  if (version != kCorpusFormatVersion) {
    throw FormatError(context + ": unsupported version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kCorpusFormatVersion) + ")");
  }
  TokenCorpus corpus;
  corpus.vocab = Vocab{r.u32(), 0};
  const auto length = r.u64();
  if (length > r.remaining() / 4) throw FormatError(context + ": truncated file");
  corpus.ids.resize(length);
  for (auto& t : corpus.ids) {
    t = r.u32();
    if (t >= corpus.vocab.size) throw FormatError(context + ": token id outside vocabulary");
  }
  if (!r.at_end()) throw FormatError(context + ": trailing bytes");
  return corpus;
}

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  io::write_file(path, encode_corpus(corpus));
}

TokenCorpus load_corpus(const std::filesystem::path& path) {
  return decode_corpus(io::read_file(path), path.string());
}

std::string ngram_csv(const NgramTable& table, std::size_t max_rows) {
  std::string out = "n_gram,count,rel_freq\n";
  auto entries = max_rows ? table.top(max_rows) : table.sorted_entries();
  const double total = static_cast<double>(table.total());
  for (const auto& e : entries) {
    for (std::size_t i = 0; i < e.gram.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(e.gram[i]);
    }
    out += ',' + std::to_string(e.count) + ',' + io::format_real(static_cast<double>(e.count) / total) + '\n';
  }
  return out;
}

}  // namespace tsae
