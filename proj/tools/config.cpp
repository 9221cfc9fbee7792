#include "config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "tsae/binary_io.hpp"

namespace tsae::cli {
namespace {

struct Key {
  const char* name;
  const char* fallback;
};

// Canonical key order for resolved configs.
constexpr Key kKeys[] = {
    {"run.seed", "0"},

    {"corpus.vocab_size", "256"},
    {"corpus.zipf_exponent", "1.1"},
    {"corpus.length", "4000000"},
    {"corpus.motifs", "default"},
    {"corpus.heldout_fraction", "0.05"},
    {"corpus.table_rows", "1000"},

    {"lm.d_model", "64"},
    {"lm.n_layers", "4"},
    {"lm.n_heads", "4"},
    {"lm.d_mlp", "256"},
    {"lm.ctx_len", "64"},
    {"lm.steps", "2000"},
    {"lm.batch", "8"},
    {"lm.lr", "0.001"},
    {"lm.log_interval", "50"},

    {"sae.tap", "2"},
    {"sae.variant", "topk"},
    {"sae.k", "8"},
    {"sae.lambda", "0"},
    {"sae.expansion", "8"},
    {"sae.tokenized", "true"},
    {"sae.alpha", "0.5"},
    {"sae.lookup_lr_multiplier", "10"},
    {"sae.lookup_truncation", "0"},
    {"sae.lr0", "0.001"},
    {"sae.steps", "3000"},
    {"sae.log_interval", "50"},
    {"sae.freeze_count", "0"},
    {"sae.freeze_seed", "99"},

    {"buffer.buffer_rows", "65536"},
    {"buffer.batch_rows", "1024"},
    {"buffer.ctx_len", "64"},
    {"buffer.refill_threshold", "0.5"},
    {"buffer.include_bos", "false"},

    {"eval.prompts", "128"},
    {"eval.ctx_len", "64"},

    {"pareto.topk_grid", "4,8,16,32"},
    {"pareto.vanilla_grid", "0.0001,0.00025119,0.00063096,0.0015849,0.0039811,0.01"},

    {"analysis.strong_threshold", "5"},
    {"analysis.dead_act_threshold", "3"},
    {"analysis.dead_cos_cut", "0.85"},
    {"analysis.complexity_min_act", "10"},
    {"analysis.patch_n_max", "8"},
    {"analysis.patch_prompts", "32"},
    {"analysis.mse_n", "1"},
    {"analysis.mse_top", "200"},
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : kKeys) values_[k.name] = k.fallback;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  load_text(text, path.string());
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    try {
      set(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not section.key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const {
  try {
    return io::parse_real(raw(key), key);
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + raw(key) + "' is not a number");
  }
}

std::uint64_t RunConfig::count(const std::string& key) const {
  const auto& s = raw(key);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
  }
  return v;
}

bool RunConfig::flag(const std::string& key) const {
  std::string s = raw(key);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": '" + raw(key) + "' is not a boolean");
}

std::vector<double> RunConfig::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& part : split(raw(key), ',')) {
    try {
      out.push_back(io::parse_real(part, key));
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + part + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string RunConfig::resolved() const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : kKeys) {
    const std::string name = k.name;
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << name.substr(dot + 1) << " = " << values_.at(name) << '\n';
  }
  return os.str();
}

void RunConfig::validate() const {
  corpus();
  lm();
  lm_train();
  sae(count("lm.d_model"));
  sae_train();
  buffer();
  tap();
  reals("pareto.topk_grid");
  reals("pareto.vanilla_grid");
  for (const char* k : {"corpus.table_rows", "eval.prompts", "eval.ctx_len", "sae.freeze_count", "sae.freeze_seed",
                        "analysis.patch_n_max", "analysis.patch_prompts", "analysis.mse_n", "analysis.mse_top"}) {
    count(k);
  }
  for (const char* k : {"corpus.heldout_fraction", "analysis.strong_threshold", "analysis.dead_act_threshold",
                        "analysis.dead_cos_cut", "analysis.complexity_min_act"}) {
    real(k);
  }
}

std::vector<Motif> parse_motifs(const std::string& text) {
  if (text == "default") return CorpusConfig::defaults().motifs;
  if (text == "none" || text.empty()) return {};
  // "17 42:0.02; 36 8 95:0.01"
  std::vector<Motif> out;
  for (const auto& item : split(text, ';')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("corpus.motifs: '" + item + "' lacks ':boost'");
    Motif m;
    std::istringstream ts(item.substr(0, colon));
    long long t;
    while (ts >> t) {
      if (t < 0) throw ConfigError("corpus.motifs: negative token id");
      m.tokens.push_back(static_cast<TokenId>(t));
    }
    if (!ts.eof()) throw ConfigError("corpus.motifs: bad token list in '" + item + "'");
    try {
      m.boost = io::parse_real(trim(item.substr(colon + 1)), "corpus.motifs");
    } catch (const std::exception&) {
      throw ConfigError("corpus.motifs: bad boost in '" + item + "'");
    }
    out.push_back(std::move(m));
  }
  return out;
}

CorpusConfig RunConfig::corpus() const {
  CorpusConfig c;
  c.vocab_size = static_cast<std::uint32_t>(count("corpus.vocab_size"));
  c.zipf_exponent = real("corpus.zipf_exponent");
  c.length = count("corpus.length");
  c.motifs = parse_motifs(raw("corpus.motifs"));
  c.seed = seed();
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

LmConfig RunConfig::lm() const {
  LmConfig c;
  c.vocab_size = static_cast<std::uint32_t>(count("corpus.vocab_size"));
  c.d_model = count("lm.d_model");
  c.n_layers = count("lm.n_layers");
  c.n_heads = count("lm.n_heads");
  c.d_mlp = count("lm.d_mlp");
  c.ctx_len = count("lm.ctx_len");
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

LmTrainConfig RunConfig::lm_train() const {
  LmTrainConfig t;
  t.steps = count("lm.steps");
  t.batch = count("lm.batch");
  t.lr = real("lm.lr");
  t.log_interval = count("lm.log_interval");
  if (t.batch == 0) throw ConfigError("lm.batch must be positive");
  if (!(t.lr > 0.0)) throw ConfigError("lm.lr must be positive");
  return t;
}

SaeConfig RunConfig::sae(std::size_t d_model) const {
  SaeConfig c;
  c.d_model = d_model;
  c.expansion = count("sae.expansion");
  try {
    c.variant = parse_variant(raw("sae.variant"));
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("sae.variant: ") + e.what());
  }
  c.k = count("sae.k");
  c.lambda = real("sae.lambda");
  c.tokenized = flag("sae.tokenized");
  c.alpha = real("sae.alpha");
  c.lookup_lr_multiplier = real("sae.lookup_lr_multiplier");
  if (const auto m = count("sae.lookup_truncation")) c.lookup_truncation = m;
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

SaeTrainConfig RunConfig::sae_train() const {
  SaeTrainConfig t;
  t.steps = count("sae.steps");
  t.lr0 = real("sae.lr0");
  t.seed = seed();
  t.log_interval = count("sae.log_interval");
  if (!(t.lr0 > 0.0)) throw ConfigError("sae.lr0 must be positive");
  return t;
}

std::vector<std::size_t> RunConfig::frozen_features(std::size_t n_features) const {
  const auto n = count("sae.freeze_count");
  if (n > n_features) throw ConfigError("sae.freeze_count exceeds the number of features");
  Rng rng(count("sae.freeze_seed"));
  return sample_features(n_features, n, rng);
}

BufferConfig RunConfig::buffer() const {
  BufferConfig b;
  b.buffer_rows = count("buffer.buffer_rows");
  b.batch_rows = count("buffer.batch_rows");
  b.ctx_len = count("buffer.ctx_len");
  b.refill_threshold = real("buffer.refill_threshold");
  b.include_bos = flag("buffer.include_bos");
  try {
    b.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  return b;
}

TapLocation RunConfig::tap() const { return TapLocation{count("sae.tap")}; }

}  // namespace tsae::cli
