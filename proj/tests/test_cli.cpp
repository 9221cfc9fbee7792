#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "fixtures.hpp"
#include "tsae/binary_io.hpp"
#include "tsae/corpus.hpp"

namespace fs = std::filesystem;

namespace {

const char* kSmall = R"([corpus]
length = 60000
[lm]
d_model = 16
n_layers = 2
n_heads = 2
d_mlp = 32
ctx_len = 16
steps = 20
[sae]
steps = 30
expansion = 2
log_interval = 10
[buffer]
buffer_rows = 1024
batch_rows = 64
ctx_len = 16
[eval]
prompts = 8
ctx_len = 16
[pareto]
topk_grid = 4,8
[analysis]
patch_n_max = 4
patch_prompts = 4
mse_top = 20
)";

struct Sandbox {
  fs::path dir;
  explicit Sandbox(const std::string& name) : dir(fs::temp_directory_path() / ("tsae_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "small.ini") << kSmall;
  }
  ~Sandbox() { fs::remove_all(dir); }

  fs::path operator/(const std::string& p) const { return dir / p; }

  // Exit status of the CLI; stderr lands in <dir>/stderr.txt.
  int run(const std::string& args, const std::string& env = "") const {
    const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" TSAE_CLI "' " + args + " > stdout.txt 2> stderr.txt";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  }
  std::string read(const std::string& p) const { return tsae::io::read_file(dir / p); }
};

int pipeline(const Sandbox& s, const std::string& run) {
  const std::string c = " --out " + run + " --config small.ini --seed 3";
  for (const std::string cmd : {"gen-corpus", "train-lm", "train-sae", "eval-sae", "pareto"}) {
    if (int rc = s.run(cmd + c)) return rc;
  }
  for (const char* k : {"unigram-scan", "dead-features", "complexity", "patching", "final-token", "act-cossim",
                        "enc-unigram", "mse-vs-freq"}) {
    if (int rc = s.run(std::string("analyze --kind ") + k + c)) return rc;
  }
  return 0;
}

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char ch : s) n += ch == '\n';
  return n;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("missing --out is a usage error") {
    Sandbox s("noout");
    CHECK(s.run("gen-corpus --config small.ini") == 2);
    CHECK(s.read("stderr.txt").find("--out") != std::string::npos);
  }

  TEST_CASE("output root falls back to the environment") {
    Sandbox s("env");
    CHECK(s.run("gen-corpus --set corpus.length=1000", "TSAE_OUT_ROOT=envrun") == 0);
    CHECK(fs::exists(s / "envrun/corpus.tsac"));
  }

  TEST_CASE("config errors exit 2") {
    Sandbox s("cfg");
    CHECK(s.run("gen-corpus --out r --set corpus.bogus=1") == 2);
    CHECK(s.read("stderr.txt").find("corpus.bogus") != std::string::npos);
    CHECK(s.run("gen-corpus --out r --set sae.k=eight") == 2);
    CHECK(s.run("gen-corpus --out r --set corpus.zipf_exponent=-1") == 2);
    std::ofstream(s / "bad.ini") << "[corpus]\nlength\n";
    CHECK(s.run("gen-corpus --out r --config bad.ini") == 2);
    std::ofstream(s / "orphan.ini") << "length = 5\n";
    CHECK(s.run("gen-corpus --out r --config orphan.ini") == 2);
    CHECK(s.run("gen-corpus --out r --set 'corpus.motifs=3 4'") == 2);
    CHECK(s.run("gen-corpus --out r --set 'corpus.motifs=3 x:0.1'") == 2);
    CHECK(s.run("analyze --kind bogus --out r") == 2);
    CHECK(s.run("no-such-command") == 2);
  }

  TEST_CASE("flags win over config values") {
    Sandbox s("flags");
    std::ofstream(s / "seed.ini") << "[run]\nseed = 11\n[corpus]\nlength = 1000\n";
    REQUIRE(s.run("gen-corpus --out r --config seed.ini --set run.seed=12 --seed 13") == 0);
    const auto resolved = s.read("r/gen-corpus.resolved.ini");
    CHECK(resolved.find("seed = 13\n") != std::string::npos);
    CHECK(resolved.find("length = 1000\n") != std::string::npos);
  }

  TEST_CASE("motif lists reach the generator") {
    Sandbox s("motifs");
    REQUIRE(s.run("gen-corpus --out r --set corpus.length=20000 --set 'corpus.motifs=5 6:0.2; 7 8 9:0.1'") == 0);
    const auto c = tsae::decode_corpus(s.read("r/corpus.tsac"));
    const auto bi = tsae::count_ngrams(c, 2);
    const std::vector<tsae::TokenId> g{5, 6};
    CHECK(tsae::relative_frequency(bi, g) > 0.1);
    REQUIRE(s.run("gen-corpus --out n --set corpus.length=20000 --set corpus.motifs=none") == 0);
    CHECK(tsae::relative_frequency(tsae::count_ngrams(tsae::decode_corpus(s.read("n/corpus.tsac")), 2), g) < 0.01);
  }

  TEST_CASE("resolved config reloads to itself") {
    Sandbox s("resolved");
    REQUIRE(s.run("gen-corpus --out a --config small.ini --set sae.k=5") == 0);
    fs::copy_file(s / "a/gen-corpus.resolved.ini", s / "again.ini");
    REQUIRE(s.run("gen-corpus --out b --config again.ini") == 0);
    CHECK(s.read("a/gen-corpus.resolved.ini") == s.read("b/gen-corpus.resolved.ini"));
  }

  TEST_CASE("default corpus has 4M ids and seeds reproduce it") {
    Sandbox s("corpus");
    REQUIRE(s.run("gen-corpus --out a --seed 1") == 0);
    REQUIRE(s.run("gen-corpus --out b --seed 1") == 0);
    REQUIRE(s.run("gen-corpus --out c --seed 2 --set corpus.length=4000000") == 0);
    const auto a = s.read("a/corpus.tsac");
    CHECK(tsae::decode_corpus(a).size() == 4'000'000);
    CHECK(a == s.read("b/corpus.tsac"));
    CHECK(a != s.read("c/corpus.tsac"));
    CHECK(s.read("a/corpus_bigrams.csv").rfind("n_gram,count,rel_freq\n", 0) == 0);
    CHECK(lines(s.read("a/corpus_unigrams.csv")) == 256);  // header + 255 non-BOS ids
  }

  TEST_CASE("missing upstream artifacts exit 3 with the path") {
    Sandbox s("missing");
    CHECK(s.run("train-lm --out r --config small.ini") == 3);
    CHECK(s.read("stderr.txt").find("corpus.tsac") != std::string::npos);
    REQUIRE(s.run("gen-corpus --out r --config small.ini") == 0);
    CHECK(s.run("train-sae --out r --config small.ini") == 3);
    CHECK(s.read("stderr.txt").find("lm.tslm") != std::string::npos);
    REQUIRE(s.run("train-lm --out r --config small.ini") == 0);
    CHECK(s.run("eval-sae --out r --config small.ini") == 3);
    CHECK(s.read("stderr.txt").find("sae.tsae") != std::string::npos);
    CHECK(s.run("verify --out nowhere") == 3);
  }

  TEST_CASE("non-finite training exits 4") {
    Sandbox s("nan");
    REQUIRE(s.run("gen-corpus --out r --config small.ini") == 0);
    CHECK(s.run("train-lm --out r --config small.ini --set lm.lr=1e38") == 4);
  }

  TEST_CASE("pipeline runs, reports, and reproduces byte for byte") {
    Sandbox s("pipeline");
    REQUIRE(pipeline(s, "a") == 0);
    REQUIRE(pipeline(s, "b") == 0);

    CHECK(lines(s.read("a/pareto.csv")) == 5);  // header + 2 knobs x 2 variants
    for (const char* k : {"sae_unigram-scan", "sae_dead-features", "sae_complexity", "patching", "final-token",
                          "sae_act-cossim", "sae_enc-unigram", "sae_mse-vs-freq"}) {
      CHECK(fs::exists(s / ("a/analysis/" + std::string(k) + ".csv")));
      CHECK(fs::exists(s / ("a/analysis/" + std::string(k) + ".json")));
    }

    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(s / "a")) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), s / "a");
      INFO(rel.string());
      REQUIRE(fs::exists(s / "b" / rel));
      CHECK(s.read("a/" + rel.string()) == s.read("b/" + rel.string()));
      ++compared;
    }
    CHECK(compared > 30);

    CHECK(s.run("verify --out a") == 0);
    { std::ofstream(s / "a/pareto.csv", std::ios::app) << "tampered\n"; }
    CHECK(s.run("verify --out a") == 1);
  }

  TEST_CASE("self-check passes on a fresh step") {
    Sandbox s("selfcheck");
    CHECK(s.run("gen-corpus --out r --config small.ini --self-check --serial") == 0);
    CHECK(s.read("stderr.txt").find("verified") != std::string::npos);
  }

  TEST_CASE("identity SAE adds no cross-entropy") {
    Sandbox s("identity");
    REQUIRE(s.run("gen-corpus --out r --config small.ini") == 0);
    REQUIRE(s.run("train-lm --out r --config small.ini") == 0);
    tsae::io::write_file(s / "r/identity.tsae", tsae::encode_sae(fixture::identity_sae(16)));
    REQUIRE(s.run("eval-sae --out r --config small.ini --sae r/identity.tsae") == 0);
    const auto csv = s.read("r/identity_eval.csv");
    std::istringstream is(csv);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    CHECK(header == "nmse,nmse_excluded,l0,ce_clean,ce_patched,ce_added,n_rows");
    std::vector<std::string> cells;
    std::istringstream rs(row);
    for (std::string c; std::getline(rs, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 7);
    CHECK(cells[0] == "0");
    CHECK(cells[5] == "0");
  }
}
