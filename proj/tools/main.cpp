#include <cstdlib>
#include <iostream>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "manifest.hpp"
#include "tsae/errors.hpp"

using namespace tsae::cli;

namespace {

struct Common {
  std::string out;
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool serial = false;
};

void add_common(CLI::App* sub, Common& c, Options& o) {
  sub->add_option("--out", c.out, "Run directory (default: $TSAE_OUT_ROOT)");
  sub->add_option("--config", c.config, "Sectioned key-value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "Override one key: section.key=value (repeatable)");
  sub->add_option("--seed", c.seed, "Global seed (overrides run.seed)");
  sub->add_flag("--serial", c.serial, "Deterministic single-threaded execution (always on)");
  sub->add_flag("--self-check", o.self_check, "Re-hash this step's files against the manifest");
}

void resolve(const Common& c, Options& o) {
  if (!c.config.empty()) o.cfg.load_file(c.config);
  for (const auto& s : c.sets) o.cfg.set(s);
  if (c.seed) o.cfg.set("run.seed", std::to_string(*c.seed));
  o.cfg.validate();
  if (!c.out.empty()) {
    o.out = c.out;
  } else if (const char* root = std::getenv("TSAE_OUT_ROOT"); root && *root) {
    o.out = root;
  } else {
    throw ConfigError("--out is required (or set TSAE_OUT_ROOT)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tokenized sparse auto-encoders on a toy transformer"};
  app.require_subcommand(1);
  Options o;
  Common c;

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus and its n-gram tables");
  auto* tlm = app.add_subcommand("train-lm", "Train the toy transformer on the corpus");
  auto* tsae = app.add_subcommand("train-sae", "Train one SAE on activations at sae.tap");
  auto* ev = app.add_subcommand("eval-sae", "NMSE, L0 and CE added on held-out prompts");
  auto* par = app.add_subcommand("pareto", "Plain vs tokenized sweep over the k or lambda grid");
  auto* an = app.add_subcommand("analyze", "Feature-level analysis reports");
  auto* ver = app.add_subcommand("verify", "Re-hash every file listed in the run manifest");

  for (auto* s : {gen, tlm, tsae, ev, par, an, ver}) add_common(s, c, o);
  for (auto* s : {tlm, tsae, ev, par, an}) s->add_option("--corpus", o.corpus, "Corpus file (default <out>/corpus.tsac)");
  for (auto* s : {tsae, ev, par, an}) s->add_option("--lm", o.lm, "LM checkpoint (default <out>/lm.tslm)");
  for (auto* s : {ev, an}) s->add_option("--sae", o.sae, "SAE checkpoint (default <out>/<name>.tsae)");
  for (auto* s : {tsae, ev, an}) s->add_option("--name", o.name, "SAE name within the run directory");
  an->add_option("--kind", o.kind, "Report kind")
      ->required()
      ->check(CLI::IsMember(std::vector<std::string>(std::begin(kAnalyzeKinds), std::end(kAnalyzeKinds))));
  an->add_option("--baseline", o.baseline, "Second SAE for the enc-unigram rank-sum comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    resolve(c, o);
    if (gen->parsed()) return gen_corpus(o);
    if (tlm->parsed()) return train_lm(o);
    if (tsae->parsed()) return train_sae(o);
    if (ev->parsed()) return eval_sae(o);
    if (par->parsed()) return pareto(o);
    if (an->parsed()) return analyze(o);
    return verify(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << e.what() << '\n';
    return 3;
  } catch (const tsae::TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
