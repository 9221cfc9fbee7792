#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "config.hpp"

namespace tsae::cli {

// An upstream artifact is missing (exit code 3).
class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::filesystem::path& path)
      : std::runtime_error("missing input: " + path.string()) {}
};

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// One subcommand's entry in <run>/manifest.json: its resolved config,
/// seed, and the hashes of everything it read and wrote. Paths are recorded
/// relative to the run directory.
class Step {
 public:
  Step(std::string name, const RunConfig& cfg, std::filesystem::path run_dir);

  const std::filesystem::path& run_dir() const noexcept { return run_dir_; }

  /// `given` if set, else <run>/<fallback>; hashed as an input.
  std::filesystem::path input(const std::string& given, const std::string& fallback);
  void write(const std::string& rel, std::string_view bytes);
  /// Writes the resolved config and merges this step into the manifest.
  void finish();

 private:
  std::string rel(const std::filesystem::path& p) const;

  std::string name_;
  const RunConfig& cfg_;
  std::filesystem::path run_dir_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

struct VerifyResult {
  std::size_t checked = 0;
  std::vector<std::string> problems;
};

/// Re-hashes every file listed in the manifest (or only `step`'s files).
VerifyResult verify_manifest(const std::filesystem::path& run_dir, const std::string& step = "");

}  // namespace tsae::cli
