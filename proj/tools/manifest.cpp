#include "manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>
#include "json.hpp"

#include "tsae/binary_io.hpp"

namespace tsae::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256: digest init failed");
    }
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("sha256: update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw std::runtime_error("sha256: final failed");
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

const char* kManifest = "manifest.json";

json load_manifest(const fs::path& path) {
  if (!fs::exists(path)) return json{{"steps", json::object()}};
  try {
    return json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

Step::Step(std::string name, const RunConfig& cfg, fs::path run_dir)
    : name_(std::move(name)), cfg_(cfg), run_dir_(std::move(run_dir)) {
  fs::create_directories(run_dir_);
}

std::string Step::rel(const fs::path& p) const {
  const auto r = fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(run_dir_).lexically_normal());
  if (r.empty()) return fs::absolute(p).lexically_normal().generic_string();
  return r.generic_string();
}

fs::path Step::input(const std::string& given, const std::string& fallback) {
  const fs::path p = given.empty() ? run_dir_ / fallback : fs::path(given);
  if (!fs::is_regular_file(p)) throw MissingArtifact(p);
  inputs_[rel(p)] = sha256_file(p);
  return p;
}

void Step::write(const std::string& rel_path, std::string_view bytes) {
  const fs::path p = run_dir_ / rel_path;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  io::write_file(p, bytes);
  outputs_[fs::path(rel_path).generic_string()] = sha256_hex(bytes);
}

void Step::finish() {
  const std::string config_name = name_ + ".resolved.ini";
  write(config_name, cfg_.resolved());
  const fs::path mpath = run_dir_ / kManifest;
  json m = load_manifest(mpath);
  json entry;
  entry["seed"] = cfg_.seed();
  entry["config"] = config_name;
  entry["inputs"] = inputs_;
  entry["outputs"] = outputs_;
  m["steps"][name_] = entry;
  io::write_file(mpath, m.dump(2) + "\n");
}

VerifyResult verify_manifest(const fs::path& run_dir, const std::string& step) {
  const fs::path mpath = run_dir / kManifest;
  if (!fs::exists(mpath)) throw MissingArtifact(mpath);
  const json m = load_manifest(mpath);
  VerifyResult out;
  if (!step.empty() && !m["steps"].contains(step)) {
    out.problems.push_back("no manifest entry for " + step);
    return out;
  }
  for (const auto& [name, entry] : m["steps"].items()) {
    if (!step.empty() && name != step) continue;
    for (const char* group : {"inputs", "outputs"}) {
      for (const auto& [path, digest] : entry[group].items()) {
        const fs::path p = fs::path(path).is_absolute() ? fs::path(path) : run_dir / path;
        ++out.checked;
        if (!fs::is_regular_file(p)) {
          out.problems.push_back(name + ": missing " + p.string());
        } else if (sha256_file(p) != digest.get<std::string>()) {
          out.problems.push_back(name + ": hash mismatch for " + p.string());
        }
      }
    }
  }
  return out;
}

}  // namespace tsae::cli
