#include "detgen/manifest.hpp"

#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"

namespace detgen {

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), "cannot hash missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

RunLock::RunLock(const std::filesystem::path& run_dir) {
  std::filesystem::create_directories(run_dir);
  lock_path_ = run_dir / ".lock";
  if (std::filesystem::exists(lock_path_)) {
    throw ConfigError("run directory is locked by another process: " +
                      run_dir.string());
  }
  std::ofstream out(lock_path_);
  require(out.is_open(), "cannot create lock file in " + run_dir.string());
  out << "locked\n";
  held_ = true;
}

RunLock::~RunLock() {
  if (held_) {
    std::error_code ec;
    std::filesystem::remove(lock_path_, ec);
  }
}

Manifest Manifest::load_or_create(const std::filesystem::path& run_dir,
                                  const std::string& config_hash) {
  Manifest m;
  m.run_dir_ = run_dir;
  m.config_hash_ = config_hash;
  const auto path = run_dir / "manifest.json";
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    nlohmann::json j = nlohmann::json::parse(in);
    const std::string existing = j.at("config_hash").get<std::string>();
    require(existing == config_hash,
            "run directory was produced by a different config (hash mismatch)");
    for (const auto& [name, rec] : j.at("phases").items()) {
      PhaseRecord pr;
      pr.wallclock_ms = rec.at("wallclock_ms").get<double>();
      for (const auto& [file, hash] : rec.at("outputs").items()) {
        pr.outputs[file] = hash.get<std::string>();
      }
      m.phases_[name] = std::move(pr);
    }
  }
  return m;
}

void Manifest::record_phase(const std::string& phase,
                            const std::vector<std::filesystem::path>& outputs,
                            double wallclock_ms) {
  PhaseRecord rec;
  rec.wallclock_ms = wallclock_ms;
  for (const auto& p : outputs) {
    rec.outputs[std::filesystem::relative(p, run_dir_).generic_string()] = sha256_file(p);
  }
  phases_[phase] = std::move(rec);
  save();
}

void Manifest::save() const {
  nlohmann::ordered_json j;
  j["tool_version"] = kToolVersion;
  j["config_hash"] = config_hash_;
  nlohmann::ordered_json phases;
  for (const auto& [name, rec] : phases_) {
    nlohmann::ordered_json r;
    r["wallclock_ms"] = rec.wallclock_ms;
    nlohmann::ordered_json outs;
    for (const auto& [file, hash] : rec.outputs) outs[file] = hash;
    r["outputs"] = std::move(outs);
    phases[name] = std::move(r);
  }
  j["phases"] = std::move(phases);
  std::ofstream out(run_dir_ / "manifest.json", std::ios::binary);
  require(out.is_open(), "cannot write manifest in " + run_dir_.string());
  out << j.dump(2) << "\n";
}

std::vector<std::string> Manifest::verify() const {
  std::vector<std::string> bad;
  for (const auto& [name, rec] : phases_) {
    for (const auto& [file, hash] : rec.outputs) {
      const auto path = run_dir_ / file;
      if (!std::filesystem::exists(path)) {
        bad.push_back(file + " (missing, phase " + name + ")");
      } else if (sha256_file(path) != hash) {
        bad.push_back(file + " (modified, phase " + name + ")");
      }
    }
  }
  return bad;
}

}  // namespace detgen
