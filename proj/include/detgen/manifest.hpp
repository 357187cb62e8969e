#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace detgen {

inline constexpr const char* kToolVersion = "0.1.0";

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

// Exclusive ownership of a run directory for the lifetime of one process.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path lock_path_;
  bool held_ = false;
};

// manifest.json: config hash, per-phase outputs with content hashes and
// wallclock. Hashes let verify() catch post-hoc file edits.
class Manifest {
 public:
  struct PhaseRecord {
    double wallclock_ms = 0.0;
    std::map<std::string, std::string> outputs;  // rel path -> sha256
  };

  static Manifest load_or_create(const std::filesystem::path& run_dir,
                                 const std::string& config_hash);

  void record_phase(const std::string& phase,
                    const std::vector<std::filesystem::path>& outputs,
                    double wallclock_ms);
  void save() const;

  // Mismatched or missing files (empty = clean).
  std::vector<std::string> verify() const;

  const std::string& config_hash() const { return config_hash_; }
  bool has_phase(const std::string& phase) const { return phases_.count(phase) > 0; }
  const std::map<std::string, PhaseRecord>& phases() const { return phases_; }

 private:
  std::filesystem::path run_dir_;
  std::string config_hash_;
  std::map<std::string, PhaseRecord> phases_;
};

}  // namespace detgen
