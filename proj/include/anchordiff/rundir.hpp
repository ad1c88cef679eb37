#pragma once

// Run-directory plumbing: where artifacts land (config.json, CSV logs,
// checkpoints, reports), the single-writer lockfile, machine-readable
// error payloads, and content hashes tying artifacts to their inputs.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>
#include <unistd.h>

#include "anchordiff/diffusion.hpp"
#include "anchordiff/moclip.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/run_config.hpp"

namespace anchordiff {

// Failure with a stable machine-readable code; the CLI turns these
// into an error JSON on stdout and a nonzero exit.
struct RunError : std::runtime_error {
  std::string code;
  RunError(std::string error_code, const std::string& message)
      : std::runtime_error(message), code(std::move(error_code)) {}
};

inline std::string error_json(const std::string& code, const std::string& message) {
  nlohmann::json j;
  j["error"] = code;
  j["message"] = message;
  return j.dump();
}

inline std::filesystem::path runs_root() {
  if (const char* env = std::getenv("ANCHORDIFF_RUNS_DIR"); env && *env) return env;
  return "runs";
}

// A named directory under the run root, held exclusively through a
// lockfile for the lifetime of this object.
class RunDir {
 public:
  static RunDir open(const std::string& name) {
    if (name.empty() || name.find('/') != std::string::npos || name[0] == '.')
      throw RunError("invalid_run_name", "run name must be a plain directory name");
    RunDir rd;
    rd.path_ = runs_root() / name;
    std::filesystem::create_directories(rd.path_);
    rd.lock_ = rd.path_ / "lock";
    std::FILE* f = std::fopen(rd.lock_.c_str(), "wx");
    if (!f)
      throw RunError("locked", "run directory " + rd.path_.string() +
                                   " is locked; remove 'lock' if no writer is alive");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
    rd.locked_ = true;
    return rd;
  }

  RunDir(RunDir&& other) noexcept { *this = std::move(other); }
  RunDir& operator=(RunDir&& other) noexcept {
    if (this != &other) {
      release();
      path_ = std::move(other.path_);
      lock_ = std::move(other.lock_);
      locked_ = other.locked_;
      other.locked_ = false;
    }
    return *this;
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
  ~RunDir() { release(); }

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& rel) const { return path_ / rel; }

 private:
  RunDir() = default;
  void release() {
    if (locked_) {
      std::error_code ec;
      std::filesystem::remove(lock_, ec);
      locked_ = false;
    }
  }

  std::filesystem::path path_;
  std::filesystem::path lock_;
  bool locked_ = false;
};

inline void write_text_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw RunError("io_error", "cannot write " + p.string());
  os << content;
  if (!os) throw RunError("io_error", "failed writing " + p.string());
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw RunError("missing_input", "cannot open " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline RunConfig read_run_config(const std::filesystem::path& p) {
  return parse_run_config(read_text_file(p));
}

// ---- CSV layouts ----

inline const char* train_csv_header() {
  return "step,t,l_ddpm,l_fre,l_tem,zeta,total,cond_dropped,wall_ms";
}

inline std::string train_row_csv(const TrainStepRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.t << ',' << r.l_ddpm << ',' << r.l_fre << ',' << r.l_tem << ','
     << r.zeta << ',' << r.total << ',' << (r.cond_dropped ? 1 : 0) << ',' << r.wall_ms;
  return os.str();
}

inline const char* moclip_csv_header() { return "step,stage,loss,tau"; }

inline std::string moclip_row_csv(const MoClipTrainRow& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.stage << ',' << r.loss << ',' << r.tau;
  return os.str();
}

inline const char* dct_csv_header() { return "freq_index,mean_abs_coeff,cum_energy_ratio"; }

}  // namespace anchordiff
