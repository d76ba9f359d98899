#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace juap {

namespace fs = std::filesystem;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: missing files, malformed configs, contract violations.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A loss or parameter became NaN/Inf during optimization.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, int64_t iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}
  int64_t iteration() const { return iteration_; }

 private:
  int64_t iteration_;
};

/// Deterministic sub-seed for a named stochastic component.
uint64_t derive_seed(uint64_t base, std::string_view tag);
uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index);

/// Pins libtorch to a single intra-op thread so repeated runs are bitwise stable.
void use_deterministic_runtime();

/// Writes `contents` to `path` via a sibling temp file and rename.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::string read_file(const fs::path& path);

/// Holds an exclusive advisory lock on `<dir>/.lock` for the object's lifetime.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace juap
