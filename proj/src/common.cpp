#include "juap/common.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

#include <torch/torch.h>

namespace juap {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t derive_seed(uint64_t base, std::string_view tag) {
  // Keep seeds below 2^63 so they survive a round trip through signed JSON ints.
  return splitmix64(base ^ fnv1a(tag)) >> 1;
}

uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index) {
  return splitmix64(derive_seed(base, tag) + splitmix64(index)) >> 1;
}

void use_deterministic_runtime() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

DirectoryLock::DirectoryLock(const fs::path& dir) {
  fs::create_directories(dir);
  const auto lock_path = dir / ".lock";
  fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
  if (fd_ < 0) throw InputError("cannot create lock file: " + lock_path.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw InputError("output directory is locked by another process: " + dir.string());
  }
}

DirectoryLock::~DirectoryLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

}  // namespace juap
