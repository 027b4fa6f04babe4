#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "purifine/param_store.hpp"
#include "purifine/toy_model.hpp"

namespace purifine::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& stem) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (stem + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Checkpoint constant_checkpoint(const ArchDescriptor& arch, float value) {
  return Checkpoint(arch, std::vector<float>(arch.dim(), value));
}

inline Example make_example(std::vector<TokenId> tokens, ClassId label) {
  Example ex;
  ex.tokens = std::move(tokens);
  ex.label = label;
  ex.original_label = label;
  return ex;
}

}  // namespace purifine::testing
