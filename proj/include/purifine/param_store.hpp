#pragma once

// Flat parameter vectors, their layer layout, and the FPKT checkpoint format.
//
// FPKT layout (all integers little-endian):
//   "FPKT" | u8 version | u32 header_len | header_len bytes of UTF-8 JSON
//   | d x f32 parameters
// The JSON header carries the architecture (including the layer layout), the
// total dimension d, and the string metadata map.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace purifine {

struct LayerSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const LayerSlice&, const LayerSlice&) = default;
};

/// Shape of a model: sizes plus the named slices of the flat vector.
/// Construction checks that the slices tile [0, d) contiguously in order and
/// that names are unique and lengths positive.
class ArchDescriptor {
 public:
  ArchDescriptor(std::size_t vocab_size, std::size_t embed_dim,
                 std::size_t num_classes, std::vector<LayerSlice> layout);

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<LayerSlice>& layout() const { return layout_; }
  std::size_t dim() const { return dim_; }

  /// Slice by name; throws ValidationError when absent.
  const LayerSlice& layer(const std::string& name) const;

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;

 private:
  std::size_t vocab_size_;
  std::size_t embed_dim_;
  std::size_t num_classes_;
  std::vector<LayerSlice> layout_;
  std::size_t dim_ = 0;
};

using Metadata = std::map<std::string, std::string>;

/// Immutable model snapshot: 32-bit parameters, an architecture and free-form
/// metadata. The reserved metadata key "tag" names the checkpoint's role.
class Checkpoint {
 public:
  /// Throws ShapeError when params.size() != arch.dim() and ValidationError
  /// when any parameter is non-finite.
  Checkpoint(ArchDescriptor arch, std::vector<float> params, Metadata meta = {});

  /// Narrows 64-bit values to 32-bit storage.
  static Checkpoint from_double(ArchDescriptor arch, std::span<const double> params,
                                Metadata meta = {});

  const ArchDescriptor& arch() const { return arch_; }
  std::span<const float> params() const { return params_; }
  const Metadata& meta() const { return meta_; }
  std::size_t dim() const { return params_.size(); }

  /// Metadata lookup; empty string when absent.
  std::string meta_value(const std::string& key) const;
  std::string tag() const { return meta_value("tag"); }

  /// Parameters widened to 64-bit.
  std::vector<double> params_double() const;

  /// Copy with one metadata entry replaced.
  Checkpoint with_meta(const std::string& key, std::string value) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

 private:
  ArchDescriptor arch_;
  std::vector<float> params_;
  Metadata meta_;
};

/// delta = ft - init, computed in 64-bit.
struct DriftVector {
  std::vector<double> delta;
};

inline constexpr std::uint8_t kFpktVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Byte-level encoding used by save/load; exposed for in-memory round trips.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Throws ShapeError when the architectures differ.
DriftVector diff(const Checkpoint& ft, const Checkpoint& init);

}  // namespace purifine
