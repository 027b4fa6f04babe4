#include "purifine/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>

#include "json.hpp"

#include "purifine/error.hpp"

namespace purifine {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'K', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  return v;
}

void check_finite(std::span<const float> params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!std::isfinite(params[i])) {
      throw ValidationError("checkpoint parameter " + std::to_string(i) + " is not finite");
    }
  }
}

nlohmann::json arch_to_json(const ArchDescriptor& arch) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : arch.layout()) {
    layers.push_back({{"name", l.name}, {"offset", l.offset}, {"length", l.length}});
  }
  return {{"vocab_size", arch.vocab_size()},
          {"embed_dim", arch.embed_dim()},
          {"num_classes", arch.num_classes()},
          {"layers", layers}};
}

ArchDescriptor arch_from_json(const nlohmann::json& j) {
  std::vector<LayerSlice> layout;
  for (const auto& l : j.at("layers")) {
    layout.push_back({l.at("name").get<std::string>(), l.at("offset").get<std::size_t>(),
                      l.at("length").get<std::size_t>()});
  }
  return ArchDescriptor(j.at("vocab_size").get<std::size_t>(),
                        j.at("embed_dim").get<std::size_t>(),
                        j.at("num_classes").get<std::size_t>(), std::move(layout));
}

}  // namespace

ArchDescriptor::ArchDescriptor(std::size_t vocab_size, std::size_t embed_dim,
                               std::size_t num_classes, std::vector<LayerSlice> layout)
    : vocab_size_(vocab_size),
      embed_dim_(embed_dim),
      num_classes_(num_classes),
      layout_(std::move(layout)) {
  if (vocab_size_ == 0 || embed_dim_ == 0 || num_classes_ == 0) {
    throw ValidationError("architecture sizes must be positive");
  }
  if (layout_.empty()) throw ValidationError("layer layout is empty");
  std::set<std::string> names;
  for (const auto& l : layout_) {
    if (l.length == 0) throw ValidationError("layer '" + l.name + "' has zero length");
    if (l.offset != dim_) {
      throw ValidationError("layer '" + l.name + "' is not contiguous with its predecessor");
    }
    if (!names.insert(l.name).second) {
      throw ValidationError("duplicate layer name '" + l.name + "'");
    }
    dim_ += l.length;
  }
}

const LayerSlice& ArchDescriptor::layer(const std::string& name) const {
  for (const auto& l : layout_) {
    if (l.name == name) return l;
  }
  throw ValidationError("no layer named '" + name + "'");
}

Checkpoint::Checkpoint(ArchDescriptor arch, std::vector<float> params, Metadata meta)
    : arch_(std::move(arch)), params_(std::move(params)), meta_(std::move(meta)) {
  if (params_.size() != arch_.dim()) {
    throw ShapeError("checkpoint has " + std::to_string(params_.size()) +
                     " parameters but architecture dimension is " + std::to_string(arch_.dim()));
  }
  check_finite(params_);
}

Checkpoint Checkpoint::from_double(ArchDescriptor arch, std::span<const double> params,
                                   Metadata meta) {
  std::vector<float> narrowed(params.begin(), params.end());
  return Checkpoint(std::move(arch), std::move(narrowed), std::move(meta));
}

std::string Checkpoint::meta_value(const std::string& key) const {
  auto it = meta_.find(key);
  return it == meta_.end() ? std::string{} : it->second;
}

std::vector<double> Checkpoint::params_double() const {
  return std::vector<double>(params_.begin(), params_.end());
}

Checkpoint Checkpoint::with_meta(const std::string& key, std::string value) const {
  Checkpoint copy = *this;
  copy.meta_[key] = std::move(value);
  return copy;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  check_finite(ckpt.params());
  nlohmann::json header = {{"arch", arch_to_json(ckpt.arch())},
                           {"dim", ckpt.dim()},
                           {"meta", ckpt.meta()}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(9 + text.size() + 4 * ckpt.dim());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kFpktVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (float v : ckpt.params()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("missing FPKT magic");
  }
  if (bytes[4] != kFpktVersion) {
    throw FormatError("unsupported FPKT version " + std::to_string(bytes[4]));
  }
  const std::size_t header_len = get_u32(bytes.subspan(5));
  if (bytes.size() < 9 + header_len) throw FormatError("truncated FPKT header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed FPKT header: ") + e.what());
  }

  std::optional<ArchDescriptor> arch;
  std::size_t dim = 0;
  Metadata meta;
  try {
    arch.emplace(arch_from_json(header.at("arch")));
    dim = header.at("dim").get<std::size_t>();
    meta = header.at("meta").get<Metadata>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete FPKT header: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("invalid layout in FPKT header: ") + e.what());
  }
  if (dim != arch->dim()) throw FormatError("FPKT header dimension disagrees with layout");

  const auto payload = bytes.subspan(9 + header_len);
  if (payload.size() != 4 * dim) {
    throw FormatError("FPKT payload holds " + std::to_string(payload.size()) +
                      " bytes, expected " + std::to_string(4 * dim));
  }
  std::vector<float> params(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    params[i] = std::bit_cast<float>(get_u32(payload.subspan(4 * i)));
  }
  return Checkpoint(std::move(*arch), std::move(params), std::move(meta));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw StorageError("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

DriftVector diff(const Checkpoint& ft, const Checkpoint& init) {
  if (!(ft.arch() == init.arch())) {
    throw ShapeError("cannot diff checkpoints with different architectures");
  }
  DriftVector drift;
  drift.delta.resize(ft.dim());
  const auto a = ft.params();
  const auto b = init.params();
  for (std::size_t i = 0; i < drift.delta.size(); ++i) {
    drift.delta[i] = static_cast<double>(a[i]) - static_cast<double>(b[i]);
  }
  return drift;
}

}  // namespace purifine
