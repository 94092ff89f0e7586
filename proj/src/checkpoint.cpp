#include "diffender/checkpoint.hpp"

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace diffender {
namespace {

constexpr std::array<char, 8> kMagic = {'D', 'F', 'C', 'K', 'P', 'T', '\0', '\1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat: return "f32";
    case torch::kDouble: return "f64";
    case torch::kLong: return "i64";
    case torch::kUInt8: return "u8";
    default: throw ContractError("checkpoint: unsupported dtype");
  }
}

torch::ScalarType dtype_from(const std::string& name) {
  if (name == "f32") return torch::kFloat;
  if (name == "f64") return torch::kDouble;
  if (name == "i64") return torch::kLong;
  if (name == "u8") return torch::kUInt8;
  throw FormatError("checkpoint: unknown dtype " + name);
}

std::uint32_t crc_of(const void* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace

std::string to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::diffusion: return "diffusion";
    case CheckpointKind::classifier: return "classifier";
    case CheckpointKind::prompts: return "prompts";
    case CheckpointKind::idc_token: return "idc_token";
    case CheckpointKind::attack_cache: return "attack_cache";
  }
  return "unknown";
}

CheckpointKind checkpoint_kind_from_string(const std::string& name) {
  for (auto k : {CheckpointKind::diffusion, CheckpointKind::classifier, CheckpointKind::prompts,
                 CheckpointKind::idc_token, CheckpointKind::attack_cache}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw FormatError("checkpoint: unknown kind " + name);
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (kind != other.kind || metadata != other.metadata || arrays.size() != other.arrays.size()) {
    return false;
  }
  for (const auto& [name, a] : arrays) {
    auto it = other.arrays.find(name);
    if (it == other.arrays.end()) {
      return false;
    }
    const auto& b = it->second;
    if (a.scalar_type() != b.scalar_type() || a.sizes() != b.sizes()) {
      return false;
    }
    auto ca = a.contiguous();
    auto cb = b.contiguous();
    if (std::memcmp(ca.data_ptr(), cb.data_ptr(), ca.nbytes()) != 0) {
      return false;
    }
  }
  return true;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json header;
  header["kind"] = to_string(ckpt.kind);
  header["metadata"] = ckpt.metadata;
  header["arrays"] = json::array();
  std::vector<torch::Tensor> blobs;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.arrays) {
    auto c = tensor.detach().cpu().contiguous();
    json entry;
    entry["name"] = name;
    entry["dtype"] = dtype_name(c.scalar_type());
    entry["shape"] = c.sizes().vec();
    entry["offset"] = offset;
    entry["nbytes"] = c.nbytes();
    entry["crc32"] = crc_of(c.data_ptr(), c.nbytes());
    header["arrays"].push_back(entry);
    offset += c.nbytes();
    blobs.push_back(c);
  }
  const std::string text = header.dump();
  const std::uint64_t length = text.size();

  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot write checkpoint " + path.string());
    }
    out.write(kMagic.data(), kMagic.size());
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) {
      len[i] = static_cast<unsigned char>((length >> (8 * i)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blobs) {
      out.write(static_cast<const char*>(b.data_ptr()), static_cast<std::streamsize>(b.nbytes()));
    }
    if (!out) {
      throw IoError("short write on checkpoint " + path.string());
    }
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingArtifactError("checkpoint not found: " + path.string());
  }
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw FormatError("not a checkpoint: " + path.string());
  }
  std::uint64_t length = 0;
  for (int i = 0; i < 8; ++i) {
    length |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  }
  if (16 + length > bytes.size()) {
    throw FormatError("truncated checkpoint header: " + path.string());
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(length));
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.metadata.clear();
  try {
    ckpt.kind = checkpoint_kind_from_string(header.at("kind").get<std::string>());
    ckpt.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  auto version = ckpt.metadata.find(kFormatVersionKey);
  if (version == ckpt.metadata.end()) {
    throw FormatError("checkpoint has no format version: " + path.string());
  }
  if (version->second != kFormatVersion) {
    throw FormatError("checkpoint version " + version->second + " != " + kFormatVersion);
  }
  const std::size_t data_start = 16 + length;
  try {
    for (const auto& entry : header.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = dtype_from(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      const auto crc = entry.at("crc32").get<std::uint32_t>();
      if (data_start + offset + nbytes > bytes.size()) {
        throw FormatError("checkpoint array block out of bounds: " + name);
      }
      const char* src = bytes.data() + data_start + offset;
      if (crc_of(src, nbytes) != crc) {
        throw FormatError("checkpoint array block corrupted: " + name);
      }
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (t.nbytes() != nbytes) {
        throw FormatError("checkpoint array size mismatch: " + name);
      }
      std::memcpy(t.data_ptr(), src, nbytes);
      ckpt.arrays.emplace(name, t);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint array table: ") + e.what());
  }
  return ckpt;
}

void store_module(const torch::nn::Module& module, Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& p : module.named_parameters()) {
    ckpt.arrays[prefix + p.key()] = p.value().detach().clone();
  }
  for (const auto& b : module.named_buffers()) {
    ckpt.arrays[prefix + b.key()] = b.value().detach().clone();
  }
}

void restore_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    auto it = ckpt.arrays.find(prefix + name);
    if (it == ckpt.arrays.end()) {
      throw FormatError("checkpoint lacks array " + prefix + name);
    }
    if (it->second.sizes() != target.sizes()) {
      throw FormatError("checkpoint shape mismatch for " + prefix + name);
    }
    target.copy_(it->second);
  };
  for (auto& p : module.named_parameters()) {
    assign(p.key(), p.value());
  }
  for (auto& b : module.named_buffers()) {
    assign(b.key(), b.value());
  }
}

}  // namespace diffender
