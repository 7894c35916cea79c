#include "strega/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstring>
#include <limits>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace strega::io {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'R', 'G'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderFixed = 8;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::vector<std::uint8_t>& b, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> header(DType dtype, const Dims& dims) {
  if (dims.size() > kStfMaxRank) throw ValidationError("STF supports rank <= 8, got " + std::to_string(dims.size()));
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(dims.size()));
  out.push_back(0);
  for (std::size_t d : dims) put_u64(out, d);
  return out;
}

struct Parsed {
  DType dtype;
  Dims dims;
  std::size_t payload_offset;
};

Parsed parse_header(const std::vector<std::uint8_t>& b) {
  if (b.size() < 4 || std::memcmp(b.data(), kMagic, 4) != 0) throw FormatError("bad STF magic", 0);
  if (b.size() < 5 || b[4] != kVersion) throw FormatError("unsupported STF version", 4);
  if (b.size() < 6 || b[5] > 1) throw FormatError("unknown STF dtype", 5);
  if (b.size() < 7) throw FormatError("truncated STF header", b.size());
  const std::size_t rank = b[6];
  if (rank == 0 || rank > kStfMaxRank) throw FormatError("STF rank must be in 1..8, got " + std::to_string(rank), 6);
  if (b.size() < 8) throw FormatError("truncated STF header", b.size());
  if (b[7] != 0) throw FormatError("STF pad byte must be zero", 7);
  Parsed p{static_cast<DType>(b[5]), {}, kHeaderFixed + 8 * rank};
  if (b.size() < p.payload_offset) throw FormatError("truncated STF dims", b.size());
  std::uint64_t count = 1;
  for (std::size_t a = 0; a < rank; ++a) {
    const std::size_t off = kHeaderFixed + 8 * a;
    const std::uint64_t d = get_u64(b, off);
    if (d == 0) throw FormatError("zero-sized STF dimension", off);
    if (count > std::numeric_limits<std::uint64_t>::max() / d) throw FormatError("STF dims overflow", off);
    count *= d;
    p.dims.push_back(static_cast<std::size_t>(d));
  }
  const std::size_t width = p.dtype == DType::kF32 ? 4 : 1;
  const std::size_t have = b.size() - p.payload_offset;
  if (count > have / width) throw FormatError("truncated STF payload", b.size());
  if (count * width != have) throw FormatError("trailing bytes after STF payload", p.payload_offset + count * width);
  return p;
}

}  // namespace

std::vector<std::uint8_t> stf_encode(const ImageTensor& t) {
  auto out = header(DType::kF32, t.dims());
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.span()) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  return out;
}

std::vector<std::uint8_t> stf_encode(const Tensor<std::uint8_t>& t) {
  auto out = header(DType::kU8, t.dims());
  out.insert(out.end(), t.span().begin(), t.span().end());
  return out;
}

DType stf_peek_dtype(const std::vector<std::uint8_t>& bytes) { return parse_header(bytes).dtype; }

ImageTensor stf_decode_f32(const std::vector<std::uint8_t>& bytes) {
  const Parsed p = parse_header(bytes);
  if (p.dtype != DType::kF32) throw FormatError("expected a float32 STF tensor", 5);
  std::vector<float> data(element_count(p.dims));
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(bytes[p.payload_offset + 4 * i + static_cast<std::size_t>(k)]) << (8 * k);
    data[i] = std::bit_cast<float>(u);
  }
  return ImageTensor(p.dims, std::move(data));
}

Tensor<std::uint8_t> stf_decode_u8(const std::vector<std::uint8_t>& bytes) {
  const Parsed p = parse_header(bytes);
  if (p.dtype != DType::kU8) throw FormatError("expected a uint8 STF tensor", 5);
  return Tensor<std::uint8_t>(p.dims, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(p.payload_offset), bytes.end()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("missing file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

void stf_write(const ImageTensor& t, const fs::path& path) { write_bytes(path, stf_encode(t)); }
void stf_write(const Tensor<std::uint8_t>& t, const fs::path& path) { write_bytes(path, stf_encode(t)); }

ImageTensor stf_read_f32(const fs::path& path) {
  try {
    return stf_decode_f32(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

Tensor<std::uint8_t> stf_read_u8(const fs::path& path) {
  try {
    return stf_decode_u8(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

std::vector<std::uint8_t> pgm_encode(const ImageTensor& slice) {
  if (slice.rank() != 2) throw ShapeError("PGM export expects a [H,W] slice, got " + dims_to_string(slice.dims()));
  const std::string head = "P5\n" + std::to_string(slice.dim(1)) + " " + std::to_string(slice.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  const auto [lo_it, hi_it] = std::minmax_element(slice.values().begin(), slice.values().end());
  const double lo = *lo_it, hi = *hi_it;
  for (float v : slice.span()) {
    if (!(hi > lo)) {
      out.push_back(128);
    } else {
      out.push_back(static_cast<std::uint8_t>(std::lround((v - lo) / (hi - lo) * 255.0)));
    }
  }
  return out;
}

void pgm_write(const ImageTensor& slice, const fs::path& path) { write_bytes(path, pgm_encode(slice)); }

Tensor<std::uint8_t> pgm_read(const fs::path& path) {
  const auto b = read_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(b[pos])) ++pos;
    if (start == pos) throw FormatError("truncated PGM header", pos);
    return std::string(b.begin() + static_cast<std::ptrdiff_t>(start), b.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  if (token() != "P5") throw FormatError("not a binary PGM", 0);
  const std::size_t w = std::stoul(token()), h = std::stoul(token());
  if (token() != "255") throw FormatError("only maxval 255 is supported", pos);
  ++pos;  // single whitespace before the raster
  if (b.size() - pos != w * h) throw FormatError("PGM raster length mismatch", b.size());
  return Tensor<std::uint8_t>({h, w}, std::vector<std::uint8_t>(b.begin() + static_cast<std::ptrdiff_t>(pos), b.end()));
}

void save_checkpoint(const fs::path& dir, vae::ModelParams<float>& params, const CheckpointMeta& meta) {
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "strega-checkpoint";
  manifest["version"] = 1;
  manifest["input_side"] = params.input_side;
  manifest["latent"] = params.latent;
  manifest["zscore"] = {{"mean", meta.zscore.mean}, {"std", meta.zscore.std}};
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  auto add = [&](const std::vector<vae::NamedTensor<float>>& list, const char* role) {
    for (const auto& nt : list) {
      const std::string file = nt.name + ".stf";
      stf_write(*nt.tensor, dir / file);
      entries.push_back({{"name", nt.name}, {"role", role}, {"file", file}, {"dims", nt.tensor->dims()}});
    }
  };
  add(vae::trainable_tensors(params), "parameter");
  add(vae::buffer_tensors(params), "buffer");
  manifest["tensors"] = std::move(entries);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

vae::ModelParams<float> load_checkpoint(const fs::path& dir, CheckpointMeta* meta) {
  const fs::path mpath = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what(), 0);
  }
  if (manifest.value("format", "") != "strega-checkpoint") throw FormatError(mpath.string() + ": not a checkpoint manifest", 0);
  const auto side = manifest.at("input_side").get<std::size_t>();
  RngStream dummy(0);
  vae::ModelParams<float> params = vae::init_model(side, dummy);
  auto slots = vae::trainable_tensors(params);
  const auto buffers = vae::buffer_tensors(params);
  slots.insert(slots.end(), buffers.begin(), buffers.end());
  const auto& entries = manifest.at("tensors");
  if (entries.size() != slots.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model needs " +
                          std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != slots[i].name) {
      throw ValidationError("checkpoint tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                            "', expected '" + slots[i].name + "'");
    }
    ImageTensor t = stf_read_f32(dir / e.at("file").get<std::string>());
    if (t.dims() != slots[i].tensor->dims()) {
      throw ValidationError("checkpoint tensor " + slots[i].name + " has dims " + dims_to_string(t.dims()) +
                            ", expected " + dims_to_string(slots[i].tensor->dims()));
    }
    *slots[i].tensor = std::move(t);
  }
  if (meta) {
    meta->input_side = side;
    meta->zscore.mean = manifest.at("zscore").at("mean").get<double>();
    meta->zscore.std = manifest.at("zscore").at("std").get<double>();
  }
  return params;
}

}  // namespace strega::io
