#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "strega/cevae.hpp"
#include "strega/preprocess.hpp"
#include "strega/tensor.hpp"

namespace strega::io {

namespace fs = std::filesystem;

enum class DType : std::uint8_t { kF32 = 0, kU8 = 1 };

inline constexpr std::size_t kStfMaxRank = 8;

// STF container: "STRG", version 1, dtype, rank, pad 0, rank x u64 LE dims,
// row-major little-endian payload.
std::vector<std::uint8_t> stf_encode(const ImageTensor& t);
std::vector<std::uint8_t> stf_encode(const Tensor<std::uint8_t>& t);
/// Throws FormatError naming the byte offset of the first bad field.
ImageTensor stf_decode_f32(const std::vector<std::uint8_t>& bytes);
Tensor<std::uint8_t> stf_decode_u8(const std::vector<std::uint8_t>& bytes);
/// dtype byte of an encoded container (validates magic and version only).
DType stf_peek_dtype(const std::vector<std::uint8_t>& bytes);

void stf_write(const ImageTensor& t, const fs::path& path);
void stf_write(const Tensor<std::uint8_t>& t, const fs::path& path);
ImageTensor stf_read_f32(const fs::path& path);
Tensor<std::uint8_t> stf_read_u8(const fs::path& path);

/// Whole file as bytes; a missing file is a ValidationError.
std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

/// Binary P5 greymap of a [H,W] slice, min-max scaled to 0..255 (a constant
/// slice becomes all 128).
std::vector<std::uint8_t> pgm_encode(const ImageTensor& slice);
void pgm_write(const ImageTensor& slice, const fs::path& path);
/// Reads back a P5 file as raw 0..255 values.
Tensor<std::uint8_t> pgm_read(const fs::path& path);

struct CheckpointMeta {
  std::size_t input_side = 64;
  prep::ZScoreStats zscore;
};

/// Directory with manifest.json plus one STF file per parameter and
/// batch-norm buffer.
void save_checkpoint(const fs::path& dir, vae::ModelParams<float>& params, const CheckpointMeta& meta);
vae::ModelParams<float> load_checkpoint(const fs::path& dir, CheckpointMeta* meta = nullptr);

}  // namespace strega::io
