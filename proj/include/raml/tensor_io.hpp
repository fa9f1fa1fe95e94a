#pragma once

#include <filesystem>
#include <string>

#include "raml/tensor.hpp"

namespace raml {

// TNSR v1 layout (all little-endian):
//   "TNSR" | version=1 | dtype=1 (f32) | rank=3 | reserved=0 | C:u32 | H:u32 | W:u32 | C*H*W f32
inline constexpr std::size_t kTensorHeaderBytes = 20;

void write_tensor(const std::filesystem::path& path, const Tensor3& t);
Tensor3 read_tensor(const std::filesystem::path& path);

// In-memory variants, used by the file functions and by header fuzz tests.
std::string encode_tensor(const Tensor3& t);
Tensor3 decode_tensor(const std::string& bytes);

/// Binary PPM (P6, maxval 255). Values are clamped to [0,1] and rounded to
/// the nearest 1/255 on write; `comment` becomes a `#` header line.
void write_image_ppm(const std::filesystem::path& path, const Tensor3& image,
                     const std::string& comment = {});
Tensor3 read_image_ppm(const std::filesystem::path& path);

/// Binary PGM (P5, maxval 255); each byte is a class index, 255 = ignore.
void write_label_pgm(const std::filesystem::path& path, const LabelMap& labels,
                     const std::string& comment = {});
LabelMap read_label_pgm(const std::filesystem::path& path);

/// Masks are PGM with 0 = clear and 255 = set. Any nonzero byte reads as set.
void write_mask_pgm(const std::filesystem::path& path, const BitMask& mask,
                    const std::string& comment = {});
BitMask read_mask_pgm(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace raml
