#include "raml/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace raml {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kRank = 3;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  }
  return v;
}

// Netpbm header: magic, then three whitespace-separated integers, with `#`
// comments allowed between tokens, then exactly one whitespace byte.
struct PnmHeader {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& bytes, const std::filesystem::path& path) {
  PnmHeader h;
  std::size_t pos = 0;
  auto skip_ws_and_comments = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* field) {
    skip_ws_and_comments();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos || pos - start > 9) {
      throw FormatError(path.string() + ": bad or missing " + field + " in header");
    }
    return std::stoi(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2) throw FormatError(path.string() + ": file too short for a header");
  h.magic = bytes.substr(0, 2);
  pos = 2;
  h.width = read_int("width");
  h.height = read_int("height");
  h.maxval = read_int("maxval");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(path.string() + ": header not terminated by whitespace");
  }
  h.data_offset = pos + 1;
  if (h.width <= 0 || h.height <= 0) throw FormatError(path.string() + ": zero dimension in header");
  return h;
}

std::string pnm_header(const char* magic, int width, int height, const std::string& comment) {
  std::ostringstream os;
  os << magic << '\n';
  if (!comment.empty()) os << "# " << comment << '\n';
  os << width << ' ' << height << "\n255\n";
  return os.str();
}

std::string read_gray_payload(const std::filesystem::path& path, PnmHeader& header) {
  std::string bytes = read_file_bytes(path);
  header = parse_pnm_header(bytes, path);
  if (header.magic != "P5") throw FormatError(path.string() + ": magic is not P5");
  if (header.maxval != 255) throw FormatError(path.string() + ": maxval must be 255");
  std::size_t n = static_cast<std::size_t>(header.width) * header.height;
  if (bytes.size() - header.data_offset != n) {
    throw LengthError(path.string() + ": expected " + std::to_string(n) + " payload bytes, found " +
                      std::to_string(bytes.size() - header.data_offset));
  }
  return bytes.substr(header.data_offset);
}

}  // namespace

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

std::string encode_tensor(const Tensor3& t) {
  if (t.empty()) throw PreconditionError("write_tensor: tensor is empty");
  if (!t.all_finite()) throw PreconditionError("write_tensor: tensor contains NaN or Inf");
  std::string out;
  out.reserve(kTensorHeaderBytes + 4 * t.size());
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(kDtypeF32));
  out.push_back(static_cast<char>(kRank));
  out.push_back('\0');
  put_u32(out, static_cast<std::uint32_t>(t.channels()));
  put_u32(out, static_cast<std::uint32_t>(t.height()));
  put_u32(out, static_cast<std::uint32_t>(t.width()));
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor3 decode_tensor(const std::string& bytes) {
  if (bytes.size() < kTensorHeaderBytes) {
    throw LengthError("tensor: header truncated (" + std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("tensor: bad magic");
  if (static_cast<std::uint8_t>(bytes[4]) != kVersion) throw FormatError("tensor: unsupported version");
  if (static_cast<std::uint8_t>(bytes[5]) != kDtypeF32) throw FormatError("tensor: unsupported dtype");
  if (static_cast<std::uint8_t>(bytes[6]) != kRank) throw FormatError("tensor: unsupported rank");
  if (bytes[7] != '\0') throw FormatError("tensor: reserved byte is nonzero");
  std::uint64_t c = get_u32(bytes, 8), h = get_u32(bytes, 12), w = get_u32(bytes, 16);
  if (c == 0 || h == 0 || w == 0 || c > (1u << 20) || h > (1u << 20) || w > (1u << 20)) {
    throw FormatError("tensor: invalid dims");
  }
  std::uint64_t n = c * h * w;
  std::uint64_t payload = bytes.size() - kTensorHeaderBytes;
  if (payload != 4 * n) {
    throw LengthError("tensor: expected " + std::to_string(4 * n) + " payload bytes, found " +
                      std::to_string(payload));
  }
  std::vector<float> data(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, kTensorHeaderBytes + 4 * i));
  }
  return Tensor3(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor3& t) {
  write_file_bytes(path, encode_tensor(t));
}

Tensor3 read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const LengthError& e) {
    throw LengthError(path.string() + ": " + e.what());
  }
}

void write_image_ppm(const std::filesystem::path& path, const Tensor3& image,
                     const std::string& comment) {
  if (image.channels() != 3) throw ShapeError("write_image_ppm: image must have 3 channels");
  std::string out = pnm_header("P6", image.width(), image.height(), comment);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(static_cast<double>(image(c, y, x)), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  write_file_bytes(path, out);
}

Tensor3 read_image_ppm(const std::filesystem::path& path) {
  std::string bytes = read_file_bytes(path);
  PnmHeader h = parse_pnm_header(bytes, path);
  if (h.magic != "P6") throw FormatError(path.string() + ": magic is not P6");
  if (h.maxval != 255) throw FormatError(path.string() + ": maxval must be 255");
  std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset != 3 * n) {
    throw LengthError(path.string() + ": expected " + std::to_string(3 * n) + " payload bytes");
  }
  Tensor3 img(3, h.height, h.width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (int y = 0; y < h.height; ++y) {
    for (int x = 0; x < h.width; ++x) {
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(*p++ / 255.0);
    }
  }
  return img;
}

void write_label_pgm(const std::filesystem::path& path, const LabelMap& labels,
                     const std::string& comment) {
  std::string out = pnm_header("P5", labels.width(), labels.height(), comment);
  for (std::uint8_t v : labels.labels()) out.push_back(static_cast<char>(v));
  write_file_bytes(path, out);
}

LabelMap read_label_pgm(const std::filesystem::path& path) {
  PnmHeader h;
  std::string payload = read_gray_payload(path, h);
  return LabelMap(h.height, h.width, std::vector<std::uint8_t>(payload.begin(), payload.end()));
}

void write_mask_pgm(const std::filesystem::path& path, const BitMask& mask,
                    const std::string& comment) {
  std::string out = pnm_header("P5", mask.width(), mask.height(), comment);
  for (std::size_t i = 0; i < mask.size(); ++i) out.push_back(static_cast<char>(mask.at(i) ? 255 : 0));
  write_file_bytes(path, out);
}

BitMask read_mask_pgm(const std::filesystem::path& path) {
  PnmHeader h;
  std::string payload = read_gray_payload(path, h);
  std::vector<std::uint8_t> bits(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) bits[i] = payload[i] != 0 ? 1 : 0;
  return BitMask(h.height, h.width, std::move(bits));
}

}  // namespace raml
