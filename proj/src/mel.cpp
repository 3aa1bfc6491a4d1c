#include "megalab/mel.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "megalab/error.hpp"

namespace megalab {

namespace {

static_assert(std::endian::native == std::endian::little, "mel binaries assume a little-endian host");

constexpr char kMagic[4] = {'M', 'E', 'L', '1'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw IoError("mel binary truncated");
  }
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void validate(const MelSpectrogram& mel) {
  if (mel.frames() < 1 || mel.bins() < 1) {
    throw ValidationError("mel spectrogram must have at least one frame and one bin");
  }
  if (!mel.values.allFinite()) {
    throw ValidationError("mel spectrogram contains non-finite values");
  }
}

MelSpectrogram slice_low_band(const MelSpectrogram& mel, int low_bins) {
  return {low_band(mel.values, low_bins)};
}

std::string encode_mel(const MelSpectrogram& mel) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(mel.frames()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(mel.bins()));
  out.reserve(out.size() + static_cast<std::size_t>(mel.values.size()) * 4);
  for (int f = 0; f < mel.frames(); ++f) {
    for (int b = 0; b < mel.bins(); ++b) put<float>(out, static_cast<float>(mel.values(f, b)));
  }
  return out;
}

MelSpectrogram decode_mel_binary(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("not a MEL1 binary");
  }
  std::size_t pos = 4;
  const auto frames = get<std::uint32_t>(bytes, pos);
  const auto bins = get<std::uint32_t>(bytes, pos);
  if (bytes.size() != 12 + static_cast<std::size_t>(frames) * bins * 4) {
    throw IoError("mel binary size does not match its header");
  }
  MelSpectrogram mel{Eigen::MatrixXd(frames, bins)};
  for (std::uint32_t f = 0; f < frames; ++f) {
    for (std::uint32_t b = 0; b < bins; ++b) mel.values(f, b) = get<float>(bytes, pos);
  }
  return mel;
}

void write_mel(const std::filesystem::path& path, const MelSpectrogram& mel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto bytes = encode_mel(mel);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

MelSpectrogram read_mel(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_mel_binary(ss.str());
}

}  // namespace megalab
