#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <string>

namespace megalab {

inline constexpr int kDefaultMelBins = 80;
inline constexpr int kLowBandBins = 20;

// Frame-by-bin log-magnitude matrix (rows = frames).
struct MelSpectrogram {
  Eigen::MatrixXd values;

  [[nodiscard]] int frames() const { return static_cast<int>(values.rows()); }
  [[nodiscard]] int bins() const { return static_cast<int>(values.cols()); }
};

// Throws ValidationError when empty or non-finite.
void validate(const MelSpectrogram& mel);

// Column prefix of the first min(bins, low_bins) bins.
template <typename Derived>
auto low_band(const Eigen::MatrixBase<Derived>& m, int low_bins = kLowBandBins) {
  return m.leftCols(std::min<Eigen::Index>(m.cols(), low_bins));
}

[[nodiscard]] MelSpectrogram slice_low_band(const MelSpectrogram& mel, int low_bins = kLowBandBins);

// Binary layout: "MEL1", uint32 frames, uint32 bins, float32 row-major, all
// little-endian.
[[nodiscard]] std::string encode_mel(const MelSpectrogram& mel);
[[nodiscard]] MelSpectrogram decode_mel_binary(const std::string& bytes);
void write_mel(const std::filesystem::path& path, const MelSpectrogram& mel);
[[nodiscard]] MelSpectrogram read_mel(const std::filesystem::path& path);

}  // namespace megalab
