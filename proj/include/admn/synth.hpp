#pragma once

// Seeded two-modality toy task: a blob (modality A) and a ring (modality B)
// share a center z in the unit square; each sample corrupts each modality
// independently with a value drawn from that modality's set.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "admn/autodiff.hpp"

namespace admn::synth {

inline constexpr std::size_t kGrid = 16;
inline constexpr double kBlobWidth = 2.0;
inline constexpr double kRingRadius = 3.0;
inline constexpr double kRingWidth = 1.0;
inline constexpr std::size_t kSectors = 8;

enum class CorruptionMode { gaussian, lowlight, blur };
std::string to_string(CorruptionMode m);
CorruptionMode parse_corruption_mode(const std::string& s);

// Severity levels for lowlight and blur; values in the sets are 0, 1, 2.
enum class Severity { none = 0, medium = 1, severe = 2 };

struct CorruptionSpec {
  CorruptionMode mode = CorruptionMode::gaussian;
  // One set per modality. Gaussian: standard deviations. Lowlight/blur:
  // severity levels {0, 1, 2}.
  std::vector<std::vector<double>> values{{0, 1, 2, 3}, {0, 0.25, 0.5, 0.75}};

  void validate() const;
  // Number of joint corruption categories: product of set sizes.
  std::size_t categories() const;
};

// 16x16 output, row-major. Modality 0 is the blob, 1 the ring. The center sits
// at pixel (z[1]*16, z[0]*16) as (row, col). RangeError for z outside [0,1]^2.
Matrix render_clean(const std::array<double, 2>& z, std::size_t modality);

// Sector of z around the grid center, counter-clockwise from +x, in [0, 8).
std::size_t sector_of(const std::array<double, 2>& z);

Matrix corrupt_gaussian(const Matrix& x, double sigma, Rng& rng);
// clamp((clamp(x)*scale)^gamma) + N(0, sigma); identity for none.
Matrix corrupt_lowlight(const Matrix& x, Severity s, Rng& rng);
// Gaussian kernel blur with symmetric (edge-including) reflection padding.
Matrix corrupt_blur(const Matrix& x, Severity s);
Matrix gaussian_kernel(std::size_t size, double sigma);

struct LowlightParams {
  double scale, gamma, sigma;
};
LowlightParams lowlight_params(Severity s);

// Applies one modality's corruption drawn from `spec`.
Matrix apply_corruption(const Matrix& clean, CorruptionMode mode, double value, Rng& rng);

struct MultimodalSample {
  std::uint64_t id = 0;
  std::uint64_t sub_seed = 0;
  std::array<double, 2> z{};
  std::size_t label_class = 0;
  std::vector<Matrix> inputs;             // normalized, one 16x16 per modality
  std::vector<double> corruption;         // value per modality
  std::vector<std::size_t> corruption_id;  // index into the modality's set
  // Joint category: mixed radix over corruption_id, modality 0 most significant.
  std::size_t corruption_category(const CorruptionSpec& spec) const;
};

struct NormStats {
  std::vector<double> mean, stdev;  // per modality, from clean training renders
};

struct SplitRatios {
  double train = 0.7, val = 0.15, test = 0.15;
};

struct Dataset {
  CorruptionSpec spec;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  SplitRatios ratios;
  NormStats norm;
  std::vector<MultimodalSample> train, val, test;

  std::size_t modalities() const { return spec.values.size(); }
};

std::uint64_t sample_sub_seed(std::uint64_t seed, std::uint64_t id);

// Draws z and the corruption ids from the sub-seed; returns an un-normalized
// sample (inputs are the corrupted renders).
MultimodalSample generate_raw(const CorruptionSpec& spec, std::uint64_t seed, std::uint64_t id);

// Rebuilds a sample's corrupted input from its stored descriptor and sub-seed.
Matrix reapply_corruption(const CorruptionSpec& spec, const MultimodalSample& s, std::size_t modality);

Matrix normalize(const Matrix& x, const NormStats& stats, std::size_t modality);

// ConfigError for n < 30, ratios not summing to 1, or an empty split.
Dataset make_dataset(const CorruptionSpec& spec, std::size_t n, std::uint64_t seed, SplitRatios ratios = {});

// Directory layout: manifest.txt, <split>_m<k>.admt [N,1,16,16],
// <split>_z.admt [N,2], descriptors.csv (sample_id,modality,mode,value,sub_seed).
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace admn::synth
