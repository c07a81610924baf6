#include "admn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

#include "admn/errors.hpp"
#include "admn/tensor_io.hpp"

namespace admn::synth {

std::string to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::gaussian: return "gaussian";
    case CorruptionMode::lowlight: return "lowlight";
    case CorruptionMode::blur: return "blur";
  }
  return "?";
}

CorruptionMode parse_corruption_mode(const std::string& s) {
  if (s == "gaussian") return CorruptionMode::gaussian;
  if (s == "lowlight") return CorruptionMode::lowlight;
  if (s == "blur") return CorruptionMode::blur;
  throw ConfigError("unknown corruption mode '" + s + "' (gaussian, lowlight, blur)");
}

void CorruptionSpec::validate() const {
  if (values.empty()) throw ConfigError("corruption spec: no modalities");
  for (std::size_t m = 0; m < values.size(); ++m) {
    if (values[m].empty()) throw ConfigError("corruption spec: empty value set for modality " + std::to_string(m));
    for (double v : values[m]) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("corruption spec: values must be finite and >= 0");
      if (mode != CorruptionMode::gaussian && v != 0.0 && v != 1.0 && v != 2.0) {
        throw ConfigError("corruption spec: " + to_string(mode) + " levels must be 0, 1 or 2");
      }
    }
  }
}

std::size_t CorruptionSpec::categories() const {
  std::size_t k = 1;
  for (const auto& v : values) k *= v.size();
  return k;
}

namespace {

void check_unit(const std::array<double, 2>& z) {
  for (double v : z) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw RangeError("z = (" + std::to_string(z[0]) + ", " + std::to_string(z[1]) + ") outside the unit square");
    }
  }
}

std::size_t reflect(long i, long n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return static_cast<std::size_t>(i);
}

}  // namespace

Matrix render_clean(const std::array<double, 2>& z, std::size_t modality) {
  check_unit(z);
  if (modality > 1) throw RangeError("render_clean: modality " + std::to_string(modality) + " (0 or 1)");
  const double cr = z[1] * kGrid, cc = z[0] * kGrid;
  Matrix out(kGrid, kGrid);
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t c = 0; c < kGrid; ++c) {
      const double dr = double(r) - cr, dc = double(c) - cc;
      const double d2 = dr * dr + dc * dc;
      if (modality == 0) {
        out(r, c) = std::exp(-d2 / (2 * kBlobWidth * kBlobWidth));
      } else {
        const double e = std::sqrt(d2) - kRingRadius;
        out(r, c) = std::exp(-e * e / (2 * kRingWidth * kRingWidth));
      }
    }
  return out;
}

std::size_t sector_of(const std::array<double, 2>& z) {
  double a = std::atan2(z[1] - 0.5, z[0] - 0.5);
  if (a < 0) a += 2 * std::numbers::pi;
  const auto s = static_cast<std::size_t>(a / (2 * std::numbers::pi / kSectors));
  return std::min(s, kSectors - 1);
}

Matrix corrupt_gaussian(const Matrix& x, double sigma, Rng& rng) {
  if (sigma < 0) throw RangeError("gaussian corruption: sigma < 0");
  if (sigma == 0) return x;
  Matrix out = x;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += sigma * rng.normal();
  return out;
}

LowlightParams lowlight_params(Severity s) {
  switch (s) {
    case Severity::none: return {1.0, 1.0, 0.0};
    case Severity::medium: return {0.4, 2.0, 0.02};
    case Severity::severe: return {0.15, 3.0, 0.05};
  }
  return {1.0, 1.0, 0.0};
}

Matrix corrupt_lowlight(const Matrix& x, Severity s, Rng& rng) {
  if (s == Severity::none) return x;
  const auto p = lowlight_params(s);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = std::clamp(x.data()[i], 0.0, 1.0) * p.scale;
    out.data()[i] = std::clamp(std::pow(v, p.gamma), 0.0, 1.0) + p.sigma * rng.normal();
  }
  return out;
}

Matrix gaussian_kernel(std::size_t size, double sigma) {
  Matrix k(size, size);
  const double c = (double(size) - 1) / 2;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j)
      k(i, j) = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
  return k / k.sum();
}

Matrix corrupt_blur(const Matrix& x, Severity s) {
  if (s == Severity::none) return x;
  const Matrix k = s == Severity::medium ? gaussian_kernel(5, 1.5) : gaussian_kernel(9, 3.0);
  const long half = static_cast<long>(k.rows() / 2), R = x.rows(), C = x.cols();
  Matrix out = Matrix::Zero(R, C);
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c) {
      double acc = 0;
      for (long i = -half; i <= half; ++i)
        for (long j = -half; j <= half; ++j) acc += k(i + half, j + half) * x(reflect(r + i, R), reflect(c + j, C));
      out(r, c) = acc;
    }
  return out;
}

Matrix apply_corruption(const Matrix& clean, CorruptionMode mode, double value, Rng& rng) {
  switch (mode) {
    case CorruptionMode::gaussian: return corrupt_gaussian(clean, value, rng);
    case CorruptionMode::lowlight: return corrupt_lowlight(clean, static_cast<Severity>(std::lround(value)), rng);
    case CorruptionMode::blur: return corrupt_blur(clean, static_cast<Severity>(std::lround(value)));
  }
  return clean;
}

std::size_t MultimodalSample::corruption_category(const CorruptionSpec& spec) const {
  std::size_t k = 0;
  for (std::size_t m = 0; m < corruption_id.size(); ++m) k = k * spec.values[m].size() + corruption_id[m];
  return k;
}

std::uint64_t sample_sub_seed(std::uint64_t seed, std::uint64_t id) {
  return splitmix64(splitmix64(seed) ^ ((id + 1) * 0xD1B54A32D192ED03ULL));
}

MultimodalSample generate_raw(const CorruptionSpec& spec, std::uint64_t seed, std::uint64_t id) {
  MultimodalSample s;
  s.id = id;
  s.sub_seed = sample_sub_seed(seed, id);
  Rng rng(s.sub_seed);
  s.z = {rng.uniform(), rng.uniform()};
  s.label_class = sector_of(s.z);
  for (const auto& set : spec.values) {
    const auto k = rng.below(set.size());
    s.corruption_id.push_back(k);
    s.corruption.push_back(set[k]);
  }
  for (std::size_t m = 0; m < spec.values.size(); ++m) s.inputs.push_back(reapply_corruption(spec, s, m));
  return s;
}

Matrix reapply_corruption(const CorruptionSpec& spec, const MultimodalSample& s, std::size_t modality) {
  Rng noise = Rng(s.sub_seed).fork(modality + 1);
  return apply_corruption(render_clean(s.z, modality), spec.mode, s.corruption.at(modality), noise);
}

Matrix normalize(const Matrix& x, const NormStats& stats, std::size_t modality) {
  return (x.array() - stats.mean.at(modality)) / stats.stdev.at(modality);
}

Dataset make_dataset(const CorruptionSpec& spec, std::size_t n, std::uint64_t seed, SplitRatios ratios) {
  spec.validate();
  if (spec.values.size() != 2) throw ConfigError("synthetic task renders exactly 2 modalities");
  if (n < 30) throw ConfigError("dataset: n must be >= 30, got " + std::to_string(n));
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("dataset: split ratios must be >= 0 and sum to 1");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * double(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios.val * double(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw ConfigError("dataset: split ratios leave an empty split at n = " + std::to_string(n));
  }

  Dataset ds;
  ds.spec = spec;
  ds.n = n;
  ds.seed = seed;
  ds.ratios = ratios;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng shuffle = Rng(seed).fork(0x5B117);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);

  std::vector<MultimodalSample> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = generate_raw(spec, seed, i);

  const std::size_t M = spec.values.size();
  ds.norm.mean.assign(M, 0.0);
  ds.norm.stdev.assign(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    double sum = 0, sq = 0;
    for (std::size_t k = 0; k < n_train; ++k) {
      const Matrix c = render_clean(all[order[k]].z, m);
      sum += c.sum();
      sq += c.squaredNorm();
    }
    const double count = double(n_train * kGrid * kGrid);
    ds.norm.mean[m] = sum / count;
    ds.norm.stdev[m] = std::sqrt(std::max(sq / count - ds.norm.mean[m] * ds.norm.mean[m], 1e-12));
  }
  for (auto& s : all)
    for (std::size_t m = 0; m < M; ++m) s.inputs[m] = normalize(s.inputs[m], ds.norm, m);

  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < n_train ? ds.train : (k < n_train + n_val ? ds.val : ds.test);
    dst.push_back(std::move(all[order[k]]));
  }
  return ds;
}

// ---- files ------------------------------------------------------------------------

namespace {

const char* kSplits[] = {"train", "val", "test"};

std::vector<MultimodalSample>& split_ref(Dataset& ds, int k) { return k == 0 ? ds.train : k == 1 ? ds.val : ds.test; }
const std::vector<MultimodalSample>& split_ref(const Dataset& ds, int k) {
  return k == 0 ? ds.train : k == 1 ? ds.val : ds.test;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt", std::ios::binary);
  if (!man) throw ConfigError("cannot write " + (dir / "manifest.txt").string());
  man << "mode " << to_string(ds.spec.mode) << '\n';
  for (std::size_t m = 0; m < ds.spec.values.size(); ++m) {
    man << "values" << m;
    for (double v : ds.spec.values[m]) man << ' ' << fmt(v);
    man << '\n';
  }
  man << "n " << ds.n << "\nseed " << ds.seed << '\n';
  man << "ratios " << fmt(ds.ratios.train) << ' ' << fmt(ds.ratios.val) << ' ' << fmt(ds.ratios.test) << '\n';
  man << "norm_mean";
  for (double v : ds.norm.mean) man << ' ' << fmt(v);
  man << "\nnorm_std";
  for (double v : ds.norm.stdev) man << ' ' << fmt(v);
  man << '\n';
  for (int k = 0; k < 3; ++k) {
    man << kSplits[k];
    for (const auto& s : split_ref(ds, k)) man << ' ' << s.id;
    man << '\n';
  }

  std::ofstream csv(dir / "descriptors.csv", std::ios::binary);
  csv << "sample_id,modality,mode,value,sub_seed\n";
  std::vector<const MultimodalSample*> by_id;
  for (int k = 0; k < 3; ++k)
    for (const auto& s : split_ref(ds, k)) by_id.push_back(&s);
  std::sort(by_id.begin(), by_id.end(), [](auto* a, auto* b) { return a->id < b->id; });
  for (const auto* s : by_id)
    for (std::size_t m = 0; m < s->corruption.size(); ++m)
      csv << s->id << ',' << m << ',' << to_string(ds.spec.mode) << ',' << fmt(s->corruption[m]) << ','
          << s->sub_seed << '\n';

  for (int k = 0; k < 3; ++k) {
    const auto& split = split_ref(ds, k);
    const auto N = split.size();
    Matrix z(N, 2);
    for (std::size_t i = 0; i < N; ++i) z.row(i) << split[i].z[0], split[i].z[1];
    save_tensor(dir / (std::string(kSplits[k]) + "_z.admt"), Tensor::from_matrix(z));
    for (std::size_t m = 0; m < ds.modalities(); ++m) {
      Matrix stacked(N * kGrid, kGrid);
      for (std::size_t i = 0; i < N; ++i) stacked.middleRows(i * kGrid, kGrid) = split[i].inputs[m];
      save_tensor(dir / (std::string(kSplits[k]) + "_m" + std::to_string(m) + ".admt"),
                  Tensor::from_matrix(Shape{N, 1, kGrid, kGrid}, stacked));
    }
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw ConfigError("missing dataset manifest in " + dir.string());
  Dataset ds;
  ds.spec.values.clear();
  std::map<std::string, std::vector<std::string>> fields;
  std::string line;
  while (std::getline(man, line)) {
    std::istringstream is(line);
    std::string key, tok;
    is >> key;
    while (is >> tok) fields[key].push_back(tok);
    if (!key.empty() && !fields.count(key)) fields[key] = {};
  }
  auto need = [&](const std::string& k) -> const std::vector<std::string>& {
    auto it = fields.find(k);
    if (it == fields.end()) throw FormatError("dataset manifest: missing '" + k + "'");
    return it->second;
  };
  ds.spec.mode = parse_corruption_mode(need("mode").at(0));
  for (std::size_t m = 0; fields.count("values" + std::to_string(m)); ++m) {
    std::vector<double> v;
    for (const auto& t : fields["values" + std::to_string(m)]) v.push_back(std::stod(t));
    ds.spec.values.push_back(v);
  }
  ds.n = std::stoull(need("n").at(0));
  ds.seed = std::stoull(need("seed").at(0));
  const auto& r = need("ratios");
  ds.ratios = {std::stod(r.at(0)), std::stod(r.at(1)), std::stod(r.at(2))};
  for (const auto& t : need("norm_mean")) ds.norm.mean.push_back(std::stod(t));
  for (const auto& t : need("norm_std")) ds.norm.stdev.push_back(std::stod(t));

  std::map<std::uint64_t, std::vector<double>> values;
  std::map<std::uint64_t, std::uint64_t> seeds;
  std::ifstream csv(dir / "descriptors.csv");
  if (!csv) throw FormatError("missing descriptors.csv in " + dir.string());
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    std::istringstream is(line);
    std::string id, m, mode, value, seed;
    std::getline(is, id, ',');
    std::getline(is, m, ',');
    std::getline(is, mode, ',');
    std::getline(is, value, ',');
    std::getline(is, seed, ',');
    values[std::stoull(id)].push_back(std::stod(value));
    seeds[std::stoull(id)] = std::stoull(seed);
  }

  for (int k = 0; k < 3; ++k) {
    auto& split = split_ref(ds, k);
    const Tensor z = load_tensor(dir / (std::string(kSplits[k]) + "_z.admt"));
    std::vector<Tensor> inputs;
    for (std::size_t m = 0; m < ds.spec.values.size(); ++m)
      inputs.push_back(load_tensor(dir / (std::string(kSplits[k]) + "_m" + std::to_string(m) + ".admt")));
    const auto& ids = need(kSplits[k]);
    if (static_cast<Eigen::Index>(ids.size()) != z.rows()) throw FormatError("dataset: split size mismatch");
    for (std::size_t i = 0; i < ids.size(); ++i) {
      MultimodalSample s;
      s.id = std::stoull(ids[i]);
      s.sub_seed = seeds.at(s.id);
      s.z = {z.value()(i, 0), z.value()(i, 1)};
      s.label_class = sector_of(s.z);
      s.corruption = values.at(s.id);
      for (std::size_t m = 0; m < s.corruption.size(); ++m) {
        const auto& set = ds.spec.values[m];
        s.corruption_id.push_back(
            static_cast<std::size_t>(std::find(set.begin(), set.end(), s.corruption[m]) - set.begin()));
        s.inputs.push_back(inputs[m].value().middleRows(i * kGrid, kGrid));
      }
      split.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace admn::synth
