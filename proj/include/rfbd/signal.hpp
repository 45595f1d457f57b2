#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>
#include <vector>

#include "rfbd/io.hpp"
#include "rfbd/rng.hpp"

namespace rfbd {

enum class Domain { time, spectrogram };
enum class Protocol { wifi_like, lora_like };

inline const char* domain_name(Domain d) { return d == Domain::time ? "time" : "spectrogram"; }
inline Domain domain_from_name(const std::string& s) {
  if (s == "time") return Domain::time;
  if (s == "spectrogram") return Domain::spectrogram;
  throw std::invalid_argument("unknown domain: " + s);
}
inline const char* protocol_name(Protocol p) {
  return p == Protocol::wifi_like ? "wifi_like" : "lora_like";
}
inline Protocol protocol_from_name(const std::string& s) {
  if (s == "wifi_like") return Protocol::wifi_like;
  if (s == "lora_like") return Protocol::lora_like;
  throw std::invalid_argument("unknown protocol: " + s);
}

// One 2xW sample window. Row 0 carries the in-phase samples, row 1 the
// quadrature samples; a spectrogram frame reuses the same 2xW layout with
// row 0 = log-magnitude and row 1 = phase.
struct IQFrame {
  int width = 0;
  Domain domain = Domain::time;
  int device_id = -1;  // -1 = unlabeled
  std::vector<double> data;  // 2*width, row-major

  IQFrame() = default;
  explicit IQFrame(int w, Domain d = Domain::time, int dev = -1)
      : width(w), domain(d), device_id(dev), data(static_cast<std::size_t>(2 * w), 0.0) {}

  double& i(int k) { return data[static_cast<std::size_t>(k)]; }
  double& q(int k) { return data[static_cast<std::size_t>(width + k)]; }
  double i(int k) const { return data[static_cast<std::size_t>(k)]; }
  double q(int k) const { return data[static_cast<std::size_t>(width + k)]; }
};

inline double mean_entry_power(const IQFrame& f) {
  double s = 0.0;
  for (double v : f.data) s += v * v;
  return f.data.empty() ? 0.0 : s / static_cast<double>(f.data.size());
}

inline double frame_l2(const IQFrame& f) {
  double s = 0.0;
  for (double v : f.data) s += v * v;
  return std::sqrt(s);
}

// Scale so the mean per-entry power (1/2W) * sum(data^2) is 1. A zero frame
// is left untouched.
inline void normalize_power(IQFrame& f) {
  const double p = mean_entry_power(f);
  if (p <= 0.0) return;
  const double g = 1.0 / std::sqrt(p);
  for (double& v : f.data) v *= g;
}

// Transmitter impairment parameters making up one device fingerprint. Ranges
// are chosen so impaired signals stay decodable; see the bounds below.
struct DeviceProfile {
  double iq_gain_imbalance = 0.0;   // epsilon, unitless
  double iq_phase_imbalance = 0.0;  // psi, radians
  double cfo = 0.0;                 // cycles per sample
  double dc_offset_i = 0.0;
  double dc_offset_q = 0.0;
  double pa_cubic_coeff = 0.0;      // third-order nonlinearity
};

inline constexpr double kMaxGainImbalance = 0.2;
inline constexpr double kMaxPhaseImbalance = 0.2;
inline constexpr double kMaxCfo = 0.01;
inline constexpr double kMaxDcOffset = 0.05;
inline constexpr double kMaxPaCubic = 0.1;

inline void validate_profile(const DeviceProfile& p) {
  if (std::abs(p.iq_gain_imbalance) > kMaxGainImbalance ||
      std::abs(p.iq_phase_imbalance) > kMaxPhaseImbalance || std::abs(p.cfo) > kMaxCfo ||
      std::abs(p.dc_offset_i) > kMaxDcOffset || std::abs(p.dc_offset_q) > kMaxDcOffset ||
      std::abs(p.pa_cubic_coeff) > kMaxPaCubic)
    throw std::invalid_argument("device profile outside supported impairment ranges");
}

// Hardware imperfections are distinct nonzero offsets, so magnitudes are
// drawn away from zero (a floor of 35% of each range) with a random sign,
// and candidates too close to an already-drawn device are rejected. The
// separation floor (L2 over range-normalized coordinates) keeps randomly
// drawn fingerprints from being near-twins, which otherwise makes dataset
// difficulty swing wildly between seeds. Every field stays inside its
// documented range.
inline std::vector<DeviceProfile> synth_device_profiles(int n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("synth_device_profiles: need at least 2 devices");
  constexpr double kFloor = 0.35;
  constexpr double kMinSeparation = 1.0;
  constexpr int kMaxTries = 64;
  Rng rng(derive_seed(seed, 0x50524F46ULL /* "PROF" */));
  using Coords = std::array<double, 6>;
  std::vector<Coords> accepted;
  accepted.reserve(static_cast<std::size_t>(n));
  auto draw_coords = [&]() {
    Coords c;
    for (double& v : c) {
      const double mag = kFloor + (1.0 - kFloor) * rng.uniform();
      v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return c;
  };
  auto min_distance = [&](const Coords& c) {
    double best = 1e300;
    for (const Coords& a : accepted) {
      double d2 = 0.0;
      for (int k = 0; k < 6; ++k) d2 += (c[k] - a[k]) * (c[k] - a[k]);
      best = std::min(best, std::sqrt(d2));
    }
    return best;
  };
  for (int d = 0; d < n; ++d) {
    Coords best = draw_coords();
    double best_dist = min_distance(best);
    for (int attempt = 1; attempt < kMaxTries && best_dist < kMinSeparation; ++attempt) {
      const Coords c = draw_coords();
      const double dist = min_distance(c);
      if (dist > best_dist) {
        best = c;
        best_dist = dist;
      }
    }
    accepted.push_back(best);
  }
  std::vector<DeviceProfile> out;
  out.reserve(static_cast<std::size_t>(n));
  for (const Coords& c : accepted) {
    DeviceProfile p;
    p.iq_gain_imbalance = c[0] * kMaxGainImbalance;
    p.iq_phase_imbalance = c[1] * kMaxPhaseImbalance;
    p.cfo = c[2] * kMaxCfo;
    p.dc_offset_i = c[3] * kMaxDcOffset;
    p.dc_offset_q = c[4] * kMaxDcOffset;
    p.pa_cubic_coeff = c[5] * kMaxPaCubic;
    out.push_back(p);
  }
  return out;
}

inline constexpr int kPreambleLen = 64;

namespace detail {

// Shared per-protocol preamble; independent of the caller's seed.
inline std::complex<double> qpsk_symbol(Rng& rng) {
  const double a = rng.uniform() < 0.5 ? 1.0 : -1.0;
  const double b = rng.uniform() < 0.5 ? 1.0 : -1.0;
  return {a / std::numbers::sqrt2, b / std::numbers::sqrt2};
}

// Base up-chirp over kPreambleLen samples sweeping -0.25..+0.25 cycles/sample.
// Half of the sampling bandwidth keeps phase increments unambiguous.
inline std::vector<std::complex<double>> base_chirp() {
  const int n = kPreambleLen;
  std::vector<std::complex<double>> c(static_cast<std::size_t>(n));
  const double bw = 0.5;
  for (int k = 0; k < n; ++k) {
    const double phase =
        2.0 * std::numbers::pi * (-0.5 * bw * k + 0.5 * bw * k * static_cast<double>(k) / n);
    c[static_cast<std::size_t>(k)] = {std::cos(phase), std::sin(phase)};
  }
  return c;
}

}  // namespace detail

// Unit-average-power complex baseband. The first kPreambleLen samples form a
// protocol preamble shared by every seed; the payload differs per seed.
inline std::vector<std::complex<double>> synth_baseband(Protocol protocol, int length,
                                                        std::uint64_t seed) {
  if (length < kPreambleLen)
    throw std::invalid_argument("synth_baseband: length must be >= 64");
  std::vector<std::complex<double>> x(static_cast<std::size_t>(length));
  if (protocol == Protocol::wifi_like) {
    Rng pre(0x57494649ULL /* "WIFI" */);
    for (int k = 0; k < kPreambleLen; ++k) x[static_cast<std::size_t>(k)] = detail::qpsk_symbol(pre);
    Rng pay(derive_seed(seed, 0x5041594CULL /* "PAYL" */));
    for (int k = kPreambleLen; k < length; ++k) x[static_cast<std::size_t>(k)] = detail::qpsk_symbol(pay);
  } else {
    const auto chirp = detail::base_chirp();
    for (int k = 0; k < kPreambleLen; ++k) x[static_cast<std::size_t>(k)] = chirp[static_cast<std::size_t>(k)];
    Rng pay(derive_seed(seed, 0x4C4F5241ULL /* "LORA" */));
    int k = kPreambleLen;
    while (k < length) {
      // Chirped symbol: cyclic shift of the base chirp.
      const int shift = static_cast<int>(pay.uniform_int(kPreambleLen));
      for (int u = 0; u < kPreambleLen && k < length; ++u, ++k)
        x[static_cast<std::size_t>(k)] = chirp[static_cast<std::size_t>((u + shift) % kPreambleLen)];
    }
  }
  return x;
}

// Impairment chain, applied in transmit order:
//   PA cubic nonlinearity -> IQ imbalance -> CFO rotation -> DC offset.
// A zero profile reproduces the input exactly.
inline IQFrame apply_impairments(const std::vector<std::complex<double>>& clean,
                                 const DeviceProfile& profile) {
  validate_profile(profile);
  const int w = static_cast<int>(clean.size());
  if (w <= 0) throw std::invalid_argument("apply_impairments: empty input");
  IQFrame f(w, Domain::time);
  const double eps = profile.iq_gain_imbalance;
  const double psi = profile.iq_phase_imbalance;
  const double c_psi = std::cos(psi / 2.0), s_psi = std::sin(psi / 2.0);
  for (int k = 0; k < w; ++k) {
    std::complex<double> z = clean[static_cast<std::size_t>(k)];
    if (profile.pa_cubic_coeff != 0.0) z += profile.pa_cubic_coeff * z * std::norm(z);
    // Branch gain/phase skew; not a rotation (determinant cos(psi)).
    const double zi = z.real(), zq = z.imag();
    double gi = (1.0 + eps / 2.0) * (c_psi * zi - s_psi * zq);
    double gq = (1.0 - eps / 2.0) * (-s_psi * zi + c_psi * zq);
    z = {gi, gq};
    if (profile.cfo != 0.0) {
      const double th = 2.0 * std::numbers::pi * profile.cfo * k;
      z *= std::complex<double>(std::cos(th), std::sin(th));
    }
    z += std::complex<double>(profile.dc_offset_i, profile.dc_offset_q);
    f.i(k) = z.real();
    f.q(k) = z.imag();
  }
  return f;
}

// Additive white Gaussian noise sized against the frame's own mean entry
// power. snr_db = +inf disables the noise.
inline IQFrame add_channel_noise(const IQFrame& frame, double snr_db, Rng& rng) {
  if (frame.domain != Domain::time)
    throw std::invalid_argument("add_channel_noise: time-domain frames only");
  IQFrame out = frame;
  if (std::isinf(snr_db) && snr_db > 0) return out;
  const double p = mean_entry_power(frame);
  const double var = p / std::pow(10.0, snr_db / 10.0);
  const double sd = std::sqrt(var);
  for (double& v : out.data) v += rng.normal(0.0, sd);
  return out;
}

// ---------------------------------------------------------------------------
// STFT

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 FFT, in place.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const int n = static_cast<int>(a.size());
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(j)]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / len;
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int j = 0; j < len / 2; ++j) {
        auto u = a[static_cast<std::size_t>(i + j)];
        auto v = a[static_cast<std::size_t>(i + j + len / 2)] * w;
        a[static_cast<std::size_t>(i + j)] = u + v;
        a[static_cast<std::size_t>(i + j + len / 2)] = u - v;
        w *= wl;
      }
    }
  }
}

}  // namespace detail

struct StftGrid {
  int win = 0, hop = 0, frames = 0, bins = 0;
  std::vector<std::complex<double>> coeffs;  // frames x bins, row-major

  const std::complex<double>& at(int frame, int bin) const {
    return coeffs[static_cast<std::size_t>(frame * bins + bin)];
  }
};

// Hann-windowed STFT of the complex signal I + jQ. Unnormalized DFT, so
// sum_k |X[k]|^2 = win * sum_n |w[n] x[n]|^2 per slice.
inline StftGrid stft(const IQFrame& frame, int window_len, int hop) {
  if (frame.domain != Domain::time) throw std::invalid_argument("stft: time-domain frames only");
  if (!detail::is_pow2(window_len) || window_len > frame.width)
    throw std::invalid_argument("stft: window length must be a power of two <= frame width");
  if (hop < 1 || hop > window_len) throw std::invalid_argument("stft: hop must be in [1, window]");
  StftGrid g;
  g.win = window_len;
  g.hop = hop;
  g.bins = window_len;
  g.frames = (frame.width - window_len) / hop + 1;
  g.coeffs.resize(static_cast<std::size_t>(g.frames * g.bins));
  std::vector<double> hann(static_cast<std::size_t>(window_len));
  for (int n = 0; n < window_len; ++n)
    hann[static_cast<std::size_t>(n)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / window_len);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(window_len));
  for (int m = 0; m < g.frames; ++m) {
    const int off = m * hop;
    for (int n = 0; n < window_len; ++n)
      buf[static_cast<std::size_t>(n)] =
          hann[static_cast<std::size_t>(n)] *
          std::complex<double>(frame.i(off + n), frame.q(off + n));
    detail::fft_inplace(buf);
    std::copy(buf.begin(), buf.end(), g.coeffs.begin() + static_cast<std::ptrdiff_t>(m * g.bins));
  }
  return g;
}

// Packs the STFT into the 2xW frame contract: row 0 = log-magnitude, row 1 =
// phase, flattened frame-major and truncated / zero-padded to the original
// width so every encoder input has the same shape.
inline IQFrame stft_spectrogram(const IQFrame& frame, int window_len = 64, int hop = 32) {
  const StftGrid g = stft(frame, window_len, hop);
  IQFrame out(frame.width, Domain::spectrogram, frame.device_id);
  const int total = g.frames * g.bins;
  const int n = std::min(frame.width, total);
  for (int m = 0; m < n; ++m) {
    const auto& c = g.coeffs[static_cast<std::size_t>(m)];
    out.data[static_cast<std::size_t>(m)] = std::log(std::abs(c) + 1e-9);
    out.data[static_cast<std::size_t>(frame.width + m)] = std::arg(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetSpec {
  int num_devices = 2;
  int frames_per_device = 1;
  Protocol protocol = Protocol::wifi_like;
  double channel_snr_db = 20.0;
  std::uint64_t seed = 0;
};

inline void validate_spec(const DatasetSpec& s) {
  if (s.num_devices < 2) throw std::invalid_argument("dataset: num_devices must be >= 2");
  if (s.frames_per_device < 1) throw std::invalid_argument("dataset: frames_per_device must be >= 1");
}

struct Dataset {
  DatasetSpec spec;
  int width = 256;
  std::vector<IQFrame> frames;
};

// Deterministic labeled synthesis: every frame is a pure function of
// (spec, seed, device, index).
inline IQFrame synth_frame(const DatasetSpec& spec, const DeviceProfile& profile, int device,
                           int index, int width) {
  const auto clean =
      synth_baseband(spec.protocol, width,
                     derive_seed(spec.seed, 0x4652414DULL /* "FRAM" */,
                                 static_cast<std::uint64_t>(device), static_cast<std::uint64_t>(index)));
  IQFrame f = apply_impairments(clean, profile);
  f.device_id = device;
  normalize_power(f);
  Rng noise_rng(derive_seed(spec.seed, 0x4E4F4953ULL /* "NOIS" */,
                            static_cast<std::uint64_t>(device), static_cast<std::uint64_t>(index)));
  f = add_channel_noise(f, spec.channel_snr_db, noise_rng);
  normalize_power(f);
  return f;
}

inline Dataset build_dataset(const DatasetSpec& spec, int width = 256) {
  validate_spec(spec);
  const auto profiles = synth_device_profiles(spec.num_devices, spec.seed);
  Dataset ds;
  ds.spec = spec;
  ds.width = width;
  ds.frames.reserve(static_cast<std::size_t>(spec.num_devices * spec.frames_per_device));
  for (int d = 0; d < spec.num_devices; ++d)
    for (int i = 0; i < spec.frames_per_device; ++i)
      ds.frames.push_back(synth_frame(spec, profiles[static_cast<std::size_t>(d)], d, i, width));
  return ds;
}

// Unlabeled-use subset of size floor(ratio * |set|). When exclude_devices is
// nonempty, frames are drawn only from the remaining devices, which is how a
// substitute set disjoint from the downstream pool is produced.
inline Dataset split_substitute(const Dataset& pretrain, double ratio, std::uint64_t seed,
                                const std::set<int>& exclude_devices = {}) {
  if (!(ratio > 0.0) || ratio > 1.0)
    throw std::invalid_argument("split_substitute: ratio must be in (0, 1]");
  const std::size_t target =
      static_cast<std::size_t>(ratio * static_cast<double>(pretrain.frames.size()));
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pretrain.frames.size(); ++i)
    if (!exclude_devices.count(pretrain.frames[i].device_id)) candidates.push_back(i);
  if (candidates.size() < target)
    throw std::invalid_argument("split_substitute: not enough frames outside excluded devices");
  Rng rng(derive_seed(seed, 0x53554253ULL /* "SUBS" */));
  std::shuffle(candidates.begin(), candidates.end(), rng.engine());
  Dataset out;
  out.spec = pretrain.spec;
  out.width = pretrain.width;
  out.frames.reserve(target);
  for (std::size_t i = 0; i < target; ++i) out.frames.push_back(pretrain.frames[candidates[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset container I/O

inline void save_dataset(const Dataset& ds, const std::string& path,
                         const std::string& config_hash = "") {
  nlohmann::json meta;
  meta["kind"] = "dataset";
  meta["num_devices"] = ds.spec.num_devices;
  meta["frames_per_device"] = ds.spec.frames_per_device;
  meta["protocol"] = protocol_name(ds.spec.protocol);
  meta["channel_snr_db"] = ds.spec.channel_snr_db;
  meta["seed"] = ds.spec.seed;
  meta["width"] = ds.width;
  meta["count"] = ds.frames.size();
  if (!config_hash.empty()) meta["config_hash"] = config_hash;
  std::vector<int> ids;
  ids.reserve(ds.frames.size());
  for (const auto& f : ds.frames) ids.push_back(f.device_id);
  meta["device_ids"] = ids;
  std::vector<float> payload;
  payload.reserve(ds.frames.size() * static_cast<std::size_t>(2 * ds.width));
  for (const auto& f : ds.frames)
    for (double v : f.data) payload.push_back(static_cast<float>(v));
  write_container(path, kMagicDataset, meta, payload.data(), payload.size());
}

inline Dataset load_dataset(const std::string& path) {
  const Container c = read_container(path, kMagicDataset);
  Dataset ds;
  ds.spec.num_devices = c.meta.at("num_devices").get<int>();
  ds.spec.frames_per_device = c.meta.at("frames_per_device").get<int>();
  ds.spec.protocol = protocol_from_name(c.meta.at("protocol").get<std::string>());
  ds.spec.channel_snr_db = c.meta.at("channel_snr_db").get<double>();
  ds.spec.seed = c.meta.at("seed").get<std::uint64_t>();
  ds.width = c.meta.at("width").get<int>();
  const auto ids = c.meta.at("device_ids").get<std::vector<int>>();
  const std::size_t n = c.meta.at("count").get<std::size_t>();
  if (ids.size() != n || c.payload.size() != n * static_cast<std::size_t>(2 * ds.width))
    throw std::runtime_error("dataset payload size mismatch in " + path);
  ds.frames.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    IQFrame f(ds.width, Domain::time, ids[i]);
    for (int k = 0; k < 2 * ds.width; ++k)
      f.data[static_cast<std::size_t>(k)] =
          static_cast<double>(c.payload[i * static_cast<std::size_t>(2 * ds.width) +
                                        static_cast<std::size_t>(k)]);
    ds.frames[i] = std::move(f);
  }
  return ds;
}

}  // namespace rfbd
