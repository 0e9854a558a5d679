#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "histm/error.hpp"
#include "histm/io_util.hpp"
#include "histm/random.hpp"

namespace histm {

/// Time-ordered stack of H x W traffic frames, stored t-major, row-major.
struct GridSeries {
  std::size_t H = 0, W = 0;
  std::size_t interval_minutes = 10;
  std::string channel_name = "internet";
  std::vector<double> values;

  GridSeries() = default;
  GridSeries(std::size_t h, std::size_t w, std::size_t t_total, std::size_t interval = 10,
             std::string channel = "internet")
      : H(h), W(w), interval_minutes(interval), channel_name(std::move(channel)), values(h * w * t_total, 0.0) {}

  std::size_t frames() const { return H * W == 0 ? 0 : values.size() / (H * W); }
  std::size_t steps_per_day() const { return std::max<std::size_t>(1, 1440 / interval_minutes); }
  double& at(std::size_t t, std::size_t i, std::size_t j) { return values[(t * H + i) * W + j]; }
  double at(std::size_t t, std::size_t i, std::size_t j) const { return values[(t * H + i) * W + j]; }
  std::span<const double> frame(std::size_t t) const { return {values.data() + t * H * W, H * W}; }

  void validate() const {
    if (H == 0 || W == 0) throw ValidationError("grid extents must be positive");
    if (interval_minutes == 0) throw ValidationError("interval must be positive");
    if (values.empty() || values.size() % (H * W) != 0) throw ValidationError("series must hold whole frames");
    for (double v : values)
      if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("traffic values must be finite and >= 0");
  }
};

// ---------------------------------------------------------------------------
// Interchange formats

/// Long CSV:
///   # H=<int> W=<int> interval=<min> channel=<name>
///   t,row,col,value
///   ...
/// Missing (t,row,col) entries are zero.
inline GridSeries parse_long_csv(std::string_view text) {
  std::size_t line_no = 0, pos = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    line = io::trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    return true;
  };

  std::string_view line;
  if (!next_line(line) || line.substr(0, 1) != "#") throw ParseError(1, "missing '# H=.. W=.. interval=.. channel=..' preamble");
  GridSeries s;
  bool have_h = false, have_w = false;
  for (auto tok : io::split(io::trim(line.substr(1)), ' ')) {
    tok = io::trim(tok);
    if (tok.empty()) continue;
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "malformed preamble token '" + std::string(tok) + "'");
    const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "H") {
      have_h = io::parse_int(val, s.H) && s.H > 0;
    } else if (key == "W") {
      have_w = io::parse_int(val, s.W) && s.W > 0;
    } else if (key == "interval") {
      if (!io::parse_int(val, s.interval_minutes) || s.interval_minutes == 0)
        throw ParseError(line_no, "bad interval '" + std::string(val) + "'");
    } else if (key == "channel") {
      s.channel_name = std::string(val);
    } else {
      throw ParseError(line_no, "unknown preamble key '" + std::string(key) + "'");
    }
  }
  if (!have_h || !have_w) throw ParseError(line_no, "preamble must give positive H and W");
  if (!next_line(line) || line != "t,row,col,value") throw ParseError(line_no, "expected header 't,row,col,value'");

  struct Entry {
    std::size_t t, cell;
    double v;
    std::size_t line;
  };
  std::vector<Entry> entries;
  std::size_t t_max = 0;
  while (next_line(line)) {
    if (line.empty()) continue;
    auto f = io::split(line, ',');
    if (f.size() != 4) throw ParseError(line_no, "expected 4 fields, got " + std::to_string(f.size()));
    std::size_t t = 0, r = 0, c = 0;
    double v = 0;
    if (!io::parse_int(io::trim(f[0]), t) || !io::parse_int(io::trim(f[1]), r) || !io::parse_int(io::trim(f[2]), c) ||
        !io::parse_double(io::trim(f[3]), v))
      throw ParseError(line_no, "malformed row '" + std::string(line) + "'");
    if (r >= s.H || c >= s.W)
      throw ValidationError("line " + std::to_string(line_no) + ": cell (" + std::to_string(r) + "," +
                            std::to_string(c) + ") outside " + std::to_string(s.H) + "x" + std::to_string(s.W));
    if (!std::isfinite(v)) throw ValidationError("line " + std::to_string(line_no) + ": non-finite value");
    if (v < 0) throw ValidationError("line " + std::to_string(line_no) + ": negative traffic value");
    entries.push_back({t, r * s.W + c, v, line_no});
    t_max = std::max(t_max, t);
  }
  if (entries.empty()) throw ValidationError("series has no rows");
  const std::size_t cells = s.H * s.W;
  s.values.assign((t_max + 1) * cells, 0.0);
  std::vector<bool> seen(s.values.size(), false);
  for (const auto& e : entries) {
    const std::size_t k = e.t * cells + e.cell;
    if (seen[k])
      throw ValidationError("line " + std::to_string(e.line) + ": duplicate entry for (t=" + std::to_string(e.t) +
                            ", cell " + std::to_string(e.cell) + ")");
    seen[k] = true;
    s.values[k] = e.v;
  }
  return s;
}

inline GridSeries load_long_csv(const std::filesystem::path& path) { return parse_long_csv(io::read_file(path)); }

inline std::string format_long_csv(const GridSeries& s) {
  std::string out = "# H=" + std::to_string(s.H) + " W=" + std::to_string(s.W) +
                    " interval=" + std::to_string(s.interval_minutes) + " channel=" + s.channel_name + "\n";
  out += "t,row,col,value\n";
  for (std::size_t t = 0; t < s.frames(); ++t)
    for (std::size_t i = 0; i < s.H; ++i)
      for (std::size_t j = 0; j < s.W; ++j) {
        out += std::to_string(t);
        out += ',';
        out += std::to_string(i);
        out += ',';
        out += std::to_string(j);
        out += ',';
        out += io::format_double(s.at(t, i, j));
        out += '\n';
      }
  return out;
}

inline void write_long_csv(const GridSeries& s, const std::filesystem::path& path) {
  io::write_file_atomic(path, format_long_csv(s));
}

/// Dense binary: "HGRD1", u32 H, W, T_total, interval (LE), then f32 LE frames.
inline constexpr std::string_view kGridMagic = "HGRD1";

inline std::string encode_grid_binary(const GridSeries& s) {
  std::string out(kGridMagic);
  io::put_u32(out, static_cast<std::uint32_t>(s.H));
  io::put_u32(out, static_cast<std::uint32_t>(s.W));
  io::put_u32(out, static_cast<std::uint32_t>(s.frames()));
  io::put_u32(out, static_cast<std::uint32_t>(s.interval_minutes));
  out.reserve(out.size() + 4 * s.values.size());
  for (double v : s.values) io::put_f32(out, static_cast<float>(v));
  return out;
}

inline GridSeries decode_grid_binary(std::string_view bytes) {
  if (bytes.size() < kGridMagic.size() || bytes.substr(0, kGridMagic.size()) != kGridMagic)
    throw ValidationError("not an HGRD1 grid file");
  if (bytes.size() < kGridMagic.size() + 16) throw ValidationError("HGRD1 header truncated");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + kGridMagic.size();
  GridSeries s;
  s.H = io::get_u32(p);
  s.W = io::get_u32(p + 4);
  const std::size_t T = io::get_u32(p + 8);
  s.interval_minutes = io::get_u32(p + 12);
  s.channel_name = "unknown";
  const std::size_t n = s.H * s.W * T;
  if (bytes.size() != kGridMagic.size() + 16 + 4 * n) throw ValidationError("HGRD1 payload size mismatch");
  s.values.resize(n);
  p += 16;
  for (std::size_t k = 0; k < n; ++k) s.values[k] = io::get_f32(p + 4 * k);
  s.validate();
  return s;
}

inline void write_grid_binary(const GridSeries& s, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_grid_binary(s));
}

inline GridSeries read_grid_binary(const std::filesystem::path& path) { return decode_grid_binary(io::read_file(path)); }

/// Dispatches on extension: .hgrd is binary, anything else long CSV.
inline GridSeries load_series(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("data file '" + path.string() + "' does not exist");
  return path.extension() == ".hgrd" ? read_grid_binary(path) : load_long_csv(path);
}

// ---------------------------------------------------------------------------
// Synthetic traffic

/// Diurnal traffic over Gaussian activity bumps (one central, several
/// offset) with decaying hotspot bursts and non-negative noise. Values are
/// rounded to float precision so the CSV and binary forms hold the same data.
inline GridSeries generate_synthetic(std::size_t H, std::size_t W, std::size_t days, std::size_t interval_minutes,
                                     std::uint64_t seed) {
  if (H == 0 || W == 0 || days == 0 || interval_minutes == 0)
    throw ValidationError("generate_synthetic: all arguments must be positive");
  GridSeries s;
  s.H = H;
  s.W = W;
  s.interval_minutes = interval_minutes;
  s.channel_name = "internet";
  const std::size_t spd = s.steps_per_day(), T = days * spd;
  s.values.assign(T * H * W, 0.0);

  RandomSource layout_rng = RandomSource(seed).fork(1);
  struct Bump {
    double y, x, amp, sigma;
  };
  std::vector<Bump> bumps;
  const double extent = static_cast<double>(std::min(H, W));
  bumps.push_back({(H - 1) / 2.0, (W - 1) / 2.0, 120.0, 0.22 * extent});
  for (int b = 0; b < 4; ++b)
    bumps.push_back({layout_rng.uniform(0, H - 1.0), layout_rng.uniform(0, W - 1.0), layout_rng.uniform(30, 80),
                     layout_rng.uniform(1.0, 2.5)});
  std::vector<double> base(H * W), phase(H * W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double v = 5.0;
      for (const auto& b : bumps) {
        const double dy = i - b.y, dx = j - b.x;
        v += b.amp * std::exp(-(dy * dy + dx * dx) / (2 * b.sigma * b.sigma));
      }
      base[i * W + j] = v;
      phase[i * W + j] = layout_rng.uniform(-0.3, 0.3);
    }

  RandomSource burst_rng = RandomSource(seed).fork(2);
  struct Burst {
    double y, x, amp, tau;
    std::size_t start;
  };
  std::vector<Burst> bursts;
  for (std::size_t b = 0; b < 3 * days; ++b)
    bursts.push_back({burst_rng.uniform(0, H - 1.0), burst_rng.uniform(0, W - 1.0), burst_rng.uniform(40, 120),
                      burst_rng.uniform(3, 12), static_cast<std::size_t>(burst_rng.below(T))});

  const RandomSource noise_rng = RandomSource(seed).fork(3);
  for (std::size_t t = 0; t < T; ++t) {
    const double daily = 2.0 * std::numbers::pi * static_cast<double>(t % spd) / static_cast<double>(spd);
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t c = i * W + j;
        double v = base[c] * (1.0 + 0.8 * std::sin(daily + phase[c]));
        for (const auto& b : bursts) {
          if (t < b.start || t > b.start + static_cast<std::size_t>(6 * b.tau)) continue;
          const double dy = i - b.y, dx = j - b.x;
          v += b.amp * std::exp(-static_cast<double>(t - b.start) / b.tau) * std::exp(-(dy * dy + dx * dx) / 2.88);
        }
        v += (0.08 * base[c] + 1.0) * std::abs(noise_rng.normal_at((t * H + i) * W + j));
        s.values[(t * H + i) * W + j] = static_cast<float>(std::max(0.0, v));
      }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Windows

struct WindowSpec {
  std::size_t T = 6;
  std::size_t K = 11;
  std::size_t stride_t = 6;

  void validate() const {
    if (T < 1) throw ValidationError("window length T must be >= 1");
    if (K % 2 == 0) throw ValidationError("kernel extent K must be odd, got " + std::to_string(K));
    if (stride_t < 1) throw ValidationError("temporal stride must be >= 1");
  }
  std::size_t window_size() const { return T * K * K; }
};

/// Half-open range of frame indices.
struct TimeRange {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const TimeRange&) const = default;
};

/// Start time of the window and its center cell; the target is (t+T, i, j).
struct Origin {
  std::size_t t = 0, i = 0, j = 0;
  bool operator==(const Origin&) const = default;
};

struct SampleWindow {
  std::vector<double> input;  // [T x K x K]
  double target = 0;
  Origin origin;
};

/// Closed-form count of windows for a series of `frames` steps.
inline std::size_t window_count(std::size_t H, std::size_t W, std::size_t frames, const WindowSpec& spec) {
  if (frames < spec.T + 1 || H < spec.K || W < spec.K) return 0;
  return ((frames - spec.T - 1) / spec.stride_t + 1) * (H - spec.K + 1) * (W - spec.K + 1);
}

/// Windows whose inputs and target lie in `range`, centers cropped so the
/// K x K kernel fits, starts at range.begin + k * stride. Ordered t, i, j.
inline std::vector<Origin> make_window_index(const GridSeries& s, const WindowSpec& spec, TimeRange range) {
  spec.validate();
  if (range.end > s.frames() || range.begin > range.end) throw ValidationError("time range outside the series");
  if (range.size() < spec.T + 1)
    throw ValidationError("series too short: " + std::to_string(range.size()) + " steps, need at least T+1 = " +
                          std::to_string(spec.T + 1));
  if (s.H < spec.K || s.W < spec.K)
    throw ValidationError("grid " + std::to_string(s.H) + "x" + std::to_string(s.W) + " smaller than kernel " +
                          std::to_string(spec.K));
  const std::size_t r = (spec.K - 1) / 2;
  std::vector<Origin> out;
  out.reserve(window_count(s.H, s.W, range.size(), spec));
  for (std::size_t t = range.begin; t + spec.T <= range.end - 1; t += spec.stride_t)
    for (std::size_t i = r; i + r < s.H; ++i)
      for (std::size_t j = r; j + r < s.W; ++j) out.push_back({t, i, j});
  return out;
}

inline std::vector<Origin> make_window_index(const GridSeries& s, const WindowSpec& spec) {
  return make_window_index(s, spec, {0, s.frames()});
}

inline void check_origin(const GridSeries& s, const Origin& o, const WindowSpec& spec) {
  const std::size_t r = (spec.K - 1) / 2;
  if (o.i < r || o.j < r || o.i + r >= s.H || o.j + r >= s.W || o.t + spec.T >= s.frames())
    throw UsageError("window origin (t=" + std::to_string(o.t) + ", i=" + std::to_string(o.i) +
                     ", j=" + std::to_string(o.j) + ") outside the series");
}

inline SampleWindow materialize_sample(const GridSeries& s, const Origin& o, const WindowSpec& spec) {
  check_origin(s, o, spec);
  const std::size_t r = (spec.K - 1) / 2;
  SampleWindow w;
  w.origin = o;
  w.input.resize(spec.window_size());
  std::size_t k = 0;
  for (std::size_t tau = 0; tau < spec.T; ++tau)
    for (std::size_t a = 0; a < spec.K; ++a)
      for (std::size_t b = 0; b < spec.K; ++b) w.input[k++] = s.at(o.t + tau, o.i - r + a, o.j - r + b);
  w.target = s.at(o.t + spec.T, o.i, o.j);
  return w;
}

struct SplitRanges {
  TimeRange train, val, test;
};

/// Contiguous chronological split with floor boundaries.
inline SplitRanges chronological_split(std::size_t frames, std::size_t T, double f_train = 0.7, double f_val = 0.15,
                                       double f_test = 0.15) {
  if (f_train <= 0 || f_val <= 0 || f_test <= 0 || std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw ValidationError("split fractions must be positive and sum to 1");
  const auto b1 = static_cast<std::size_t>(std::floor(f_train * static_cast<double>(frames)));
  const auto b2 = static_cast<std::size_t>(std::floor((f_train + f_val) * static_cast<double>(frames)));
  SplitRanges out{{0, b1}, {b1, b2}, {b2, frames}};
  for (const auto* r : {&out.train, &out.val, &out.test})
    if (r->size() < T + 1)
      throw ValidationError("split of " + std::to_string(r->size()) + " steps is shorter than T+1 = " +
                            std::to_string(T + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Scaling

struct ScalerParams {
  double min_v = 0, max_v = 1;
  double range() const { return max_v - min_v; }
  bool operator==(const ScalerParams&) const = default;
};

inline ScalerParams checked_scaler(double lo, double hi) {
  if (!(hi > lo)) throw ValidationError("degenerate scaling range: max equals min (" + io::format_double(lo) + ")");
  return {lo, hi};
}

inline ScalerParams scaler_fit(std::span<const SampleWindow> train) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& w : train) {
    for (double v : w.input) lo = std::min(lo, v), hi = std::max(hi, v);
    lo = std::min(lo, w.target);
    hi = std::max(hi, w.target);
  }
  if (train.empty()) throw ValidationError("scaler_fit: no training samples");
  return checked_scaler(lo, hi);
}

/// Same result as materializing every training window, without the copies.
inline ScalerParams scaler_fit(const GridSeries& s, std::span<const Origin> train, const WindowSpec& spec) {
  if (train.empty()) throw ValidationError("scaler_fit: no training samples");
  const std::size_t r = (spec.K - 1) / 2;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& o : train) {
    for (std::size_t tau = 0; tau < spec.T; ++tau)
      for (std::size_t a = 0; a < spec.K; ++a)
        for (std::size_t b = 0; b < spec.K; ++b) {
          const double v = s.at(o.t + tau, o.i - r + a, o.j - r + b);
          lo = std::min(lo, v), hi = std::max(hi, v);
        }
    const double y = s.at(o.t + spec.T, o.i, o.j);
    lo = std::min(lo, y), hi = std::max(hi, y);
  }
  return checked_scaler(lo, hi);
}

inline double scaler_apply(double x, const ScalerParams& p) {
  return std::clamp((x - p.min_v) / (p.max_v - p.min_v), 0.0, 1.0);
}

inline double scaler_invert(double x, const ScalerParams& p) { return x * (p.max_v - p.min_v) + p.min_v; }

/// Normalized windows ready for batching (float storage, the training precision).
struct SampleSet {
  WindowSpec spec;
  ScalerParams scaler;
  std::vector<Origin> origins;
  std::vector<float> inputs;   // n x T x K x K, normalized
  std::vector<float> targets;  // normalized
  std::vector<double> raw_targets;

  std::size_t size() const { return origins.size(); }
  std::span<const float> input(std::size_t k) const {
    return {inputs.data() + k * spec.window_size(), spec.window_size()};
  }
};

inline SampleSet build_samples(const GridSeries& s, std::vector<Origin> origins, const WindowSpec& spec,
                               const ScalerParams& scaler) {
  SampleSet set;
  set.spec = spec;
  set.scaler = scaler;
  const std::size_t n = origins.size(), ws = spec.window_size(), r = (spec.K - 1) / 2;
  set.inputs.resize(n * ws);
  set.targets.resize(n);
  set.raw_targets.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Origin& o = origins[k];
    check_origin(s, o, spec);
    float* dst = set.inputs.data() + k * ws;
    for (std::size_t tau = 0; tau < spec.T; ++tau)
      for (std::size_t a = 0; a < spec.K; ++a)
        for (std::size_t b = 0; b < spec.K; ++b)
          *dst++ = static_cast<float>(scaler_apply(s.at(o.t + tau, o.i - r + a, o.j - r + b), scaler));
    set.raw_targets[k] = s.at(o.t + spec.T, o.i, o.j);
    set.targets[k] = static_cast<float>(scaler_apply(set.raw_targets[k], scaler));
  }
  set.origins = std::move(origins);
  return set;
}

}  // namespace histm
