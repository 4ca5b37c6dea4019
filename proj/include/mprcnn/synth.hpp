#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mprcnn/boxes.hpp"
#include "mprcnn/image.hpp"
#include "mprcnn/keyvalue.hpp"
#include "mprcnn/seeds.hpp"

namespace mprcnn {

/// Parameters of the procedural scene generator.
struct SceneSpec {
  std::uint64_t seed = 7;
  int width = 160;
  int height = 160;
  int min_targets = 1;
  int max_targets = 4;
  // Height bands [8, 32], (32, 360], (360, 900] in pixels and their weights.
  std::array<double, 4> band_edges{8, 32, 360, 900};
  std::array<double, 3> band_weights{0.5, 0.5, 0.0};
  double max_target_fraction = 0.8;  // of the shorter image side
  double clutter_density = 2.0;      // distractors per 10,000 pixels
  double partial_prob = 0.0;         // chance a target may cross the border
  bool blur = false;
  bool occlusion = false;
  int max_retries = 50;

  [[nodiscard]] int max_side() const {
    return static_cast<int>(max_target_fraction * std::min(width, height));
  }

  /// Integer height range of band b clipped to what fits in the image;
  /// {0, -1} when infeasible.
  [[nodiscard]] std::pair<int, int> band_range(int b) const {
    int lo = static_cast<int>(std::ceil(band_edges[b]));
    if (b > 0) lo = static_cast<int>(std::floor(band_edges[b])) + 1;
    const int hi = std::min(static_cast<int>(std::floor(band_edges[b + 1])), max_side());
    if (hi < lo) return {0, -1};
    return {lo, hi};
  }

  void validate() const {
    if (width < 32 || height < 32) throw std::invalid_argument("scene size must be at least 32x32");
    if (min_targets < 0 || max_targets < min_targets) throw std::invalid_argument("bad target count range");
    for (int b = 0; b < 3; ++b) {
      if (band_weights[b] < 0.0) throw std::invalid_argument("band weights must be non-negative");
      if (band_weights[b] > 0.0 && band_range(b).second < 0) {
        throw std::invalid_argument("height band " + std::to_string(b) + " has weight but does not fit the image");
      }
      if (band_edges[b + 1] < band_edges[b]) throw std::invalid_argument("band edges must be non-decreasing");
    }
  }

  [[nodiscard]] KeyValues to_kv() const {
    KeyValues kv;
    kv.set("seed", std::to_string(seed));
    kv.set("width", std::to_string(width));
    kv.set("height", std::to_string(height));
    kv.set("min_targets", std::to_string(min_targets));
    kv.set("max_targets", std::to_string(max_targets));
    kv.set("band_edges", join(band_edges));
    kv.set("band_weights", join(band_weights));
    kv.set("max_target_fraction", format_exact(max_target_fraction));
    kv.set("clutter_density", format_exact(clutter_density));
    kv.set("partial_prob", format_exact(partial_prob));
    kv.set("blur", blur ? "true" : "false");
    kv.set("occlusion", occlusion ? "true" : "false");
    kv.set("max_retries", std::to_string(max_retries));
    return kv;
  }

  static SceneSpec from_kv(const KeyValues& kv) {
    SceneSpec s;
    s.seed = kv.get<std::uint64_t>("seed", s.seed);
    s.width = kv.get<int>("width", s.width);
    s.height = kv.get<int>("height", s.height);
    s.min_targets = kv.get<int>("min_targets", s.min_targets);
    s.max_targets = kv.get<int>("max_targets", s.max_targets);
    copy_list(kv.get_list<double>("band_edges", {s.band_edges.begin(), s.band_edges.end()}), s.band_edges,
              "band_edges");
    copy_list(kv.get_list<double>("band_weights", {s.band_weights.begin(), s.band_weights.end()}), s.band_weights,
              "band_weights");
    s.max_target_fraction = kv.get<double>("max_target_fraction", s.max_target_fraction);
    s.clutter_density = kv.get<double>("clutter_density", s.clutter_density);
    s.partial_prob = kv.get<double>("partial_prob", s.partial_prob);
    s.blur = kv.get<bool>("blur", s.blur);
    s.occlusion = kv.get<bool>("occlusion", s.occlusion);
    s.max_retries = kv.get<int>("max_retries", s.max_retries);
    s.validate();
    return s;
  }

 private:
  template <std::size_t N>
  static std::string join(const std::array<double, N>& a) {
    std::string s;
    for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + format_exact(a[i]);
    return s;
  }
  template <std::size_t N>
  static void copy_list(const std::vector<double>& v, std::array<double, N>& out, const char* key) {
    if (v.size() != N) throw FormatError(std::string("key '") + key + "': expected " + std::to_string(N) + " values");
    std::copy(v.begin(), v.end(), out.begin());
  }
};

struct Sample {
  std::string id;
  GrayImage image;
  std::vector<Box> gts;
};

using Dataset = std::vector<Sample>;

namespace synth_detail {

/// Float canvas with 2x2 supersampled shape rendering.
struct Canvas {
  int w, h;
  std::vector<float> px;
  Canvas(int w_, int h_, float v) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_, v) {}

  template <class Inside>
  void paint(double l, double t, double r, double b, float value, Inside&& inside) {
    const int x0 = std::max(0, static_cast<int>(std::floor(l)));
    const int y0 = std::max(0, static_cast<int>(std::floor(t)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(r)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(b)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) hits += inside(x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy) ? 1 : 0;
        }
        if (hits == 0) continue;
        float& p = px[static_cast<std::size_t>(y) * w + x];
        const float a = hits / 4.0f;
        p = (1 - a) * p + a * value;
      }
    }
  }

  void ellipse(double cx, double cy, double rx, double ry, float value) {
    paint(cx - rx, cy - ry, cx + rx, cy + ry, value, [&](double x, double y) {
      const double dx = (x - cx) / rx;
      const double dy = (y - cy) / ry;
      return dx * dx + dy * dy <= 1.0;
    });
  }

  void rect(double l, double t, double w_, double h_, float value) {
    paint(l, t, l + w_, t + h_, value,
          [&](double x, double y) { return x >= l && x < l + w_ && y >= t && y < t + h_; });
  }
};

/// Ring with a mid-tone interior and two dark dots in the upper half,
/// inscribed in the box.
inline void draw_target(Canvas& c, const Box& b, float ring, float inner, float dots) {
  const double cx = b.cx();
  const double cy = b.cy();
  const double rx = b.w / 2.0;
  const double ry = b.h / 2.0;
  c.ellipse(cx, cy, rx, ry, ring);
  c.ellipse(cx, cy, rx * 0.72, ry * 0.72, inner);
  const double dr = std::max(0.6, 0.16 * std::min(b.w, b.h));
  c.ellipse(cx - 0.32 * b.w, cy - 0.14 * b.h, dr, dr, dots);
  c.ellipse(cx + 0.32 * b.w, cy - 0.14 * b.h, dr, dr, dots);
}

template <class Rng>
void draw_distractor(Canvas& c, const Box& b, Rng& rng) {
  std::uniform_int_distribution<int> kind(0, 3);
  std::uniform_real_distribution<float> tone(150.0f, 240.0f);
  std::uniform_real_distribution<float> dark(10.0f, 70.0f);
  switch (kind(rng)) {
    case 0:  // ring without dots
      c.ellipse(b.cx(), b.cy(), b.w / 2, b.h / 2, tone(rng));
      c.ellipse(b.cx(), b.cy(), b.w * 0.36, b.h * 0.36, dark(rng) + 60.0f);
      break;
    case 1: {  // dot pair without ring
      const double dr = std::max(0.6, 0.16 * std::min(b.w, b.h));
      const float v = dark(rng);
      c.ellipse(b.cx() - 0.32 * b.w, b.cy(), dr, dr, v);
      c.ellipse(b.cx() + 0.32 * b.w, b.cy(), dr, dr, v);
      break;
    }
    case 2:  // bright square
      c.rect(b.l, b.t, b.w, b.h, tone(rng));
      break;
    default:  // bar
      c.rect(b.l, b.cy() - b.h * 0.1, b.w, std::max(1.0, b.h * 0.2), tone(rng));
      break;
  }
}

inline bool overlaps_any(const Box& b, const std::vector<Box>& others, double margin) {
  const Box grown{b.l - margin, b.t - margin, b.w + 2 * margin, b.h + 2 * margin};
  for (const Box& o : others) {
    if (intersection_area(grown, o) > 0.0) return true;
  }
  return false;
}

}  // namespace synth_detail

/// Seed for image `index` derived from the scene seed only, so images are
/// reproducible regardless of generation order.
inline std::uint64_t image_seed(std::uint64_t seed, std::uint64_t index) { return derive_seed(seed, index); }

/// Renders one scene.
inline Sample generate_sample(const SceneSpec& spec, std::uint64_t index) {
  using namespace synth_detail;
  std::mt19937_64 rng(image_seed(spec.seed, index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int W = spec.width;
  const int H = spec.height;

  // Background: smooth value noise plus fine grain.
  Canvas canvas(W, H, 0.0f);
  {
    const int cell = 16;
    const int gw = W / cell + 2;
    const int gh = H / cell + 2;
    std::vector<float> grid(static_cast<std::size_t>(gw) * gh);
    const float base = static_cast<float>(70.0 + 60.0 * unit(rng));
    for (auto& g : grid) g = base + static_cast<float>(40.0 * (unit(rng) - 0.5));
    std::normal_distribution<float> grain(0.0f, 6.0f);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double fx = static_cast<double>(x) / cell;
        const double fy = static_cast<double>(y) / cell;
        const int ix = static_cast<int>(fx);
        const int iy = static_cast<int>(fy);
        const double ax = fx - ix;
        const double ay = fy - iy;
        auto at = [&](int gx, int gy) { return grid[static_cast<std::size_t>(gy) * gw + gx]; };
        const double v = (1 - ay) * ((1 - ax) * at(ix, iy) + ax * at(ix + 1, iy)) +
                         ay * ((1 - ax) * at(ix, iy + 1) + ax * at(ix + 1, iy + 1));
        canvas.px[static_cast<std::size_t>(y) * W + x] = static_cast<float>(v) + grain(rng);
      }
    }
  }

  Sample s;
  char name[32];
  std::snprintf(name, sizeof(name), "img%05llu", static_cast<unsigned long long>(index));
  s.id = name;

  std::discrete_distribution<int> band(spec.band_weights.begin(), spec.band_weights.end());
  std::uniform_int_distribution<int> count(spec.min_targets, spec.max_targets);
  const int wanted = count(rng);
  struct Draw {
    int w, h;
    bool partial;
  };
  std::vector<Draw> draws;
  for (int k = 0; k < wanted; ++k) {
    const auto [lo, hi] = spec.band_range(band(rng));
    const double lh = std::log(static_cast<double>(lo));
    const double uh = std::log(static_cast<double>(hi) + 1.0);
    const int th = std::clamp(static_cast<int>(std::floor(std::exp(lh + (uh - lh) * unit(rng)))), lo, hi);
    const int tw = std::max(4, static_cast<int>(std::lround(th * (0.8 + 0.2 * unit(rng)))));
    draws.push_back({tw, th, unit(rng) < spec.partial_prob});
  }
  // Largest first: small targets fit into the gaps, so placement failures do
  // not skew the height distribution toward small bands.
  std::stable_sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) { return a.h > b.h; });
  std::vector<Box> placed;
  int dropped = 0;
  for (const auto& [tw, th, partial] : draws) {
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
      int l, t;
      if (partial) {
        l = static_cast<int>(std::floor((W + tw / 2.0) * unit(rng) - tw / 2.0));
        t = static_cast<int>(std::floor((H + th / 2.0) * unit(rng) - th / 2.0));
      } else {
        if (tw > W || th > H) break;
        l = static_cast<int>(std::floor((W - tw + 1) * unit(rng)));
        t = static_cast<int>(std::floor((H - th + 1) * unit(rng)));
      }
      const Box b{static_cast<double>(l), static_cast<double>(t), static_cast<double>(tw), static_cast<double>(th)};
      const Box vis = clip_to_image(b, W, H);
      if (vis.empty() || vis.area() < 0.25 * b.area()) continue;
      if (overlaps_any(b, placed, 2.0)) continue;
      placed.push_back(b);
      ok = true;
    }
    if (!ok) ++dropped;
  }
  if (dropped > 0) spdlog::info("scene {}: placed {} of {} targets", s.id, placed.size(), wanted);

  // Distractors avoid targets so every annotated box stays visible.
  std::poisson_distribution<int> clutter(spec.clutter_density * W * H / 10000.0);
  const int n_clutter = spec.clutter_density > 0 ? clutter(rng) : 0;
  for (int k = 0; k < n_clutter; ++k) {
    const int side = std::clamp(static_cast<int>(std::exp(std::log(6.0) + unit(rng) * std::log(spec.max_side() / 6.0))),
                                4, std::max(4, spec.max_side()));
    for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
      const Box b{std::floor((W - side) * unit(rng)), std::floor((H - side) * unit(rng)), static_cast<double>(side),
                  std::round(side * (0.8 + 0.4 * unit(rng)))};
      if (overlaps_any(b, placed, 1.0)) continue;
      draw_distractor(canvas, b, rng);
      break;
    }
  }

  for (const Box& b : placed) {
    const float ring = static_cast<float>(170.0 + 70.0 * unit(rng));
    const float inner = static_cast<float>(90.0 + 50.0 * unit(rng));
    const float dots = static_cast<float>(10.0 + 40.0 * unit(rng));
    draw_target(canvas, b, ring, inner, dots);
    if (spec.occlusion && unit(rng) < 0.3) {
      const double ow = b.w * (0.2 + 0.3 * unit(rng));
      const double oh = b.h * (0.2 + 0.3 * unit(rng));
      canvas.rect(b.l + (b.w - ow) * unit(rng), b.t + (b.h - oh) * unit(rng), ow, oh,
                  static_cast<float>(60.0 + 120.0 * unit(rng)));
    }
  }

  if (spec.blur && unit(rng) < 0.5) {
    std::vector<float> out(canvas.px.size());
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy;
            const int xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= H || xx >= W) continue;
            acc += canvas.px[static_cast<std::size_t>(yy) * W + xx];
            ++n;
          }
        }
        out[static_cast<std::size_t>(y) * W + x] = static_cast<float>(acc / n);
      }
    }
    canvas.px = std::move(out);
  }

  s.image = GrayImage(W, H);
  for (std::size_t i = 0; i < canvas.px.size(); ++i) {
    s.image.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(canvas.px[i]), 0L, 255L));
  }
  for (const Box& b : placed) s.gts.push_back(clip_to_image(b, W, H));
  return s;
}

/// Images [first, first + n) of the scene stream.
inline Dataset generate_dataset(const SceneSpec& spec, int n, std::uint64_t first = 0) {
  spec.validate();
  Dataset d;
  d.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) d.push_back(generate_sample(spec, first + static_cast<std::uint64_t>(i)));
  return d;
}

/// One annotation entry: image path plus its boxes.
struct Annotation {
  std::string image_path;
  std::vector<Box> boxes;

  bool operator==(const Annotation&) const = default;
};

// Layout: image path line, box count line, then one "left top width height"
// line per box. A header of the form "path count" on one line is accepted
// on input.
inline void write_annotations(std::ostream& os, const std::vector<Annotation>& entries) {
  for (const auto& e : entries) {
    os << e.image_path << "\n" << e.boxes.size() << "\n";
    for (const Box& b : e.boxes) {
      os << format_exact(b.l) << " " << format_exact(b.t) << " " << format_exact(b.w) << " " << format_exact(b.h)
         << "\n";
    }
  }
}

inline std::vector<Annotation> read_annotations(std::istream& is, const std::string& origin = "<stream>") {
  std::vector<Annotation> out;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw FormatError(origin + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto next = [&](std::string& l) {
    while (std::getline(is, l)) {
      ++lineno;
      if (l.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };
  auto parse_count = [&](const std::string& text) {
    std::size_t pos = 0;
    long v = -1;
    try {
      v = std::stol(text, &pos);
    } catch (const std::exception&) {
      fail("expected a box count, got '" + text + "'");
    }
    if (v < 0 || text.find_first_not_of(" \t\r", pos) != std::string::npos) fail("bad box count '" + text + "'");
    return static_cast<std::size_t>(v);
  };
  while (next(line)) {
    std::istringstream hs(line);
    Annotation a;
    std::string count_tok;
    hs >> a.image_path;
    std::size_t count;
    if (hs >> count_tok) {
      count = parse_count(count_tok);
    } else {
      if (!next(line)) fail("missing box count for " + a.image_path);
      count = parse_count(line);
    }
    for (std::size_t k = 0; k < count; ++k) {
      if (!next(line)) fail("expected " + std::to_string(count) + " boxes for " + a.image_path);
      std::istringstream bs(line);
      Box b;
      std::string extra;
      if (!(bs >> b.l >> b.t >> b.w >> b.h) || (bs >> extra)) fail("expected 'left top width height'");
      if (!(b.w > 0 && b.h > 0)) fail("box width and height must be positive");
      a.boxes.push_back(b);
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_annotations(const std::string& path, const std::vector<Annotation>& entries) {
  auto os = io::open_out(path, std::ios::out);
  write_annotations(os, entries);
}

inline std::vector<Annotation> load_annotations(const std::string& path) {
  auto is = io::open_in(path, std::ios::in);
  return read_annotations(is, path);
}

/// Writes `dir/images/<id>.pgm` and `dir/annotations.txt`.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "images");
  std::vector<Annotation> ann;
  for (const auto& s : data) {
    const std::string rel = "images/" + s.id + ".pgm";
    write_pgm((dir / rel).string(), s.image);
    ann.push_back({rel, s.gts});
  }
  save_annotations((dir / "annotations.txt").string(), ann);
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset out;
  for (const auto& a : load_annotations((dir / "annotations.txt").string())) {
    Sample s;
    s.id = std::filesystem::path(a.image_path).stem().string();
    s.image = read_pgm((dir / a.image_path).string());
    s.gts = a.boxes;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mprcnn
