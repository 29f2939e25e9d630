#pragma once

// Synthetic scenes for desk-scale training: a sky/ground backdrop with up to
// a handful of rectangles, ellipses, and triangles painted over it, plus the
// rasterized ground truth (visible-region masks, tight boxes, class ids).
// Includes scale jitter augmentation, batching, and dataset files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "simplr/container.hpp"
#include "simplr/objective.hpp"
#include "simplr/rng.hpp"
#include "simplr/tensor.hpp"

namespace simplr {

// ---------------------------------------------------------------------------
// Scene records

constexpr int kClassRect = 0;
constexpr int kClassEllipse = 1;
constexpr int kClassTriangle = 2;
constexpr int kShapeClassCount = 3;

constexpr int kStuffSky = 0;
constexpr int kStuffGround = 1;
constexpr int kStuffClassCount = 2;

inline const char* shape_class_name(int cls) {
  switch (cls) {
    case kClassRect: return "rect";
    case kClassEllipse: return "ellipse";
    case kClassTriangle: return "triangle";
    default: throw Error("shape_class_name: unknown class " + std::to_string(cls));
  }
}

struct SceneInstance {
  int cls = 0;
  Tensor box;   // [4] normalized cxcywh, tight around the visible mask
  Tensor mask;  // [H,W] binary, visible region only
};

// Instances are listed in creation order; later ones were painted on top and
// may occlude earlier ones. The stuff map labels every texel with its
// backdrop id, so a texel's single owner is its instance if any mask covers
// it and its stuff id otherwise.
struct SceneRecord {
  Tensor image;  // [H,W,3] in [0,1]
  Tensor stuff;  // [H,W] of {0 sky, 1 ground}
  std::vector<SceneInstance> instances;

  int height() const { return image.rank() == 3 ? image.shape[0] : 0; }
  int width() const { return image.rank() == 3 ? image.shape[1] : 0; }
};

// Sizes are in texels and bound the drawn shape extents. `overlap_limit` is
// the largest fraction of an already placed instance that later placements
// may hide; candidates that would exceed it are rejected and retried.
struct SceneConfig {
  int height = 64;
  int width = 64;
  int max_instances = 5;
  double min_size = 4.0;
  double max_size = 44.0;
  double overlap_limit = 0.35;

  void validate() const {
    if (height < 16 || width < 16)
      throw Error("scene config: image must be at least 16x16, got " + std::to_string(height) +
                  "x" + std::to_string(width));
    if (max_instances < 1)
      throw Error("scene config: max_instances must be positive, got " +
                  std::to_string(max_instances));
    if (min_size < 3.0 || max_size < min_size)
      throw Error("scene config: need 3 <= min_size <= max_size, got " +
                  std::to_string(min_size) + ".." + std::to_string(max_size));
    if (max_size > std::min(height, width) - 4)
      throw Error("scene config: max_size " + std::to_string(max_size) +
                  " leaves no placement margin in " + std::to_string(height) + "x" +
                  std::to_string(width));
    if (overlap_limit < 0.0 || overlap_limit >= 1.0)
      throw Error("scene config: overlap_limit must be in [0,1), got " +
                  std::to_string(overlap_limit));
  }
};

namespace detail {

// A texel belongs to a shape when its center satisfies the analytic test;
// no anti-aliasing, so the geometry stays exactly recomputable.
struct ShapeSpec {
  int cls = 0;
  double cx = 0, cy = 0;  // texel units
  double w = 0, h = 0;    // full extents
  double apex_dx = 0;     // triangle only: apex shift off the box center
};

inline bool shape_covers(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.cls) {
    case kClassRect:
      return std::abs(dx) <= s.w / 2 && std::abs(dy) <= s.h / 2;
    case kClassEllipse: {
      const double nx = dx / (s.w / 2), ny = dy / (s.h / 2);
      return nx * nx + ny * ny <= 1.0;
    }
    case kClassTriangle: {
      // apex up, base along the bottom edge of the extent box
      const double ax = s.cx + s.apex_dx, ay = s.cy - s.h / 2;
      const double bx = s.cx - s.w / 2, by = s.cy + s.h / 2;
      const double cx2 = s.cx + s.w / 2, cy2 = s.cy + s.h / 2;
      const double d1 = (px - ax) * (by - ay) - (py - ay) * (bx - ax);
      const double d2 = (px - bx) * (cy2 - by) - (py - by) * (cx2 - bx);
      const double d3 = (px - cx2) * (ay - cy2) - (py - cy2) * (ax - cx2);
      const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(neg && pos);
    }
    default:
      throw Error("shape_covers: unknown class " + std::to_string(s.cls));
  }
}

// Texel indices covered by the shape, scanning only its bounding range.
inline std::vector<int> rasterize(const ShapeSpec& s, int H, int W) {
  std::vector<int> cells;
  const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.h / 2 - 1)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(s.cy + s.h / 2 + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.w / 2 - 1)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(s.cx + s.w / 2 + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (shape_covers(s, x + 0.5, y + 0.5)) cells.push_back(y * W + x);
  return cells;
}

// Tight bounding box of the nonzero texels as a normalized [4] cxcywh
// tensor. Returns false when the mask is empty.
inline bool tight_box(const Tensor& mask, Tensor* out) {
  const int H = mask.shape[0], W = mask.shape[1];
  int x0 = W, x1 = -1, y0 = H, y1 = -1;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask.at2(y, x) != 0.0) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return false;
  Tensor b({4});
  b.data[0] = (x0 + x1 + 1) / (2.0 * W);
  b.data[1] = (y0 + y1 + 1) / (2.0 * H);
  b.data[2] = static_cast<double>(x1 + 1 - x0) / W;
  b.data[3] = static_cast<double>(y1 + 1 - y0) / H;
  *out = std::move(b);
  return true;
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Extent draw mixing three width classes so small, medium, and large shapes
// all appear often. Large shapes lose placement contention in crowded
// scenes, so the draw favors them; the accepted mix comes out near uniform.
// A class whose range is cut off by the config falls back to the full range.
inline double draw_extent(Rng& rng, const SceneConfig& cfg) {
  static constexpr double kEdges[3][2] = {{0.0, 6.9}, {9.0, 30.9}, {33.2, 1e18}};
  const int r = rng.uniform_int(0, 9);
  const int bucket = r < 2 ? 0 : r < 5 ? 1 : 2;
  const double lo = std::max(cfg.min_size, kEdges[bucket][0]);
  const double hi = std::min(cfg.max_size, kEdges[bucket][1]);
  if (lo > hi) return rng.uniform(cfg.min_size, cfg.max_size);
  return rng.uniform(lo, hi);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generation

// Deterministic in the seed: one scene is one pure function evaluation, so
// callers may fan generation out across seeds freely.
inline SceneRecord generate_scene(uint64_t seed, const SceneConfig& cfg = {}) {
  cfg.validate();
  Rng rng(seed);
  const int H = cfg.height, W = cfg.width;

  SceneRecord scene;
  scene.image = Tensor({H, W, 3});
  scene.stuff = Tensor({H, W});

  // backdrop: sky above a random horizon, ground below, light texel noise
  const int horizon = rng.uniform_int(H / 4, 3 * H / 4);
  static constexpr double kSky[3] = {0.55, 0.70, 0.90};
  static constexpr double kGround[3] = {0.36, 0.50, 0.24};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const bool ground = y >= horizon;
      scene.stuff.at2(y, x) = ground ? kStuffGround : kStuffSky;
      for (int c = 0; c < 3; ++c)
        scene.image.at3(y, x, c) =
            detail::clamp01((ground ? kGround[c] : kSky[c]) + rng.uniform(-0.04, 0.04));
    }

  // place shapes, newest on top; a candidate is rejected when it would hide
  // more than overlap_limit of any earlier instance
  struct Placed {
    detail::ShapeSpec spec;
    int full_area = 0;
    int visible = 0;
    double color[3] = {0, 0, 0};
  };
  std::vector<Placed> placed;
  std::vector<int> owner(static_cast<size_t>(H) * W, -1);
  static constexpr double kBase[3][3] = {
      {0.80, 0.25, 0.20}, {0.25, 0.35, 0.85}, {0.85, 0.75, 0.25}};

  const int target = rng.uniform_int(1, cfg.max_instances);
  for (int inst = 0; inst < target; ++inst) {
    bool done = false;
    for (int attempt = 0; attempt < 100 && !done; ++attempt) {
      detail::ShapeSpec s;
      s.cls = rng.uniform_int(0, kShapeClassCount - 1);
      s.w = detail::draw_extent(rng, cfg);
      s.h = std::min(std::max(s.w * rng.uniform(0.6, 1.6), 3.0), static_cast<double>(H - 4));
      s.cx = rng.uniform(s.w / 2 + 1, W - s.w / 2 - 1);
      s.cy = rng.uniform(s.h / 2 + 1, H - s.h / 2 - 1);
      if (s.cls == kClassTriangle) s.apex_dx = rng.uniform(-s.w / 4, s.w / 4);

      std::vector<int> cells = detail::rasterize(s, H, W);
      if (cells.size() < 4) continue;

      std::vector<int> hidden(placed.size(), 0);
      for (int cell : cells)
        if (owner[static_cast<size_t>(cell)] >= 0)
          ++hidden[static_cast<size_t>(owner[static_cast<size_t>(cell)])];
      bool ok = true;
      for (size_t p = 0; p < placed.size(); ++p) {
        const double remaining = placed[p].visible - hidden[p];
        if (remaining < std::max(1.0, (1.0 - cfg.overlap_limit) * placed[p].full_area)) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;

      Placed np;
      np.spec = s;
      np.full_area = static_cast<int>(cells.size());
      np.visible = np.full_area;
      for (int c = 0; c < 3; ++c)
        np.color[c] = detail::clamp01(kBase[s.cls][c] + rng.uniform(-0.08, 0.08));
      const int idx = static_cast<int>(placed.size());
      for (int cell : cells) {
        if (owner[static_cast<size_t>(cell)] >= 0)
          --placed[static_cast<size_t>(owner[static_cast<size_t>(cell)])].visible;
        owner[static_cast<size_t>(cell)] = idx;
      }
      placed.push_back(np);
      done = true;
    }
    if (!done) break;  // crowded scene: settle for fewer instances
  }

  // visible masks, tight boxes, and the shape texture painted over the backdrop
  scene.instances.resize(placed.size());
  for (size_t i = 0; i < placed.size(); ++i) {
    scene.instances[i].cls = placed[i].spec.cls;
    scene.instances[i].mask = Tensor::zeros({H, W});
  }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int o = owner[static_cast<size_t>(y) * W + x];
      if (o < 0) continue;
      scene.instances[static_cast<size_t>(o)].mask.at2(y, x) = 1.0;
      for (int c = 0; c < 3; ++c)
        scene.image.at3(y, x, c) =
            detail::clamp01(placed[static_cast<size_t>(o)].color[c] + rng.uniform(-0.04, 0.04));
    }
  for (SceneInstance& inst : scene.instances)
    if (!detail::tight_box(inst.mask, &inst.box))
      throw Error("generate_scene: placed instance lost all visible texels");
  return scene;
}

// ---------------------------------------------------------------------------
// Large scale jitter

// Resizes the scene by a uniform draw from [lo, hi] (nearest neighbor, masks
// stay binary), then randomly crops or pads back to the original extents.
// The image and stuff map extend by edge replication in padded regions;
// masks pad with background. Instances whose visible region is cropped away
// are dropped, and boxes are recomputed tight around the surviving texels.
inline SceneRecord large_scale_jitter(const SceneRecord& scene, Rng& rng, double lo = 0.1,
                                      double hi = 2.0) {
  if (scene.image.rank() != 3 || scene.image.shape[2] != 3)
    throw Error("large_scale_jitter: scene image must be [H,W,3], got " +
                shape_str(scene.image.shape));
  if (lo <= 0.0 || hi < lo)
    throw Error("large_scale_jitter: need 0 < lo <= hi, got " + std::to_string(lo) + ".." +
                std::to_string(hi));
  const int H = scene.image.shape[0], W = scene.image.shape[1];
  const double s = rng.uniform(lo, hi);
  const int Hs = std::max(1, static_cast<int>(std::lround(H * s)));
  const int Ws = std::max(1, static_cast<int>(std::lround(W * s)));
  // top-left of the scaled scene inside the output frame: non-positive when
  // cropping (scaled scene larger), non-negative when padding
  const int oy = Hs >= H ? -rng.uniform_int(0, Hs - H) : rng.uniform_int(0, H - Hs);
  const int ox = Ws >= W ? -rng.uniform_int(0, Ws - W) : rng.uniform_int(0, W - Ws);

  // output texel -> source texel of the unscaled scene, clamped for padding
  std::vector<int> src_y(static_cast<size_t>(H)), src_x(static_cast<size_t>(W));
  std::vector<bool> in_y(static_cast<size_t>(H)), in_x(static_cast<size_t>(W));
  for (int y = 0; y < H; ++y) {
    const int ys = y - oy;
    in_y[static_cast<size_t>(y)] = ys >= 0 && ys < Hs;
    const int yc = std::min(std::max(ys, 0), Hs - 1);
    src_y[static_cast<size_t>(y)] =
        std::min(static_cast<int>((yc + 0.5) * H / Hs), H - 1);
  }
  for (int x = 0; x < W; ++x) {
    const int xs = x - ox;
    in_x[static_cast<size_t>(x)] = xs >= 0 && xs < Ws;
    const int xc = std::min(std::max(xs, 0), Ws - 1);
    src_x[static_cast<size_t>(x)] =
        std::min(static_cast<int>((xc + 0.5) * W / Ws), W - 1);
  }

  SceneRecord out;
  out.image = Tensor({H, W, 3});
  out.stuff = Tensor({H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int sy = src_y[static_cast<size_t>(y)], sx = src_x[static_cast<size_t>(x)];
      out.stuff.at2(y, x) = scene.stuff.at2(sy, sx);
      for (int c = 0; c < 3; ++c) out.image.at3(y, x, c) = scene.image.at3(sy, sx, c);
    }

  for (const SceneInstance& inst : scene.instances) {
    Tensor mask = Tensor::zeros({H, W});
    bool any = false;
    for (int y = 0; y < H; ++y) {
      if (!in_y[static_cast<size_t>(y)]) continue;
      for (int x = 0; x < W; ++x) {
        if (!in_x[static_cast<size_t>(x)]) continue;
        if (inst.mask.at2(src_y[static_cast<size_t>(y)], src_x[static_cast<size_t>(x)]) != 0.0) {
          mask.at2(y, x) = 1.0;
          any = true;
        }
      }
    }
    if (!any) continue;
    SceneInstance ni;
    ni.cls = inst.cls;
    ni.mask = std::move(mask);
    detail::tight_box(ni.mask, &ni.box);
    out.instances.push_back(std::move(ni));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth and batching

// Flattens a scene into matcher-ready targets. With `include_stuff`, the sky
// and ground regions not covered by any instance are appended as extra
// targets with classes 3 and 4, which is how the panoptic task sees them.
inline GroundTruth to_ground_truth(const SceneRecord& scene, bool include_stuff = false) {
  const int H = scene.height(), W = scene.width();
  if (H == 0) throw Error("to_ground_truth: scene has no image");

  std::vector<const Tensor*> masks;
  std::vector<Tensor> stuff_masks;
  std::vector<int> classes;
  std::vector<const Tensor*> boxes;
  std::vector<Tensor> stuff_boxes;
  for (const SceneInstance& inst : scene.instances) {
    masks.push_back(&inst.mask);
    boxes.push_back(&inst.box);
    classes.push_back(inst.cls);
  }
  if (include_stuff) {
    for (int id = 0; id < kStuffClassCount; ++id) {
      Tensor m = Tensor::zeros({H, W});
      bool any = false;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (scene.stuff.at2(y, x) != id) continue;
          bool covered = false;
          for (const SceneInstance& inst : scene.instances)
            if (inst.mask.at2(y, x) != 0.0) {
              covered = true;
              break;
            }
          if (!covered) {
            m.at2(y, x) = 1.0;
            any = true;
          }
        }
      if (!any) continue;
      Tensor b;
      detail::tight_box(m, &b);
      stuff_masks.push_back(std::move(m));
      stuff_boxes.push_back(std::move(b));
      classes.push_back(kShapeClassCount + id);
    }
    for (const Tensor& m : stuff_masks) masks.push_back(&m);
    for (const Tensor& b : stuff_boxes) boxes.push_back(&b);
  }

  GroundTruth gt;
  const int t = static_cast<int>(masks.size());
  if (t == 0) return gt;
  gt.boxes = Tensor({t, 4});
  gt.masks = Tensor({t, H, W});
  gt.classes = classes;
  for (int i = 0; i < t; ++i) {
    for (int c = 0; c < 4; ++c) gt.boxes.at2(i, c) = boxes[static_cast<size_t>(i)]->data[c];
    std::copy(masks[static_cast<size_t>(i)]->data.begin(),
              masks[static_cast<size_t>(i)]->data.end(),
              gt.masks.data.begin() + static_cast<size_t>(i) * H * W);
  }
  return gt;
}

// Fixed-width target padding so a batch is a handful of rectangular tensors:
// row b holds record b's targets first, zeros after, with valid flags marking
// the real ones.
struct Batch {
  Tensor images;   // [B,H,W,3]
  Tensor boxes;    // [B,T,4]
  Tensor classes;  // [B,T], -1 where padded
  Tensor valid;    // [B,T], 1 for real targets
  Tensor masks;    // [B,T,H,W]

  int size() const { return images.shape[0]; }

  GroundTruth ground_truth(int b) const {
    if (b < 0 || b >= size()) throw Error("batch: record " + std::to_string(b) + " out of range");
    const int T = boxes.shape[1], H = masks.shape[2], W = masks.shape[3];
    int t = 0;
    while (t < T && valid.at2(b, t) != 0.0) ++t;
    GroundTruth gt;
    if (t == 0) return gt;
    gt.boxes = Tensor({t, 4});
    gt.masks = Tensor({t, H, W});
    for (int i = 0; i < t; ++i) {
      gt.classes.push_back(static_cast<int>(classes.at2(b, i)));
      for (int c = 0; c < 4; ++c) gt.boxes.at2(i, c) = boxes.at3(b, i, c);
    }
    const size_t hw = static_cast<size_t>(H) * W;
    std::copy_n(masks.data.begin() + (static_cast<size_t>(b) * T) * hw, t * hw,
                gt.masks.data.begin());
    return gt;
  }

  Tensor image(int b) const {
    if (b < 0 || b >= size()) throw Error("batch: record " + std::to_string(b) + " out of range");
    const int H = images.shape[1], W = images.shape[2];
    Tensor img({H, W, 3});
    std::copy_n(images.data.begin() + static_cast<size_t>(b) * H * W * 3, img.data.size(),
                img.data.begin());
    return img;
  }
};

inline Batch make_batch(const std::vector<SceneRecord>& scenes, bool include_stuff = false) {
  if (scenes.empty()) throw Error("make_batch: no scenes");
  const int H = scenes[0].height(), W = scenes[0].width();
  const int B = static_cast<int>(scenes.size());
  std::vector<GroundTruth> gts;
  int T = 1;
  for (const SceneRecord& s : scenes) {
    if (s.height() != H || s.width() != W)
      throw Error("make_batch: mixed scene extents " + shape_str(s.image.shape) + " vs " +
                  std::to_string(H) + "x" + std::to_string(W));
    gts.push_back(to_ground_truth(s, include_stuff));
    T = std::max(T, gts.back().count());
  }

  Batch b;
  b.images = Tensor({B, H, W, 3});
  b.boxes = Tensor::zeros({B, T, 4});
  b.classes = Tensor::full({B, T}, -1.0);
  b.valid = Tensor::zeros({B, T});
  b.masks = Tensor::zeros({B, T, H, W});
  for (int i = 0; i < B; ++i) {
    std::copy(scenes[static_cast<size_t>(i)].image.data.begin(),
              scenes[static_cast<size_t>(i)].image.data.end(),
              b.images.data.begin() + static_cast<size_t>(i) * H * W * 3);
    const GroundTruth& gt = gts[static_cast<size_t>(i)];
    const size_t hw = static_cast<size_t>(H) * W;
    for (int j = 0; j < gt.count(); ++j) {
      b.valid.at2(i, j) = 1.0;
      b.classes.at2(i, j) = gt.classes[static_cast<size_t>(j)];
      for (int c = 0; c < 4; ++c) b.boxes.at3(i, j, c) = gt.boxes.at2(j, c);
      std::copy_n(gt.masks.data.begin() + static_cast<size_t>(j) * hw, hw,
                  b.masks.data.begin() + (static_cast<size_t>(i) * T + j) * hw);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Dataset files

// One dataset is a tensor container holding, per scene, the records
// "scene/{i}/image" (f64), "scene/{i}/stuff", and "scene/{i}/mask/{j}", plus
// a "<path>.manifest" text sidecar carrying the classes and boxes.
inline std::string dataset_manifest_text(const std::vector<SceneRecord>& scenes) {
  std::ostringstream os;
  os.precision(17);
  os << "scenes=" << scenes.size() << "\n";
  if (!scenes.empty()) {
    os << "height=" << scenes[0].height() << "\n";
    os << "width=" << scenes[0].width() << "\n";
  }
  for (size_t i = 0; i < scenes.size(); ++i) {
    os << "scene." << i << ".instances=" << scenes[i].instances.size() << "\n";
    for (size_t j = 0; j < scenes[i].instances.size(); ++j) {
      const SceneInstance& inst = scenes[i].instances[j];
      os << "scene." << i << ".class." << j << "=" << inst.cls << "\n";
      os << "scene." << i << ".box." << j << "=";
      for (int c = 0; c < 4; ++c) os << (c ? "," : "") << inst.box.data[static_cast<size_t>(c)];
      os << "\n";
    }
  }
  return os.str();
}

inline void export_dataset(const std::vector<SceneRecord>& scenes, const std::string& path) {
  std::vector<NamedTensor> records;
  for (size_t i = 0; i < scenes.size(); ++i) {
    const SceneRecord& s = scenes[i];
    if (s.height() == 0) throw Error("export_dataset: scene " + std::to_string(i) + " is empty");
    const std::string base = "scene/" + std::to_string(i) + "/";
    records.push_back(NamedTensor{base + "image", s.image, /*store_f32=*/false});
    records.push_back(NamedTensor{base + "stuff", s.stuff, /*store_f32=*/true});
    for (size_t j = 0; j < s.instances.size(); ++j)
      records.push_back(NamedTensor{base + "mask/" + std::to_string(j), s.instances[j].mask,
                                    /*store_f32=*/true});
  }
  write_container(path, records);
  std::ofstream os(path + ".manifest", std::ios::trunc);
  if (!os) throw Error("dataset: cannot write " + path + ".manifest");
  os << dataset_manifest_text(scenes);
  if (!os) throw Error("dataset: write failed for " + path + ".manifest");
}

inline std::vector<SceneRecord> generate_dataset(const std::vector<uint64_t>& seeds,
                                                 const SceneConfig& cfg = {}) {
  std::vector<SceneRecord> scenes;
  scenes.reserve(seeds.size());
  for (uint64_t s : seeds) scenes.push_back(generate_scene(s, cfg));
  return scenes;
}

inline std::vector<SceneRecord> import_dataset(const std::string& path) {
  std::ifstream is(path + ".manifest");
  if (!is) throw Error("dataset: missing manifest sidecar " + path + ".manifest");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  std::map<std::string, std::string> kv;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("dataset manifest: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto want = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error("dataset manifest: missing key '" + key + "'");
    std::string v = std::move(it->second);
    kv.erase(it);
    return v;
  };
  auto as_int = [&](const std::string& key) {
    const std::string v = want(key);
    size_t used = 0;
    int n = 0;
    try {
      n = std::stoi(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty() || n < 0)
      throw Error("dataset manifest: bad value '" + v + "' for " + key);
    return n;
  };

  const int count = as_int("scenes");
  std::map<std::string, Tensor> tensors;
  for (NamedTensor& r : read_container(path)) tensors[r.name] = std::move(r.tensor);
  auto take = [&](const std::string& name) -> Tensor {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw Error("dataset: " + path + " is missing record " + name);
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };

  std::vector<SceneRecord> scenes;
  scenes.reserve(static_cast<size_t>(count));
  const int height = count > 0 ? as_int("height") : 0;
  const int width = count > 0 ? as_int("width") : 0;
  for (int i = 0; i < count; ++i) {
    const std::string base = "scene/" + std::to_string(i) + "/";
    const std::string pre = "scene." + std::to_string(i) + ".";
    SceneRecord s;
    s.image = take(base + "image");
    s.stuff = take(base + "stuff");
    if (s.image.shape != std::vector<int>{height, width, 3})
      throw Error("dataset: record " + base + "image must be [" + std::to_string(height) + "," +
                  std::to_string(width) + ",3], got " + shape_str(s.image.shape));
    if (s.stuff.shape != std::vector<int>{height, width})
      throw Error("dataset: record " + base + "stuff does not match the image extents");
    const int instances = as_int(pre + "instances");
    for (int j = 0; j < instances; ++j) {
      SceneInstance inst;
      inst.cls = as_int(pre + "class." + std::to_string(j));
      if (inst.cls >= kShapeClassCount)
        throw Error("dataset manifest: unknown class " + std::to_string(inst.cls) + " in " +
                    pre + "class." + std::to_string(j));
      const std::string btext = want(pre + "box." + std::to_string(j));
      inst.box = Tensor({4});
      std::istringstream bs(btext);
      for (int c = 0; c < 4; ++c) {
        std::string field;
        if (!std::getline(bs, field, ','))
          throw Error("dataset manifest: box '" + btext + "' needs 4 fields");
        size_t used = 0;
        try {
          inst.box.data[static_cast<size_t>(c)] = std::stod(field, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != field.size() || field.empty())
          throw Error("dataset manifest: bad box field '" + field + "'");
      }
      inst.mask = take(base + "mask/" + std::to_string(j));
      if (inst.mask.shape != s.stuff.shape)
        throw Error("dataset: record " + base + "mask/" + std::to_string(j) +
                    " does not match the image extents");
      s.instances.push_back(std::move(inst));
    }
    scenes.push_back(std::move(s));
  }
  if (!tensors.empty())
    throw Error("dataset: " + path + " has unreferenced record " + tensors.begin()->first);
  if (!kv.empty())
    throw Error("dataset manifest: unknown key '" + kv.begin()->first + "'");
  return scenes;
}

}  // namespace simplr
