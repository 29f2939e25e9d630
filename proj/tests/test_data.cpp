#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "simplr/data.hpp"

using namespace simplr;

namespace {

// Tight box of a binary mask recomputed from scratch, in texel units
// [x0, x1, y0, y1] inclusive. Returns false for an empty mask.
bool bbox_texels(const Tensor& mask, int* x0, int* x1, int* y0, int* y1) {
  const int H = mask.shape[0], W = mask.shape[1];
  *x0 = W;
  *x1 = -1;
  *y0 = H;
  *y1 = -1;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask.at2(y, x) != 0.0) {
        *x0 = std::min(*x0, x);
        *x1 = std::max(*x1, x);
        *y0 = std::min(*y0, y);
        *y1 = std::max(*y1, y);
      }
  return *x1 >= 0;
}

double mask_area(const Tensor& mask) {
  double a = 0;
  for (double v : mask.data) a += v;
  return a;
}

// Every structural property a generated scene must satisfy, checked against
// nothing but the record itself.
void expect_scene_invariants(const SceneRecord& s) {
  const int H = s.height(), W = s.width();
  ASSERT_GT(H, 0);
  for (double v : s.image.data) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  for (double v : s.stuff.data) ASSERT_TRUE(v == 0.0 || v == 1.0);

  Tensor cover = Tensor::zeros({H, W});
  for (const SceneInstance& inst : s.instances) {
    ASSERT_GE(inst.cls, 0);
    ASSERT_LT(inst.cls, kShapeClassCount);
    ASSERT_EQ(inst.mask.shape, (std::vector<int>{H, W}));
    for (double v : inst.mask.data) ASSERT_TRUE(v == 0.0 || v == 1.0);

    int x0, x1, y0, y1;
    ASSERT_TRUE(bbox_texels(inst.mask, &x0, &x1, &y0, &y1));
    ASSERT_EQ(inst.box.shape, std::vector<int>{4});
    EXPECT_DOUBLE_EQ(inst.box.data[0], (x0 + x1 + 1) / (2.0 * W));
    EXPECT_DOUBLE_EQ(inst.box.data[1], (y0 + y1 + 1) / (2.0 * H));
    EXPECT_DOUBLE_EQ(inst.box.data[2], double(x1 + 1 - x0) / W);
    EXPECT_DOUBLE_EQ(inst.box.data[3], double(y1 + 1 - y0) / H);

    for (int i = 0; i < H * W; ++i) cover.data[size_t(i)] += inst.mask.data[size_t(i)];
  }
  // visible regions never share a texel
  for (double v : cover.data) ASSERT_LE(v, 1.0);
}

void expect_scenes_equal(const SceneRecord& a, const SceneRecord& b) {
  ASSERT_EQ(max_abs_diff(a.image, b.image), 0.0);
  ASSERT_EQ(max_abs_diff(a.stuff, b.stuff), 0.0);
  ASSERT_EQ(a.instances.size(), b.instances.size());
  for (size_t i = 0; i < a.instances.size(); ++i) {
    EXPECT_EQ(a.instances[i].cls, b.instances[i].cls);
    EXPECT_EQ(max_abs_diff(a.instances[i].mask, b.instances[i].mask), 0.0);
    EXPECT_EQ(max_abs_diff(a.instances[i].box, b.instances[i].box), 0.0);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Scene generation

TEST(Scene, DeterministicInSeed) {
  for (uint64_t seed : {1ull, 42ull, 999ull})
    expect_scenes_equal(generate_scene(seed), generate_scene(seed));
  EXPECT_GT(max_abs_diff(generate_scene(7).image, generate_scene(8).image), 0.0);
}

TEST(Scene, InvariantsHoldAcrossSeeds) {
  for (uint64_t seed = 0; seed < 25; ++seed) {
    SCOPED_TRACE("seed " + std::to_string(seed));
    const SceneRecord s = generate_scene(seed);
    ASSERT_GE(s.instances.size(), 1u);
    ASSERT_LE(s.instances.size(), 5u);
    expect_scene_invariants(s);
  }
}

TEST(Scene, RespectsInstanceCap) {
  SceneConfig cfg;
  cfg.max_instances = 1;
  for (uint64_t seed = 0; seed < 10; ++seed)
    EXPECT_EQ(generate_scene(seed, cfg).instances.size(), 1u);
}

TEST(Scene, HorizonSplitsSkyFromGround) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const SceneRecord s = generate_scene(seed);
    const int H = s.height(), W = s.width();
    // one horizon row per scene: sky strictly above, ground from there down
    int horizon = -1;
    for (int y = 0; y < H && horizon < 0; ++y)
      if (s.stuff.at2(y, 0) == kStuffGround) horizon = y;
    ASSERT_GE(horizon, H / 4);
    ASSERT_LE(horizon, 3 * H / 4);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        EXPECT_EQ(s.stuff.at2(y, x), y >= horizon ? kStuffGround : kStuffSky);
  }
}

// The width buckets below match the evaluation's size breakdown; the
// generator must feed all three or the small/large metrics measure nothing.
TEST(Scene, AllSizeBucketsWellRepresented) {
  int small = 0, medium = 0, large = 0;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    const SceneRecord s = generate_scene(seed);
    for (const SceneInstance& inst : s.instances) {
      const double w = inst.box.data[2] * s.width();
      if (w < 8)
        ++small;
      else if (w <= 32)
        ++medium;
      else
        ++large;
    }
  }
  const double total = small + medium + large;
  EXPECT_GE(small / total, 0.20) << small << "/" << total;
  EXPECT_GE(medium / total, 0.20) << medium << "/" << total;
  EXPECT_GE(large / total, 0.20) << large << "/" << total;
}

TEST(Scene, CrowdedSceneSettlesForFewerInstances) {
  // shapes so large that five disjoint ones cannot fit; the generator must
  // come back with fewer rather than loop or throw
  SceneConfig cfg;
  cfg.height = 48;
  cfg.width = 48;
  cfg.min_size = 44.0;
  cfg.max_size = 44.0;
  cfg.overlap_limit = 0.0;
  size_t worst = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const SceneRecord s = generate_scene(seed, cfg);
    ASSERT_GE(s.instances.size(), 1u);
    worst = std::max(worst, s.instances.size());
    expect_scene_invariants(s);
  }
  EXPECT_LT(worst, 5u);
}

TEST(Scene, OcclusionKeepsEarlierInstancesVisible) {
  SceneConfig cfg;
  cfg.overlap_limit = 0.35;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    const SceneRecord s = generate_scene(seed, cfg);
    // visible area can shrink but never below the configured floor of the
    // full shape area; the full area is not recorded, so bound it instead by
    // the visible area being positive and the mask matching its box
    for (const SceneInstance& inst : s.instances) EXPECT_GE(mask_area(inst.mask), 1.0);
  }
}

TEST(Scene, ShapeAreasMatchTheirClass) {
  // an unoccluded shape fills a class-specific fraction of its tight box:
  // rectangles all of it, ellipses about pi/4, triangles about half; keep
  // shapes large enough that rasterization noise stays small
  SceneConfig cfg;
  cfg.max_instances = 1;
  cfg.min_size = 10.0;
  int seen[3] = {0, 0, 0};
  for (uint64_t seed = 0; seed < 60; ++seed) {
    const SceneRecord s = generate_scene(seed, cfg);
    ASSERT_EQ(s.instances.size(), 1u);
    const SceneInstance& inst = s.instances[0];
    int x0, x1, y0, y1;
    ASSERT_TRUE(bbox_texels(inst.mask, &x0, &x1, &y0, &y1));
    const double box_area = double(x1 + 1 - x0) * (y1 + 1 - y0);
    const double ratio = mask_area(inst.mask) / box_area;
    ++seen[inst.cls];
    switch (inst.cls) {
      case kClassRect:
        EXPECT_DOUBLE_EQ(ratio, 1.0);
        break;
      case kClassEllipse:
        EXPECT_GT(ratio, 0.60);
        EXPECT_LT(ratio, 0.95);
        break;
      case kClassTriangle:
        EXPECT_GT(ratio, 0.30);
        EXPECT_LT(ratio, 0.70);
        break;
    }
  }
  for (int c = 0; c < 3; ++c) EXPECT_GT(seen[c], 0) << shape_class_name(c);
}

TEST(Scene, ConfigValidation) {
  const auto bad = [](void (*tweak)(SceneConfig&)) {
    SceneConfig cfg;
    tweak(cfg);
    EXPECT_THROW(cfg.validate(), Error);
  };
  bad([](SceneConfig& c) { c.height = 8; });
  bad([](SceneConfig& c) { c.max_instances = 0; });
  bad([](SceneConfig& c) { c.min_size = 2.0; });
  bad([](SceneConfig& c) { c.max_size = 3.0; });
  bad([](SceneConfig& c) { c.max_size = 61.0; });
  bad([](SceneConfig& c) { c.overlap_limit = 1.0; });
  bad([](SceneConfig& c) { c.overlap_limit = -0.1; });
  SceneConfig ok;
  EXPECT_NO_THROW(ok.validate());
}

// ---------------------------------------------------------------------------
// Scale jitter

TEST(Jitter, IdentityAtScaleOne) {
  const SceneRecord s = generate_scene(3);
  Rng rng(11);
  const SceneRecord j = large_scale_jitter(s, rng, 1.0, 1.0);
  expect_scenes_equal(s, j);
}

TEST(Jitter, HalfScaleHalvesBoxes) {
  SceneConfig cfg;
  cfg.min_size = 8.0;  // keep halved shapes from rounding away
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const SceneRecord s = generate_scene(seed, cfg);
    Rng rng(seed * 31 + 7);
    const SceneRecord j = large_scale_jitter(s, rng, 0.5, 0.5);
    // the halved scene sits fully inside the frame, so nothing is dropped
    ASSERT_EQ(j.instances.size(), s.instances.size());
    for (size_t i = 0; i < s.instances.size(); ++i) {
      const double w0 = s.instances[i].box.data[2] * s.width();
      const double w1 = j.instances[i].box.data[2] * s.width();
      const double h0 = s.instances[i].box.data[3] * s.height();
      const double h1 = j.instances[i].box.data[3] * s.height();
      EXPECT_NEAR(w1, w0 / 2, 1.0) << "instance " << i << " seed " << seed;
      EXPECT_NEAR(h1, h0 / 2, 1.0) << "instance " << i << " seed " << seed;
      EXPECT_EQ(j.instances[i].cls, s.instances[i].cls);
    }
    expect_scene_invariants(j);
  }
}

// Replays the jitter's draws to learn the scale and offsets, then checks the
// output against a resize computed directly from the definition: output
// texel (y,x) reads the source texel under the scaled texel center, edges
// replicated in padding, masks blank there.
TEST(Jitter, MatchesNearestNeighborOracle) {
  const SceneRecord s = generate_scene(17);
  const int H = s.height(), W = s.width();
  for (uint64_t rs : {1ull, 2ull, 3ull, 4ull}) {
    Rng used(rs);
    const SceneRecord j = large_scale_jitter(s, used, 0.1, 2.0);

    Rng replay(rs);
    const double sc = replay.uniform(0.1, 2.0);
    const int Hs = std::max(1, int(std::lround(H * sc)));
    const int Ws = std::max(1, int(std::lround(W * sc)));
    const int oy = Hs >= H ? -replay.uniform_int(0, Hs - H) : replay.uniform_int(0, H - Hs);
    const int ox = Ws >= W ? -replay.uniform_int(0, Ws - W) : replay.uniform_int(0, W - Ws);

    size_t kept = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int ys = std::min(std::max(y - oy, 0), Hs - 1);
        const int xs = std::min(std::max(x - ox, 0), Ws - 1);
        const int sy = std::min(int((ys + 0.5) * H / Hs), H - 1);
        const int sx = std::min(int((xs + 0.5) * W / Ws), W - 1);
        ASSERT_EQ(j.stuff.at2(y, x), s.stuff.at2(sy, sx)) << y << "," << x;
        for (int c = 0; c < 3; ++c)
          ASSERT_EQ(j.image.at3(y, x, c), s.image.at3(sy, sx, c)) << y << "," << x;
      }
    for (const SceneInstance& src : s.instances) {
      Tensor expect = Tensor::zeros({H, W});
      bool any = false;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int ys = y - oy, xs = x - ox;
          if (ys < 0 || ys >= Hs || xs < 0 || xs >= Ws) continue;  // mask pads blank
          const int sy = std::min(int((ys + 0.5) * H / Hs), H - 1);
          const int sx = std::min(int((xs + 0.5) * W / Ws), W - 1);
          if (src.mask.at2(sy, sx) != 0.0) {
            expect.at2(y, x) = 1.0;
            any = true;
          }
        }
      if (!any) continue;  // dropped
      ASSERT_LT(kept, j.instances.size());
      EXPECT_EQ(max_abs_diff(j.instances[kept].mask, expect), 0.0);
      EXPECT_EQ(j.instances[kept].cls, src.cls);
      ++kept;
    }
    EXPECT_EQ(kept, j.instances.size());
    expect_scene_invariants(j);
  }
}

TEST(Jitter, DownscaleDropsSomeInstanceEventually) {
  const SceneRecord s = generate_scene(5);
  bool dropped = false;
  for (uint64_t rs = 0; rs < 200 && !dropped; ++rs) {
    Rng rng(rs);
    dropped = large_scale_jitter(s, rng, 0.1, 0.2).instances.size() < s.instances.size();
  }
  EXPECT_TRUE(dropped) << "no instance ever rounded away at 0.1-0.2x scale";
}

TEST(Jitter, StrongDownscaleKeepsBothStuffRegions) {
  // at quarter scale most of the frame is padding; edge replication must
  // still carry sky above and ground below
  const SceneRecord s = generate_scene(9);
  for (uint64_t rs = 0; rs < 10; ++rs) {
    Rng rng(rs);
    const SceneRecord j = large_scale_jitter(s, rng, 0.25, 0.25);
    int sky = 0, ground = 0;
    for (double v : j.stuff.data) (v == kStuffSky ? sky : ground) += 1;
    EXPECT_GT(sky, 0);
    EXPECT_GT(ground, 0);
    expect_scene_invariants(j);
  }
}

TEST(Jitter, RejectsBadArguments) {
  const SceneRecord s = generate_scene(1);
  Rng rng(1);
  EXPECT_THROW(large_scale_jitter(s, rng, 0.0, 1.0), Error);
  EXPECT_THROW(large_scale_jitter(s, rng, 2.0, 1.0), Error);
  EXPECT_THROW(large_scale_jitter(SceneRecord{}, rng), Error);
}

// ---------------------------------------------------------------------------
// Ground truth and batching

TEST(GroundTruthConversion, ShapesAndClasses) {
  const SceneRecord s = generate_scene(12);
  const int t = int(s.instances.size());
  const GroundTruth gt = to_ground_truth(s);
  ASSERT_EQ(gt.count(), t);
  ASSERT_EQ(gt.boxes.shape, (std::vector<int>{t, 4}));
  ASSERT_EQ(gt.masks.shape, (std::vector<int>{t, s.height(), s.width()}));
  ASSERT_EQ(int(gt.classes.size()), t);
  for (int i = 0; i < t; ++i) {
    EXPECT_EQ(gt.classes[size_t(i)], s.instances[size_t(i)].cls);
    for (int c = 0; c < 4; ++c)
      EXPECT_EQ(gt.boxes.at2(i, c), s.instances[size_t(i)].box.data[size_t(c)]);
    for (int y = 0; y < s.height(); ++y)
      for (int x = 0; x < s.width(); ++x)
        EXPECT_EQ(gt.masks.at3(i, y, x), s.instances[size_t(i)].mask.at2(y, x));
  }
}

TEST(GroundTruthConversion, StuffAppendsBackgroundSegments) {
  const SceneRecord s = generate_scene(12);
  const GroundTruth gt = to_ground_truth(s, /*include_stuff=*/true);
  const int t = int(s.instances.size());
  // default scenes never bury a full backdrop region, so both segments appear
  ASSERT_EQ(gt.count(), t + 2);
  EXPECT_EQ(gt.classes[size_t(t)], kShapeClassCount + kStuffSky);
  EXPECT_EQ(gt.classes[size_t(t) + 1], kShapeClassCount + kStuffGround);

  // stuff masks tile exactly the texels no instance claims
  const int H = s.height(), W = s.width();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double sum = 0;
      for (int i = 0; i < gt.count(); ++i) sum += gt.masks.at3(i, y, x);
      EXPECT_EQ(sum, 1.0) << "texel " << y << "," << x << " covered " << sum << " times";
      const int id = int(s.stuff.at2(y, x));
      bool instance_owned = false;
      for (int i = 0; i < t; ++i) instance_owned = instance_owned || gt.masks.at3(i, y, x) != 0.0;
      if (!instance_owned) EXPECT_EQ(gt.masks.at3(t + id, y, x), 1.0);
    }
}

TEST(GroundTruthConversion, EmptySceneYieldsEmptyTruth) {
  SceneRecord s;
  s.image = Tensor::zeros({16, 16, 3});
  s.stuff = Tensor::zeros({16, 16});
  const GroundTruth gt = to_ground_truth(s);
  EXPECT_EQ(gt.count(), 0);
  EXPECT_TRUE(gt.boxes.shape.empty());
  EXPECT_TRUE(gt.classes.empty());
}

TEST(Batch, PadsToWidestRecord) {
  std::vector<SceneRecord> scenes = generate_dataset({4, 5, 6});
  const Batch b = make_batch(scenes);
  int widest = 1;
  for (const SceneRecord& s : scenes) widest = std::max(widest, int(s.instances.size()));
  ASSERT_EQ(b.images.shape, (std::vector<int>{3, 64, 64, 3}));
  ASSERT_EQ(b.boxes.shape, (std::vector<int>{3, widest, 4}));
  ASSERT_EQ(b.masks.shape, (std::vector<int>{3, widest, 64, 64}));
  for (int i = 0; i < 3; ++i) {
    const int t = int(scenes[size_t(i)].instances.size());
    for (int j = 0; j < widest; ++j) {
      EXPECT_EQ(b.valid.at2(i, j), j < t ? 1.0 : 0.0);
      if (j >= t) {
        EXPECT_EQ(b.classes.at2(i, j), -1.0);
        for (int c = 0; c < 4; ++c) EXPECT_EQ(b.boxes.at3(i, j, c), 0.0);
      }
    }
  }
}

TEST(Batch, RoundTripsPerRecordTruth) {
  std::vector<SceneRecord> scenes = generate_dataset({21, 22, 23});
  const Batch b = make_batch(scenes);
  for (int i = 0; i < b.size(); ++i) {
    const GroundTruth direct = to_ground_truth(scenes[size_t(i)]);
    const GroundTruth via = b.ground_truth(i);
    ASSERT_EQ(via.count(), direct.count());
    EXPECT_EQ(via.classes, direct.classes);
    EXPECT_EQ(max_abs_diff(via.boxes, direct.boxes), 0.0);
    EXPECT_EQ(max_abs_diff(via.masks, direct.masks), 0.0);
    EXPECT_EQ(max_abs_diff(b.image(i), scenes[size_t(i)].image), 0.0);
  }
  EXPECT_THROW(b.ground_truth(3), Error);
  EXPECT_THROW(make_batch({}), Error);
}

// ---------------------------------------------------------------------------
// Dataset files

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  EXPECT_TRUE(bool(is)) << path;
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), std::streamsize(bytes.size()));
}

void remove_dataset(const std::string& path) {
  std::remove(path.c_str());
  std::remove((path + ".manifest").c_str());
}

}  // namespace

TEST(Dataset, ExportImportRoundTrip) {
  const std::string path = testing::TempDir() + "scenes.ds";
  const std::vector<uint64_t> seeds = {100, 101, 102, 103};
  const std::vector<SceneRecord> original = generate_dataset(seeds);
  export_dataset(original, path);

  const std::vector<SceneRecord> imported = import_dataset(path);
  ASSERT_EQ(imported.size(), original.size());
  for (size_t i = 0; i < original.size(); ++i) expect_scenes_equal(original[i], imported[i]);

  // a second export of the imported scenes reproduces both files byte for byte
  const std::string again = testing::TempDir() + "scenes2.ds";
  export_dataset(imported, again);
  EXPECT_EQ(read_file(path), read_file(again));
  EXPECT_EQ(read_file(path + ".manifest"), read_file(again + ".manifest"));
  remove_dataset(path);
  remove_dataset(again);
}

TEST(Dataset, SeedOverloadMatchesRegeneration) {
  const std::string path = testing::TempDir() + "seeded.ds";
  const std::vector<uint64_t> seeds = {7, 8};
  export_dataset(generate_dataset(seeds), path);
  const std::vector<SceneRecord> imported = import_dataset(path);
  const std::vector<SceneRecord> regenerated = generate_dataset(seeds);
  ASSERT_EQ(imported.size(), regenerated.size());
  for (size_t i = 0; i < seeds.size(); ++i) expect_scenes_equal(imported[i], regenerated[i]);
  remove_dataset(path);
}

TEST(Dataset, MissingRecordIsNamed) {
  const std::string path = testing::TempDir() + "holes.ds";
  export_dataset(generate_dataset({1, 2}), path);
  std::vector<NamedTensor> records = read_container(path);
  records.erase(std::remove_if(records.begin(), records.end(),
                               [](const NamedTensor& r) { return r.name == "scene/1/mask/0"; }),
                records.end());
  write_container(path, records);
  try {
    import_dataset(path);
    FAIL() << "missing record not rejected";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("missing record scene/1/mask/0"), std::string::npos)
        << e.what();
  }
  remove_dataset(path);
}

TEST(Dataset, ExtraRecordIsRejected) {
  const std::string path = testing::TempDir() + "extra.ds";
  export_dataset(generate_dataset({1}), path);
  std::vector<NamedTensor> records = read_container(path);
  records.push_back(NamedTensor{"scene/9/stuff", Tensor::zeros({2, 2}), true});
  write_container(path, records);
  EXPECT_THROW(import_dataset(path), Error);
  remove_dataset(path);
}

TEST(Dataset, TruncatedContainerFails) {
  const std::string path = testing::TempDir() + "cut.ds";
  export_dataset(generate_dataset({1}), path);
  const std::string bytes = read_file(path);
  write_file(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(import_dataset(path), Error);
  remove_dataset(path);
}

TEST(Dataset, UnknownManifestKeyFails) {
  const std::string path = testing::TempDir() + "odd.ds";
  export_dataset(generate_dataset({1}), path);
  std::ofstream os(path + ".manifest", std::ios::app);
  os << "bogus=1\n";
  os.close();
  try {
    import_dataset(path);
    FAIL() << "unknown key not rejected";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unknown key 'bogus'"), std::string::npos) << e.what();
  }
  remove_dataset(path);
}

TEST(Dataset, MissingManifestFails) {
  const std::string path = testing::TempDir() + "lost.ds";
  export_dataset(generate_dataset({1}), path);
  std::remove((path + ".manifest").c_str());
  EXPECT_THROW(import_dataset(path), Error);
  std::remove(path.c_str());
}
