#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "oracles.hpp"
#include "simplr/attention.hpp"
#include "simplr/gradcheck.hpp"
#include "simplr/ops.hpp"

using namespace simplr;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

void randomize(Parameter& p, Rng& rng, double lo, double hi) {
  for (double& v : p.value.data) v = rng.uniform(lo, hi);
}

std::vector<double> row_of(const Tensor& t, int i) {
  std::vector<double> out(static_cast<size_t>(t.shape[1]));
  for (int j = 0; j < t.shape[1]; ++j) out[static_cast<size_t>(j)] = t.at2(i, j);
  return out;
}

oracle::GridAttnParams oracle_params(ParamStore& ps, const std::string& prefix, bool adaptive) {
  oracle::GridAttnParams p{};
  p.offset_w = &ps.get(prefix + ".offset.w").value;
  p.offset_b = &ps.get(prefix + ".offset.b").value;
  p.value_w = &ps.get(prefix + ".value.w").value;
  p.value_b = &ps.get(prefix + ".value.b").value;
  if (adaptive) {
    p.scale_w = &ps.get(prefix + ".scale.w").value;
    p.scale_b = &ps.get(prefix + ".scale.b").value;
  }
  p.rel_pos = &ps.get(prefix + ".rel_pos").value;
  p.out_w = &ps.get(prefix + ".out.w").value;
  p.out_b = &ps.get(prefix + ".out.b").value;
  return p;
}

// Finite-difference check over every parameter in the store plus the map and
// query leaves; `build` runs the mechanism on a fresh tape.
FdReport attention_fd(ParamStore& ps, Tensor& map, Tensor& queries,
                      const std::function<Var(Tape&, Var, Var)>& build) {
  Tensor weights;
  Tensor map_grad, query_grad;
  bool weights_ready = false;
  auto forward = [&](bool grads) {
    Tape t;
    Var vm = t.input(map);
    Var vq = t.input(queries);
    Var out = build(t, vm, vq);
    if (!weights_ready) {
      Rng wr(0xabcdef);
      weights = Tensor(t.val(out).shape);
      for (double& v : weights.data) v = wr.uniform(-1.0, 1.0);
      weights_ready = true;
    }
    Var s = sum_all(mul(out, t.constant(weights)));
    if (grads) {
      ps.zero_grads();
      t.backward(s);
      t.accumulate_param_grads();
      map_grad = t.grad(vm);
      query_grad = t.grad(vq);
    }
    return t.val(s).data[0];
  };
  forward(true);
  std::vector<FdProbe> probes;
  for (Parameter* p : ps.all()) probes.push_back(FdProbe{p->name, &p->value, &p->grad});
  probes.push_back(FdProbe{"map", &map, &map_grad});
  probes.push_back(FdProbe{"queries", &queries, &query_grad});
  auto eval = [&]() { return forward(false); };
  return fd_compare(eval, probes);
}

}  // namespace

// ---------------------------------------------------------------------------
// Window refinement

TEST(Attention, RefineWindowTranslatesThenScales) {
  ReferenceWindow r{0.5, 0.5, 0.1, 0.1};
  auto out = refine_window(r, {0.02, -0.01, 0.0, 0.0}, 1.0, 1.0 / 64, 1.0 / 64);
  EXPECT_DOUBLE_EQ(out.x, 0.52);
  EXPECT_DOUBLE_EQ(out.y, 0.49);
  EXPECT_DOUBLE_EQ(out.w, 0.1);
  EXPECT_DOUBLE_EQ(out.h, 0.1);
}

TEST(Attention, RefineWindowTemperatureScalesSteps) {
  ReferenceWindow r{0.5, 0.5, 0.2, 0.2};
  auto t1 = refine_window(r, {0.01, 0.02, 0.03, 0.04}, 1.0, 0.0, 0.0);
  auto t2 = refine_window(r, {0.01, 0.02, 0.03, 0.04}, 2.0, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(t2.x - r.x, 2.0 * (t1.x - r.x));
  EXPECT_DOUBLE_EQ(t2.h - r.h, 2.0 * (t1.h - r.h));
}

TEST(Attention, RefineWindowClampsToTexel) {
  ReferenceWindow r{0.5, 0.5, 0.1, 0.1};
  auto out = refine_window(r, {0.0, 0.0, -5.0, -5.0}, 1.0, 1.0 / 8, 1.0 / 16);
  EXPECT_DOUBLE_EQ(out.w, 1.0 / 8);
  EXPECT_DOUBLE_EQ(out.h, 1.0 / 16);
}

TEST(Attention, RefineWindowsTapeScalesRawByWindowSize) {
  // raw offsets are in window units: raw.x of 0.1 moves a 0.2-wide window by
  // 0.02 of the image
  Tape t;
  Tensor windows({1, 4}, {0.5, 0.4, 0.2, 0.1});
  Var raw = t.input(Tensor({1, 4}, {0.1, 0.1, 0.0, 0.0}));
  Var refined = refine_windows(t, raw, windows, 1.0, 0.0, 0.0);
  EXPECT_NEAR(t.val(refined).at2(0, 0), 0.52, 1e-15);
  EXPECT_NEAR(t.val(refined).at2(0, 1), 0.41, 1e-15);
}

// ---------------------------------------------------------------------------
// Sampling grid

TEST(Attention, UnitGridOffsetsRowMajor) {
  std::vector<double> u, v;
  unit_grid_offsets(2, u, v);
  EXPECT_DOUBLE_EQ(u[0], -0.25);
  EXPECT_DOUBLE_EQ(v[0], -0.25);
  EXPECT_DOUBLE_EQ(u[1], 0.25);
  EXPECT_DOUBLE_EQ(v[1], -0.25);
  EXPECT_DOUBLE_EQ(u[2], -0.25);
  EXPECT_DOUBLE_EQ(v[2], 0.25);
  EXPECT_DOUBLE_EQ(u[3], 0.25);
  EXPECT_DOUBLE_EQ(v[3], 0.25);
}

TEST(Attention, SampleGridMatchesManualBilinear) {
  Tape t;
  Rng rng(211);
  Tensor map = random_tensor({5, 6, 3}, rng);
  Tensor windows({2, 4}, {0.4, 0.5, 0.3, 0.2, 0.7, 0.3, 0.2, 0.4});
  Var out = sample_grid(t, t.input(map), t.input(windows), 2);
  EXPECT_EQ(t.val(out).shape, (std::vector<int>{2, 4, 3}));
  for (int q = 0; q < 2; ++q) {
    ReferenceWindow r{windows.at2(q, 0), windows.at2(q, 1), windows.at2(q, 2), windows.at2(q, 3)};
    std::vector<double> px, py;
    grid_points_plain(r, 2, px, py);
    for (int j = 0; j < 4; ++j) {
      auto expect = oracle::bilinear(map, px[static_cast<size_t>(j)], py[static_cast<size_t>(j)]);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(t.val(out).at3(q, j, c), expect[static_cast<size_t>(c)], 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Scale plumbing

TEST(Attention, HeadScaleAssignmentRoundRobin) {
  auto a = head_scale_assignment(8, 4);
  EXPECT_EQ(a, (std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3}));
  auto b = head_scale_assignment(4, 4);
  EXPECT_EQ(b, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_THROW(head_scale_assignment(6, 4), Error);
  EXPECT_THROW(head_scale_assignment(2, 4), Error);
}

TEST(Attention, ScaleTemperatureRatiosExact) {
  for (double lambda : {1.0, 2.0, 8.0}) {
    for (int j = 0; j < 7; ++j)
      EXPECT_DOUBLE_EQ(scale_temperature(j + 1, lambda), 2.0 * scale_temperature(j, lambda));
  }
  EXPECT_DOUBLE_EQ(scale_temperature(0, 1.0), 1.0);
  EXPECT_THROW(scale_temperature(0, 0.0), Error);
}

TEST(Attention, AnchorSetGeometricLadder) {
  AnchorSet anchors(4.0, 4, 64.0);
  EXPECT_DOUBLE_EQ(anchors.normalized(0), 4.0 / 64);
  EXPECT_DOUBLE_EQ(anchors.normalized(1), 8.0 / 64);
  EXPECT_DOUBLE_EQ(anchors.normalized(2), 16.0 / 64);
  EXPECT_DOUBLE_EQ(anchors.normalized(3), 32.0 / 64);
  EXPECT_THROW(anchors.normalized(4), Error);
  EXPECT_THROW(AnchorSet(0.0, 4, 64.0), Error);
}

// ---------------------------------------------------------------------------
// Box attention vs oracle

namespace {

struct BoxFixture {
  AttentionConfig cfg;
  ParamStore ps;
  BoxAttentionParams params;
  Tensor map, queries, windows;

  explicit BoxFixture(uint64_t seed, BoxAttentionKind kind = BoxAttentionKind::kBox,
                      int scales = 1, double lambda = 1.0, bool per_scale = true) {
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.grid = 2;
    cfg.scale_count = scales;
    cfg.lambda = lambda;
    cfg.per_scale_offsets = per_scale;
    Rng rng(seed);
    params = make_box_attention_params(ps, "attn", cfg, kind, rng);
    // offsets are zero-initialized for training; give them real values here
    Rng orng = rng.split("offsets");
    randomize(*params.offset.w, orng, -0.2, 0.2);
    randomize(*params.offset.b, orng, -0.1, 0.1);
    if (kind == BoxAttentionKind::kAdaptiveScale) {
      randomize(*params.scale_logits.w, orng, -0.5, 0.5);
      randomize(*params.scale_logits.b, orng, -0.2, 0.2);
    }
    Rng drng = rng.split("data");
    map = random_tensor({6, 5, cfg.dim}, drng);
    queries = random_tensor({3, cfg.dim}, drng);
    windows = Tensor({3, 4});
    for (int q = 0; q < 3; ++q) {
      windows.at2(q, 0) = drng.uniform(0.3, 0.7);
      windows.at2(q, 1) = drng.uniform(0.3, 0.7);
      windows.at2(q, 2) = drng.uniform(0.2, 0.5);
      windows.at2(q, 3) = drng.uniform(0.2, 0.5);
    }
  }
};

}  // namespace

TEST(Attention, BoxAttentionMatchesOracle) {
  BoxFixture f(301);
  Tape t;
  Var out = box_attention(t, t.input(f.map), t.input(f.queries), f.windows, f.cfg, f.params);
  auto op = oracle_params(f.ps, "attn", false);
  for (int q = 0; q < 3; ++q) {
    oracle::WindowRef w{f.windows.at2(q, 0), f.windows.at2(q, 1), f.windows.at2(q, 2),
                        f.windows.at2(q, 3)};
    auto expect = oracle::box_attention_query(f.map, row_of(f.queries, q), w, f.cfg.heads,
                                              f.cfg.grid, op);
    for (int d = 0; d < f.cfg.dim; ++d)
      EXPECT_NEAR(t.val(out).at2(q, d), expect[static_cast<size_t>(d)], 1e-9);
  }
}

TEST(Attention, BoxAttentionWeightRowsSumToOne) {
  BoxFixture f(303);
  Tape t;
  std::vector<Var> alphas;
  (void)box_attention(t, t.input(f.map), t.input(f.queries), f.windows, f.cfg, f.params, &alphas);
  ASSERT_EQ(alphas.size(), static_cast<size_t>(f.cfg.heads));
  for (Var a : alphas) {
    const Tensor& av = t.val(a);
    for (int q = 0; q < av.shape[0]; ++q) {
      double s = 0.0;
      for (int j = 0; j < av.shape[1]; ++j) s += av.at2(q, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Attention, BoxAttentionRejectsMismatchedWindows) {
  BoxFixture f(305);
  Tape t;
  Tensor bad({2, 4});
  EXPECT_THROW(box_attention(t, t.input(f.map), t.input(f.queries), bad, f.cfg, f.params), Error);
}

// ---------------------------------------------------------------------------
// Fixed-scale vs oracle and degenerate reduction

TEST(Attention, FixedScaleMatchesOracle) {
  BoxFixture f(307, BoxAttentionKind::kFixedScale, 2);
  AnchorSet anchors(8.0, 2, 64.0);
  Tensor positions({3, 2});
  Rng rng(309);
  for (int q = 0; q < 3; ++q) {
    positions.at2(q, 0) = rng.uniform(0.2, 0.8);
    positions.at2(q, 1) = rng.uniform(0.2, 0.8);
  }
  Tape t;
  Var out = fixed_scale_attention(t, t.input(f.map), t.input(f.queries), positions, anchors,
                                  f.cfg, f.params);
  auto op = oracle_params(f.ps, "attn", false);
  std::vector<double> sizes = {anchors.normalized(0), anchors.normalized(1)};
  for (int q = 0; q < 3; ++q) {
    auto expect = oracle::fixed_scale_query(f.map, row_of(f.queries, q), positions.at2(q, 0),
                                            positions.at2(q, 1), sizes, f.cfg.heads, f.cfg.grid,
                                            op);
    for (int d = 0; d < f.cfg.dim; ++d)
      EXPECT_NEAR(t.val(out).at2(q, d), expect[static_cast<size_t>(d)], 1e-9);
  }
}

TEST(Attention, FixedScaleSingleAnchorEqualsBoxAttention) {
  BoxFixture f(311);
  AnchorSet anchors(10.0, 1, 64.0);
  Tensor positions({3, 2});
  Tensor windows({3, 4});
  Rng rng(313);
  for (int q = 0; q < 3; ++q) {
    positions.at2(q, 0) = rng.uniform(0.2, 0.8);
    positions.at2(q, 1) = rng.uniform(0.2, 0.8);
    windows.at2(q, 0) = positions.at2(q, 0);
    windows.at2(q, 1) = positions.at2(q, 1);
    windows.at2(q, 2) = anchors.normalized(0);
    windows.at2(q, 3) = anchors.normalized(0);
  }
  Tape t;
  Var fixed = fixed_scale_attention(t, t.input(f.map), t.input(f.queries), positions, anchors,
                                    f.cfg, f.params);
  Var box = box_attention(t, t.input(f.map), t.input(f.queries), windows, f.cfg, f.params);
  EXPECT_LE(max_abs_diff(t.val(fixed), t.val(box)), 1e-12);
}

// ---------------------------------------------------------------------------
// Adaptive-scale vs oracle, weights, degenerate reduction

TEST(Attention, AdaptiveScaleMatchesOracle) {
  BoxFixture f(317, BoxAttentionKind::kAdaptiveScale, 2, 2.0, true);
  AnchorSet anchors(6.0, 2, 64.0);
  Tensor positions({3, 2});
  Rng rng(319);
  for (int q = 0; q < 3; ++q) {
    positions.at2(q, 0) = rng.uniform(0.2, 0.8);
    positions.at2(q, 1) = rng.uniform(0.2, 0.8);
  }
  Tape t;
  auto res = adaptive_scale_attention(t, t.input(f.map), t.input(f.queries), positions, anchors,
                                      f.cfg, f.params);
  auto op = oracle_params(f.ps, "attn", true);
  std::vector<double> sizes = {anchors.normalized(0), anchors.normalized(1)};
  for (int q = 0; q < 3; ++q) {
    std::vector<std::vector<double>> weights;
    auto expect = oracle::adaptive_scale_query(f.map, row_of(f.queries, q), positions.at2(q, 0),
                                               positions.at2(q, 1), sizes, f.cfg.lambda, true,
                                               f.cfg.heads, f.cfg.grid, op, &weights);
    for (int d = 0; d < f.cfg.dim; ++d)
      EXPECT_NEAR(t.val(res.output).at2(q, d), expect[static_cast<size_t>(d)], 1e-9);
    const Tensor& sw = t.val(res.scale_weights);
    ASSERT_EQ(sw.shape, (std::vector<int>{3, f.cfg.heads, 2}));
    for (int i = 0; i < f.cfg.heads; ++i)
      for (int j = 0; j < 2; ++j)
        EXPECT_NEAR(sw.at3(q, i, j), weights[static_cast<size_t>(i)][static_cast<size_t>(j)], 1e-9);
  }
}

TEST(Attention, AdaptiveSharedOffsetsMatchesOracle) {
  BoxFixture f(323, BoxAttentionKind::kAdaptiveScale, 2, 4.0, false);
  AnchorSet anchors(6.0, 2, 64.0);
  Tensor positions({2, 2}, {0.4, 0.4, 0.6, 0.5});
  Tensor queries({2, 8});
  Rng rng(327);
  for (double& v : queries.data) v = rng.uniform(-1.0, 1.0);
  Tape t;
  auto res = adaptive_scale_attention(t, t.input(f.map), t.input(queries), positions, anchors,
                                      f.cfg, f.params);
  auto op = oracle_params(f.ps, "attn", true);
  std::vector<double> sizes = {anchors.normalized(0), anchors.normalized(1)};
  for (int q = 0; q < 2; ++q) {
    auto expect = oracle::adaptive_scale_query(f.map, row_of(queries, q), positions.at2(q, 0),
                                               positions.at2(q, 1), sizes, f.cfg.lambda, false,
                                               f.cfg.heads, f.cfg.grid, op, nullptr);
    for (int d = 0; d < f.cfg.dim; ++d)
      EXPECT_NEAR(t.val(res.output).at2(q, d), expect[static_cast<size_t>(d)], 1e-9);
  }
}

TEST(Attention, AdaptiveScaleWeightRowsSumToOne) {
  BoxFixture f(331, BoxAttentionKind::kAdaptiveScale, 4, 8.0, true);
  AnchorSet anchors(4.0, 4, 64.0);
  Tensor positions({3, 2});
  Rng rng(333);
  for (int q = 0; q < 3; ++q) {
    positions.at2(q, 0) = rng.uniform(0.2, 0.8);
    positions.at2(q, 1) = rng.uniform(0.2, 0.8);
  }
  Tape t;
  auto res = adaptive_scale_attention(t, t.input(f.map), t.input(f.queries), positions, anchors,
                                      f.cfg, f.params);
  const Tensor& sw = t.val(res.scale_weights);
  for (int q = 0; q < 3; ++q)
    for (int i = 0; i < f.cfg.heads; ++i) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) s += sw.at3(q, i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Attention, AdaptiveSingleScaleUnitLambdaEqualsBoxAttention) {
  // m = 1, lambda = 1: temperatures collapse to 1, the only scale weight is
  // softmax over one logit = 1, and the offset head has the same shape as
  // box attention's. Copying parameters across must reproduce box attention.
  BoxFixture adaptive(337, BoxAttentionKind::kAdaptiveScale, 1, 1.0, true);
  AnchorSet anchors(12.0, 1, 64.0);
  Tensor positions({3, 2});
  Tensor windows({3, 4});
  Rng rng(339);
  for (int q = 0; q < 3; ++q) {
    positions.at2(q, 0) = rng.uniform(0.2, 0.8);
    positions.at2(q, 1) = rng.uniform(0.2, 0.8);
    windows.at2(q, 0) = positions.at2(q, 0);
    windows.at2(q, 1) = positions.at2(q, 1);
    windows.at2(q, 2) = anchors.normalized(0);
    windows.at2(q, 3) = anchors.normalized(0);
  }
  ParamStore box_ps;
  Rng brng(341);
  BoxAttentionParams box_params =
      make_box_attention_params(box_ps, "attn", adaptive.cfg, BoxAttentionKind::kBox, brng);
  box_params.offset.w->value = adaptive.params.offset.w->value;
  box_params.offset.b->value = adaptive.params.offset.b->value;
  box_params.value.w->value = adaptive.params.value.w->value;
  box_params.value.b->value = adaptive.params.value.b->value;
  box_params.rel_pos->value = adaptive.params.rel_pos->value;
  box_params.out.w->value = adaptive.params.out.w->value;
  box_params.out.b->value = adaptive.params.out.b->value;

  Tape t;
  auto res = adaptive_scale_attention(t, t.input(adaptive.map), t.input(adaptive.queries),
                                      positions, anchors, adaptive.cfg, adaptive.params);
  Var box = box_attention(t, t.input(adaptive.map), t.input(adaptive.queries), windows,
                          adaptive.cfg, box_params);
  EXPECT_LE(max_abs_diff(t.val(res.output), t.val(box)), 1e-12);
  // the lone scale weight is exactly one
  const Tensor& sw = t.val(res.scale_weights);
  for (double v : sw.data) EXPECT_DOUBLE_EQ(v, 1.0);
}

// ---------------------------------------------------------------------------
// Masked instance attention

namespace {

struct MaskedFixture {
  AttentionConfig cfg;
  ParamStore ps;
  MaskedAttentionParams params;
  Tensor map, queries, windows;

  explicit MaskedFixture(uint64_t seed, int grid = 4) {
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.grid = grid;
    Rng rng(seed);
    params = make_masked_attention_params(ps, "inst", cfg, rng);
    Rng orng = rng.split("offsets");
    randomize(*params.offset.w, orng, -0.1, 0.1);
    Rng drng = rng.split("data");
    map = random_tensor({6, 6, cfg.dim}, drng);
    queries = random_tensor({3, cfg.dim}, drng);
    windows = Tensor({3, 4});
    for (int q = 0; q < 3; ++q) {
      windows.at2(q, 0) = drng.uniform(0.35, 0.65);
      windows.at2(q, 1) = drng.uniform(0.35, 0.65);
      windows.at2(q, 2) = drng.uniform(0.3, 0.5);
      windows.at2(q, 3) = drng.uniform(0.3, 0.5);
    }
  }

  oracle::MaskedAttnParams oracle_view() {
    oracle::MaskedAttnParams p{};
    p.offset_w = &ps.get("inst.offset.w").value;
    p.offset_b = &ps.get("inst.offset.b").value;
    p.bin_w = &ps.get("inst.bin.w").value;
    p.bin_b = &ps.get("inst.bin.b").value;
    p.value_w = &ps.get("inst.value.w").value;
    p.value_b = &ps.get("inst.value.b").value;
    p.out_w = &ps.get("inst.out.w").value;
    p.out_b = &ps.get("inst.out.b").value;
    return p;
  }
};

// Half-plane previous masks: positive logits left of a vertical split.
std::vector<Tensor> half_plane_masks(int k, int hm, int wm, double split_frac) {
  std::vector<Tensor> out;
  for (int q = 0; q < k; ++q) {
    Tensor m({hm, wm});
    for (int y = 0; y < hm; ++y)
      for (int x = 0; x < wm; ++x)
        m.at2(y, x) = ((x + 0.5) / wm < split_frac) ? 3.0 : -3.0;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

TEST(Attention, GridBinIndexQuadrants) {
  auto idx = grid_bin_index(4);
  // row-major 4x4: top-left quadrant bin 0, top-right 1, bottom-left 2,
  // bottom-right 3
  EXPECT_EQ(idx[0], 0);
  EXPECT_EQ(idx[3], 1);
  EXPECT_EQ(idx[12], 2);
  EXPECT_EQ(idx[15], 3);
  auto idx14 = grid_bin_index(14);
  EXPECT_EQ(idx14[0], 0);
  EXPECT_EQ(idx14[6 * 14 + 6], 0);
  EXPECT_EQ(idx14[7 * 14 + 7], 3);
  EXPECT_EQ(static_cast<int>(idx14.size()), 196);
}

TEST(Attention, MaskedInstanceFirstLayerMatchesOracle) {
  MaskedFixture f(401);
  Tape t;
  Var out = masked_instance_attention(t, t.input(f.map), t.input(f.queries), f.windows, nullptr,
                                      f.cfg, f.params);
  auto op = f.oracle_view();
  for (int q = 0; q < 3; ++q) {
    oracle::WindowRef w{f.windows.at2(q, 0), f.windows.at2(q, 1), f.windows.at2(q, 2),
                        f.windows.at2(q, 3)};
    auto expect = oracle::masked_instance_query(f.map, row_of(f.queries, q), w, nullptr,
                                                f.cfg.heads, f.cfg.grid, op, nullptr);
    for (int d = 0; d < f.cfg.dim; ++d)
      EXPECT_NEAR(t.val(out).at2(q, d), expect[static_cast<size_t>(d)], 1e-9);
  }
}

TEST(Attention, MaskedInstanceFullGridMatchesOracle) {
  MaskedFixture f(403, 14);
  auto prev = half_plane_masks(3, 8, 8, 0.55);
  Tape t;
  Var out = masked_instance_attention(t, t.input(f.map), t.input(f.queries), f.windows, &prev,
                                      f.cfg, f.params);
  auto op = f.oracle_view();
  for (int q = 0; q < 3; ++q) {
    oracle::WindowRef w{f.windows.at2(q, 0), f.windows.at2(q, 1), f.windows.at2(q, 2),
                        f.windows.at2(q, 3)};
    auto expect = oracle::masked_instance_query(f.map, row_of(f.queries, q), w,
                                                &prev[static_cast<size_t>(q)], f.cfg.heads,
                                                f.cfg.grid, op, nullptr);
    for (int d = 0; d < f.cfg.dim; ++d)
      EXPECT_NEAR(t.val(out).at2(q, d), expect[static_cast<size_t>(d)], 1e-9);
  }
}

TEST(Attention, MaskedPositionsGetExactlyZeroWeight) {
  MaskedFixture f(405);
  auto prev = half_plane_masks(3, 8, 8, 0.5);
  Tape t;
  std::vector<Var> alphas;
  (void)masked_instance_attention(t, t.input(f.map), t.input(f.queries), f.windows, &prev, f.cfg,
                                  f.params, &alphas);
  ASSERT_EQ(alphas.size(), static_cast<size_t>(f.cfg.heads));
  auto op = f.oracle_view();
  int masked_cells = 0;
  for (int i = 0; i < f.cfg.heads; ++i) {
    const Tensor& av = t.val(alphas[static_cast<size_t>(i)]);
    for (int q = 0; q < 3; ++q) {
      std::vector<std::vector<double>> oracle_alphas;
      oracle::WindowRef w{f.windows.at2(q, 0), f.windows.at2(q, 1), f.windows.at2(q, 2),
                          f.windows.at2(q, 3)};
      (void)oracle::masked_instance_query(f.map, row_of(f.queries, q), w,
                                          &prev[static_cast<size_t>(q)], f.cfg.heads, f.cfg.grid,
                                          op, &oracle_alphas);
      double sum = 0.0;
      for (int j = 0; j < f.cfg.grid * f.cfg.grid; ++j) {
        double a = av.at2(q, j);
        sum += a;
        if (oracle_alphas[static_cast<size_t>(i)][static_cast<size_t>(j)] == 0.0) {
          EXPECT_EQ(a, 0.0) << "head " << i << " query " << q << " cell " << j;
          ++masked_cells;
        }
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
  EXPECT_GT(masked_cells, 0);  // the fixture must actually mask something
}

TEST(Attention, MaskedAllBackgroundFallsBackToUnmasked) {
  MaskedFixture f(407);
  std::vector<Tensor> all_bg;
  for (int q = 0; q < 3; ++q) all_bg.push_back(Tensor::full({8, 8}, -5.0));
  Tape t;
  Var with_prev = masked_instance_attention(t, t.input(f.map), t.input(f.queries), f.windows,
                                            &all_bg, f.cfg, f.params);
  Var without = masked_instance_attention(t, t.input(f.map), t.input(f.queries), f.windows,
                                          nullptr, f.cfg, f.params);
  EXPECT_LE(max_abs_diff(t.val(with_prev), t.val(without)), 0.0);
}

TEST(Attention, MaskedInstanceRejectsOddGrid) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.grid = 5;
  ParamStore ps;
  Rng rng(409);
  EXPECT_THROW(make_masked_attention_params(ps, "inst", cfg, rng), Error);
}

TEST(Attention, MaskedInstanceNeedsMaskPerQuery) {
  MaskedFixture f(411);
  auto prev = half_plane_masks(2, 8, 8, 0.5);  // one too few
  Tape t;
  EXPECT_THROW(masked_instance_attention(t, t.input(f.map), t.input(f.queries), f.windows, &prev,
                                         f.cfg, f.params),
               Error);
}

// ---------------------------------------------------------------------------
// Self-attention

TEST(Attention, SelfAttentionMatchesOracle) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  ParamStore ps;
  Rng rng(501);
  SelfAttentionParams params = make_self_attention_params(ps, "self", cfg, rng);
  Tensor queries = random_tensor({4, 8}, rng);
  Tensor pos = random_tensor({4, 8}, rng, -0.5, 0.5);
  Tape t;
  Var with_pos = self_attention(t, t.input(queries), t.constant(pos), cfg, params);
  Var no_pos = self_attention(t, t.input(queries), Var{}, cfg, params);
  Tensor kb = Tensor::zeros({cfg.dim});  // keys are projected without a bias
  Tensor expect_pos = oracle::self_attention(
      queries, &pos, cfg.heads, ps.get("self.q.w").value, ps.get("self.q.b").value,
      ps.get("self.k.w").value, kb, ps.get("self.v.w").value, ps.get("self.v.b").value,
      ps.get("self.out.w").value, ps.get("self.out.b").value);
  Tensor expect_raw = oracle::self_attention(
      queries, nullptr, cfg.heads, ps.get("self.q.w").value, ps.get("self.q.b").value,
      ps.get("self.k.w").value, kb, ps.get("self.v.w").value, ps.get("self.v.b").value,
      ps.get("self.out.w").value, ps.get("self.out.b").value);
  EXPECT_LE(max_abs_diff(t.val(with_pos), expect_pos), 1e-9);
  EXPECT_LE(max_abs_diff(t.val(no_pos), expect_raw), 1e-9);
  EXPECT_GT(max_abs_diff(t.val(with_pos), t.val(no_pos)), 1e-6);
}

// ---------------------------------------------------------------------------
// Gradient checks through each mechanism

TEST(AttentionGrad, BoxAttention) {
  BoxFixture f(601);
  auto rep = attention_fd(f.ps, f.map, f.queries, [&](Tape& t, Var m, Var q) {
    return box_attention(t, m, q, f.windows, f.cfg, f.params);
  });
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_input << " coord " << rep.worst_coord
                                   << " analytic " << rep.analytic << " numeric " << rep.numeric;
}

TEST(AttentionGrad, FixedScale) {
  BoxFixture f(603, BoxAttentionKind::kFixedScale, 2);
  AnchorSet anchors(8.0, 2, 64.0);
  Tensor positions({3, 2}, {0.4, 0.4, 0.5, 0.6, 0.65, 0.35});
  auto rep = attention_fd(f.ps, f.map, f.queries, [&](Tape& t, Var m, Var q) {
    return fixed_scale_attention(t, m, q, positions, anchors, f.cfg, f.params);
  });
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_input << " coord " << rep.worst_coord;
}

TEST(AttentionGrad, AdaptiveScale) {
  BoxFixture f(605, BoxAttentionKind::kAdaptiveScale, 2, 2.0, true);
  AnchorSet anchors(6.0, 2, 64.0);
  Tensor positions({3, 2}, {0.4, 0.4, 0.5, 0.6, 0.65, 0.35});
  auto rep = attention_fd(f.ps, f.map, f.queries, [&](Tape& t, Var m, Var q) {
    return adaptive_scale_attention(t, m, q, positions, anchors, f.cfg, f.params).output;
  });
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_input << " coord " << rep.worst_coord;
}

TEST(AttentionGrad, MaskedInstanceFirstLayer) {
  MaskedFixture f(607);
  auto rep = attention_fd(f.ps, f.map, f.queries, [&](Tape& t, Var m, Var q) {
    return masked_instance_attention(t, m, q, f.windows, nullptr, f.cfg, f.params);
  });
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_input << " coord " << rep.worst_coord;
}

TEST(AttentionGrad, MaskedInstanceWithPreviousMasks) {
  MaskedFixture f(609);
  auto prev = half_plane_masks(3, 8, 8, 0.5);
  auto rep = attention_fd(f.ps, f.map, f.queries, [&](Tape& t, Var m, Var q) {
    return masked_instance_attention(t, m, q, f.windows, &prev, f.cfg, f.params);
  });
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_input << " coord " << rep.worst_coord;
}

TEST(AttentionGrad, SelfAttention) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  ParamStore ps;
  Rng rng(611);
  SelfAttentionParams params = make_self_attention_params(ps, "self", cfg, rng);
  Tensor queries = random_tensor({4, 8}, rng);
  Tensor pos = random_tensor({4, 8}, rng, -0.5, 0.5);
  Tensor dummy_map = random_tensor({2, 2, 8}, rng);  // unused by the op
  auto rep = attention_fd(ps, dummy_map, queries, [&](Tape& t, Var, Var q) {
    return self_attention(t, q, t.constant(pos), cfg, params);
  });
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_input << " coord " << rep.worst_coord;
}
