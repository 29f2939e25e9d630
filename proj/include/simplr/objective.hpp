#pragma once

// Training objective: focal, dice, L1, and GIoU losses, bipartite matching
// between predictions and ground truth, and the composite per-layer loss.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "simplr/model.hpp"
#include "simplr/ops.hpp"
#include "simplr/tape.hpp"
#include "simplr/tensor.hpp"

namespace simplr {

// Term weights. cls is 2.0 for detection and instance segmentation and 4.0
// for panoptic; the rest are fixed.
struct LossWeights {
  double focal = 5.0;
  double dice = 5.0;
  double l1 = 5.0;
  double giou = 2.0;
  double cls = 2.0;
};

enum class Task { kDetection, kInstance, kPanoptic };

inline LossWeights loss_weights_for(Task task) {
  LossWeights w;
  w.cls = task == Task::kPanoptic ? 4.0 : 2.0;
  return w;
}

inline bool supervises_masks(Task task) { return task != Task::kDetection; }

// Annotations for one image: boxes as normalized [cx,cy,w,h] rows, one class
// id per row, and binary masks at image resolution ([t,H,W]; may be empty
// when the task does not supervise masks).
struct GroundTruth {
  Tensor boxes;  // [t,4] when any instances exist, default-empty otherwise
  std::vector<int> classes;
  Tensor masks;  // [t,H,W] at image resolution; empty when not supervised

  int count() const { return boxes.shape.size() == 2 ? boxes.shape[0] : 0; }
};

// ---------------------------------------------------------------------------
// Focal loss

// Per-element focal terms on sigmoid logits: alpha_t * (1-p_t)^gamma * -log(p_t)
// with p_t the probability of the labeled side. Passing alpha < 0 drops the
// alpha factor entirely, which reduces gamma = 0 to plain cross-entropy.
inline Var focal_elementwise(Tape& t, Var logits, const Tensor& targets, double alpha,
                             double gamma) {
  const Tensor& lv = t.val(logits);
  if (lv.shape != targets.shape)
    throw Error("focal loss: logits " + shape_str(lv.shape) + " vs targets " +
                shape_str(targets.shape));
  Tensor sign(targets.shape);   // 1 - 2y: flips the logit toward the labeled side
  Tensor weight(targets.shape); // alpha_t
  for (size_t i = 0; i < targets.data.size(); ++i) {
    const double y = targets.data[i];
    if (y != 0.0 && y != 1.0)
      throw Error("focal loss: targets must be 0 or 1, got " + std::to_string(y));
    sign.data[i] = 1.0 - 2.0 * y;
    weight.data[i] = alpha < 0.0 ? 1.0 : (y == 1.0 ? alpha : 1.0 - alpha);
  }
  // u = (1-2y) z, so sigmoid(u) = 1 - p_t and softplus(u) = -log(p_t)
  Var u = mul(logits, t.constant(sign));
  Var term = softplus(u);
  if (gamma == 1.0) {
    term = mul(sigmoid(u), term);
  } else if (gamma == 2.0) {
    Var s = sigmoid(u);
    term = mul(mul(s, s), term);
  } else if (gamma != 0.0) {
    Var s = clamp_min(sigmoid(u), 1e-30);
    term = mul(exp_op(scale(log_op(s), gamma)), term);
  }
  return mul(term, t.constant(weight));
}

inline Var focal_loss(Tape& t, Var logits, const Tensor& targets, double alpha = 0.25,
                      double gamma = 2.0) {
  return mean_all(focal_elementwise(t, logits, targets, alpha, gamma));
}

// ---------------------------------------------------------------------------
// Dice loss

// 1 - (2|A.B| + 1) / (|A| + |B| + 1) on sigmoid probabilities; the +1 keeps
// empty masks well defined. Always in [0,1).
inline Var dice_loss(Tape& t, Var mask_logits, const Tensor& target) {
  const Tensor& lv = t.val(mask_logits);
  if (lv.shape != target.shape)
    throw Error("dice loss: logits " + shape_str(lv.shape) + " vs target " +
                shape_str(target.shape));
  Var p = sigmoid(mask_logits);
  Var inter = sum_all(mul(p, t.constant(target)));
  double target_sum = 0.0;
  for (double v : target.data) target_sum += v;
  Var numer = add_const(scale(inter, 2.0), 1.0);
  Var denom = add_const(sum_all(p), target_sum + 1.0);
  return add_const(neg(div(numer, denom)), 1.0);
}

// ---------------------------------------------------------------------------
// Generalized IoU

// Corner-form boxes [x0,y0,x1,y1]. giou = IoU - |C \ (A u B)| / |C| where C
// is the tightest box enclosing both; in [-1,1] and 1 only for equal boxes.
inline double giou_value(const double a[4], const double b[4]) {
  if (a[2] < a[0] || a[3] < a[1] || b[2] < b[0] || b[3] < b[1])
    throw Error("giou: box has negative extent");
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double ew = std::max(a[2], b[2]) - std::min(a[0], b[0]);
  const double eh = std::max(a[3], b[3]) - std::min(a[1], b[1]);
  const double enc = ew * eh;
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return enc > 0.0 ? iou - (enc - uni) / enc : iou;
}

inline void cxcywh_to_corners(const double in[4], double out[4]) {
  out[0] = in[0] - 0.5 * in[2];
  out[1] = in[1] - 0.5 * in[3];
  out[2] = in[0] + 0.5 * in[2];
  out[3] = in[1] + 0.5 * in[3];
}

// [n,4] center-form rows to corner form, on tape.
inline Var boxes_to_corners(Tape& t, Var boxes) {
  Var cx = slice(boxes, 1, 0, 1), cy = slice(boxes, 1, 1, 1);
  Var hw = scale(slice(boxes, 1, 2, 1), 0.5), hh = scale(slice(boxes, 1, 3, 1), 0.5);
  return concat({sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)}, 1);
}

// Per-row giou between predicted boxes (center form, on tape) and fixed
// targets (center form). Returns [n]. Predictions from a sigmoid always have
// positive extent, so the union and enclosing areas stay positive.
inline Var pairwise_giou(Tape& t, Var pred_boxes, const Tensor& target_boxes) {
  const Tensor& pv = t.val(pred_boxes);
  if (pv.shape != target_boxes.shape)
    throw Error("giou: predictions " + shape_str(pv.shape) + " vs targets " +
                shape_str(target_boxes.shape));
  const int n = pv.shape[0];
  Tensor tc({n, 4});
  for (int i = 0; i < n; ++i) {
    double corners[4];
    cxcywh_to_corners(&target_boxes.data[static_cast<size_t>(i) * 4], corners);
    for (int j = 0; j < 4; ++j) tc.at2(i, j) = corners[j];
  }
  Var p = boxes_to_corners(t, pred_boxes);
  Var g = t.constant(tc);
  auto col = [&](Var m, int j) { return reshape(slice(m, 1, j, 1), {n}); };
  Var px0 = col(p, 0), py0 = col(p, 1), px1 = col(p, 2), py1 = col(p, 3);
  Var tx0 = col(g, 0), ty0 = col(g, 1), tx1 = col(g, 2), ty1 = col(g, 3);
  Var iw = clamp_min(sub(minimum(px1, tx1), maximum(px0, tx0)), 0.0);
  Var ih = clamp_min(sub(minimum(py1, ty1), maximum(py0, ty0)), 0.0);
  Var inter = mul(iw, ih);
  Var area_p = mul(sub(px1, px0), sub(py1, py0));
  Var area_t = mul(sub(tx1, tx0), sub(ty1, ty0));
  Var uni = sub(add(area_p, area_t), inter);
  Var enc = mul(sub(maximum(px1, tx1), minimum(px0, tx0)),
                sub(maximum(py1, ty1), minimum(py0, ty0)));
  return sub(div(inter, uni), div(sub(enc, uni), enc));
}

// ---------------------------------------------------------------------------
// Matching

// One-to-one assignment; every target is paired when targets <= queries.
// pairs are sorted by target index, unmatched queries ascending.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, target)
  std::vector<int> unmatched;

  double total_cost(const Tensor& cost) const {
    double s = 0.0;
    for (const auto& [q, tgt] : pairs) s += cost.at2(q, tgt);
    return s;
  }
};

namespace detail {

// Shortest-augmenting-path assignment over cost [k,t] (queries x targets),
// t <= k. Returns the query assigned to each target. O(t^2 k).
inline std::vector<int> assign_min_cost(const Tensor& cost) {
  const int k = cost.shape[0], t = cost.shape[1];
  const double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials over targets (rows here) and queries (columns)
  std::vector<double> u(static_cast<size_t>(t) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(k) + 1, 0.0);
  std::vector<int> owner(static_cast<size_t>(k) + 1, 0);  // query -> target
  std::vector<int> way(static_cast<size_t>(k) + 1, 0);
  for (int i = 1; i <= t; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(k) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(k) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = owner[static_cast<size_t>(j0)];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= k; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost.at2(j - 1, i0 - 1) - u[static_cast<size_t>(i0)] -
                           v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= k; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(owner[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (owner[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      owner[static_cast<size_t>(j0)] = owner[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> q_of(static_cast<size_t>(t), -1);
  for (int j = 1; j <= k; ++j)
    if (owner[static_cast<size_t>(j)] != 0)
      q_of[static_cast<size_t>(owner[static_cast<size_t>(j)]) - 1] = j - 1;
  return q_of;
}

inline double assignment_sum(const Tensor& cost, const std::vector<int>& q_of) {
  double s = 0.0;
  for (size_t j = 0; j < q_of.size(); ++j) s += cost.at2(q_of[j], static_cast<int>(j));
  return s;
}

}  // namespace detail

// Minimum-cost assignment of all targets to distinct queries. Among equal-
// cost optima the result is lexicographically smallest in (target 0's query,
// target 1's query, ...): each target in turn takes the lowest-index free
// query that still completes to the optimal total.
inline MatchResult hungarian_match(const Tensor& cost) {
  if (cost.data.empty() && cost.shape.empty()) return MatchResult{};  // no targets
  if (cost.shape.size() != 2)
    throw Error("hungarian: cost must be [queries,targets], got " + shape_str(cost.shape));
  const int k = cost.shape[0], t = cost.shape[1];
  if (t > k)
    throw Error("hungarian: " + std::to_string(t) + " targets exceed " + std::to_string(k) +
                " queries");
  for (double c : cost.data)
    if (!std::isfinite(c)) throw Error("hungarian: cost contains a non-finite entry");

  MatchResult out;
  std::vector<char> taken(static_cast<size_t>(k), 0);
  if (t > 0) {
    std::vector<int> best = detail::assign_min_cost(cost);
    const double optimum = detail::assignment_sum(cost, best);

    // fix targets one by one onto the smallest query that preserves the
    // optimum; the sub-problem re-solve keeps the check exact
    std::vector<int> q_of(static_cast<size_t>(t), -1);
    double fixed_sum = 0.0;
    bool forced = true;
    for (int j = 0; j < t && forced; ++j) {
      forced = false;
      for (int q = 0; q < k && !forced; ++q) {
        if (taken[static_cast<size_t>(q)]) continue;
        double total = fixed_sum + cost.at2(q, j);
        const int rt = t - j - 1;
        if (rt > 0) {
          std::vector<int> free_q;
          for (int qq = 0; qq < k; ++qq)
            if (!taken[static_cast<size_t>(qq)] && qq != q) free_q.push_back(qq);
          Tensor sub({static_cast<int>(free_q.size()), rt});
          for (size_t r = 0; r < free_q.size(); ++r)
            for (int c = 0; c < rt; ++c)
              sub.at2(static_cast<int>(r), c) = cost.at2(free_q[r], j + 1 + c);
          std::vector<int> rest = detail::assign_min_cost(sub);
          for (int c = 0; c < rt; ++c)
            total += sub.at2(rest[static_cast<size_t>(c)], c);
        }
        if (total == optimum) {
          q_of[static_cast<size_t>(j)] = q;
          taken[static_cast<size_t>(q)] = 1;
          fixed_sum += cost.at2(q, j);
          forced = true;
        }
      }
    }
    if (!forced) {
      // rounding kept every forced total off the optimum; fall back to the
      // plain solution, which is still minimal
      q_of = best;
      std::fill(taken.begin(), taken.end(), 0);
      for (int q : q_of) taken[static_cast<size_t>(q)] = 1;
    }
    for (int j = 0; j < t; ++j) out.pairs.emplace_back(q_of[static_cast<size_t>(j)], j);
  }
  for (int q = 0; q < k; ++q)
    if (!taken[static_cast<size_t>(q)]) out.unmatched.push_back(q);
  return out;
}

// ---------------------------------------------------------------------------
// Cost matrix

// Nearest-neighbour resample of one [H,W] mask to [h,w], reading the source
// texel under each destination texel center.
inline Tensor nearest_mask(const Tensor& mask, int h, int w) {
  if (mask.shape.size() != 2)
    throw Error("nearest_mask: expected [H,W], got " + shape_str(mask.shape));
  const int sh = mask.shape[0], sw = mask.shape[1];
  Tensor out({h, w});
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(sh - 1, static_cast<int>((y + 0.5) / h * sh));
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(sw - 1, static_cast<int>((x + 0.5) / w * sw));
      out.at2(y, x) = mask.at2(sy, sx);
    }
  }
  return out;
}

// Matching costs combine the same weighted terms as the loss, evaluated on
// plain values: cls * (-prob of the target class) + l1 * |box delta|
// + giou * (1 - giou), plus focal and dice mask terms when include_masks.
// mask_logits may be null unless include_masks is set; ground-truth masks
// are compared at the prediction's resolution. Zero targets yield an empty
// tensor, which hungarian_match answers with an empty match.
inline Tensor build_cost_matrix(const Tensor& cls_logits, const Tensor& boxes,
                                const Tensor* mask_logits, const GroundTruth& gt,
                                const LossWeights& w, bool include_masks = false) {
  const int k = cls_logits.shape[0];
  const int t = gt.count();
  if (t > k)
    throw Error("cost matrix: " + std::to_string(t) + " targets exceed " + std::to_string(k) +
                " queries");
  if (t == 0) return Tensor{};
  if (include_masks && (mask_logits == nullptr || gt.masks.shape.size() != 3))
    throw Error("cost matrix: mask terms requested without masks");
  Tensor cost({k, t});

  std::vector<Tensor> gt_small;
  int mh = 0, mw = 0;
  if (include_masks) {
    mh = mask_logits->shape[1];
    mw = mask_logits->shape[2];
    for (int j = 0; j < t; ++j) {
      Tensor full({gt.masks.shape[1], gt.masks.shape[2]});
      std::copy_n(&gt.masks.data[static_cast<size_t>(j) * full.data.size()], full.data.size(),
                  full.data.begin());
      gt_small.push_back(nearest_mask(full, mh, mw));
    }
  }

  for (int q = 0; q < k; ++q) {
    double pc[4], pcorners[4];
    for (int j = 0; j < 4; ++j) pc[j] = boxes.at2(q, j);
    cxcywh_to_corners(pc, pcorners);
    for (int j = 0; j < t; ++j) {
      const double prob = sigmoid_value(cls_logits.at2(q, gt.classes[static_cast<size_t>(j)]));
      double l1 = 0.0;
      for (int c = 0; c < 4; ++c) l1 += std::abs(boxes.at2(q, c) - gt.boxes.at2(j, c));
      double tc[4], tcorners[4];
      for (int c = 0; c < 4; ++c) tc[c] = gt.boxes.at2(j, c);
      cxcywh_to_corners(tc, tcorners);
      double entry = w.cls * -prob + w.l1 * l1 + w.giou * (1.0 - giou_value(pcorners, tcorners));
      if (include_masks) {
        const Tensor& m = gt_small[static_cast<size_t>(j)];
        double focal = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0, fg = 0.0;
        for (int y = 0; y < mh; ++y)
          for (int x = 0; x < mw; ++x) {
            const double z = mask_logits->at3(q, y, x);
            const double yv = m.at2(y, x);
            const double u = (1.0 - 2.0 * yv) * z;
            const double s = sigmoid_value(u);
            focal += (yv == 1.0 ? 0.25 : 0.75) * s * s * softplus_value(u);
            const double p = sigmoid_value(z);
            inter += p * yv;
            psum += p;
            tsum += yv;
            fg += yv;
          }
        entry += w.focal * focal / std::max(1.0, fg);
        entry += w.dice * (1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0));
      }
      cost.at2(q, j) = entry;
    }
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Composite loss

struct LossTerm {
  std::string name;
  double value;
};

struct LossBreakdown {
  Var total;
  std::vector<LossTerm> terms;
};

using LayerMatches = std::vector<MatchResult>;

namespace detail {

inline Var average(Tape& t, const std::vector<Var>& vals) {
  Var s = vals[0];
  for (size_t i = 1; i < vals.size(); ++i) s = add(s, vals[i]);
  return scale(s, 1.0 / static_cast<double>(vals.size()));
}

// Class term: focal against one-hot rows (matched queries toward their class,
// the rest toward no-object), channel sums averaged over the query set.
inline Var classification_term(Tape& t, Var cls_logits, const MatchResult& match,
                               const GroundTruth& gt, int channels) {
  const int k = t.val(cls_logits).shape[0];
  Tensor onehot({k, channels});
  for (int q = 0; q < k; ++q) onehot.at2(q, channels - 1) = 1.0;
  for (const auto& [q, j] : match.pairs) {
    onehot.at2(q, channels - 1) = 0.0;
    onehot.at2(q, gt.classes[static_cast<size_t>(j)]) = 1.0;
  }
  Var per = focal_elementwise(t, cls_logits, onehot, 0.25, 2.0);
  return mean_all(sum_axis(per, 1));
}

}  // namespace detail

// Weighted losses for one prediction set against the matching given in
// `match`; appends weighted term values under `prefix` and returns their sum.
inline Var layer_loss(Tape& t, Var cls_logits, Var boxes, Var mask_logits,
                      const MatchResult& match, const GroundTruth& gt, const LossWeights& w,
                      bool with_masks, const std::string& prefix,
                      std::vector<LossTerm>& terms) {
  const int channels = t.val(cls_logits).shape[1];
  Var total = scale(detail::classification_term(t, cls_logits, match, gt, channels), w.cls);
  terms.push_back({prefix + ".cls", t.val(total).data[0]});

  if (!match.pairs.empty()) {
    std::vector<int> qs, js;
    for (const auto& [q, j] : match.pairs) {
      qs.push_back(q);
      js.push_back(j);
    }
    const int n = static_cast<int>(qs.size());
    Var picked = gather(boxes, 0, qs);
    Tensor tgt({n, 4});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) tgt.at2(i, c) = gt.boxes.at2(js[static_cast<size_t>(i)], c);

    Var l1 = scale(mean_all(sum_axis(abs_op(sub(picked, t.constant(tgt))), 1)), w.l1);
    terms.push_back({prefix + ".l1", t.val(l1).data[0]});
    total = add(total, l1);

    Var giou_term =
        scale(mean_all(add_const(neg(pairwise_giou(t, picked, tgt)), 1.0)), w.giou);
    terms.push_back({prefix + ".giou", t.val(giou_term).data[0]});
    total = add(total, giou_term);

    if (with_masks) {
      const Tensor& mv = t.val(mask_logits);
      const int mh = mv.shape[1], mw = mv.shape[2];
      Var picked_masks = gather(mask_logits, 0, qs);
      Tensor small({n, mh, mw});
      Tensor norms({n});
      for (int i = 0; i < n; ++i) {
        Tensor full({gt.masks.shape[1], gt.masks.shape[2]});
        std::copy_n(&gt.masks.data[static_cast<size_t>(js[static_cast<size_t>(i)]) *
                                   full.data.size()],
                    full.data.size(), full.data.begin());
        Tensor ds = nearest_mask(full, mh, mw);
        std::copy_n(ds.data.begin(), ds.data.size(),
                    small.data.begin() + static_cast<size_t>(i) * ds.data.size());
        double fg = 0.0;
        for (double v : ds.data) fg += v;
        norms.data[static_cast<size_t>(i)] = 1.0 / std::max(1.0, fg);
      }
      // focal summed per instance and scaled by its foreground size
      Var per = focal_elementwise(t, picked_masks, small, 0.25, 2.0);
      Var inst = reshape(sum_axis(reshape(per, {n, mh * mw}), 1), {n});
      Var focal = scale(mean_all(mul(inst, t.constant(norms))), w.focal);
      terms.push_back({prefix + ".focal", t.val(focal).data[0]});
      total = add(total, focal);

      std::vector<Var> dices;
      for (int i = 0; i < n; ++i) {
        Tensor one({mh, mw});
        std::copy_n(small.data.begin() + static_cast<size_t>(i) * one.data.size(),
                    one.data.size(), one.data.begin());
        dices.push_back(dice_loss(t, reshape(slice(picked_masks, 0, i, 1), {mh, mw}), one));
      }
      Var dice = scale(detail::average(t, dices), w.dice);
      terms.push_back({prefix + ".dice", t.val(dice).data[0]});
      total = add(total, dice);
    }
  }
  return total;
}

// Total training loss over every decoder layer's predictions. Matching runs
// per layer on detached values unless `frozen` replays earlier matches (the
// assignment is discrete, so finite-difference probes must hold it still).
// The term report always satisfies total == sum of terms.
inline LossBreakdown composite_loss(Tape& t, const DetectionOutput& outputs,
                                    const GroundTruth& gt, const LossWeights& w, Task task,
                                    const LayerMatches* frozen = nullptr,
                                    LayerMatches* matches_out = nullptr) {
  if (outputs.layers.empty()) throw Error("composite loss: no prediction layers");
  if (frozen != nullptr && frozen->size() != outputs.layers.size())
    throw Error("composite loss: frozen matches cover " + std::to_string(frozen->size()) +
                " layers, expected " + std::to_string(outputs.layers.size()));
  const bool with_masks = supervises_masks(task);
  if (with_masks && gt.count() > 0 && gt.masks.shape.size() != 3)
    throw Error("composite loss: task supervises masks but ground truth has none");

  LossBreakdown out;
  for (size_t li = 0; li < outputs.layers.size(); ++li) {
    const LayerPrediction& L = outputs.layers[li];
    MatchResult match;
    if (frozen != nullptr) {
      match = (*frozen)[li];
    } else {
      const Tensor* masks = with_masks ? &t.val(L.mask_logits) : nullptr;
      Tensor cost = build_cost_matrix(t.val(L.cls), t.val(L.boxes), masks, gt, w, with_masks);
      match = hungarian_match(cost);
      if (gt.count() == 0)
        for (int q = 0; q < t.val(L.cls).shape[0]; ++q) match.unmatched.push_back(q);
    }
    if (matches_out != nullptr) matches_out->push_back(match);
    Var layer = layer_loss(t, L.cls, L.boxes, L.mask_logits, match, gt, w, with_masks,
                           "l" + std::to_string(li), out.terms);
    out.total = li == 0 ? layer : add(out.total, layer);
  }
  return out;
}

// First-stage supervision: class-agnostic objectness plus box regression on
// the per-texel proposals, matched to ground truth like a one-class layer.
inline LossBreakdown proposal_loss(Tape& t, Var objectness, Var boxes, const GroundTruth& gt,
                                   const LossWeights& w, const MatchResult* frozen = nullptr,
                                   MatchResult* match_out = nullptr) {
  const Tensor& ov = t.val(objectness);
  const int k = ov.shape[0];
  MatchResult match;
  if (frozen != nullptr) {
    match = *frozen;
  } else {
    // objectness as a single-class score: reuse the standard cost terms
    Tensor as_cls({k, 1});
    for (int q = 0; q < k; ++q) as_cls.at2(q, 0) = ov.data[static_cast<size_t>(q)];
    GroundTruth agnostic;
    agnostic.boxes = gt.boxes;
    agnostic.classes.assign(static_cast<size_t>(gt.count()), 0);
    Tensor cost = build_cost_matrix(as_cls, t.val(boxes), nullptr, agnostic, w, false);
    match = hungarian_match(cost);
    if (gt.count() == 0)
      for (int q = 0; q < k; ++q) match.unmatched.push_back(q);
  }
  if (match_out != nullptr) *match_out = match;

  LossBreakdown out;
  Tensor target({k});
  for (const auto& [q, j] : match.pairs) target.data[static_cast<size_t>(q)] = 1.0;
  Var obj = scale(focal_loss(t, objectness, target), w.cls);
  out.terms.push_back({"proposal.obj", t.val(obj).data[0]});
  out.total = obj;

  if (!match.pairs.empty()) {
    std::vector<int> qs, js;
    for (const auto& [q, j] : match.pairs) {
      qs.push_back(q);
      js.push_back(j);
    }
    const int n = static_cast<int>(qs.size());
    Var picked = gather(boxes, 0, qs);
    Tensor tgt({n, 4});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) tgt.at2(i, c) = gt.boxes.at2(js[static_cast<size_t>(i)], c);
    Var l1 = scale(mean_all(sum_axis(abs_op(sub(picked, t.constant(tgt))), 1)), w.l1);
    out.terms.push_back({"proposal.l1", t.val(l1).data[0]});
    out.total = add(out.total, l1);
    Var giou_term =
        scale(mean_all(add_const(neg(pairwise_giou(t, picked, tgt)), 1.0)), w.giou);
    out.terms.push_back({"proposal.giou", t.val(giou_term).data[0]});
    out.total = add(out.total, giou_term);
  }
  return out;
}

}  // namespace simplr
