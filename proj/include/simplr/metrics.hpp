#pragma once

// Evaluation metrics: average precision over boxes or masks with greedy
// confidence-ordered matching and 101-point interpolation, a panoptic
// quality score over matched segments, and the CSV report that carries them.
//
// AP protocol, pinned here because no external evaluation tooling is used:
// predictions are pooled over the dataset per class and sorted by descending
// confidence (ties by image then emission order). Each prediction greedily
// claims the unmatched ground-truth object of its class, in its image, with
// the highest overlap at or above the threshold; success is a true positive,
// anything else a false positive. AP is the mean of the interpolated
// precision max(precision at recall >= r) over the 101 recall points
// r = 0.00, 0.01, ..., 1.00, and the reported value is the mean over classes
// that have ground truth. Per-size variants restrict the ground truth to one
// area bucket; predictions that would have matched an out-of-bucket object
// are ignored rather than counted against precision.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "simplr/objective.hpp"
#include "simplr/tensor.hpp"

namespace simplr {

// ---------------------------------------------------------------------------
// Predictions and overlaps

struct Prediction {
  int cls = 0;
  double score = 0.0;
  Tensor box;   // [4] normalized cxcywh
  Tensor mask;  // [H,W] binary at image resolution; empty for box-only runs
};

inline double box_iou(const Tensor& a, const Tensor& b) {
  if (a.shape != std::vector<int>{4} || b.shape != std::vector<int>{4})
    throw Error("box_iou: boxes must be [4], got " + shape_str(a.shape) + " and " +
                shape_str(b.shape));
  double ca[4], cb[4];
  cxcywh_to_corners(a.data.data(), ca);
  cxcywh_to_corners(b.data.data(), cb);
  const double iw = std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]);
  const double ih = std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = (ca[2] - ca[0]) * (ca[3] - ca[1]) + (cb[2] - cb[0]) * (cb[3] - cb[1]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double mask_iou(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b) || a.rank() != 2)
    throw Error("mask_iou: masks must share one [H,W] shape, got " + shape_str(a.shape) +
                " and " + shape_str(b.shape));
  double inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0.0, pb = b.data[i] != 0.0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni > 0.0 ? inter / uni : 0.0;
}

// Converts one image's raw head outputs into scored predictions, one per
// query. The score is the sigmoid of the strongest real-class logit (the
// trailing no-object channel only gates panoptic merging). Mask logits, when
// given, are thresholded at probability 0.5 and carried to the image extents
// by nearest neighbor so they compare against ground truth directly.
inline std::vector<Prediction> predictions_from_logits(const Tensor& cls_logits,
                                                       const Tensor& boxes,
                                                       const Tensor* mask_logits, int image_h,
                                                       int image_w, double score_floor = 0.0) {
  if (cls_logits.rank() != 2 || cls_logits.shape[1] < 2)
    throw Error("predictions_from_logits: class logits must be [k,C+1], got " +
                shape_str(cls_logits.shape));
  const int k = cls_logits.shape[0];
  const int classes = cls_logits.shape[1] - 1;
  if (boxes.shape != std::vector<int>{k, 4})
    throw Error("predictions_from_logits: boxes " + shape_str(boxes.shape) + " do not match " +
                std::to_string(k) + " queries");
  if (mask_logits &&
      (mask_logits->rank() != 3 || mask_logits->shape[0] != k || image_h < 1 || image_w < 1))
    throw Error("predictions_from_logits: mask logits must be [k,h,w] with positive image "
                "extents");

  std::vector<Prediction> out;
  out.reserve(static_cast<size_t>(k));
  for (int q = 0; q < k; ++q) {
    Prediction p;
    double best = cls_logits.at2(q, 0);
    for (int c = 1; c < classes; ++c)
      if (cls_logits.at2(q, c) > best) {
        best = cls_logits.at2(q, c);
        p.cls = c;
      }
    p.score = sigmoid_value(best);
    if (p.score < score_floor) continue;
    p.box = Tensor({4});
    for (int c = 0; c < 4; ++c) p.box.data[static_cast<size_t>(c)] = boxes.at2(q, c);
    if (mask_logits) {
      const int h = mask_logits->shape[1], w = mask_logits->shape[2];
      p.mask = Tensor({image_h, image_w});
      for (int y = 0; y < image_h; ++y) {
        const int sy = std::min(static_cast<int>((y + 0.5) * h / image_h), h - 1);
        for (int x = 0; x < image_w; ++x) {
          const int sx = std::min(static_cast<int>((x + 0.5) * w / image_w), w - 1);
          p.mask.at2(y, x) = mask_logits->at3(q, sy, sx) > 0.0 ? 1.0 : 0.0;
        }
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Average precision

// Ground-truth area buckets, a texel-scaled analog of the usual S/M/L split:
// small < 64 texels, medium < 256, large the rest. Areas come from the mask
// when present, otherwise from the box against the given image extents.
enum class SizeBucket { all, small, medium, large };

inline const char* size_bucket_name(SizeBucket b) {
  switch (b) {
    case SizeBucket::all: return "all";
    case SizeBucket::small: return "small";
    case SizeBucket::medium: return "medium";
    case SizeBucket::large: return "large";
  }
  throw Error("size_bucket_name: bad bucket");
}

namespace detail {

inline double truth_area(const GroundTruth& gt, int i, int image_h, int image_w) {
  if (gt.masks.rank() == 3) {
    const int hw = gt.masks.shape[1] * gt.masks.shape[2];
    double a = 0;
    for (int j = 0; j < hw; ++j) a += gt.masks.data[static_cast<size_t>(i) * hw + j];
    return a;
  }
  return gt.boxes.at2(i, 2) * image_w * gt.boxes.at2(i, 3) * image_h;
}

inline bool in_bucket(double area, SizeBucket b) {
  switch (b) {
    case SizeBucket::all: return true;
    case SizeBucket::small: return area < 64.0;
    case SizeBucket::medium: return area >= 64.0 && area < 256.0;
    case SizeBucket::large: return area >= 256.0;
  }
  return false;
}

// One pooled prediction, remembering where it came from so ties sort the
// same way on every run.
struct PooledPrediction {
  double score;
  int image;
  int index;
  const Prediction* pred;
};

}  // namespace detail

// AP for one class at one overlap threshold, or -1 when no ground truth of
// that class is in the bucket. `use_masks` switches the overlap measure.
inline double average_precision_for_class(const std::vector<std::vector<Prediction>>& predictions,
                                          const std::vector<GroundTruth>& truths, int cls,
                                          double iou_threshold, bool use_masks,
                                          SizeBucket bucket = SizeBucket::all, int image_h = 0,
                                          int image_w = 0) {
  if (predictions.size() != truths.size())
    throw Error("average_precision: " + std::to_string(predictions.size()) +
                " prediction sets for " + std::to_string(truths.size()) + " images");
  if (iou_threshold <= 0.0 || iou_threshold > 1.0)
    throw Error("average_precision: threshold must be in (0,1], got " +
                std::to_string(iou_threshold));

  std::vector<detail::PooledPrediction> pool;
  for (size_t im = 0; im < predictions.size(); ++im)
    for (size_t j = 0; j < predictions[im].size(); ++j)
      if (predictions[im][j].cls == cls)
        pool.push_back({predictions[im][j].score, static_cast<int>(im), static_cast<int>(j),
                        &predictions[im][j]});
  std::sort(pool.begin(), pool.end(),
            [](const detail::PooledPrediction& a, const detail::PooledPrediction& b) {
              if (a.score != b.score) return a.score > b.score;
              if (a.image != b.image) return a.image < b.image;
              return a.index < b.index;
            });

  int total_gt = 0;
  std::vector<std::vector<char>> counted(truths.size());
  std::vector<std::vector<char>> claimed(truths.size());
  for (size_t im = 0; im < truths.size(); ++im) {
    counted[im].assign(static_cast<size_t>(truths[im].count()), 0);
    claimed[im].assign(static_cast<size_t>(truths[im].count()), 0);
    for (int i = 0; i < truths[im].count(); ++i)
      if (truths[im].classes[static_cast<size_t>(i)] == cls &&
          detail::in_bucket(detail::truth_area(truths[im], i, image_h, image_w), bucket)) {
        counted[im][static_cast<size_t>(i)] = 1;
        ++total_gt;
      }
  }
  if (total_gt == 0) return -1.0;

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const detail::PooledPrediction& p : pool) {
    const GroundTruth& gt = truths[static_cast<size_t>(p.image)];
    const size_t im = static_cast<size_t>(p.image);
    // best unmatched object in the bucket, and best outside it; a prediction
    // matches in-bucket if it can, falls back to an out-of-bucket object to
    // be ignored, and is a false positive only when neither clears the bar
    double best_in = 0.0, best_out = 0.0;
    int arg_in = -1, arg_out = -1;
    for (int i = 0; i < gt.count(); ++i) {
      if (gt.classes[static_cast<size_t>(i)] != cls || claimed[im][static_cast<size_t>(i)])
        continue;
      double ov;
      if (use_masks) {
        if (p.pred->mask.rank() != 2)
          throw Error("average_precision: prediction without a mask in a mask evaluation");
        Tensor gmask({gt.masks.shape[1], gt.masks.shape[2]});
        const size_t hw = gmask.data.size();
        std::copy_n(gt.masks.data.begin() + static_cast<size_t>(i) * hw, hw, gmask.data.begin());
        ov = mask_iou(p.pred->mask, gmask);
      } else {
        Tensor gbox({4});
        for (int c = 0; c < 4; ++c) gbox.data[static_cast<size_t>(c)] = gt.boxes.at2(i, c);
        ov = box_iou(p.pred->box, gbox);
      }
      if (counted[im][static_cast<size_t>(i)]) {
        if (ov > best_in) {
          best_in = ov;
          arg_in = i;
        }
      } else if (ov > best_out) {
        best_out = ov;
        arg_out = i;
      }
    }
    if (arg_in >= 0 && best_in >= iou_threshold) {
      claimed[im][static_cast<size_t>(arg_in)] = 1;
      ++tp;
    } else if (arg_out >= 0 && best_out >= iou_threshold) {
      claimed[im][static_cast<size_t>(arg_out)] = 1;
      continue;  // matched outside the bucket: ignored, not a false positive
    } else {
      ++fp;
    }
    precision.push_back(double(tp) / (tp + fp));
    recall.push_back(double(tp) / total_gt);
  }

  // interpolated precision: running max from the high-recall end
  std::vector<double> envelope(precision.size());
  double run = 0.0;
  for (size_t i = precision.size(); i-- > 0;) {
    run = std::max(run, precision[i]);
    envelope[i] = run;
  }
  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double want = r / 100.0;
    double p_at = 0.0;
    for (size_t i = 0; i < recall.size(); ++i)
      if (recall[i] >= want) {
        p_at = envelope[i];
        break;
      }
    ap += p_at;
  }
  return ap / 101.0;
}

// Mean over the classes that have in-bucket ground truth; zero when none do.
inline double mean_average_precision(const std::vector<std::vector<Prediction>>& predictions,
                                     const std::vector<GroundTruth>& truths, double iou_threshold,
                                     bool use_masks, SizeBucket bucket = SizeBucket::all,
                                     int image_h = 0, int image_w = 0) {
  int max_cls = -1;
  for (const GroundTruth& gt : truths)
    for (int c : gt.classes) max_cls = std::max(max_cls, c);
  double sum = 0.0;
  int seen = 0;
  for (int c = 0; c <= max_cls; ++c) {
    const double ap = average_precision_for_class(predictions, truths, c, iou_threshold,
                                                  use_masks, bucket, image_h, image_w);
    if (ap >= 0.0) {
      sum += ap;
      ++seen;
    }
  }
  return seen > 0 ? sum / seen : 0.0;
}

// ---------------------------------------------------------------------------
// Panoptic quality

struct PanopticScore {
  double pq = 0.0;
  double pq_things = 0.0;
  double pq_stuff = 0.0;
};

// Standard matched-segment formula: predictions and ground truth pair up
// when same-class IoU exceeds 0.5 (segments within one side never overlap,
// so matches are unique), and each class scores
// sum(matched IoU) / (TP + FP/2 + FN/2). Classes below `thing_classes` are
// things, the rest stuff; a class absent from both sides is left out of the
// averages.
inline PanopticScore panoptic_quality(const std::vector<std::vector<Prediction>>& predictions,
                                      const std::vector<GroundTruth>& truths, int thing_classes) {
  if (predictions.size() != truths.size())
    throw Error("panoptic_quality: " + std::to_string(predictions.size()) +
                " prediction sets for " + std::to_string(truths.size()) + " images");

  struct ClassTally {
    double iou_sum = 0.0;
    int tp = 0, fp = 0, fn = 0;
  };
  std::map<int, ClassTally> tally;

  for (size_t im = 0; im < truths.size(); ++im) {
    const GroundTruth& gt = truths[im];
    std::vector<char> gt_matched(static_cast<size_t>(gt.count()), 0);
    for (const Prediction& p : predictions[im]) {
      if (p.mask.rank() != 2)
        throw Error("panoptic_quality: every prediction needs a mask");
      bool matched = false;
      for (int i = 0; i < gt.count() && !matched; ++i) {
        if (gt.classes[static_cast<size_t>(i)] != p.cls || gt_matched[static_cast<size_t>(i)])
          continue;
        Tensor gmask({gt.masks.shape[1], gt.masks.shape[2]});
        const size_t hw = gmask.data.size();
        std::copy_n(gt.masks.data.begin() + static_cast<size_t>(i) * hw, hw, gmask.data.begin());
        const double iou = mask_iou(p.mask, gmask);
        if (iou > 0.5) {
          gt_matched[static_cast<size_t>(i)] = 1;
          ClassTally& t = tally[p.cls];
          t.iou_sum += iou;
          ++t.tp;
          matched = true;
        }
      }
      if (!matched) ++tally[p.cls].fp;
    }
    for (int i = 0; i < gt.count(); ++i)
      if (!gt_matched[static_cast<size_t>(i)]) ++tally[gt.classes[static_cast<size_t>(i)]].fn;
  }

  double all = 0, things = 0, stuff = 0;
  int n_all = 0, n_things = 0, n_stuff = 0;
  for (const auto& [cls, t] : tally) {
    if (t.tp + t.fp + t.fn == 0) continue;
    const double pq_c = t.iou_sum / (t.tp + 0.5 * t.fp + 0.5 * t.fn);
    all += pq_c;
    ++n_all;
    (cls < thing_classes ? things : stuff) += pq_c;
    ++(cls < thing_classes ? n_things : n_stuff);
  }
  PanopticScore s;
  s.pq = n_all ? all / n_all : 0.0;
  s.pq_things = n_things ? things / n_things : 0.0;
  s.pq_stuff = n_stuff ? stuff / n_stuff : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// Metric report

struct MetricReport {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double mask_ap50 = 0.0;
  double pq = 0.0;
  double pq_things = 0.0;
  double pq_stuff = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  std::vector<double> loss_curve;  // filled by training runs, empty from eval
};

namespace detail {

inline const std::vector<std::pair<const char*, double MetricReport::*>>& metric_fields() {
  static const std::vector<std::pair<const char*, double MetricReport::*>> fields = {
      {"ap50", &MetricReport::ap50},       {"ap75", &MetricReport::ap75},
      {"mask_ap50", &MetricReport::mask_ap50}, {"pq", &MetricReport::pq},
      {"pq_things", &MetricReport::pq_things}, {"pq_stuff", &MetricReport::pq_stuff},
      {"ap_small", &MetricReport::ap_small},   {"ap_medium", &MetricReport::ap_medium},
      {"ap_large", &MetricReport::ap_large},
  };
  return fields;
}

inline std::string six_places(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

// Two-column CSV, six decimal places; loss-curve entries follow the scalar
// metrics as loss.<step> rows.
inline std::string metric_report_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "metric,value\n";
  for (const auto& [name, member] : detail::metric_fields())
    os << name << "," << detail::six_places(r.*member) << "\n";
  for (size_t i = 0; i < r.loss_curve.size(); ++i)
    os << "loss." << i << "," << detail::six_places(r.loss_curve[i]) << "\n";
  return os.str();
}

inline MetricReport parse_metric_report_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "metric,value")
    throw Error("metric report: missing 'metric,value' header");
  MetricReport r;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw Error("metric report: malformed row '" + line + "'");
    const std::string key = line.substr(0, comma);
    const std::string val = line.substr(comma + 1);
    size_t used = 0;
    double v = 0;
    try {
      v = std::stod(val, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != val.size() || val.empty())
      throw Error("metric report: bad value '" + val + "' for " + key);
    bool known = false;
    for (const auto& [name, member] : detail::metric_fields())
      if (key == name) {
        r.*member = v;
        known = true;
        break;
      }
    if (!known) {
      if (key.compare(0, 5, "loss.") == 0 &&
          key.substr(5) == std::to_string(r.loss_curve.size())) {
        r.loss_curve.push_back(v);
      } else {
        throw Error("metric report: unknown metric '" + key + "'");
      }
    }
  }
  return r;
}

}  // namespace simplr
