#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "simplr/rng.hpp"
#include "simplr/tape.hpp"
#include "simplr/tensor.hpp"

namespace simplr {

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_input;
  int64_t worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t coords_checked = 0;
};

// A differentiable quantity to probe: `host` is perturbed in place (and
// restored), `analytic` holds d(out)/d(host) with matching shape.
struct FdProbe {
  std::string name;
  Tensor* host = nullptr;
  const Tensor* analytic = nullptr;
};

inline double fd_rel_err(double analytic, double numeric) {
  double denom = std::max(1e-8, std::max(std::abs(analytic), std::abs(numeric)));
  return std::abs(analytic - numeric) / denom;
}

// Nudges every parameter away from its initialization point. Zero-initialized
// heads can park piecewise operations (window clamps, relu) exactly on a
// kink, where a central difference reads half the one-sided slope and no
// tolerance makes the comparison meaningful; check gradients at a generic
// point instead. The default step is chosen so that typical distances to the
// nearest kink dwarf finite-difference steps (a much smaller nudge trades an
// exact kink for a near one) while the network stays in a sane range.
inline void perturb_params(ParamStore& ps, Rng& rng, double eps = 0.05) {
  for (Parameter* p : ps.all())
    for (double& v : p->value.data) v += eps * rng.uniform(-1.0, 1.0);
}

// Central-difference comparison of `analytic` gradients against re-evaluation
// of `eval`. Checks every coordinate when a tensor has at most
// `exhaustive_limit` elements, otherwise a seeded sample of `sample_coords`.
inline FdReport fd_compare(const std::function<double()>& eval, std::vector<FdProbe>& probes,
                           double h = 1e-5, int64_t exhaustive_limit = 512,
                           int64_t sample_coords = 32, uint64_t sample_seed = 0x5eedULL) {
  FdReport rep;
  Rng rng(sample_seed);
  for (FdProbe& pr : probes) {
    if (pr.host == nullptr || pr.analytic == nullptr)
      throw Error("fd_compare: probe " + pr.name + " missing host or analytic tensor");
    if (!pr.host->same_shape(*pr.analytic))
      throw Error("fd_compare: probe " + pr.name + " shape mismatch " +
                  shape_str(pr.host->shape) + " vs " + shape_str(pr.analytic->shape));
    const int64_t n = pr.host->numel();
    std::vector<int64_t> coords;
    if (n <= exhaustive_limit) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      Rng local = rng.split(pr.name);
      for (int64_t i = 0; i < sample_coords; ++i)
        coords.push_back(static_cast<int64_t>(local.next_u64() % static_cast<uint64_t>(n)));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (int64_t c : coords) {
      double saved = pr.host->data[static_cast<size_t>(c)];
      pr.host->data[static_cast<size_t>(c)] = saved + h;
      double up = eval();
      pr.host->data[static_cast<size_t>(c)] = saved - h;
      double dn = eval();
      pr.host->data[static_cast<size_t>(c)] = saved;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw Error("fd_compare: non-finite evaluation while probing " + pr.name);
      double numeric = (up - dn) / (2.0 * h);
      double analytic = pr.analytic->data[static_cast<size_t>(c)];
      double rel = fd_rel_err(analytic, numeric);
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = pr.name;
        rep.worst_coord = c;
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

// Convenience wrapper for checking a scalar-valued graph of plain inputs.
// `build` receives a fresh tape and leaf Vars made from `inputs` (in order)
// and returns the scalar output.
inline FdReport finite_difference_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build, std::vector<Tensor>& inputs,
    std::vector<std::string> names = {}, double h = 1e-5, int64_t exhaustive_limit = 512,
    int64_t sample_coords = 32, uint64_t sample_seed = 0x5eedULL) {
  if (names.empty())
    for (size_t i = 0; i < inputs.size(); ++i) names.push_back("input" + std::to_string(i));
  if (names.size() != inputs.size()) throw Error("finite_difference_check: name count mismatch");

  auto forward = [&](std::vector<Tensor>* grads_out) -> double {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (Tensor& t : inputs) leaves.push_back(tape.input(t));
    Var out = build(tape, leaves);
    const Tensor& ov = tape.val(out);
    if (ov.numel() != 1)
      throw Error("finite_difference_check: build must return a scalar, got " + shape_str(ov.shape));
    if (grads_out) {
      tape.backward(out);
      grads_out->clear();
      for (Var v : leaves) grads_out->push_back(tape.grad(v));
    }
    return ov.data[0];
  };

  std::vector<Tensor> analytic;
  forward(&analytic);

  std::vector<FdProbe> probes;
  for (size_t i = 0; i < inputs.size(); ++i)
    probes.push_back(FdProbe{names[i], &inputs[i], &analytic[i]});
  auto eval = [&]() { return forward(nullptr); };
  return fd_compare(eval, probes, h, exhaustive_limit, sample_coords, sample_seed);
}

}  // namespace simplr
