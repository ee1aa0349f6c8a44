#include "pimsm/engine/gradcheck.hpp"

#include "pimsm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace pimsm::engine {
namespace {

double evaluate(const Objective& f, const std::vector<Matrix*>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Matrix* p : params) leaves.push_back(tape.constant(*p));
  return f(tape, leaves).scalar();
}

}  // namespace

GradCheckReport grad_check(const Objective& f, const std::vector<Matrix*>& params,
                           const GradCheckOptions& opts) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Matrix* p : params) leaves.push_back(tape.leaf(*p));
  const Var loss = f(tape, leaves);
  tape.backward(loss);

  // flat coordinate index -> (tensor, offset)
  std::vector<std::size_t> offsets{0};
  for (const Matrix* p : params) offsets.push_back(offsets.back() + static_cast<std::size_t>(p->size()));
  const std::size_t total = offsets.back();
  if (total == 0) throw ParameterError("grad_check: nothing to probe");

  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opts.samples < total) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.samples);
  }

  GradCheckReport report;
  double sum_err = 0.0;
  for (const std::size_t flat : coords) {
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t ti = static_cast<std::size_t>(it - offsets.begin()) - 1;
    const Index local = static_cast<Index>(flat - offsets[ti]);
    Matrix& m = *params[ti];
    // column-major, matching Eigen's default storage
    const Index row = local % m.rows();
    const Index col = local / m.rows();

    const double orig = m(row, col);
    m(row, col) = orig + opts.step;
    const double up = evaluate(f, params);
    m(row, col) = orig - opts.step;
    const double down = evaluate(f, params);
    m(row, col) = orig;

    GradProbe probe;
    probe.tensor = ti;
    probe.row = row;
    probe.col = col;
    probe.analytic = leaves[ti].grad()(row, col);
    probe.numeric = (up - down) / (2.0 * opts.step);
    const double denom = std::max({std::abs(probe.analytic), std::abs(probe.numeric), opts.floor});
    probe.rel_error = std::abs(probe.analytic - probe.numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, probe.rel_error);
    sum_err += probe.rel_error;
    report.probes.push_back(probe);
  }
  report.mean_rel_error = sum_err / static_cast<double>(report.probes.size());
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

}  // namespace pimsm::engine
