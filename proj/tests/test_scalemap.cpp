#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pimsm/engine/gradcheck.hpp"
#include "pimsm/errors.hpp"
#include "pimsm/scalemap.hpp"

#include <cmath>
#include <random>

using namespace pimsm;
using namespace pimsm::scalemap;
using spectral::PiecewiseFit;

namespace {

PiecewiseFit make_fit(std::vector<double> knees, std::vector<double> betas, double f_min = 0.001, double f_max = 0.5) {
  PiecewiseFit f;
  f.K = static_cast<int>(betas.size());
  f.knees = std::move(knees);
  f.betas = std::move(betas);
  f.log_amplitudes.assign(f.betas.size(), 0.0);
  f.f_min = f_min;
  f.f_max = f_max;
  return f;
}

PiecewiseFit random_fit(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0), b(0.3, 5.0);
  const double lo = std::log(0.001), hi = std::log(0.5);
  double k1 = lo + (hi - lo) * u(rng), k2 = lo + (hi - lo) * u(rng);
  if (k1 > k2) std::swap(k1, k2);
  if (k2 - k1 < 1e-6) k2 = k1 + 1e-3;
  if (k1 <= lo) k1 = lo + 1e-3;
  if (k2 >= hi) k2 = hi - 1e-4;
  return make_fit({std::exp(k1), std::exp(k2)}, {b(rng), b(rng), b(rng)});
}

}  // namespace

TEST_CASE("band coordinates") {
  const auto f = make_fit({0.01, 0.1}, {1.0, 2.0, 1.0});
  std::vector<double> c{0.001, std::sqrt(0.01 * 0.1), 0.3};
  const auto bc = band_coordinates(f, c);
  CHECK(bc.t[0] == doctest::Approx(0.0).scale(1.0));
  CHECK(bc.t[1] == doctest::Approx(0.5));
  const auto whole = make_fit({}, {1.0});
  const std::vector<double> mid{std::sqrt(0.001 * 0.5)};
  const auto w = band_coordinates(whole, mid);
  CHECK(w.p[0] == doctest::Approx(0.5));
  CHECK(w.t[0] == doctest::Approx(0.5));
  CHECK(w.g[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(band_coordinates(f, mid), ParameterError);
}

TEST_CASE("map_delta mixing and endpoints") {
  BandCoordinates bc{{0.2, 0.6, 1.0}, {0.9, 0.1, 1.0}, {0.0, 0.5, 1.0}};
  const auto d0 = map_delta(bc, 0.0, 1.0, 3.0, MapMode::PerBand);
  CHECK(d0[0] == doctest::Approx(1.0 + 2.0 * 0.2));
  CHECK(d0[2] == doctest::Approx(3.0));
  const auto d3 = map_delta(bc, 0.3, 1.0, 3.0, MapMode::PerBand);
  CHECK(d3[1] == doctest::Approx(1.0 + 2.0 * (0.7 * 0.6 + 0.3 * 0.1)));
  const auto g = map_delta(bc, 0.3, 1.0, 3.0, MapMode::Global);
  CHECK(g[0] == doctest::Approx(1.0));
  CHECK(g[2] == doctest::Approx(3.0));
  CHECK_THROWS_AS(map_delta(bc, 1.5, 1.0, 3.0, MapMode::PerBand), ParameterError);
  CHECK_THROWS_AS(map_delta(bc, -0.1, 1.0, 3.0, MapMode::PerBand), ParameterError);
}

TEST_CASE("global and per-band coincide at geometric midpoints with w = 0 or a centred band") {
  const auto f = make_fit({0.01, 0.1}, {1.0, 2.0, 1.0});
  std::vector<double> c;
  for (const auto& [lo, hi] : fit_bands(f)) c.push_back(std::sqrt(lo * hi));
  const auto bc = band_coordinates(f, c);
  const auto a = map_delta(bc, 0.0, 0.1, 10.0, MapMode::PerBand);
  const auto b = map_delta(bc, 0.0, 0.1, 10.0, MapMode::Global);
  for (std::size_t k = 0; k < 3; ++k) CHECK(a[k] == doctest::Approx(b[k]));
  const auto whole = make_fit({}, {1.0});
  const std::vector<double> mid{std::sqrt(0.001 * 0.5)};
  const auto wc = band_coordinates(whole, mid);
  for (const double w : {0.0, 0.3, 0.7, 1.0})
    CHECK(map_delta(wc, w, 0.1, 10.0, MapMode::PerBand)[0] == doctest::Approx(map_delta(wc, w, 0.1, 10.0, MapMode::Global)[0]));
}

TEST_CASE("enforce_order") {
  const std::vector<std::pair<double, double>> bands{{0.01, 0.02}, {0.02, 0.1}, {0.1, 0.5}};
  const std::vector<double> cent{0.015, 0.05, 0.2};
  const std::vector<double> desc{0.9, 0.5, 0.2};
  auto s = enforce_order(desc, cent, bands, 0.1, 10.0);
  CHECK(s.deltas == desc);
  CHECK(s.band_of_scale == std::vector<std::size_t>{0, 1, 2});
  const std::vector<double> mixed{0.2, 0.9, 0.5};
  s = enforce_order(mixed, cent, bands, 0.1, 10.0);
  CHECK(s.deltas == desc);
  CHECK(s.band_of_scale == std::vector<std::size_t>{1, 2, 0});
  CHECK(s.centroids[0] == 0.05);
  const std::vector<double> equal{0.5, 0.5, 0.5};
  s = enforce_order(equal, cent, bands, 0.1, 10.0);
  CHECK(s.band_of_scale == std::vector<std::size_t>{0, 1, 2});
  const std::vector<double> wide{20.0, 0.01, 1.0};
  s = enforce_order(wide, cent, bands, 0.1, 10.0);
  CHECK(s.deltas == std::vector<double>{10.0, 1.0, 0.1});
}

TEST_CASE("anchor loss and effective timescale") {
  const std::vector<double> ones{1.0, 1.0, 1.0};
  CHECK(delta_anchor_loss(ones, 1.0, 0.1) == 0.0);
  const std::vector<double> e{std::exp(1.0) * 2.0};
  CHECK(delta_anchor_loss(e, 2.0, 1.0) == doctest::Approx(1.0));
  const std::vector<double> bad{0.0};
  CHECK_THROWS_AS(delta_anchor_loss(bad, 1.0, 1.0), ParameterError);
  CHECK(effective_timescale(1.0, -1.0) == 1.0);
  CHECK(effective_timescale(2.0, -0.5) == 4.0);
  CHECK(effective_timescale(0.72, -1.0 / 7.2) == doctest::Approx(5.184));
  CHECK_THROWS_AS(effective_timescale(1.0, 0.0), ParameterError);
}

TEST_CASE("assignments satisfy their invariants on random fits") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> w(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    MapOptions opts;
    opts.w = w(rng);
    opts.mode = i % 2 == 0 ? MapMode::PerBand : MapMode::Global;
    const auto s = assign_scales(random_fit(rng), opts, 0.72);
    CHECK_NOTHROW(s.validate());
  }
}

TEST_CASE("raising a centroid never lowers its rank") {
  const auto f = make_fit({0.01, 0.1}, {1.0, 2.0, 1.0});
  const auto bands = fit_bands(f);
  for (const MapMode mode : {MapMode::PerBand, MapMode::Global}) {
    std::vector<double> c = band_centroids(f);
    std::size_t prev_rank = 3;
    for (double frac = 0.01; frac < 1.0; frac += 0.05) {
      c[1] = std::exp(std::log(bands[1].first) + frac * std::log(bands[1].second / bands[1].first));
      const auto d = map_delta(band_coordinates(f, c), 0.3, 0.1, 10.0, mode);
      const auto s = enforce_order(d, c, bands, 0.1, 10.0);
      std::size_t rank = 0;
      while (s.band_of_scale[rank] != 1) ++rank;
      CHECK(rank <= prev_rank);
      prev_rank = rank;
    }
  }
}

TEST_CASE("tape mapping agrees with the plain pipeline and is differentiable") {
  std::mt19937_64 rng(9);
  for (const MapMode mode : {MapMode::PerBand, MapMode::Global}) {
    std::vector<PiecewiseFit> fits;
    for (int i = 0; i < 5; ++i) fits.push_back(random_fit(rng));
    Matrix lk(5, 2), bt(5, 3);
    for (int i = 0; i < 5; ++i) {
      for (int k = 0; k < 2; ++k) lk(i, k) = std::log(fits[static_cast<std::size_t>(i)].knees[static_cast<std::size_t>(k)]);
      for (int k = 0; k < 3; ++k) bt(i, k) = fits[static_cast<std::size_t>(i)].betas[static_cast<std::size_t>(k)];
    }
    MapOptions opts;
    opts.mode = mode;
    engine::Tape t;
    const auto d = map_delta_tape(t.leaf(lk), t.leaf(bt), 0.001, 0.5, opts, 1.0);
    for (int i = 0; i < 5; ++i) {
      const auto s = assign_scales(fits[static_cast<std::size_t>(i)], opts, 1.0);
      for (int k = 0; k < 3; ++k) CHECK(d.value()(i, k) == doctest::Approx(s.deltas[static_cast<std::size_t>(k)]).epsilon(1e-12));
    }
    engine::GradCheckOptions gopts;
    const Matrix wts = Matrix::Random(5, 3);
    const auto report = engine::grad_check(
        [&](engine::Tape& tp, const std::vector<engine::Var>& v) {
          const auto out = map_delta_tape(v[0], v[1], 0.001, 0.5, opts, 1.0);
          return engine::sum(out * tp.constant(wts)) +
                 delta_anchor_loss(out, 1.0, 0.1);
        },
        {&lk, &bt}, gopts);
    CHECK(report.passed);
  }
}
