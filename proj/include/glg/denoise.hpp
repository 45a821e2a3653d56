#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "glg/errors.hpp"
#include "glg/estimate.hpp"
#include "glg/grid.hpp"
#include "glg/model.hpp"
#include "glg/rng.hpp"
#include "glg/wavelet.hpp"

namespace glg {

struct NoiseSpec {
  double sigma_eps = 0.0;  // pixel-domain noise standard deviation; the
                           // orthonormal transform keeps it unchanged in the
                           // wavelet domain

  void validate() const {
    if (!(sigma_eps >= 0.0)) throw std::invalid_argument("NoiseSpec: sigma_eps must be >= 0");
  }
};

// Adds i.i.d. N(0, sigma_eps^2) to every pixel.  No clipping: values may
// leave the declared range.
inline ImageGrid add_noise(const ImageGrid& image, const NoiseSpec& noise, std::uint64_t seed) {
  noise.validate();
  ImageGrid out = image;
  RngStream rng(seed, 0);
  for (double& v : out.values.data) v += noise.sigma_eps * rng.normal();
  return out;
}

// E[w | v] for one coefficient: posterior over the state s ~ N(mu, sigma_sq)
// given v ~ N(0, exp(s) + sigma_eps_sq), then the conditional-mean factor
// exp(s)/(exp(s) + sigma_eps_sq) averaged under that posterior and applied to
// v.  The factor lies in (0, 1) for sigma_eps > 0, so the result keeps the
// sign of v and shrinks it.
inline double shrink_coefficient(double v, double mu, double sigma_sq, double sigma_eps_sq,
                                 const QuadratureRule& quad) {
  if (!(sigma_sq > 0.0)) throw std::invalid_argument("shrink_coefficient: sigma_sq must be > 0");
  if (sigma_eps_sq < 0.0)
    throw std::invalid_argument("shrink_coefficient: sigma_eps_sq must be >= 0");
  if (sigma_eps_sq == 0.0) return v;
  if (v == 0.0) return 0.0;

  const int n = quad.order;
  const double scale = std::sqrt(2.0 * sigma_sq);
  double lt[detail::kMaxQuadOrder], fac[detail::kMaxQuadOrder];
  double max_lt = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < n; ++a) {
    const double s = mu + scale * quad.nodes[static_cast<std::size_t>(a)];
    lt[a] = std::log(quad.weights[static_cast<std::size_t>(a)]) +
            detail::coef_log_lik(v, s, sigma_eps_sq);
    // exp(s)/(exp(s)+nv), evaluated on the side that cannot overflow
    fac[a] = (s > 0.0) ? 1.0 / (1.0 + sigma_eps_sq * std::exp(-s))
                       : std::exp(s) / (std::exp(s) + sigma_eps_sq);
    max_lt = std::max(max_lt, lt[a]);
  }
  if (!std::isfinite(max_lt))
    throw numeric_error("shrink_coefficient: vanished posterior (v=" + std::to_string(v) + ")");
  double z = 0.0, num = 0.0;
  for (int a = 0; a < n; ++a) {
    const double p = std::exp(lt[a] - max_lt);
    z += p;
    num += p * fac[a];
  }
  return v * (num / z);
}

struct DenoiseResult {
  ImageGrid image;                 // unclipped reconstruction
  std::array<FitResult, 3> fits;   // horizontal, vertical, diagonal
  std::array<bool, 3> fit_ok{false, false, false};
};

// Denoising pipeline: forward transform, per-direction GLG fit on the noisy
// coefficients (the moment initialization subtracts the noise contribution;
// fit_cfg.noise_aware_em selects whether the EM E-steps also use the
// observed-coefficient likelihood N(0, exp(s) + sigma_eps^2)), shrink every
// detail coefficient with its level's fitted marginal, leave the
// approximation subband untouched, and invert.  A direction whose fit fails
// is passed through unshrunk.
inline DenoiseResult denoise_image(const ImageGrid& noisy, Filter filter, int levels,
                                   const NoiseSpec& noise, const FitConfig& fit_cfg = {}) {
  noise.validate();
  const double nv = noise.sigma_eps * noise.sigma_eps;
  WaveletPyramid pyr = dwt2_forward(noisy, filter, levels);
  const QuadratureRule quad = gauss_hermite(fit_cfg.quad_order);

  DenoiseResult res;
  const std::array<Direction, 3> dirs = {Direction::horizontal, Direction::vertical,
                                         Direction::diagonal};
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    WaveletForest forest = extract_forest(pyr, dirs[d]);
    FitConfig cfg = fit_cfg;
    cfg.noise_var = nv;
    try {
      res.fits[d] = fit_glg(forest, cfg);
      res.fit_ok[d] = true;
    } catch (const std::exception&) {
      res.fit_ok[d] = false;
      continue;  // leave this direction's coefficients as they are
    }
    const LevelMoments& lm = res.fits[d].fitted_moments;
    const ForestTopology& topo = forest.topology;
    const std::size_t n = topo.nodes();
    parallel_blocks(forest.tree_count, 256, fit_cfg.threads,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                      for (std::size_t t = begin; t < end; ++t) {
                        double* w = forest.tree(t);
                        for (std::size_t i = 0; i < n; ++i) {
                          const std::size_t r = static_cast<std::size_t>(topo.level_of[i] - 1);
                          w[i] = shrink_coefficient(w[i], lm.mu[r], lm.sigma_sq[r], nv, quad);
                        }
                      }
                    });
    pyr = insert_forest(forest, pyr, dirs[d]);
  }
  res.image = dwt2_inverse(pyr);
  res.image.declared_range = noisy.declared_range;
  return res;
}

// Peak signal-to-noise ratio in dB: 20 log10(N (max I - min I) / ||I - J||),
// with the max/min taken over the reference pixels and the Frobenius norm of
// the residual.  Identical images return +infinity.
inline double psnr(const ImageGrid& reference, const ImageGrid& test) {
  if (!reference.values.same_shape(test.values))
    throw dimension_error("psnr: images must have equal dimensions");
  if (reference.width() != reference.height())
    throw dimension_error("psnr: images must be square");
  const std::size_t n = reference.values.data.size();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = reference.values.data[i];
    lo = std::min(lo, r);
    hi = std::max(hi, r);
    const double d = r - test.values.data[i];
    ss += d * d;
  }
  if (ss == 0.0) return std::numeric_limits<double>::infinity();
  const double side = static_cast<double>(reference.width());
  return 20.0 * std::log10(side * (hi - lo) / std::sqrt(ss));
}

}  // namespace glg
