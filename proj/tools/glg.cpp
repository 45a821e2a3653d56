// glg — command-line front end for the Gaussian-log-Gaussian wavelet tree
// library: simulation, fitting, denoising, edge detection, PSNR, and subband
// histograms.  All randomness flows from explicit --seed flags.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "glg/glg.hpp"

namespace {

const std::map<std::string, glg::Filter> kFilterNames{
    {"haar", glg::Filter::haar},
    {"daub4", glg::Filter::daub4},
};

const std::map<std::string, glg::Direction> kDirectionNames{
    {"horizontal", glg::Direction::horizontal},
    {"vertical", glg::Direction::vertical},
    {"diagonal", glg::Direction::diagonal},
};

// Quadrature order precedence: explicit flag, then GLG_QUAD_ORDER, then 30.
int resolve_quad_order(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("GLG_QUAD_ORDER")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1 || v > 200)
      throw std::runtime_error("GLG_QUAD_ORDER must be an integer in [1, 200], got '" +
                               std::string(env) + "'");
    return static_cast<int>(v);
  }
  return 30;
}

struct FitFlags {
  int quad_order = 0;  // 0 = unset; falls back to GLG_QUAD_ORDER, then 30
  double tol = 1e-6;
  int max_iter = 200;
  int threads = 0;  // 0 = all cores
};

void add_fit_flags(CLI::App* cmd, FitFlags& f) {
  cmd->add_option("--quad-order", f.quad_order,
                  "Gauss-Hermite order (default: GLG_QUAD_ORDER env var, else 30)")
      ->check(CLI::Range(1, 200));
  cmd->add_option("--tol", f.tol, "EM relative convergence tolerance")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--max-iter", f.max_iter, "EM iteration cap")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--threads", f.threads, "worker threads (0 = all cores)")
      ->capture_default_str();
}

glg::FitConfig to_config(const FitFlags& f) {
  glg::FitConfig cfg;
  cfg.quad_order = resolve_quad_order(f.quad_order);
  cfg.tol = f.tol;
  cfg.max_iter = f.max_iter;
  cfg.threads = f.threads;
  return cfg;
}

glg::ParamFile to_param_file(const glg::FitResult& fit, int quad_order,
                             std::optional<std::uint64_t> seed) {
  glg::ParamFile pf;
  pf.kind = glg::ParamFile::Kind::tied;
  pf.levels = fit.params.levels;
  pf.tied = fit.params;
  pf.meta.quad_order = quad_order;
  for (const glg::EmTrace& stage : fit.stages) pf.meta.iterations.push_back(stage.iterations);
  pf.meta.fallback_sigma = fit.sigma_fallback;
  pf.meta.fallback_beta = fit.beta_fallback;
  pf.meta.fallback_kappa = fit.kappa_fallback;
  pf.meta.seed = seed;
  return pf;
}

std::string image_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

std::vector<int> all_levels(int levels) {
  std::vector<int> mask(static_cast<std::size_t>(levels));
  for (int i = 0; i < levels; ++i) mask[static_cast<std::size_t>(i)] = i + 1;
  return mask;
}

// ---------------------------------------------------------------------------

struct SimulateFlags {
  std::string params_path, out_forest, out_states;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  int children = 4;
  glg::Direction direction = glg::Direction::horizontal;
  int threads = 0;
};

void run_simulate(const SimulateFlags& f) {
  const glg::ParamFile pf = glg::read_param_file(f.params_path);
  const glg::GlgParams params = pf.kind == glg::ParamFile::Kind::tied
                                    ? pf.tied
                                    : glg::to_tied(pf.homogeneous, pf.levels);
  const glg::ForestTopology topo = glg::ForestTopology::make(pf.levels, f.children);
  auto [states, forest] = glg::simulate_forest(params, topo, f.k, f.seed, f.threads);
  forest.direction = f.direction;
  glg::write_forest_file(f.out_forest, forest);
  glg::write_states_file(f.out_states, states);
  std::printf("simulated %zu trees of %zu nodes (seed %" PRIu64 ")\n", forest.tree_count,
              topo.nodes(), f.seed);
}

struct FitCmdFlags {
  std::string image, forest, out;
  glg::Filter filter = glg::Filter::haar;
  int levels = 0;
  FitFlags fit;
};

void write_fit(const std::string& prefix, const glg::WaveletForest& forest,
               const glg::FitConfig& cfg) {
  const glg::FitResult fit = glg::fit_glg(forest, cfg);
  const glg::ParamFile pf = to_param_file(fit, cfg.quad_order, std::nullopt);
  const std::string path = prefix + "." + glg::to_string(forest.direction) + ".params";
  glg::write_param_file(path, pf);
  std::printf("wrote %s\n", path.c_str());
}

void run_fit(const FitCmdFlags& f) {
  const glg::FitConfig cfg = to_config(f.fit);
  if (!f.forest.empty()) {
    write_fit(f.out, glg::read_forest_file(f.forest), cfg);
    return;
  }
  if (f.levels < 1) throw CLI::ValidationError("--levels", "required with --image");
  glg::ImageGrid img = glg::read_pgm(f.image);
  glg::require_square(img, "fit");
  const glg::WaveletPyramid pyr = glg::dwt2_forward(img, f.filter, f.levels);
  for (glg::Direction d :
       {glg::Direction::horizontal, glg::Direction::vertical, glg::Direction::diagonal})
    write_fit(f.out, glg::extract_forest(pyr, d), cfg);
}

struct DenoiseFlags {
  std::string image, out_image, out_csv, out_noisy;
  double sigma_eps = 0.0;
  glg::Filter filter = glg::Filter::haar;
  int levels = 0;
  std::uint64_t seed = 0;
  FitFlags fit;
};

void run_denoise(const DenoiseFlags& f) {
  glg::ImageGrid clean = glg::read_pgm(f.image);
  glg::require_square(clean, "denoise");
  const glg::NoiseSpec noise{f.sigma_eps};
  noise.validate();
  const glg::ImageGrid noisy = glg::add_noise(clean, noise, f.seed);
  const glg::FitConfig cfg = to_config(f.fit);
  const glg::DenoiseResult result = glg::denoise_image(noisy, f.filter, f.levels, noise, cfg);

  // Scores are computed after clipping to the declared pixel range, matching
  // how 8-bit output would be displayed.
  const glg::ImageGrid ref = clean.clipped_to_range();
  const double psnr_noisy = glg::psnr(ref, noisy.clipped_to_range());
  const double psnr_denoised = glg::psnr(ref, result.image.clipped_to_range());

  if (!f.out_image.empty()) glg::write_pgm(f.out_image, result.image);
  if (!f.out_noisy.empty()) glg::write_pgm(f.out_noisy, noisy);
  if (!f.out_csv.empty()) {
    std::ofstream csv(f.out_csv, std::ios::binary);
    if (!csv) throw glg::io_error("cannot open " + f.out_csv);
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%g,%.6f,%.6f\n", image_stem(f.image).c_str(),
                  f.sigma_eps, psnr_noisy, psnr_denoised);
    csv << "image,sigma_eps,psnr_noisy,psnr_denoised\n" << row;
  }
  std::printf("noisy %.2f dB -> denoised %.2f dB (sigma_eps %g)\n", psnr_noisy, psnr_denoised,
              f.sigma_eps);
}

struct EdgesFlags {
  std::string image, out;
  glg::Filter filter = glg::Filter::haar;
  int levels = 0;
  double p = 0.9;
  std::vector<int> mask;
  FitFlags fit;
};

void run_edges(const EdgesFlags& f) {
  glg::ImageGrid img = glg::read_pgm(f.image);
  glg::require_square(img, "edges");
  const std::vector<int> mask = f.mask.empty() ? all_levels(f.levels) : f.mask;
  const glg::EdgeMap map =
      glg::detect_edges(img, f.filter, f.levels, f.p, mask, to_config(f.fit));
  glg::write_edge_pgm(f.out, map);
  std::printf("%zu edge pixels of %zu\n", map.count(), map.values.size());
}

struct PsnrFlags {
  std::string ref, test;
};

void run_psnr(const PsnrFlags& f) {
  const glg::ImageGrid a = glg::read_pgm(f.ref);
  const glg::ImageGrid b = glg::read_pgm(f.test);
  const double v = glg::psnr(a, b);
  if (std::isinf(v)) std::printf("inf\n");
  else std::printf("%.6f\n", v);
}

struct HistFlags {
  std::string image, out_csv;
  glg::Filter filter = glg::Filter::haar;
  glg::Direction direction = glg::Direction::horizontal;
  int levels = 0;
  int level = 0;  // tree level; 0 = finest
  int bins = 64;
  FitFlags fit;
};

void run_subband_hist(const HistFlags& f) {
  glg::ImageGrid img = glg::read_pgm(f.image);
  glg::require_square(img, "subband-hist");
  const glg::WaveletPyramid pyr = glg::dwt2_forward(img, f.filter, f.levels);
  const glg::WaveletForest forest = glg::extract_forest(pyr, f.direction);
  const glg::FitConfig cfg = to_config(f.fit);
  const glg::FitResult fit = glg::fit_glg(forest, cfg);

  const int lev = f.level == 0 ? f.levels : f.level;
  if (lev < 1 || lev > f.levels)
    throw CLI::ValidationError("--level", "tree level out of range");
  const std::size_t r = static_cast<std::size_t>(lev - 1);

  std::vector<double> coefs;
  const std::size_t start = forest.topology.level_start(lev);
  const std::size_t width = forest.topology.level_width(lev);
  coefs.reserve(forest.tree_count * width);
  for (std::size_t t = 0; t < forest.tree_count; ++t)
    for (std::size_t i = 0; i < width; ++i) coefs.push_back(forest.coef(t, start + i));

  double lo = coefs[0], hi = coefs[0];
  for (double c : coefs) {
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double bin_width = (hi - lo) / f.bins;
  std::vector<std::size_t> counts(static_cast<std::size_t>(f.bins), 0);
  for (double c : coefs) {
    auto b = static_cast<std::size_t>((c - lo) / bin_width);
    if (b >= counts.size()) b = counts.size() - 1;
    ++counts[b];
  }

  const glg::QuadratureRule quad = glg::gauss_hermite(cfg.quad_order);
  const double mu = fit.fitted_moments.mu[r];
  const double s2 = fit.fitted_moments.sigma_sq[r];
  std::ofstream csv(f.out_csv, std::ios::binary);
  if (!csv) throw glg::io_error("cannot open " + f.out_csv);
  csv << "bin_center,count,glg_density\n";
  for (int b = 0; b < f.bins; ++b) {
    const double center = lo + (b + 0.5) * bin_width;
    const double density =
        std::exp(glg::conditional_moments(center, mu, s2, quad).log_marginal);
    char row[128];
    std::snprintf(row, sizeof(row), "%.10g,%zu,%.10g\n", center,
                  counts[static_cast<std::size_t>(b)], density);
    csv << row;
  }
  std::printf("wrote %s (%d bins, level %d %s)\n", f.out_csv.c_str(), f.bins, lev,
              glg::to_string(f.direction));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian-log-Gaussian wavelet tree model tools"};
  app.require_subcommand(1);

  SimulateFlags sim;
  CLI::App* c_sim = app.add_subcommand("simulate", "Simulate wavelet forests from parameters");
  c_sim->add_option("--params", sim.params_path, "parameter file")->required();
  c_sim->add_option("--k", sim.k, "number of trees")->required()->check(CLI::PositiveNumber);
  c_sim->add_option("--seed", sim.seed, "RNG seed")->capture_default_str();
  c_sim->add_option("--children", sim.children, "children per node")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_sim->add_option("--direction", sim.direction, "direction tag for the forest file")
      ->transform(CLI::CheckedTransformer(kDirectionNames, CLI::ignore_case));
  c_sim->add_option("--threads", sim.threads, "worker threads (0 = all cores)");
  c_sim->add_option("--out-forest", sim.out_forest, "output forest file")->required();
  c_sim->add_option("--out-states", sim.out_states, "output states file")->required();
  c_sim->callback([&] { run_simulate(sim); });

  FitCmdFlags fitc;
  CLI::App* c_fit = app.add_subcommand("fit", "Fit GLG parameters to an image or forest");
  CLI::Option* fit_img = c_fit->add_option("--image", fitc.image, "input image (PGM)");
  c_fit->add_option("--forest", fitc.forest, "input forest file")->excludes(fit_img);
  c_fit->add_option("--filter", fitc.filter, "wavelet filter")
      ->transform(CLI::CheckedTransformer(kFilterNames, CLI::ignore_case));
  c_fit->add_option("--levels", fitc.levels, "transform depth")->check(CLI::PositiveNumber);
  c_fit->add_option("--out", fitc.out, "output parameter file prefix")->required();
  add_fit_flags(c_fit, fitc.fit);
  c_fit->callback([&] {
    if (fitc.image.empty() && fitc.forest.empty())
      throw CLI::RequiredError("--image or --forest");
    run_fit(fitc);
  });

  DenoiseFlags den;
  CLI::App* c_den = app.add_subcommand("denoise", "Add Gaussian noise and denoise");
  c_den->add_option("--image", den.image, "clean input image (PGM)")->required();
  c_den->add_option("--sigma-eps", den.sigma_eps, "noise standard deviation")
      ->required()
      ->check(CLI::NonNegativeNumber);
  c_den->add_option("--filter", den.filter, "wavelet filter")
      ->transform(CLI::CheckedTransformer(kFilterNames, CLI::ignore_case));
  c_den->add_option("--levels", den.levels, "transform depth")
      ->required()
      ->check(CLI::PositiveNumber);
  c_den->add_option("--seed", den.seed, "noise RNG seed")->capture_default_str();
  c_den->add_option("--out-image", den.out_image, "denoised output image (PGM)");
  c_den->add_option("--out-noisy", den.out_noisy, "noisy intermediate image (PGM)");
  c_den->add_option("--out-csv", den.out_csv, "PSNR table row (CSV)");
  add_fit_flags(c_den, den.fit);
  c_den->callback([&] { run_denoise(den); });

  EdgesFlags edg;
  CLI::App* c_edg = app.add_subcommand("edges", "Multiresolution edge detection");
  c_edg->add_option("--image", edg.image, "input image (PGM)")->required();
  c_edg->add_option("--filter", edg.filter, "wavelet filter")
      ->transform(CLI::CheckedTransformer(kFilterNames, CLI::ignore_case));
  c_edg->add_option("--levels", edg.levels, "transform depth")
      ->required()
      ->check(CLI::PositiveNumber);
  c_edg->add_option("--p", edg.p, "fractile threshold")->capture_default_str();
  c_edg->add_option("--level-mask", edg.mask,
                    "comma-separated tree levels to keep (default: all)")
      ->delimiter(',');
  c_edg->add_option("--out", edg.out, "edge map output (PGM)")->required();
  add_fit_flags(c_edg, edg.fit);
  c_edg->callback([&] { run_edges(edg); });

  PsnrFlags ps;
  CLI::App* c_ps = app.add_subcommand("psnr", "Peak signal-to-noise ratio between two images");
  c_ps->add_option("--ref", ps.ref, "reference image (PGM)")->required();
  c_ps->add_option("--test", ps.test, "test image (PGM)")->required();
  c_ps->callback([&] { run_psnr(ps); });

  HistFlags hist;
  CLI::App* c_hist =
      app.add_subcommand("subband-hist", "Subband histogram with fitted GLG density");
  c_hist->add_option("--image", hist.image, "input image (PGM)")->required();
  c_hist->add_option("--filter", hist.filter, "wavelet filter")
      ->transform(CLI::CheckedTransformer(kFilterNames, CLI::ignore_case));
  c_hist->add_option("--levels", hist.levels, "transform depth")
      ->required()
      ->check(CLI::PositiveNumber);
  c_hist->add_option("--level", hist.level, "tree level to histogram (default: finest)")
      ->check(CLI::PositiveNumber);
  c_hist->add_option("--direction", hist.direction, "subband direction")
      ->transform(CLI::CheckedTransformer(kDirectionNames, CLI::ignore_case));
  c_hist->add_option("--bins", hist.bins, "histogram bins")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_hist->add_option("--out-csv", hist.out_csv, "output CSV")->required();
  add_fit_flags(c_hist, hist.fit);
  c_hist->callback([&] { run_subband_hist(hist); });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
