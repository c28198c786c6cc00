#include "diffcls/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffcls/error.hpp"

namespace diffcls {

namespace {

void check_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw UsageError(std::string(op) + ": vector lengths differ (" + std::to_string(a) + " vs " +
                     std::to_string(b) + ")");
  }
}

void check_rows(const Tensor& x, std::size_t rows, std::size_t cols, const char* op) {
  if (x.rank() != 2 || x.dim(0) != rows || x.dim(1) != cols) {
    throw UsageError(std::string(op) + ": expected [" + std::to_string(rows) + " x " +
                     std::to_string(cols) + "], got " + shape_string(x.shape()));
  }
}

Vec softmax_vec(std::span<const double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  Vec out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += out[i] = std::exp(x[i] - mx);
  for (double& v : out) v /= total;
  return out;
}

}  // namespace

Vec one_hot(std::size_t label, std::size_t classes) {
  if (label >= classes) throw UsageError("one_hot: label out of range");
  Vec out(classes, 0.0);
  out[label] = 1.0;
  return out;
}

Vec forward_sample(const Schedule& s, std::span<const double> z0, std::span<const double> g,
                   int t, std::span<const double> eps) {
  check_same_size(z0.size(), g.size(), "forward_sample");
  check_same_size(z0.size(), eps.size(), "forward_sample");
  const MarginalParams m = s.forward_marginal_params(t);
  const double noise = std::sqrt(m.variance);
  Vec out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = m.coeff_z0 * z0[i] + m.coeff_g * g[i] + noise * eps[i];
  }
  return out;
}

Vec forward_step(const Schedule& s, std::span<const double> z_prev, std::span<const double> g,
                 int t, std::span<const double> eta) {
  check_same_size(z_prev.size(), g.size(), "forward_step");
  check_same_size(z_prev.size(), eta.size(), "forward_step");
  const double keep = std::sqrt(1.0 - s.gamma(t));
  const double noise = std::sqrt(s.gamma(t));
  Vec out(z_prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = keep * z_prev[i] + (1.0 - keep) * g[i] + noise * eta[i];
  }
  return out;
}

Vec reconstruct_z0(const Schedule& s, std::span<const double> z_t, std::span<const double> g,
                   std::span<const double> eps_hat, int t) {
  check_same_size(z_t.size(), g.size(), "reconstruct_z0");
  check_same_size(z_t.size(), eps_hat.size(), "reconstruct_z0");
  const MarginalParams m = s.forward_marginal_params(t);
  const double noise = std::sqrt(m.variance);
  Vec out(z_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (z_t[i] - m.coeff_g * g[i] - noise * eps_hat[i]) / m.coeff_z0;
  }
  return out;
}

Vec posterior_mean(const Schedule& s, std::span<const double> z0, std::span<const double> z_t,
                   std::span<const double> g, int t) {
  check_same_size(z0.size(), z_t.size(), "posterior_mean");
  check_same_size(z0.size(), g.size(), "posterior_mean");
  const PosteriorCoeffs c = s.posterior_coeffs(t);
  Vec out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = c.lambda0 * z0[i] + c.lambda1 * z_t[i] + c.lambda2 * g[i];
  }
  return out;
}

NoisePredictor network_predictor(EpsilonNetwork& net, Tensor images, bool training) {
  return [&net, images = std::move(images), training](const Tensor& z_t, const Tensor& g,
                                                      std::span<const int> t) {
    if (training) return net.forward(images, z_t, g, t, true);
    NoGradGuard no_grad;
    return net.forward(images, z_t, g, t, false);
  };
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  if (x.rank() == 0) throw DimensionError("repeat_rows: scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / std::max<std::size_t>(rows, 1);
  std::vector<double> out;
  out.reserve(x.numel() * times);
  const auto data = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < times; ++k) {
      out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(r * width),
                 data.begin() + static_cast<std::ptrdiff_t>((r + 1) * width));
    }
  }
  Shape shape = x.shape();
  shape[0] = rows * times;
  return Tensor(std::move(shape), std::move(out));
}

Tensor reverse_step(const NoisePredictor& predictor, const Schedule& s, const Tensor& z_t,
                    const Tensor& g, int t, const Tensor& eta) {
  if (z_t.rank() != 2) throw UsageError("reverse_step: expected [B x C] states");
  const std::size_t rows = z_t.dim(0), classes = z_t.dim(1);
  check_rows(g, rows, classes, "reverse_step");
  check_rows(eta, rows, classes, "reverse_step");
  const PosteriorCoeffs c = s.posterior_coeffs(t);
  const MarginalParams m = s.forward_marginal_params(t);
  const std::vector<int> steps(rows, t);
  const Tensor eps_hat = predictor(z_t, g, steps);
  check_rows(eps_hat, rows, classes, "reverse_step: predictor output");
  const double noise_m = std::sqrt(m.variance);
  const double noise_p = t > 1 ? std::sqrt(c.var) : 0.0;
  std::vector<double> out(rows * classes);
  const auto z = z_t.data(), gv = g.data(), e = eps_hat.data(), n = eta.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z0_hat = (z[i] - m.coeff_g * gv[i] - noise_m * e[i]) / m.coeff_z0;
    out[i] = c.lambda0 * z0_hat + c.lambda1 * z[i] + c.lambda2 * gv[i] + noise_p * n[i];
  }
  return Tensor(Shape{rows, classes}, std::move(out));
}

Vec reverse_step(const NoisePredictor& predictor, const Schedule& s, std::span<const double> z_t,
                 std::span<const double> g, int t, std::span<const double> eta) {
  check_same_size(z_t.size(), g.size(), "reverse_step");
  check_same_size(z_t.size(), eta.size(), "reverse_step");
  const std::size_t classes = z_t.size();
  const Tensor out = reverse_step(predictor, s, Tensor(Shape{1, classes}, Vec(z_t.begin(), z_t.end())),
                                  Tensor(Shape{1, classes}, Vec(g.begin(), g.end())), t,
                                  Tensor(Shape{1, classes}, Vec(eta.begin(), eta.end())));
  return Vec(out.data().begin(), out.data().end());
}

NoiseDraw draw_noise(std::size_t batch, std::size_t classes, const Schedule& s, Rng& rng) {
  NoiseDraw draw;
  draw.t.resize(batch);
  std::vector<double> eps(batch * classes);
  for (std::size_t i = 0; i < batch; ++i) {
    draw.t[i] = uniform_int(rng, 1, s.steps());
    for (std::size_t c = 0; c < classes; ++c) eps[i * classes + c] = standard_normal(rng);
  }
  draw.eps = Tensor(Shape{batch, classes}, std::move(eps));
  return draw;
}

LossOutput noise_estimation_loss(const NoisePredictor& predictor, const Schedule& s,
                                 const Tensor& z0, const Tensor& g, const NoiseDraw& draw) {
  if (z0.rank() != 2 || z0.dim(0) == 0) throw UsageError("training loss: empty batch");
  const std::size_t batch = z0.dim(0), classes = z0.dim(1);
  check_rows(g, batch, classes, "training loss");
  check_rows(draw.eps, batch, classes, "training loss");
  if (draw.t.size() != batch) throw UsageError("training loss: one timestep per sample required");
  std::vector<double> zt(batch * classes);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto row = [&](const Tensor& x) { return x.data().subspan(i * classes, classes); };
    const Vec z = forward_sample(s, row(z0), row(g), draw.t[i], row(draw.eps));
    std::copy(z.begin(), z.end(), zt.begin() + static_cast<std::ptrdiff_t>(i * classes));
  }
  LossOutput out;
  out.z_t = Tensor(Shape{batch, classes}, std::move(zt));
  out.eps_hat = predictor(out.z_t, g, draw.t);
  check_rows(out.eps_hat, batch, classes, "training loss: predictor output");
  out.loss = sum(square(draw.eps - out.eps_hat)) / static_cast<double>(batch);
  return out;
}

LossOutput training_loss(EpsilonNetwork& net, GuidanceClassifier& guidance, const Schedule& s,
                         const Tensor& images, std::span<const std::size_t> labels, Rng& rng) {
  if (labels.empty()) throw UsageError("training loss: empty batch");
  const std::size_t classes = net.classes();
  std::vector<double> z0(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw UsageError("training loss: label out of range");
    z0[i * classes + labels[i]] = 1.0;
  }
  const Tensor g = guidance.predict(images);
  const NoiseDraw draw = draw_noise(labels.size(), classes, s, rng);
  return noise_estimation_loss(network_predictor(net, images, true), s,
                               Tensor(Shape{labels.size(), classes}, std::move(z0)), g, draw);
}

std::vector<Prediction> sample_predictions(const NoisePredictor& predictor, const Schedule& s,
                                           const Tensor& g, std::size_t n_samples,
                                           std::uint64_t seed, std::size_t first_index,
                                           const ChainObserver& observer) {
  if (n_samples == 0) throw UsageError("predict: n_samples must be >= 1");
  if (g.rank() != 2) throw UsageError("predict: guidance must be [B x C]");
  NoGradGuard no_grad;
  const std::size_t images = g.dim(0), classes = g.dim(1), rows = images * n_samples;
  std::vector<Rng> streams;
  streams.reserve(rows);
  for (std::size_t i = 0; i < images; ++i) {
    for (std::size_t c = 0; c < n_samples; ++c) {
      streams.push_back(make_rng(mix_seed(seed, first_index + i), c));
    }
  }
  const Tensor g_rows = repeat_rows(g, n_samples);
  std::vector<double> start(rows * classes);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < classes; ++k) {
      start[r * classes + k] = g_rows[r * classes + k] + standard_normal(streams[r]);
    }
  }
  Tensor z(Shape{rows, classes}, std::move(start));
  if (observer) observer(s.steps(), z);
  for (int t = s.steps(); t >= 1; --t) {
    Tensor eta(Shape{rows, classes}, 0.0);
    if (t > 1) {
      auto e = eta.mutable_data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < classes; ++k) e[r * classes + k] = standard_normal(streams[r]);
    }
    z = reverse_step(predictor, s, z, g_rows, t, eta);
    if (observer) observer(t - 1, z);
  }
  std::vector<Prediction> out(images);
  for (std::size_t i = 0; i < images; ++i) {
    Vec avg(classes, 0.0);
    for (std::size_t c = 0; c < n_samples; ++c)
      for (std::size_t k = 0; k < classes; ++k) avg[k] += z[(i * n_samples + c) * classes + k];
    for (double& v : avg) v /= static_cast<double>(n_samples);
    out[i].probs = softmax_vec(avg);
    out[i].label = static_cast<std::size_t>(std::max_element(avg.begin(), avg.end()) - avg.begin());
    out[i].z0_mean = std::move(avg);
  }
  return out;
}

std::vector<Prediction> predict(EpsilonNetwork& net, GuidanceClassifier& guidance,
                                const Schedule& s, const Tensor& images, std::size_t n_samples,
                                std::uint64_t seed, std::size_t first_index) {
  if (n_samples == 0) throw UsageError("predict: n_samples must be >= 1");
  const Tensor g = guidance.predict(images);
  return sample_predictions(network_predictor(net, repeat_rows(images, n_samples)), s, g,
                            n_samples, seed, first_index);
}

std::vector<TrajectoryPoint> sample_trajectory(EpsilonNetwork& net, GuidanceClassifier& guidance,
                                               const Schedule& s, const Tensor& image,
                                               std::size_t n_chains, std::uint64_t seed) {
  const Shape& shape = image.shape();
  const Tensor batch = shape.size() == 3 ? reshape(image, {1, shape[0], shape[1], shape[2]}) : image;
  if (batch.rank() != 4 || batch.dim(0) != 1) {
    throw UsageError("sample_trajectory: expected a single image");
  }
  const Tensor g = guidance.predict(batch);
  const std::size_t classes = g.dim(1);
  std::vector<TrajectoryPoint> points;
  auto record = [&](int t, const Tensor& z) {
    for (std::size_t c = 0; c < n_chains; ++c) {
      const auto row = z.data().subspan(c * classes, classes);
      points.push_back({c, t, Vec(row.begin(), row.end())});
    }
  };
  sample_predictions(network_predictor(net, repeat_rows(batch, n_chains)), s, g, n_chains, seed, 0,
                     record);
  std::stable_sort(points.begin(), points.end(),
                   [](const TrajectoryPoint& a, const TrajectoryPoint& b) { return a.chain < b.chain; });
  return points;
}

double gaussian_kl(std::span<const double> mu_q, double var_q, std::span<const double> mu_p,
                   double var_p) {
  check_same_size(mu_q.size(), mu_p.size(), "gaussian_kl");
  if (!(var_q > 0.0 && var_p > 0.0)) throw UsageError("gaussian_kl: variances must be positive");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu_q.size(); ++i) {
    const double d = mu_q[i] - mu_p[i];
    kl += 0.5 * std::log(var_p / var_q) + (var_q + d * d) / (2.0 * var_p) - 0.5;
  }
  return kl;
}

Vec elbo_terms(const NoisePredictor& predictor, const Schedule& s, std::span<const double> z0,
               std::span<const double> g, std::size_t n_mc, std::uint64_t seed) {
  check_same_size(z0.size(), g.size(), "elbo_terms");
  if (n_mc == 0) throw UsageError("elbo_terms: n_mc must be >= 1");
  NoGradGuard no_grad;
  const int steps = s.steps();
  const std::size_t classes = z0.size();
  Vec terms(static_cast<std::size_t>(steps) + 1, 0.0);
  Rng rng = make_rng(seed);

  Tensor g_rows(Shape{n_mc, classes});
  for (std::size_t r = 0; r < n_mc; ++r)
    std::copy(g.begin(), g.end(), g_rows.mutable_data().begin() + static_cast<std::ptrdiff_t>(r * classes));

  // z_t draws from q(z_t | z0, g) and the predictor's z0 reconstructions.
  auto draw_and_reconstruct = [&](int t, std::vector<Vec>& z_rows, std::vector<Vec>& z0_hat) {
    std::vector<double> flat(n_mc * classes);
    z_rows.assign(n_mc, Vec{});
    for (std::size_t r = 0; r < n_mc; ++r) {
      Vec eps(classes);
      for (double& e : eps) e = standard_normal(rng);
      z_rows[r] = forward_sample(s, z0, g, t, eps);
      std::copy(z_rows[r].begin(), z_rows[r].end(), flat.begin() + static_cast<std::ptrdiff_t>(r * classes));
    }
    const std::vector<int> ts(n_mc, t);
    const Tensor eps_hat = predictor(Tensor(Shape{n_mc, classes}, std::move(flat)), g_rows, ts);
    check_rows(eps_hat, n_mc, classes, "elbo_terms: predictor output");
    z0_hat.assign(n_mc, Vec{});
    for (std::size_t r = 0; r < n_mc; ++r) {
      z0_hat[r] = reconstruct_z0(s, z_rows[r], g, eps_hat.data().subspan(r * classes, classes), t);
    }
  };

  std::vector<Vec> z_rows, z0_hat;
  for (int t = 2; t <= steps; ++t) {
    draw_and_reconstruct(t, z_rows, z0_hat);
    const double var = s.posterior_var(t);
    double total = 0.0;
    for (std::size_t r = 0; r < n_mc; ++r) {
      const Vec mu_q = posterior_mean(s, z0, z_rows[r], g, t);
      const Vec mu_p = posterior_mean(s, z0_hat[r], z_rows[r], g, t);
      total += gaussian_kl(mu_q, var, mu_p, var);
    }
    terms[static_cast<std::size_t>(t - 1)] = total / static_cast<double>(n_mc);
  }

  draw_and_reconstruct(1, z_rows, z0_hat);
  const double var0 = std::max(s.posterior_var(1), kLikelihoodVarFloor);
  double nll = 0.0;
  for (std::size_t r = 0; r < n_mc; ++r) {
    for (std::size_t k = 0; k < classes; ++k) {
      const double d = z0[k] - z0_hat[r][k];
      nll += 0.5 * (d * d / var0 + std::log(2.0 * std::numbers::pi * var0));
    }
  }
  terms[0] = nll / static_cast<double>(n_mc);

  const MarginalParams end = s.forward_marginal_params(steps);
  Vec mean_t(classes);
  for (std::size_t k = 0; k < classes; ++k) mean_t[k] = end.coeff_z0 * z0[k] + end.coeff_g * g[k];
  terms[static_cast<std::size_t>(steps)] = gaussian_kl(mean_t, end.variance, g, 1.0);
  return terms;
}

}  // namespace diffcls
