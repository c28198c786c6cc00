#pragma once

// Conditional diffusion in class-score space R^C. The forward process
// interpolates a one-hot label z0 towards the guidance prediction g while
// adding Gaussian noise; the reverse process starts at z_T ~ N(g, I) and
// denoises with a learned noise predictor.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "diffcls/networks.hpp"
#include "diffcls/random.hpp"
#include "diffcls/schedule.hpp"
#include "diffcls/tensor.hpp"

namespace diffcls {

using Vec = std::vector<double>;

Vec one_hot(std::size_t label, std::size_t classes);

/// sqrt(db_t) z0 + (1 - sqrt(db_t)) g + sqrt(1 - db_t) eps
Vec forward_sample(const Schedule& s, std::span<const double> z0, std::span<const double> g,
                   int t, std::span<const double> eps);

/// sqrt(1 - gamma_t) z_prev + (1 - sqrt(1 - gamma_t)) g + sqrt(gamma_t) eta
Vec forward_step(const Schedule& s, std::span<const double> z_prev, std::span<const double> g,
                 int t, std::span<const double> eta);

/// Inverts the closed-form marginal for z0 given a noise estimate.
Vec reconstruct_z0(const Schedule& s, std::span<const double> z_t, std::span<const double> g,
                   std::span<const double> eps_hat, int t);

/// lambda0 z0 + lambda1 z_t + lambda2 g.
Vec posterior_mean(const Schedule& s, std::span<const double> z0, std::span<const double> z_t,
                   std::span<const double> g, int t);

/// Batched noise predictor: rows of z_t and g are [B x C], one timestep per
/// row; returns eps_hat [B x C]. Any image conditioning is bound inside.
using NoisePredictor =
    std::function<Tensor(const Tensor& z_t, const Tensor& g, std::span<const int> t)>;

/// Binds `net` to a batch of images. Row i of every call pairs with image i.
NoisePredictor network_predictor(EpsilonNetwork& net, Tensor images, bool training = false);

/// Repeats every image `times` times consecutively: [B x ...] -> [(B*times) x ...].
Tensor repeat_rows(const Tensor& x, std::size_t times);

/// One reverse step from z_t; eta is ignored at t = 1.
Vec reverse_step(const NoisePredictor& predictor, const Schedule& s, std::span<const double> z_t,
                 std::span<const double> g, int t, std::span<const double> eta);

/// Row-wise reverse step at a common timestep; z_t, g, eta are [B x C].
Tensor reverse_step(const NoisePredictor& predictor, const Schedule& s, const Tensor& z_t,
                    const Tensor& g, int t, const Tensor& eta);

/// Per-sample timesteps and unit Gaussian noise for one training batch.
struct NoiseDraw {
  std::vector<int> t;
  Tensor eps;  // [B x C]
};

NoiseDraw draw_noise(std::size_t batch, std::size_t classes, const Schedule& s, Rng& rng);

struct LossOutput {
  Tensor loss;     // scalar, mean over the batch of ||eps - eps_hat||^2
  Tensor eps_hat;  // [B x C]
  Tensor z_t;      // [B x C]
};

/// Noise-estimation objective for fixed draws. `z0` and `g` are [B x C].
LossOutput noise_estimation_loss(const NoisePredictor& predictor, const Schedule& s,
                                 const Tensor& z0, const Tensor& g, const NoiseDraw& draw);

/// Full training objective for a batch: one-hot targets, guidance computed
/// without gradients, timesteps and noise drawn from `rng`.
LossOutput training_loss(EpsilonNetwork& net, GuidanceClassifier& guidance, const Schedule& s,
                         const Tensor& images, std::span<const std::size_t> labels, Rng& rng);

struct Prediction {
  std::size_t label = 0;
  Vec probs;    // softmax of z0_mean
  Vec z0_mean;  // final reconstruction averaged over chains
};

/// Observer for reverse chains; called with each image's rows in order
/// (row = image * n_samples + chain) for t = T (the initial draw) down to 0.
using ChainObserver = std::function<void(int t, const Tensor& z)>;

/// Draws `n_samples` reverse chains per row of `g` starting from z_T ~ N(g, I),
/// averages the final reconstructions and classifies by argmax (ties go to
/// the lowest class). Chain c of image i uses the stream
/// (mix_seed(seed, first_index + i), c). `predictor` receives
/// B * n_samples rows.
std::vector<Prediction> sample_predictions(const NoisePredictor& predictor, const Schedule& s,
                                           const Tensor& g, std::size_t n_samples,
                                           std::uint64_t seed, std::size_t first_index = 0,
                                           const ChainObserver& observer = {});

/// Network inference for a batch of images [B x ch x H x W].
std::vector<Prediction> predict(EpsilonNetwork& net, GuidanceClassifier& guidance,
                                const Schedule& s, const Tensor& images, std::size_t n_samples,
                                std::uint64_t seed, std::size_t first_index = 0);

struct TrajectoryPoint {
  std::size_t chain = 0;
  int t = 0;
  Vec z;
};

/// All intermediate states of `n_chains` reverse chains for one image.
std::vector<TrajectoryPoint> sample_trajectory(EpsilonNetwork& net, GuidanceClassifier& guidance,
                                               const Schedule& s, const Tensor& image,
                                               std::size_t n_chains, std::uint64_t seed);

/// KL(N(mu_q, var_q I) || N(mu_p, var_p I)).
double gaussian_kl(std::span<const double> mu_q, double var_q, std::span<const double> mu_p,
                   double var_p);

inline constexpr double kLikelihoodVarFloor = 1e-4;

/// Monte-Carlo ELBO decomposition, diagnostics only. Index 0 holds L_0,
/// index k in 1..T-1 holds L_k (the KL at reverse step t = k + 1), index T
/// holds L_T. `predictor` receives n_mc rows per call.
Vec elbo_terms(const NoisePredictor& predictor, const Schedule& s, std::span<const double> z0,
               std::span<const double> g, std::size_t n_mc, std::uint64_t seed);

}  // namespace diffcls
