#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "core.hpp"

namespace vesselforge {

struct LossConfig {
  double phi = 0.3;    // classification vs segmentation trade-off
  double beta = 0.5;   // generalized Dice vs cross-entropy mix
  double alpha = 0.25;
  double gamma = 2.0;
  double prob_clamp = 1e-7;
  double dice_smooth = 1e-5;

  void validate() const {
    std::vector<std::string> bad;
    if (!(phi >= 0.0 && phi <= 1.0)) bad.push_back("loss.phi must be in [0,1]");
    if (!(beta >= 0.0 && beta <= 1.0)) bad.push_back("loss.beta must be in [0,1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) bad.push_back("loss.alpha must be in [0,1]");
    if (!(gamma >= 0.0)) bad.push_back("loss.gamma must be >= 0");
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) bad.push_back("loss.prob_clamp must be in (0,0.5)");
    if (!(dice_smooth >= 0.0)) bad.push_back("loss.dice_smooth must be >= 0");
    if (!bad.empty()) {
      std::string msg = "invalid loss config:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw ConfigError(msg);
    }
  }
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

namespace loss {

inline double clamp_prob(double p, double c) { return std::clamp(p, c, 1.0 - c); }

// Alpha-balanced sigmoid focal loss of a single logit and its derivative.
struct ScalarLoss {
  double value;
  double dlogit;
};

inline ScalarLoss focal(double logit, int target, double alpha, double gamma, double clamp) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double raw_pc = target == 1 ? p : 1.0 - p;
  const double pc = clamp_prob(raw_pc, clamp);
  const double ac = target == 1 ? alpha : 1.0 - alpha;
  const double q = 1.0 - pc;
  const double value = -ac * std::pow(q, gamma) * std::log(pc);
  double dpc = 0.0;
  if (raw_pc > clamp && raw_pc < 1.0 - clamp) {
    const double dq = gamma > 0.0 ? gamma * std::pow(q, gamma - 1.0) : 0.0;
    dpc = -ac * (-dq * std::log(pc) + std::pow(q, gamma) / pc);
  }
  const double dpc_dz = (target == 1 ? 1.0 : -1.0) * p * (1.0 - p);
  return {value, dpc * dpc_dz};
}

inline double focal_loss(double logit, int target, double alpha = 0.25, double gamma = 2.0, double clamp = 1e-7) {
  return focal(logit, target, alpha, gamma, clamp).value;
}

// Two-class softmax probabilities of [N, 2, M] logits, as p1 per voxel.
template <typename T>
std::vector<double> foreground_prob(const ad::Tensor<T>& logits) {
  const int N = logits.dim(0);
  const std::size_t M = logits.spatial();
  std::vector<double> p1(std::size_t(N) * M);
  for (int n = 0; n < N; ++n)
    for (std::size_t k = 0; k < M; ++k) {
      const double z0 = logits.data[(std::size_t(n) * 2) * M + k];
      const double z1 = logits.data[(std::size_t(n) * 2 + 1) * M + k];
      p1[std::size_t(n) * M + k] = 1.0 / (1.0 + std::exp(z0 - z1));
    }
  return p1;
}

namespace detail {

inline void check_seg(const ad::Shape& s, std::size_t labels, const char* op) {
  if (s.size() < 3 || s[1] != 2) throw ShapeError(std::string(op) + ": expected [N,2,...] logits, got " + ad::shape_str(s));
  if (ad::numel(s) / 2 != labels)
    throw ShapeError(std::string(op) + ": label count " + std::to_string(labels) + " does not match logits " +
                     ad::shape_str(s));
}

// Chains per-class probability gradients dp[c] into logit gradients.
template <typename T>
void softmax2_backward(const std::vector<double>& p1, const std::vector<double>& dp0, const std::vector<double>& dp1,
                       T scale, std::vector<T>& gz, int N, std::size_t M) {
  for (int n = 0; n < N; ++n)
    for (std::size_t k = 0; k < M; ++k) {
      const std::size_t v = std::size_t(n) * M + k;
      const double q1 = p1[v], q0 = 1.0 - q1;
      const double s = q0 * dp0[v] + q1 * dp1[v];
      gz[(std::size_t(n) * 2) * M + k] += scale * static_cast<T>(q0 * (dp0[v] - s));
      gz[(std::size_t(n) * 2 + 1) * M + k] += scale * static_cast<T>(q1 * (dp1[v] - s));
    }
}

}  // namespace detail

// Mean focal loss over a batch of [N, 1] logits.
template <typename T>
ad::Var focal_loss(ad::Graph<T>& g, ad::Var logits, const std::vector<int>& targets, const LossConfig& cfg) {
  const auto& z = g.value(logits);
  if (z.numel() != targets.size())
    throw ShapeError("focal_loss: " + std::to_string(targets.size()) + " targets for logits " + ad::shape_str(z.shape));
  const auto n = targets.size();
  std::vector<double> d(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = focal(static_cast<double>(z.data[i]), targets[i], cfg.alpha, cfg.gamma, cfg.prob_clamp);
    sum += r.value;
    d[i] = r.dlogit / static_cast<double>(n);
  }
  return g.record(ad::Tensor<T>({1}, static_cast<T>(sum / static_cast<double>(n))), {logits},
                  [=](ad::Graph<T>& gr, ad::Var self) {
                    const T gy = gr.grad(self)[0];
                    auto& gz = gr.grad(logits);
                    for (std::size_t i = 0; i < n; ++i) gz[i] += gy * static_cast<T>(d[i]);
                  });
}

// Generalized Dice over the whole batch with class weights 1/max(count,1)^2.
// labels: one class index per voxel, sample-major.
template <typename T>
ad::Var generalized_dice_loss(ad::Graph<T>& g, ad::Var logits, const std::vector<std::uint8_t>& labels,
                              const LossConfig& cfg) {
  const auto& z = g.value(logits);
  detail::check_seg(z.shape, labels.size(), "generalized_dice_loss");
  const int N = z.dim(0);
  const std::size_t M = z.spatial();
  const auto p1 = foreground_prob(z);
  double count[2] = {0.0, 0.0};
  for (auto l : labels) count[l ? 1 : 0] += 1.0;
  const double w[2] = {1.0 / std::pow(std::max(count[0], 1.0), 2), 1.0 / std::pow(std::max(count[1], 1.0), 2)};
  double num = 0.0, den = 0.0;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const double p[2] = {1.0 - p1[v], p1[v]};
    const int c = labels[v] ? 1 : 0;
    num += w[c] * p[c];
    den += w[0] * p[0] + w[1] * p[1] + w[c];
  }
  const double s = cfg.dice_smooth;
  const double value = 1.0 - (2.0 * num + s) / (den + s);
  return g.record(ad::Tensor<T>({1}, static_cast<T>(value)), {logits}, [=](ad::Graph<T>& gr, ad::Var self) {
    const T gy = gr.grad(self)[0];
    std::vector<double> dp0(labels.size()), dp1(labels.size());
    const double a = 2.0 / (den + s), b = (2.0 * num + s) / ((den + s) * (den + s));
    for (std::size_t v = 0; v < labels.size(); ++v) {
      const int c = labels[v] ? 1 : 0;
      dp0[v] = -((c == 0 ? a * w[0] : 0.0) - b * w[0]);
      dp1[v] = -((c == 1 ? a * w[1] : 0.0) - b * w[1]);
    }
    detail::softmax2_backward(p1, dp0, dp1, gy, gr.grad(logits), N, M);
  });
}

// Mean over voxels of -log p_target with probabilities clamped.
template <typename T>
ad::Var cross_entropy_loss(ad::Graph<T>& g, ad::Var logits, const std::vector<std::uint8_t>& labels,
                           const LossConfig& cfg) {
  const auto& z = g.value(logits);
  detail::check_seg(z.shape, labels.size(), "cross_entropy_loss");
  const int N = z.dim(0);
  const std::size_t M = z.spatial();
  const auto p1 = foreground_prob(z);
  const double c = cfg.prob_clamp;
  const double count = static_cast<double>(labels.size());
  double sum = 0.0;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const double pt = labels[v] ? p1[v] : 1.0 - p1[v];
    sum -= std::log(clamp_prob(pt, c));
  }
  return g.record(ad::Tensor<T>({1}, static_cast<T>(sum / count)), {logits}, [=](ad::Graph<T>& gr, ad::Var self) {
    const T gy = gr.grad(self)[0];
    std::vector<double> dp0(labels.size(), 0.0), dp1(labels.size(), 0.0);
    for (std::size_t v = 0; v < labels.size(); ++v) {
      const double pt = labels[v] ? p1[v] : 1.0 - p1[v];
      if (pt <= c || pt >= 1.0 - c) continue;
      (labels[v] ? dp1 : dp0)[v] = -1.0 / (pt * count);
    }
    detail::softmax2_backward(p1, dp0, dp1, gy, gr.grad(logits), N, M);
  });
}

struct Breakdown {
  double focal = 0.0;
  double gdice = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

struct Total {
  ad::Var var;
  Breakdown terms;
};

// L = phi*L_F + (1-phi)*(beta*L_GD + (1-beta)*L_CE)
inline double combine(double lf, double lgd, double lce, const LossConfig& cfg) {
  return cfg.phi * lf + (1.0 - cfg.phi) * (cfg.beta * lgd + (1.0 - cfg.beta) * lce);
}

template <typename T>
Total total_loss(ad::Graph<T>& g, ad::Var cls_logits, const std::vector<int>& cls_targets, ad::Var seg_logits,
                 const std::vector<std::uint8_t>& seg_labels, const LossConfig& cfg) {
  ad::Var lf = focal_loss(g, cls_logits, cls_targets, cfg);
  ad::Var lgd = generalized_dice_loss(g, seg_logits, seg_labels, cfg);
  ad::Var lce = cross_entropy_loss(g, seg_logits, seg_labels, cfg);
  ad::Var tot = ad::weighted_sum(g, {lf, lgd, lce},
                                 {cfg.phi, (1.0 - cfg.phi) * cfg.beta, (1.0 - cfg.phi) * (1.0 - cfg.beta)});
  Breakdown b{static_cast<double>(g.value(lf).data[0]), static_cast<double>(g.value(lgd).data[0]),
              static_cast<double>(g.value(lce).data[0]), 0.0};
  b.total = static_cast<double>(g.value(tot).data[0]);
  return {tot, b};
}

}  // namespace loss
}  // namespace vesselforge
