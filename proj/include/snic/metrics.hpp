#pragma once

#include <cmath>
#include <limits>

#include "snic/ops.hpp"
#include "snic/tensor.hpp"

namespace snic {

enum class MetricKind { kMse, kPsnr, kMsSsim };

inline bool metric_higher_better(MetricKind m) { return m != MetricKind::kMse; }

inline const char* metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::kMse: return "mse";
    case MetricKind::kPsnr: return "psnr";
    case MetricKind::kMsSsim: return "ms-ssim";
  }
  return "?";
}

template <typename T>
Tensor<T> mse(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mse");
  Tensor<T> d = sub(g, a, b);
  return mean_all(g, mul(g, d, d));
}

template <typename T>
double mse_value(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mse");
  double acc = 0.0;
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(av.size());
}

// Peak-1 PSNR in dB; identical inputs give +inf, callers cap for display.
inline double psnr_from_mse(double mse_v) {
  if (mse_v <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse_v);
}

template <typename T>
double psnr_value(const Tensor<T>& a, const Tensor<T>& b) {
  return psnr_from_mse(mse_value(a, b));
}

namespace detail {

template <typename T>
Tensor<T> gaussian_window(int size, double sigma) {
  std::vector<T> w(static_cast<size_t>(size) * size);
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double d2 = (y - c) * (y - c) + (x - c) * (x - c);
      double v = std::exp(-d2 / (2.0 * sigma * sigma));
      w[static_cast<size_t>(y) * size + x] = static_cast<T>(v);
      total += v;
    }
  for (auto& v : w) v = static_cast<T>(static_cast<double>(v) / total);
  return Tensor<T>::from({size, size}, std::move(w));
}

// Canonical 5-scale exponent weights.
inline const double* msssim_weights() {
  static const double w[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return w;
}

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

}  // namespace detail

inline int msssim_feasible_scales(int64_t h, int64_t w, int max_scales = 5) {
  int64_t m = std::min(h, w);
  int s = 0;
  while (s < max_scales && m >= detail::kSsimWindow * (int64_t(1) << s)) ++s;
  return s;
}

// Multi-scale structural similarity on [0,1] images. Contrast/structure terms
// at every scale, luminance folded in at the coarsest, combined by exponent
// weights. When the image cannot support `scales` dyadic levels an error asks
// for a smaller scale count; the default entry point drops scales
// automatically and renormalizes the weights to sum 1.
template <typename T>
Tensor<T> ms_ssim_scales(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b, int scales) {
  detail::check_same_shape(a, b, "ms_ssim");
  check(a.shape().size() == 4, "ms_ssim: inputs must be NCHW");
  check(scales >= 1 && scales <= 5, "ms_ssim: scale count must be in [1,5]");
  const int feasible = msssim_feasible_scales(a.dim(2), a.dim(3));
  check(feasible >= scales,
        "ms_ssim: image " + std::to_string(a.dim(2)) + "x" + std::to_string(a.dim(3)) +
            " supports only " + std::to_string(feasible) + " scales, requested " +
            std::to_string(scales) + "; reduce the scale count");

  double wsum = 0.0;
  for (int i = 0; i < scales; ++i) wsum += detail::msssim_weights()[i];

  static thread_local Tensor<T> window;
  if (!window.defined()) window = detail::gaussian_window<T>(detail::kSsimWindow, detail::kSsimSigma);

  const T c1 = static_cast<T>(detail::kSsimC1);
  const T c2 = static_cast<T>(detail::kSsimC2);
  const T eps = static_cast<T>(1e-8);

  Tensor<T> xa = a, xb = b;
  Tensor<T> score;
  for (int s = 0; s < scales; ++s) {
    Tensor<T> mu_a = depthwise_conv2d_valid(g, xa, window);
    Tensor<T> mu_b = depthwise_conv2d_valid(g, xb, window);
    Tensor<T> mu_aa = mul(g, mu_a, mu_a);
    Tensor<T> mu_bb = mul(g, mu_b, mu_b);
    Tensor<T> mu_ab = mul(g, mu_a, mu_b);
    Tensor<T> var_a = sub(g, depthwise_conv2d_valid(g, mul(g, xa, xa), window), mu_aa);
    Tensor<T> var_b = sub(g, depthwise_conv2d_valid(g, mul(g, xb, xb), window), mu_bb);
    Tensor<T> cov = sub(g, depthwise_conv2d_valid(g, mul(g, xa, xb), window), mu_ab);

    Tensor<T> cs_map = div(g, add_scalar(g, mul_scalar(g, cov, T(2)), c2),
                           add_scalar(g, add(g, var_a, var_b), c2));
    Tensor<T> term;
    if (s + 1 < scales) {
      term = mean_all(g, cs_map);
      xa = avg_pool2(g, xa);
      xb = avg_pool2(g, xb);
    } else {
      Tensor<T> l_map = div(g, add_scalar(g, mul_scalar(g, mu_ab, T(2)), c1),
                            add_scalar(g, add(g, mu_aa, mu_bb), c1));
      term = mean_all(g, mul(g, l_map, cs_map));
    }
    const T w = static_cast<T>(detail::msssim_weights()[s] / wsum);
    Tensor<T> powed = pow_scalar(g, clamp_min(g, term, eps), w);
    score = s == 0 ? powed : mul(g, score, powed);
  }
  return score;
}

template <typename T>
Tensor<T> ms_ssim(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  const int feasible = msssim_feasible_scales(a.dim(2), a.dim(3));
  check(feasible >= 1, "ms_ssim: image smaller than the 11x11 window; no scale is feasible");
  return ms_ssim_scales(g, a, b, std::min(feasible, 5));
}

template <typename T>
double ms_ssim_value(const Tensor<T>& a, const Tensor<T>& b) {
  return static_cast<double>(ms_ssim<T>(nullptr, a, b).item());
}

}  // namespace snic
