#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snic/metrics.hpp"
#include "snic/ops.hpp"
#include "snic/rng.hpp"
#include "snic/tensor.hpp"

namespace snic {

// Probability floor for the rate path; matches the 16-bit coder resolution.
constexpr double kLikelihoodFloor = 1.0 / 65536.0;

struct CodecConfig {
  enum class Act { kGdn, kLeaky };

  int num_layers = 4;                       // stride-2 stages in each transform
  std::vector<int> channels = {32, 32, 32, 32};  // output channels per analysis layer
  int latent_channels = 32;
  int kernel_size = 5;
  Act activation = Act::kGdn;

  int downsample() const { return 1 << num_layers; }

  void validate() const {
    check(num_layers >= 1 && num_layers <= 6, "config: num_layers out of range");
    check(static_cast<int>(channels.size()) == num_layers,
          "config: channels must list one entry per layer");
    check(channels.back() == latent_channels,
          "config: last layer channels must equal latent_channels");
    for (int c : channels) check(c >= 1, "config: channels must be positive");
    check(kernel_size >= 1 && kernel_size % 2 == 1, "config: kernel_size must be odd and positive");
  }

  bool operator==(const CodecConfig& o) const {
    return num_layers == o.num_layers && channels == o.channels &&
           latent_channels == o.latent_channels && kernel_size == o.kernel_size &&
           activation == o.activation;
  }
};

template <typename T>
struct LatentTensor {
  Tensor<T> values;  // [N, C_y, H/d, W/d]
  bool quantized = false;
};

// Analysis transform, synthesis transform and a per-channel discretized
// logistic entropy model. GDN parameters and entropy scales are stored in
// unconstrained form (squared / exponentiated inside the forward pass) so
// gradient training cannot leave the valid region.
template <typename T>
struct CodecModel {
  CodecConfig config;
  double train_lambda = 0.0;  // trade-off the instance was trained with, 0 if untrained

  std::vector<Tensor<T>> enc_kernel, enc_bias;
  std::vector<Tensor<T>> enc_beta_raw, enc_gamma_raw;  // one per activation stage
  std::vector<Tensor<T>> dec_kernel, dec_bias;
  std::vector<Tensor<T>> dec_beta_raw, dec_gamma_raw;
  Tensor<T> ent_mu, ent_log_scale;

  int enc_in_channels(int layer) const { return layer == 0 ? 3 : config.channels[layer - 1]; }
  int dec_in_channels(int layer) const {
    return layer == 0 ? config.latent_channels : dec_out_channels(layer - 1);
  }
  int dec_out_channels(int layer) const {
    return layer == config.num_layers - 1 ? 3 : config.channels[config.num_layers - 2 - layer];
  }

  static CodecModel random_init(const CodecConfig& cfg, uint64_t seed) {
    cfg.validate();
    CodecModel m;
    m.config = cfg;
    Rng rng(mix_seed(seed, 0x6d6f64656cull));
    const int L = cfg.num_layers;
    const int k = cfg.kernel_size;
    auto init_kernel = [&](int cin, int cout, bool transpose) {
      Shape shape = transpose ? Shape{cin, cout, k, k} : Shape{cout, cin, k, k};
      Tensor<T> t(shape);
      double limit = std::sqrt(6.0 / (static_cast<double>(cin) * k * k + static_cast<double>(cout) * k * k));
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
      return t;
    };
    auto init_gdn = [&](int c, std::vector<Tensor<T>>& betas, std::vector<Tensor<T>>& gammas) {
      Tensor<T> beta({c}, T(1));
      Tensor<T> gamma({c, c}, T(0));
      const T diag = static_cast<T>(std::sqrt(0.1));
      for (int i = 0; i < c; ++i) gamma.data()[static_cast<size_t>(i) * c + i] = diag;
      betas.push_back(beta);
      gammas.push_back(gamma);
    };
    for (int l = 0; l < L; ++l) {
      const int cin = m.enc_in_channels(l), cout = cfg.channels[l];
      m.enc_kernel.push_back(init_kernel(cin, cout, false));
      m.enc_bias.push_back(Tensor<T>({cout}, T(0)));
      if (l + 1 < L && cfg.activation == CodecConfig::Act::kGdn)
        init_gdn(cout, m.enc_beta_raw, m.enc_gamma_raw);
    }
    for (int l = 0; l < L; ++l) {
      const int cin = m.dec_in_channels(l), cout = m.dec_out_channels(l);
      m.dec_kernel.push_back(init_kernel(cin, cout, true));
      m.dec_bias.push_back(Tensor<T>({cout}, T(0)));
      if (l + 1 < L && cfg.activation == CodecConfig::Act::kGdn)
        init_gdn(cout, m.dec_beta_raw, m.dec_gamma_raw);
    }
    m.ent_mu = Tensor<T>({cfg.latent_channels}, T(0));
    m.ent_log_scale = Tensor<T>({cfg.latent_channels}, T(0));
    return m;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> ps;
    auto push_all = [&](const std::vector<Tensor<T>>& v) {
      for (const auto& t : v) ps.push_back(t);
    };
    push_all(enc_kernel);
    push_all(enc_bias);
    push_all(enc_beta_raw);
    push_all(enc_gamma_raw);
    push_all(dec_kernel);
    push_all(dec_bias);
    push_all(dec_beta_raw);
    push_all(dec_gamma_raw);
    ps.push_back(ent_mu);
    ps.push_back(ent_log_scale);
    return ps;
  }

  void set_requires_grad(bool b) {
    for (auto& p : parameters()) p.set_requires_grad(b);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  template <typename U>
  CodecModel<U> cast() const {
    CodecModel<U> m;
    m.config = config;
    m.train_lambda = train_lambda;
    auto conv = [](const std::vector<Tensor<T>>& src, std::vector<Tensor<U>>& dst) {
      for (const auto& t : src) dst.push_back(t.template cast<U>());
    };
    conv(enc_kernel, m.enc_kernel);
    conv(enc_bias, m.enc_bias);
    conv(enc_beta_raw, m.enc_beta_raw);
    conv(enc_gamma_raw, m.enc_gamma_raw);
    conv(dec_kernel, m.dec_kernel);
    conv(dec_bias, m.dec_bias);
    conv(dec_beta_raw, m.dec_beta_raw);
    conv(dec_gamma_raw, m.dec_gamma_raw);
    m.ent_mu = ent_mu.template cast<U>();
    m.ent_log_scale = ent_log_scale.template cast<U>();
    return m;
  }

  // Entropy scale of one channel, after the positivity reparameterization.
  double entropy_mu(int channel) const { return static_cast<double>(ent_mu.data()[channel]); }
  double entropy_scale(int channel) const {
    return std::exp(static_cast<double>(ent_log_scale.data()[channel]));
  }
};

namespace detail {

template <typename T>
Tensor<T> gdn_from_raw(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& beta_raw,
                       const Tensor<T>& gamma_raw, bool inverse) {
  Tensor<T> beta = add_scalar(g, mul(g, beta_raw, beta_raw), static_cast<T>(1e-6));
  Tensor<T> gamma = mul(g, gamma_raw, gamma_raw);
  return gdn(g, x, beta, gamma, inverse);
}

}  // namespace detail

template <typename T>
LatentTensor<T> analyze(Graph<T>* g, const CodecModel<T>& m, const Tensor<T>& x) {
  check(x.shape().size() == 4 && x.dim(1) == 3, "analyze: input must be [N,3,H,W]");
  const int d = m.config.downsample();
  check(x.dim(2) % d == 0 && x.dim(3) % d == 0,
        "analyze: input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
            " not divisible by downsample factor " + std::to_string(d) +
            "; replicate-pad the image first");
  Tensor<T> h = x;
  const int L = m.config.num_layers;
  for (int l = 0; l < L; ++l) {
    h = conv2d(g, h, m.enc_kernel[l], m.enc_bias[l], 2, Pad::kSame);
    if (l + 1 < L) {
      if (m.config.activation == CodecConfig::Act::kGdn)
        h = detail::gdn_from_raw(g, h, m.enc_beta_raw[l], m.enc_gamma_raw[l], false);
      else
        h = leaky_relu(g, h, static_cast<T>(0.2));
    }
  }
  return {h, false};
}

template <typename T>
Tensor<T> synthesize(Graph<T>* g, const CodecModel<T>& m, const Tensor<T>& latent) {
  check(latent.shape().size() == 4 && latent.dim(1) == m.config.latent_channels,
        "synthesize: latent must be [N," + std::to_string(m.config.latent_channels) + ",h,w], got " +
            shape_str(latent.shape()));
  Tensor<T> h = latent;
  const int L = m.config.num_layers;
  for (int l = 0; l < L; ++l) {
    h = conv2d_transpose(g, h, m.dec_kernel[l], m.dec_bias[l], 2, Pad::kSame);
    if (l + 1 < L) {
      if (m.config.activation == CodecConfig::Act::kGdn)
        h = detail::gdn_from_raw(g, h, m.dec_beta_raw[l], m.dec_gamma_raw[l], true);
      else
        h = leaky_relu(g, h, static_cast<T>(0.2));
    }
  }
  return h;
}

template <typename T>
Tensor<T> synthesize(Graph<T>* g, const CodecModel<T>& m, const LatentTensor<T>& latent) {
  return synthesize(g, m, latent.values);
}

// Round half away from zero; symbols are kept inside the coder's raw range.
template <typename T>
LatentTensor<T> quantize_hard(const LatentTensor<T>& y) {
  Tensor<T> out = y.values.clone();
  for (T& v : out.data()) {
    T r = std::round(v);
    if (r > T(32767)) r = T(32767);
    if (r < T(-32768)) r = T(-32768);
    v = r;
  }
  return {out, true};
}

// Additive uniform noise on (-0.5, 0.5); the noise is a constant of the
// graph so gradients pass straight through to the continuous latent.
template <typename T>
LatentTensor<T> quantize_surrogate(Graph<T>* g, const LatentTensor<T>& y, uint64_t noise_seed) {
  Rng rng(mix_seed(noise_seed, 0x71756e74ull));
  Tensor<T> noise(y.values.shape());
  for (T& v : noise.data()) v = static_cast<T>(rng.centered_noise());
  return {add(g, y.values, noise), false};
}

// Probability mass of integer value v in a channel, floored. Double-precision
// companion of the in-graph likelihood, used by the coder tables and tests.
template <typename T>
double likelihood_value(const CodecModel<T>& m, double v, int channel) {
  const double mu = m.entropy_mu(channel);
  const double s = m.entropy_scale(channel);
  const double pa = detail::stable_sigmoid((v + 0.5 - mu) / s);
  const double pb = detail::stable_sigmoid((v - 0.5 - mu) / s);
  return std::max(pa - pb, kLikelihoodFloor);
}

// Total information content of the latent under the model prior, in bits.
template <typename T>
Tensor<T> rate_bits(Graph<T>* g, const CodecModel<T>& m, const Tensor<T>& latent_values) {
  Tensor<T> scale = exp_op(g, m.ent_log_scale);
  Tensor<T> p = discretized_logistic_likelihood(g, latent_values, m.ent_mu, scale);
  Tensor<T> pf = clamp_min(g, p, static_cast<T>(kLikelihoodFloor));
  const T inv_ln2 = static_cast<T>(1.4426950408889634);
  return mul_scalar(g, sum_all(g, log_op(g, pf)), -inv_ln2);
}

template <typename T>
Tensor<T> rate_bpp(Graph<T>* g, const CodecModel<T>& m, const Tensor<T>& latent_values,
                   int64_t source_pixels) {
  return mul_scalar(g, rate_bits(g, m, latent_values), static_cast<T>(1.0 / static_cast<double>(source_pixels)));
}

template <typename T>
struct SurrogateResult {
  Tensor<T> recon;          // decoded image from the noisy latent
  Tensor<T> bits;           // scalar, estimated rate in bits
  LatentTensor<T> noisy;    // the perturbed latent
};

// Differentiable stand-in for the full codec: analysis, noise quantization,
// rate estimate and synthesis in one pass.
template <typename T>
SurrogateResult<T> surrogate_pass(Graph<T>* g, const CodecModel<T>& m, const Tensor<T>& x,
                                  uint64_t noise_seed) {
  LatentTensor<T> y = analyze(g, m, x);
  LatentTensor<T> noisy = quantize_surrogate(g, y, noise_seed);
  Tensor<T> bits = rate_bits(g, m, noisy.values);
  Tensor<T> recon = synthesize(g, m, noisy.values);
  return {recon, bits, noisy};
}

// Pads with edge replication so both extents divide the downsample factor.
template <typename T>
Tensor<T> pad_for_model(Graph<T>* g, const CodecModel<T>& m, const Tensor<T>& x) {
  const int d = m.config.downsample();
  const int64_t h = x.dim(2), w = x.dim(3);
  const int64_t ph = (d - h % d) % d;
  const int64_t pw = (d - w % d) % d;
  return replicate_pad(g, x, ph, pw);
}

}  // namespace snic
