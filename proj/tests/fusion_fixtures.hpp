#pragma once

#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "rgbdvit/fusion.hpp"

namespace rgbdvit::oracle {

struct ModeCase {
  fusion::Mode mode;
  std::optional<fusion::LateOp> op;
};

inline std::vector<ModeCase> all_modes() {
  using fusion::LateOp;
  using fusion::Mode;
  return {{Mode::rgb_only, {}},        {Mode::depth_only, {}},   {Mode::early_dual, {}},
          {Mode::early_joint, {}},     {Mode::late, LateOp::avg}, {Mode::late, LateOp::max},
          {Mode::late, LateOp::cat}};
}

// D=32, L=2, heads=2, 32x32 images, patch 8.
inline nn::ModelSpec toy_spec(std::size_t classes = 4) {
  nn::ModelSpec s = nn::ModelSpec::preset("toy");
  s.num_classes = classes;
  return s;
}

template <class T>
std::vector<fusion::RgbdSample<T>> random_samples(const nn::ModelSpec& s, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<fusion::RgbdSample<T>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].rgb = Tensor<T>({3, s.image_size, s.image_size});
    out[i].depth = Tensor<T>({3, s.image_size, s.image_size});
    for (auto& v : out[i].rgb.data) v = static_cast<T>(dist(rng));
    for (auto& v : out[i].depth.data) v = static_cast<T>(dist(rng));
    out[i].label = static_cast<int>(i % s.num_classes);
  }
  return out;
}

template <class U, class T>
std::vector<fusion::RgbdSample<U>> cast_samples(const std::vector<fusion::RgbdSample<T>>& in) {
  std::vector<fusion::RgbdSample<U>> out;
  for (const auto& s : in)
    out.push_back({s.rgb.template cast<U>(), s.depth.template cast<U>(), s.label, s.instance, s.id});
  return out;
}

template <class T>
T batch_loss(nn::Graph<T>& g, const fusion::FusionModel<T>& m, const std::vector<fusion::RgbdSample<T>>& batch,
             nn::Var* loss_out = nullptr) {
  std::vector<int> labels;
  for (const auto& s : batch) labels.push_back(s.label);
  nn::Var logits = fusion::forward<T>(g, batch, m);
  nn::Var loss = nn::cross_entropy<T>(g, logits, labels);
  if (loss_out) *loss_out = loss;
  return g.value(loss).data[0];
}

// Smallest |h_rgb - h_depth| over pooled late features; max fusion is only
// differentiable away from ties.
template <class T>
double late_margin(const fusion::FusionModel<T>& m, const std::vector<fusion::RgbdSample<T>>& batch) {
  auto spec = m.spec;
  spec.mode = fusion::Mode::late;
  spec.late_op = fusion::LateOp::cat;
  nn::Graph<T> g(false);
  g.bind(m.params);
  const auto& h = g.value(fusion::features(g, std::span<const fusion::RgbdSample<T>>(batch), spec));
  const std::size_t d = spec.base.embed_dim;
  double margin = 1e300;
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) margin = std::min(margin, std::abs(double(h(r, c)) - double(h(r, d + c))));
  return margin;
}

// Builds a toy model for `mc`, perturbs its parameters away from the init so
// every path carries signal, and compares backward against the oracle.
template <class T>
GradCheckReport fusion_gradcheck(const ModeCase& mc, std::uint64_t seed = 1, std::size_t per_tensor = 6) {
  auto spec = fusion::FusionSpec::make(mc.mode, toy_spec(), mc.op);
  auto m = fusion::init_model<T>(spec, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> jitter(0.0, 0.2);
  for (auto& [k, v] : m.params)
    if (k.find("norm") == std::string::npos)
      for (auto& x : v.data) x += static_cast<T>(jitter(rng));
  auto batch = random_samples<T>(spec.base, 2, seed + 200);
  if (mc.op == fusion::LateOp::max) {
    // Resample inputs until no feature pair sits near a tie.
    for (std::uint64_t s = seed + 300; late_margin(m, batch) < 2e-2; ++s) batch = random_samples<T>(spec.base, 2, s);
  }
  nn::Graph<T> g;
  nn::Var loss;
  batch_loss(g, m, batch, &loss);
  auto grads = g.backward(loss);
  auto wide_batch = cast_samples<long double>(batch);
  return gradcheck<T>(
      m.params, grads,
      [&](const nn::ParamMap<long double>& q) {
        fusion::FusionModel<long double> wm{spec, q, true};
        nn::Graph<long double> h(false);
        return batch_loss(h, wm, wide_batch);
      },
      1e-3L, per_tensor, seed);
}

}  // namespace rgbdvit::oracle
