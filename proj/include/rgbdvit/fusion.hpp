#pragma once

// RGB-D model variants on top of the ViT encoder:
//   rgb-only / depth-only  one encoder pass on one modality
//   early-dual             per-modality embedders, summed and L2-normalized
//   early-joint            one embedder over channel-stacked 6-channel patches
//   late                   both modalities through the same weights, then the
//                          two <CLS> states pooled by avg / max / cat

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rgbdvit/autograd.hpp"
#include "rgbdvit/checkpoint.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/util.hpp"
#include "rgbdvit/vit.hpp"

namespace rgbdvit::fusion {

enum class Mode { rgb_only, depth_only, early_dual, early_joint, late };
enum class LateOp { avg, max, cat };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::rgb_only: return "rgb";
    case Mode::depth_only: return "depth";
    case Mode::early_dual: return "early-dual";
    case Mode::early_joint: return "early-joint";
    case Mode::late: return "late";
  }
  return "?";
}

inline std::string to_string(LateOp op) {
  switch (op) {
    case LateOp::avg: return "avg";
    case LateOp::max: return "max";
    case LateOp::cat: return "cat";
  }
  return "?";
}

inline Mode mode_from_string(std::string_view s) {
  if (s == "rgb") return Mode::rgb_only;
  if (s == "depth") return Mode::depth_only;
  if (s == "early-dual") return Mode::early_dual;
  if (s == "early-joint") return Mode::early_joint;
  if (s == "late") return Mode::late;
  throw InvalidArgument("unknown fusion mode '" + std::string(s) + "'");
}

inline LateOp late_op_from_string(std::string_view s) {
  if (s == "avg") return LateOp::avg;
  if (s == "max") return LateOp::max;
  if (s == "cat") return LateOp::cat;
  throw InvalidArgument("unknown late fusion op '" + std::string(s) + "'");
}

inline bool is_early(Mode m) { return m == Mode::early_dual || m == Mode::early_joint; }
inline bool is_unimodal(Mode m) { return m == Mode::rgb_only || m == Mode::depth_only; }

struct FusionSpec {
  Mode mode = Mode::rgb_only;
  std::optional<LateOp> late_op;
  nn::ModelSpec base;

  static FusionSpec make(Mode mode, nn::ModelSpec base, std::optional<LateOp> op = std::nullopt) {
    FusionSpec f{mode, op, base};
    f.validate();
    return f;
  }

  void validate() const {
    base.validate();
    if ((mode == Mode::late) != late_op.has_value())
      throw InvalidArgument("late_op must be set exactly when the fusion mode is late");
  }

  // Width of the pooled feature fed to the classifier.
  std::size_t feature_width() const {
    return mode == Mode::late && late_op == LateOp::cat ? 2 * base.embed_dim : base.embed_dim;
  }

  std::string label() const { return mode == Mode::late ? "late-" + to_string(*late_op) : to_string(mode); }

  bool operator==(const FusionSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const FusionSpec& f) {
  j = {{"mode", to_string(f.mode)}, {"base", f.base}};
  if (f.late_op) j["late_op"] = to_string(*f.late_op);
}

inline void from_json(const nlohmann::json& j, FusionSpec& f) {
  f.mode = mode_from_string(j.at("mode").get<std::string>());
  f.late_op.reset();
  if (j.contains("late_op")) f.late_op = late_op_from_string(j.at("late_op").get<std::string>());
  f.base = j.at("base").get<nn::ModelSpec>();
}

// Preprocessed pair with its labels. Both tensors are [3, crop, crop].
template <class T>
struct RgbdSample {
  Tensor<T> rgb;
  Tensor<T> depth;
  int label = 0;
  int instance = 0;
  std::string id;
};

template <class T>
struct FusionModel {
  FusionSpec spec;
  nn::ModelParams<T> params;
  // Set once the parameters were trained on RGB-D pairs in this mode.
  bool rgbd_trained = false;
};

// Count of fused tokens and of those that hit the norm clamp.
struct FuseStats {
  std::size_t tokens = 0;
  std::size_t clamped = 0;
};

inline constexpr double kFuseNormFloor = 1e-12;

// ---------------------------------------------------------------------------
// Construction

template <class T>
void init_embedders(nn::ModelParams<T>& p, const FusionSpec& f, std::mt19937_64& rng) {
  const std::size_t d = f.base.embed_dim, in = f.base.patch_dim(3);
  switch (f.mode) {
    case Mode::early_dual:
      nn::init_linear(p, "embedder_rgb", in, d, rng);
      nn::init_linear(p, "embedder_depth", in, d, rng);
      break;
    case Mode::early_joint:
      nn::init_linear(p, "embedder_joint", 2 * in, d, rng);
      break;
    default:
      nn::init_linear(p, "embedder", in, d, rng);
  }
}

template <class T>
FusionModel<T> init_model(const FusionSpec& f, std::uint64_t seed) {
  f.validate();
  std::mt19937_64 rng(seed);
  FusionModel<T> m{f, {}, false};
  init_embedders(m.params, f, rng);
  nn::init_encoder(m.params, f.base, rng);
  nn::init_head(m.params, f.base, f.feature_width(), rng);
  return m;
}

// ---------------------------------------------------------------------------
// Fusion operators

// e_n = (E_rgb x_rgb + E_d x_d) / ||E_rgb x_rgb + E_d x_d||, norm floored
// at 1e-12 (floored tokens are counted in `stats`).
template <class T>
nn::Var early_fuse_dual(nn::Graph<T>& g, nn::Var rgb_patches, nn::Var depth_patches, FuseStats* stats = nullptr) {
  nn::Var er = nn::project_patches(g, rgb_patches, "embedder_rgb");
  nn::Var ed = nn::project_patches(g, depth_patches, "embedder_depth");
  nn::Var sum = nn::add(g, er, ed);
  std::size_t clamped = 0;
  nn::Var out = nn::l2_normalize_rows(g, sum, static_cast<T>(kFuseNormFloor), &clamped);
  if (stats) {
    stats->tokens += g.value(out).rows();
    stats->clamped += clamped;
  }
  return out;
}

template <class T>
nn::Var early_fuse_joint(nn::Graph<T>& g, nn::Var stacked_patches) {
  const auto& w = g.value(g.param("embedder_joint.weight"));
  if (g.value(stacked_patches).cols() != w.cols())
    throw InvalidArgument("early_fuse_joint: patch width " + std::to_string(g.value(stacked_patches).cols()) +
                          " but joint embedder expects " + std::to_string(w.cols()));
  return nn::project_patches(g, stacked_patches, "embedder_joint");
}

template <class T>
nn::Var late_fuse(nn::Graph<T>& g, nn::Var h_rgb, nn::Var h_depth, LateOp op) {
  if (g.value(h_rgb).shape != g.value(h_depth).shape)
    throw InvalidArgument("late_fuse: shape mismatch " + shape_str(g.value(h_rgb).shape) + " vs " +
                          shape_str(g.value(h_depth).shape));
  switch (op) {
    case LateOp::avg: return nn::mean_pair(g, h_rgb, h_depth);
    case LateOp::max: return nn::max_pair(g, h_rgb, h_depth);
    case LateOp::cat: return nn::concat_cols(g, h_rgb, h_depth);
  }
  throw InvalidArgument("unknown late op");
}

// Tensor convenience without gradient tracking.
template <class T>
Tensor<T> late_fuse(const Tensor<T>& h_rgb, const Tensor<T>& h_depth, LateOp op) {
  nn::Graph<T> g(false);
  nn::Var a = g.constant(h_rgb), b = g.constant(h_depth);
  return g.value(late_fuse(g, a, b, op));
}

// ---------------------------------------------------------------------------
// Batch interleaving

enum class Modality { rgb, depth };

template <class X>
struct PairedItem {
  X item;
  std::size_t pair = 0;
  Modality modality = Modality::rgb;
};

// r0, d0, r1, d1, ... with the pair index carried along.
template <class X>
std::vector<PairedItem<X>> interleave(std::span<const X> rgb, std::span<const X> depth) {
  if (rgb.size() != depth.size())
    throw InvalidArgument("interleave: " + std::to_string(rgb.size()) + " RGB items but " +
                          std::to_string(depth.size()) + " depth items");
  std::vector<PairedItem<X>> out;
  out.reserve(2 * rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    out.push_back({rgb[i], i, Modality::rgb});
    out.push_back({depth[i], i, Modality::depth});
  }
  return out;
}

// Splits an interleaved stream into `chunks` contiguous pieces (e.g. for
// gradient accumulation) whose boundaries never separate a pair.
template <class X>
std::vector<std::vector<PairedItem<X>>> split_pairs(const std::vector<PairedItem<X>>& stream, std::size_t chunks) {
  if (chunks == 0) throw InvalidArgument("split_pairs: chunk count must be positive");
  if (stream.size() % 2 != 0) throw InvalidArgument("split_pairs: stream holds an unpaired item");
  const std::size_t pairs = stream.size() / 2;
  std::vector<std::vector<PairedItem<X>>> out(chunks);
  std::size_t begin = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    std::size_t n = pairs / chunks + (c < pairs % chunks ? 1 : 0);
    out[c].assign(stream.begin() + 2 * begin, stream.begin() + 2 * (begin + n));
    begin += n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes

template <class T>
Tensor<T> stack_patches(std::span<const RgbdSample<T>> batch, std::size_t patch, bool depth) {
  std::vector<Tensor<T>> parts;
  parts.reserve(batch.size());
  for (const auto& s : batch) parts.push_back(nn::patchify(depth ? s.depth : s.rgb, patch));
  return nn::stack_rows(parts);
}

// Pooled feature h_cls [batch, feature_width] for any fusion mode.
template <class T>
nn::Var features(nn::Graph<T>& g, std::span<const RgbdSample<T>> batch, const FusionSpec& f,
                 FuseStats* stats = nullptr) {
  if (batch.empty()) throw InvalidArgument("features: empty batch");
  for (const auto& s : batch)
    if (s.rgb.shape != s.depth.shape) throw InvalidArgument("RGB and depth tensors differ in shape");
  const auto& spec = f.base;
  const std::size_t b = batch.size(), p = spec.patch_size;
  switch (f.mode) {
    case Mode::rgb_only:
    case Mode::depth_only: {
      nn::Var patches = g.constant(stack_patches(batch, p, f.mode == Mode::depth_only));
      auto seq = nn::encoder_forward(g, nn::embed_and_sequence(g, patches, b, spec), spec);
      return nn::cls_state(g, seq);
    }
    case Mode::early_dual: {
      nn::Var pr = g.constant(stack_patches(batch, p, false));
      nn::Var pd = g.constant(stack_patches(batch, p, true));
      nn::Var e = early_fuse_dual(g, pr, pd, stats);
      auto seq = nn::encoder_forward(g, nn::assemble_sequence(g, e, b, spec), spec);
      return nn::cls_state(g, seq);
    }
    case Mode::early_joint: {
      Tensor<T> pr = stack_patches(batch, p, false), pd = stack_patches(batch, p, true);
      Tensor<T> joint({pr.rows(), pr.cols() + pd.cols()});
      for (std::size_t r = 0; r < pr.rows(); ++r) {
        std::copy_n(pr.row(r), pr.cols(), joint.row(r));
        std::copy_n(pd.row(r), pd.cols(), joint.row(r) + pr.cols());
      }
      nn::Var e = early_fuse_joint(g, g.constant(std::move(joint)));
      auto seq = nn::encoder_forward(g, nn::assemble_sequence(g, e, b, spec), spec);
      return nn::cls_state(g, seq);
    }
    case Mode::late: {
      std::vector<Tensor<T>> rgb, dep;
      for (const auto& s : batch) {
        rgb.push_back(nn::patchify(s.rgb, p));
        dep.push_back(nn::patchify(s.depth, p));
      }
      auto stream = interleave<Tensor<T>>(rgb, dep);
      std::vector<Tensor<T>> ordered;
      ordered.reserve(stream.size());
      for (auto& item : stream) ordered.push_back(std::move(item.item));
      nn::Var patches = g.constant(nn::stack_rows(ordered));
      auto seq = nn::encoder_forward(g, nn::embed_and_sequence(g, patches, 2 * b, spec), spec);
      nn::Var cls = nn::cls_state(g, seq);
      std::vector<std::size_t> even(b), odd(b);
      for (std::size_t i = 0; i < b; ++i) {
        even[i] = 2 * i;
        odd[i] = 2 * i + 1;
      }
      nn::Var hr = nn::gather_rows(g, cls, std::move(even));
      nn::Var hd = nn::gather_rows(g, cls, std::move(odd));
      return late_fuse(g, hr, hd, *f.late_op);
    }
  }
  throw InvalidArgument("unknown fusion mode");
}

template <class T>
nn::Var forward(nn::Graph<T>& g, std::span<const RgbdSample<T>> batch, const FusionModel<T>& m,
                FuseStats* stats = nullptr) {
  g.bind(m.params);
  nn::Var h = features(g, batch, m.spec, stats);
  return nn::classify(g, h, m.spec.feature_width());
}

// Logits [1, num_classes] for one sample, no gradient tracking.
template <class T>
Tensor<T> forward(const RgbdSample<T>& sample, const FusionModel<T>& m) {
  nn::Graph<T> g(false);
  return g.value(forward<T>(g, std::span<const RgbdSample<T>>(&sample, 1), m));
}

// Pooled features [batch, feature_width], no gradient tracking.
template <class T>
Tensor<T> extract(std::span<const RgbdSample<T>> batch, const FusionModel<T>& m) {
  nn::Graph<T> g(false);
  g.bind(m.params);
  return g.value(features(g, batch, m.spec));
}

// ---------------------------------------------------------------------------
// Persistence

template <class T>
nlohmann::json model_extra(const FusionModel<T>& m) {
  nlohmann::json fusion;
  fusion["mode"] = to_string(m.spec.mode);
  if (m.spec.late_op) fusion["late_op"] = to_string(*m.spec.late_op);
  return {{"fusion", fusion}, {"rgbd_trained", m.rgbd_trained}};
}

template <class T>
void save_model(const std::filesystem::path& path, const FusionModel<T>& m) {
  nn::save_checkpoint(path, m.spec.base, m.params, model_extra(m));
}

template <class T>
FusionSpec spec_of(const nn::Checkpoint<T>& ck) {
  FusionSpec f;
  f.base = ck.spec;
  if (ck.extra.contains("fusion")) {
    const auto& j = ck.extra.at("fusion");
    f.mode = mode_from_string(j.at("mode").template get<std::string>());
    if (j.contains("late_op")) f.late_op = late_op_from_string(j.at("late_op").template get<std::string>());
  }
  f.validate();
  return f;
}

template <class T>
FusionModel<T> model_from_checkpoint(nn::Checkpoint<T> ck) {
  FusionModel<T> m;
  m.spec = spec_of(ck);
  m.rgbd_trained = ck.extra.value("rgbd_trained", false);
  m.params = std::move(ck.params);
  return m;
}

template <class T>
FusionModel<T> load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(nn::load_checkpoint<T>(path));
}

// Content hash of the serialized model; identifies a feature extractor.
template <class T>
std::string fingerprint(const FusionModel<T>& m) {
  return sha256_hex(nn::serialize_checkpoint(m.spec.base, m.params, model_extra(m)));
}

// Builds a fusion model from a unimodal checkpoint: encoder, positions and
// <CLS> are copied; the patch embedder is duplicated (early-dual), replicated
// into both channel halves at half scale (early-joint), or copied (late and
// unimodal). The head is freshly initialized at the target width.
template <class T>
FusionModel<T> init_from_rgb_checkpoint(const nn::Checkpoint<T>& ck, const FusionSpec& target, std::uint64_t seed) {
  target.validate();
  const FusionSpec source = spec_of(ck);
  if (!is_unimodal(source.mode))
    throw IncompatibleCheckpoint("source checkpoint is " + source.label() + ", expected a unimodal model");
  nn::ModelSpec a = ck.spec, b = target.base;
  a.num_classes = b.num_classes = 0;
  a.head_hidden = b.head_hidden = 0;
  if (!(a == b)) throw IncompatibleCheckpoint("checkpoint model spec does not match the target spec");
  auto emb_w = ck.params.find("embedder.weight");
  auto emb_b = ck.params.find("embedder.bias");
  if (emb_w == ck.params.end() || emb_b == ck.params.end())
    throw IncompatibleCheckpoint("checkpoint has no patch embedder");

  FusionModel<T> m{target, {}, false};
  for (const auto& [path, t] : ck.params)
    if (path.rfind("head.", 0) != 0 && path.rfind("embedder.", 0) != 0) m.params.emplace(path, t);
  switch (target.mode) {
    case Mode::early_dual:
      m.params["embedder_rgb.weight"] = emb_w->second;
      m.params["embedder_rgb.bias"] = emb_b->second;
      m.params["embedder_depth.weight"] = emb_w->second;
      m.params["embedder_depth.bias"] = emb_b->second;
      break;
    case Mode::early_joint: {
      const auto& w = emb_w->second;
      Tensor<T> joint({w.rows(), 2 * w.cols()});
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) joint(r, c) = joint(r, w.cols() + c) = w(r, c) * T(0.5);
      m.params["embedder_joint.weight"] = std::move(joint);
      m.params["embedder_joint.bias"] = emb_b->second;
      break;
    }
    default:
      m.params["embedder.weight"] = emb_w->second;
      m.params["embedder.bias"] = emb_b->second;
  }
  std::mt19937_64 rng(seed);
  nn::init_head(m.params, target.base, target.feature_width(), rng);
  return m;
}

template <class T>
nn::Checkpoint<T> to_checkpoint(const FusionModel<T>& m) {
  return nn::Checkpoint<T>{m.spec.base, m.params, model_extra(m), nn::dtype_name<T>()};
}

}  // namespace rgbdvit::fusion
