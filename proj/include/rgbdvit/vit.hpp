#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rgbdvit/autograd.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/tensor.hpp"

namespace rgbdvit::nn {

enum class PositionalMode { learned, sinusoid2d };

inline std::string to_string(PositionalMode m) {
  return m == PositionalMode::learned ? "learned" : "sinusoid-2d";
}

inline PositionalMode positional_from_string(std::string_view s) {
  if (s == "learned") return PositionalMode::learned;
  if (s == "sinusoid-2d") return PositionalMode::sinusoid2d;
  throw InvalidArgument("unknown positional mode '" + std::string(s) + "'");
}

// Architecture of one ViT encoder plus its classification head.
struct ModelSpec {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 2;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 10;
  PositionalMode positional = PositionalMode::learned;
  // 0 selects a linear head; otherwise one GELU hidden layer of this width.
  std::size_t head_hidden = 0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim(std::size_t channels = 3) const { return channels * patch_size * patch_size; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(embed_dim) * mlp_ratio));
  }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw InvalidArgument("image size " + std::to_string(image_size) +
                            " not divisible by patch size " + std::to_string(patch_size));
    if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0)
      throw InvalidArgument("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                            std::to_string(heads));
    if (depth < 1) throw InvalidArgument("encoder depth must be at least 1");
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw InvalidArgument("mlp_ratio must be positive");
    if (num_classes < 1) throw InvalidArgument("num_classes must be at least 1");
    if (positional == PositionalMode::sinusoid2d && embed_dim % 4 != 0)
      throw InvalidArgument("sinusoid-2d positions need embed_dim divisible by 4");
  }

  // Public ViT configurations; "toy" is the desk-scale default.
  static ModelSpec preset(std::string_view name) {
    ModelSpec s;
    if (name == "toy") {
      s.image_size = 32, s.patch_size = 8, s.embed_dim = 32, s.depth = 2, s.heads = 2;
    } else if (name == "tiny") {
      s.image_size = 224, s.patch_size = 16, s.embed_dim = 192, s.depth = 12, s.heads = 3;
    } else if (name == "small") {
      s.image_size = 224, s.patch_size = 16, s.embed_dim = 384, s.depth = 12, s.heads = 6;
    } else if (name == "base") {
      s.image_size = 224, s.patch_size = 16, s.embed_dim = 768, s.depth = 12, s.heads = 12;
    } else {
      throw InvalidArgument("unknown model preset '" + std::string(name) + "'");
    }
    return s;
  }

  bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"image_size", s.image_size},   {"patch_size", s.patch_size}, {"embed_dim", s.embed_dim},
       {"depth", s.depth},             {"heads", s.heads},           {"mlp_ratio", s.mlp_ratio},
       {"num_classes", s.num_classes}, {"positional", to_string(s.positional)},
       {"head_hidden", s.head_hidden}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.image_size = j.at("image_size");
  s.patch_size = j.at("patch_size");
  s.embed_dim = j.at("embed_dim");
  s.depth = j.at("depth");
  s.heads = j.at("heads");
  s.mlp_ratio = j.at("mlp_ratio");
  s.num_classes = j.at("num_classes");
  s.positional = positional_from_string(j.at("positional").get<std::string>());
  s.head_hidden = j.value("head_hidden", std::size_t{0});
}

template <class T>
using ModelParams = ParamMap<T>;

// Hidden states [batch*length, dim]; row b*length is the <CLS> token of image b.
struct SequenceState {
  Var tokens;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t dim = 0;
};

// ---------------------------------------------------------------------------
// Initialization

template <class T>
Tensor<T> trunc_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) {
    double x;
    do x = dist(rng);
    while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
  return t;
}

template <class T>
void init_linear(ModelParams<T>& p, const std::string& prefix, std::size_t in, std::size_t out,
                 std::mt19937_64& rng) {
  p[prefix + ".weight"] = trunc_normal<T>({out, in}, rng);
  p[prefix + ".bias"] = Tensor<T>({out});
}

template <class T>
void init_layer_norm(ModelParams<T>& p, const std::string& prefix, std::size_t dim) {
  p[prefix + ".weight"] = Tensor<T>({dim}, T(1));
  p[prefix + ".bias"] = Tensor<T>({dim});
}

// <CLS>, positions, encoder blocks and the final norm. Embedders and head are
// owned by the fusion layer since their shapes depend on the fusion mode.
template <class T>
void init_encoder(ModelParams<T>& p, const ModelSpec& s, std::mt19937_64& rng) {
  s.validate();
  const std::size_t d = s.embed_dim;
  p["cls_token"] = Tensor<T>({d});
  if (s.positional == PositionalMode::learned) p["pos_embed"] = trunc_normal<T>({s.num_patches(), d}, rng);
  for (std::size_t l = 0; l < s.depth; ++l) {
    const std::string b = "block" + std::to_string(l);
    init_layer_norm(p, b + ".norm1", d);
    init_linear(p, b + ".attn.qkv", d, 3 * d, rng);
    init_linear(p, b + ".attn.proj", d, d, rng);
    init_layer_norm(p, b + ".norm2", d);
    init_linear(p, b + ".mlp.fc1", d, s.mlp_hidden(), rng);
    init_linear(p, b + ".mlp.fc2", s.mlp_hidden(), d, rng);
  }
  init_layer_norm(p, "norm", d);
}

template <class T>
void init_head(ModelParams<T>& p, const ModelSpec& s, std::size_t in_width, std::mt19937_64& rng) {
  for (auto it = p.begin(); it != p.end();) {
    if (it->first.rfind("head.", 0) == 0) it = p.erase(it);
    else ++it;
  }
  if (s.head_hidden == 0) {
    init_linear(p, "head", in_width, s.num_classes, rng);
  } else {
    init_linear(p, "head.fc1", in_width, s.head_hidden, rng);
    init_linear(p, "head.fc2", s.head_hidden, s.num_classes, rng);
  }
}

// ---------------------------------------------------------------------------
// Patches and sequence construction

// [C,H,W] image -> [N, C*h*h]; rows in row-major patch order, each row
// flattened channel-major (c, y, x), which equals a stride-h convolution's
// weight layout.
template <class T>
Tensor<T> patchify(const Tensor<T>& img, std::size_t patch) {
  if (img.rank() != 3) throw InvalidArgument("patchify expects a [C,H,W] tensor");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw InvalidArgument("patchify: " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch " + std::to_string(patch));
  const std::size_t gh = h / patch, gw = w / patch, width = c * patch * patch;
  Tensor<T> out({gh * gw, width});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      T* dst = out.row(py * gw + px);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            *dst++ = img.data[(ch * h + py * patch + y) * w + px * patch + x];
    }
  return out;
}

// Stacks per-image patch matrices into one [B*N, width] matrix.
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) return Tensor<T>({0, 0});
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw InvalidArgument("stack_rows: width mismatch");
    rows += p.rows();
  }
  Tensor<T> out({rows, cols});
  auto it = out.data.begin();
  for (const auto& p : parts) it = std::copy(p.data.begin(), p.data.end(), it);
  return out;
}

// Fixed 2-D sine-cosine table [grid*grid, dim]: the first half of each row
// encodes the patch row, the second half the patch column; within a half,
// dim/4 sines then dim/4 cosines at frequencies 10000^(-i/(dim/4)).
template <class T>
Tensor<T> sinusoid_2d_table(std::size_t grid, std::size_t dim) {
  if (dim % 4 != 0) throw InvalidArgument("sinusoid table needs dim divisible by 4");
  const std::size_t quarter = dim / 4;
  Tensor<T> out({grid * grid, dim});
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) {
      T* row = out.row(r * grid + c);
      for (std::size_t i = 0; i < quarter; ++i) {
        double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = static_cast<T>(std::sin(static_cast<double>(r) * omega));
        row[quarter + i] = static_cast<T>(std::cos(static_cast<double>(r) * omega));
        row[2 * quarter + i] = static_cast<T>(std::sin(static_cast<double>(c) * omega));
        row[3 * quarter + i] = static_cast<T>(std::cos(static_cast<double>(c) * omega));
      }
    }
  return out;
}

template <class T>
Var project_patches(Graph<T>& g, Var patches, const std::string& embedder) {
  return linear(g, patches, g.param(embedder + ".weight"), g.param(embedder + ".bias"));
}

// Prepends <CLS> to each image's patch embeddings and adds positions to the
// patch tokens only. `emb` is [batch*N, D].
template <class T>
SequenceState assemble_sequence(Graph<T>& g, Var emb, std::size_t batch, const ModelSpec& s) {
  const auto& ve = g.value(emb);
  const std::size_t n = s.num_patches(), d = s.embed_dim;
  if (ve.rank() != 2 || ve.rows() != batch * n || ve.cols() != d)
    throw InvalidArgument("assemble_sequence: embeddings " + shape_str(ve.shape) + " expected [" +
                          std::to_string(batch * n) + "x" + std::to_string(d) + "]");
  Var cls = g.param("cls_token");
  Var pos = s.positional == PositionalMode::learned ? g.param("pos_embed")
                                                     : g.constant(sinusoid_2d_table<T>(s.grid(), d));
  const auto& vc = g.value(cls).data;
  const auto& vp = g.value(pos);
  const std::size_t len = n + 1;
  Tensor<T> out({batch * len, d});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(vc.data(), d, out.row(b * len));
    for (std::size_t i = 0; i < n; ++i) {
      const T* e = ve.row(b * n + i);
      const T* p = vp.row(i);
      T* o = out.row(b * len + 1 + i);
      for (std::size_t j = 0; j < d; ++j) o[j] = e[j] + p[j];
    }
  }
  bool learned = s.positional == PositionalMode::learned;
  Var tokens = g.push(std::move(out), [emb, cls, pos, learned, batch, n, d, len](Graph<T>& g, Var self) {
    const auto& dd = g.grad(self);
    auto& gc = g.grad(cls).data;
    auto& ge = g.grad(emb);
    Tensor<T>* gp = learned ? &g.grad(pos) : nullptr;
    for (std::size_t b = 0; b < batch; ++b) {
      detail::axpy(T(1), dd.row(b * len), gc.data(), d);
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = dd.row(b * len + 1 + i);
        detail::axpy(T(1), src, ge.row(b * n + i), d);
        if (gp) detail::axpy(T(1), src, gp->row(i), d);
      }
    }
  });
  return SequenceState{tokens, batch, len, d};
}

template <class T>
SequenceState embed_and_sequence(Graph<T>& g, Var patches, std::size_t batch, const ModelSpec& s,
                                 const std::string& embedder = "embedder") {
  const auto& vp = g.value(patches);
  const auto& w = g.value(g.param(embedder + ".weight"));
  if (vp.rank() != 2 || vp.cols() != w.cols())
    throw InvalidArgument("embed_and_sequence: patch width " + std::to_string(vp.cols()) +
                          " does not match embedder input " + std::to_string(w.cols()));
  return assemble_sequence(g, project_patches(g, patches, embedder), batch, s);
}

// Pre-norm transformer blocks followed by the final layer norm.
template <class T>
SequenceState encoder_forward(Graph<T>& g, const SequenceState& seq, const ModelSpec& s) {
  Var x = seq.tokens;
  for (std::size_t l = 0; l < s.depth; ++l) {
    const std::string b = "block" + std::to_string(l);
    Var h = layer_norm(g, x, g.param(b + ".norm1.weight"), g.param(b + ".norm1.bias"));
    h = linear(g, h, g.param(b + ".attn.qkv.weight"));
    h = add_row_bias(g, h, g.param(b + ".attn.qkv.bias"), s.embed_dim, 2 * s.embed_dim);
    h = self_attention(g, h, seq.batch, seq.length, s.heads);
    h = linear(g, h, g.param(b + ".attn.proj.weight"), g.param(b + ".attn.proj.bias"));
    x = add(g, x, h);
    h = layer_norm(g, x, g.param(b + ".norm2.weight"), g.param(b + ".norm2.bias"));
    h = linear(g, h, g.param(b + ".mlp.fc1.weight"), g.param(b + ".mlp.fc1.bias"));
    h = gelu(g, h);
    h = linear(g, h, g.param(b + ".mlp.fc2.weight"), g.param(b + ".mlp.fc2.bias"));
    x = add(g, x, h);
  }
  x = layer_norm(g, x, g.param("norm.weight"), g.param("norm.bias"));
  return SequenceState{x, seq.batch, seq.length, seq.dim};
}

// Final <CLS> states [batch, D].
template <class T>
Var cls_state(Graph<T>& g, const SequenceState& seq) {
  std::vector<std::size_t> rows(seq.batch);
  for (std::size_t b = 0; b < seq.batch; ++b) rows[b] = b * seq.length;
  return gather_rows(g, seq.tokens, std::move(rows));
}

template <class T>
std::size_t head_input_width(const ModelParams<T>& p) {
  if (auto it = p.find("head.weight"); it != p.end()) return it->second.cols();
  if (auto it = p.find("head.fc1.weight"); it != p.end()) return it->second.cols();
  throw InvalidArgument("model has no classifier head");
}

// Class logits from pooled features [batch, width].
template <class T>
Var classify(Graph<T>& g, Var h, std::size_t expected_width) {
  const std::size_t width = g.value(h).cols();
  if (width != expected_width)
    throw InvalidArgument("classify: feature width " + std::to_string(width) + " but head expects " +
                          std::to_string(expected_width));
  if (g.has_param("head.weight")) {
    if (g.value(g.param("head.weight")).cols() != width)
      throw InvalidArgument("classify: head weight width mismatch");
    return linear(g, h, g.param("head.weight"), g.param("head.bias"));
  }
  if (g.value(g.param("head.fc1.weight")).cols() != width)
    throw InvalidArgument("classify: head weight width mismatch");
  Var z = gelu(g, linear(g, h, g.param("head.fc1.weight"), g.param("head.fc1.bias")));
  return linear(g, z, g.param("head.fc2.weight"), g.param("head.fc2.bias"));
}

}  // namespace rgbdvit::nn
