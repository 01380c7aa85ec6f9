#pragma once

// Frozen-feature k-NN and linear evaluation, end-to-end fine-tuning, and the
// few-shot transfer grid.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rgbdvit/data.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/fusion.hpp"
#include "rgbdvit/optim.hpp"
#include "rgbdvit/random.hpp"
#include "rgbdvit/util.hpp"

namespace rgbdvit::eval {

namespace fs = std::filesystem;
using fusion::FusionModel;
using fusion::RgbdSample;

// Runs fn(begin, end) over contiguous ranges of [0, n) on up to `threads`
// workers and rethrows the first failure.
inline void parallel_ranges(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(1, n));
  if (threads <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        std::size_t b = std::min(n, w * chunk), e = std::min(n, b + chunk);
        if (b < e) fn(b, e);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Feature tables

struct FeatureTable {
  std::string fingerprint;
  std::size_t width = 0;
  std::vector<float> data;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t rows() const { return labels.size(); }
  const float* row(std::size_t r) const { return data.data() + r * width; }

  void append(std::span<const float> v, int label, std::string id) {
    if (rows() == 0 && width == 0) width = v.size();
    if (v.size() != width)
      throw InvalidArgument("feature width " + std::to_string(v.size()) + " does not match table width " +
                            std::to_string(width));
    data.insert(data.end(), v.begin(), v.end());
    labels.push_back(label);
    ids.push_back(std::move(id));
  }

  bool operator==(const FeatureTable&) const = default;
};

inline nlohmann::json table_to_json(const FeatureTable& t) {
  std::vector<std::uint8_t> raw(t.data.size() * sizeof(float));
  std::memcpy(raw.data(), t.data.data(), raw.size());
  return {{"fingerprint", t.fingerprint}, {"width", t.width}, {"labels", t.labels}, {"ids", t.ids},
          {"data_f32_base64", base64_encode(raw)}};
}

inline FeatureTable table_from_json(const nlohmann::json& j) {
  FeatureTable t;
  t.fingerprint = j.at("fingerprint").get<std::string>();
  t.width = j.at("width").get<std::size_t>();
  t.labels = j.at("labels").get<std::vector<int>>();
  t.ids = j.at("ids").get<std::vector<std::string>>();
  auto raw = base64_decode(j.at("data_f32_base64").get<std::string>());
  if (raw.size() != t.width * t.rows() * sizeof(float)) throw PayloadError("feature cache payload size mismatch");
  t.data.resize(raw.size() / sizeof(float));
  std::memcpy(t.data.data(), raw.data(), raw.size());
  return t;
}

inline void save_table(const fs::path& path, const FeatureTable& t) { write_text(path, table_to_json(t).dump()); }
inline FeatureTable load_table(const fs::path& path) { return table_from_json(nlohmann::json::parse(read_text(path))); }

template <class T>
void require_frozen_regime(const FusionModel<T>& m) {
  if (fusion::is_early(m.spec.mode) && !m.rgbd_trained)
    throw UnsupportedRegime("frozen features for " + m.spec.label() +
                            " need a checkpoint trained on RGB-D pairs in that mode; an RGB-only encoder has no "
                            "usable depth embedding");
}

// Pooled features for every sample; workers take disjoint ranges and the
// table keeps input order.
template <class T>
FeatureTable extract_features(std::span<const RgbdSample<T>> samples, const FusionModel<T>& m,
                              std::size_t threads = 0, std::size_t batch = 32) {
  require_frozen_regime(m);
  const std::size_t w = m.spec.feature_width();
  FeatureTable t;
  t.fingerprint = fusion::fingerprint(m);
  t.width = w;
  t.data.assign(samples.size() * w, 0.0f);
  parallel_ranges(samples.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; s += batch) {
      std::size_t n = std::min(batch, e - s);
      auto h = fusion::extract<T>(samples.subspan(s, n), m);
      for (std::size_t i = 0; i < h.numel(); ++i) t.data[s * w + i] = static_cast<float>(h.data[i]);
    }
  });
  for (const auto& s : samples) {
    t.labels.push_back(s.label);
    t.ids.push_back(s.id);
  }
  return t;
}

// Reuses `cache` when it was produced by the same extractor for the same ids.
template <class T>
FeatureTable cached_features(const fs::path& cache, std::span<const RgbdSample<T>> samples, const FusionModel<T>& m,
                             std::size_t threads = 0) {
  const std::string fp = fusion::fingerprint(m);
  if (fs::exists(cache)) {
    try {
      auto t = load_table(cache);
      bool same = t.fingerprint == fp && t.rows() == samples.size();
      for (std::size_t i = 0; same && i < samples.size(); ++i) same = t.ids[i] == samples[i].id;
      if (same) return t;
      log(LogLevel::info, "feature cache " + cache.string() + " is stale; re-extracting");
    } catch (const std::exception& e) {
      log(LogLevel::warn, "ignoring unreadable feature cache " + cache.string() + ": " + e.what());
    }
  }
  auto t = extract_features(samples, m, threads);
  save_table(cache, t);
  return t;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string regime;
  double top1 = 0.0;  // percent
  std::size_t samples = 0;
  std::vector<std::string> class_names;
  std::vector<std::size_t> class_counts, class_correct;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();

  double class_accuracy(std::size_t c) const {
    return class_counts[c] == 0 ? 0.0 : 100.0 * double(class_correct[c]) / double(class_counts[c]);
  }
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < r.class_counts.size(); ++c) {
    nlohmann::json e = {{"label", c}, {"count", r.class_counts[c]}, {"correct", r.class_correct[c]}};
    e["accuracy"] = r.class_counts[c] ? nlohmann::json(r.class_accuracy(c)) : nlohmann::json(nullptr);
    if (c < r.class_names.size()) e["name"] = r.class_names[c];
    per_class.push_back(e);
  }
  j = {{"regime", r.regime}, {"top1", r.top1}, {"samples", r.samples}, {"per_class", per_class}, {"config", r.config}};
  if (!r.extra.empty()) j["extra"] = r.extra;
}

inline EvalReport make_report(std::string regime, const std::vector<int>& predicted, const std::vector<int>& truth,
                              std::size_t num_classes, std::vector<std::string> class_names = {}) {
  if (predicted.size() != truth.size()) throw InvalidArgument("prediction and label counts differ");
  EvalReport r;
  r.regime = std::move(regime);
  r.samples = truth.size();
  r.class_names = std::move(class_names);
  std::size_t classes = num_classes;
  for (int y : truth) classes = std::max(classes, static_cast<std::size_t>(y) + 1);
  r.class_counts.assign(classes, 0);
  r.class_correct.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++r.class_counts[truth[i]];
    if (predicted[i] == truth[i]) {
      ++correct;
      ++r.class_correct[truth[i]];
    }
  }
  r.top1 = truth.empty() ? 0.0 : 100.0 * double(correct) / double(truth.size());
  return r;
}

// ---------------------------------------------------------------------------
// k-NN

struct Neighbor {
  std::size_t row = 0;
  double similarity = 0.0;
};

struct KnnDecision {
  int label = -1;
  std::vector<Neighbor> neighbors;
  std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, summed similarity)
};

inline double norm_of(const float* v, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += double(v[i]) * double(v[i]);
  return std::sqrt(s);
}

// Cosine similarity in double; a zero-norm operand gives -1.
inline double cosine(const float* a, double na, const float* b, double nb, std::size_t n) {
  if (na == 0.0 || nb == 0.0) return -1.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += double(a[i]) * double(b[i]);
  return s / (na * nb);
}

// Flat view used by both the evaluation harness and the lifelong support set.
struct KnnTable {
  const float* data = nullptr;
  const int* labels = nullptr;
  std::size_t rows = 0, width = 0;
  const double* norms = nullptr;  // optional, precomputed row norms
};

// Top-k by similarity (descending, then row index); zero-norm rows rank below
// every nonzero row. Majority label, ties by summed similarity then lowest id.
inline KnnDecision knn_decide(const KnnTable& t, const float* query, std::size_t k) {
  if (k < 1) throw InvalidArgument("k must be at least 1");
  if (t.rows == 0) throw EmptyInput("k-NN over an empty table");
  const double nq = norm_of(query, t.width);
  struct Cand {
    bool zero;
    double sim;
    std::size_t row;
  };
  std::vector<Cand> c(t.rows);
  for (std::size_t r = 0; r < t.rows; ++r) {
    const float* x = t.data + r * t.width;
    double nr = t.norms ? t.norms[r] : norm_of(x, t.width);
    c[r] = {nr == 0.0, cosine(query, nq, x, nr, t.width), r};
  }
  const std::size_t kk = std::min(k, t.rows);
  auto before = [](const Cand& a, const Cand& b) {
    if (a.zero != b.zero) return !a.zero;
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.row < b.row;
  };
  std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(kk), c.end(), before);
  KnnDecision d;
  for (std::size_t i = 0; i < kk; ++i) {
    d.neighbors.push_back({c[i].row, c[i].sim});
    auto& v = d.votes[t.labels[c[i].row]];
    ++v.first;
    v.second += c[i].sim;
  }
  const std::pair<std::size_t, double>* best = nullptr;
  for (const auto& [label, v] : d.votes)  // ascending label order
    if (!best || v.first > best->first || (v.first == best->first && v.second > best->second)) {
      best = &v;
      d.label = label;
    }
  return d;
}

inline std::vector<double> row_norms(const FeatureTable& t) {
  std::vector<double> n(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) n[r] = norm_of(t.row(r), t.width);
  return n;
}

inline std::vector<int> knn_classify(const FeatureTable& train, const FeatureTable& queries, std::size_t k,
                                     std::size_t threads = 0) {
  if (train.rows() == 0) throw EmptyInput("k-NN support table is empty");
  if (queries.rows() && queries.width != train.width)
    throw InvalidArgument("query width " + std::to_string(queries.width) + " vs table width " +
                          std::to_string(train.width));
  if (!train.fingerprint.empty() && !queries.fingerprint.empty() && train.fingerprint != queries.fingerprint)
    throw InvalidArgument("k-NN tables come from different feature extractors");
  auto norms = row_norms(train);
  KnnTable view{train.data.data(), train.labels.data(), train.rows(), train.width, norms.data()};
  std::vector<int> out(queries.rows());
  parallel_ranges(queries.rows(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t q = b; q < e; ++q) out[q] = knn_decide(view, queries.row(q), k).label;
  });
  return out;
}

inline EvalReport knn_eval(const FeatureTable& train, const FeatureTable& test, std::size_t k, std::size_t classes,
                           std::vector<std::string> names = {}, std::size_t threads = 0) {
  auto pred = knn_classify(train, test, k, threads);
  auto r = make_report("knn", pred, test.labels, classes, std::move(names));
  r.config = {{"k", k}, {"metric", "cosine"}, {"fingerprint", train.fingerprint}, {"train_rows", train.rows()}};
  return r;
}

// ---------------------------------------------------------------------------
// Linear evaluation

struct LinearConfig {
  double lr = 5e-4;
  double momentum = 0.9;
  std::size_t batch = 128;
  std::size_t epochs = 100;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const LinearConfig& c) {
  j = {{"optimizer", "sgd-momentum"}, {"lr", c.lr},     {"momentum", c.momentum},       {"batch", c.batch},
       {"epochs", c.epochs},          {"seed", c.seed}, {"weight_decay", c.weight_decay}};
}

inline Tensor<float> gather_features(const FeatureTable& t, std::span<const std::size_t> rows) {
  Tensor<float> x({rows.size(), t.width});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(t.row(rows[i]), t.width, x.row(i));
  return x;
}

// Trains a single linear layer on frozen features with SGD + momentum.
inline EvalReport linear_eval(const FeatureTable& train, const FeatureTable& test, std::size_t classes,
                              const LinearConfig& cfg = {}, std::vector<std::string> names = {}) {
  if (train.rows() == 0) throw EmptyInput("linear evaluation needs training features");
  if (test.rows() && test.width != train.width)
    throw InvalidArgument("test feature width " + std::to_string(test.width) + " does not match training width " +
                          std::to_string(train.width));
  if (cfg.batch == 0 || cfg.epochs == 0) throw InvalidArgument("batch and epochs must be positive");
  for (int y : train.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw InvalidArgument("training label out of range");
  std::mt19937_64 init_rng(cfg.seed);
  nn::ParamMap<float> head;
  nn::init_linear(head, "head", train.width, classes, init_rng);
  auto opt = nn::OptimizerConfig::sgd(cfg.lr, cfg.momentum);
  opt.weight_decay = cfg.weight_decay;
  nn::OptimizerState<float> st(opt);
  std::vector<std::size_t> order(train.rows());
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, epoch + 1);
    shuffle(order, rng);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
      std::span<const std::size_t> rows(order.data() + s, std::min(cfg.batch, order.size() - s));
      std::vector<int> labels;
      for (auto r : rows) labels.push_back(train.labels[r]);
      nn::Graph<float> g;
      g.bind(head);
      nn::Var logits = nn::linear(g, g.constant(gather_features(train, rows)), g.param("head.weight"),
                                  g.param("head.bias"));
      nn::Var loss = nn::cross_entropy<float>(g, logits, labels);
      float l = g.value(loss).data[0];
      if (!std::isfinite(l)) throw TrainingError("linear eval: non-finite loss in epoch " + std::to_string(epoch));
      total += l * rows.size();
      nn::optimizer_step(head, g.backward(loss), st);
    }
    losses.push_back(total / double(order.size()));
  }
  std::vector<int> pred(test.rows());
  for (std::size_t r = 0; r < test.rows(); ++r) {
    const auto& w = head.at("head.weight");
    const auto& b = head.at("head.bias");
    double best = -1e300;
    for (std::size_t c = 0; c < classes; ++c) {
      double z = b.data[c] + nn::detail::dot(w.row(c), test.row(r), train.width);
      if (z > best) {
        best = z;
        pred[r] = static_cast<int>(c);
      }
    }
  }
  auto rep = make_report("linear", pred, test.labels, classes, std::move(names));
  rep.config = cfg;
  rep.config["fingerprint"] = train.fingerprint;
  rep.extra["loss_log"] = losses;
  return rep;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
  double lr = 9e-5;
  std::size_t batch = 512;
  std::size_t epochs = 10;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999;
  bool linear_decay = true;
  std::uint64_t seed = 0;
  // Head replaced by a fresh MLP with this hidden width (0: feature width).
  bool fresh_head = true;
  std::size_t head_hidden = 0;
  // Head-only epochs (backbone frozen) before end-to-end training; 0 skips.
  std::size_t head_warmup_epochs = 0;
  double head_warmup_lr = 1e-3;
  std::size_t threads = 0;

  static FinetuneConfig variant() {
    FinetuneConfig c;
    c.lr = 3e-5;
    c.batch = 64;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"optimizer", "adamw"},
       {"lr", c.lr},
       {"batch", c.batch},
       {"epochs", c.epochs},
       {"schedule", c.linear_decay ? "linear-decay" : "constant"},
       {"weight_decay", c.weight_decay},
       {"betas", {c.beta1, c.beta2}},
       {"seed", c.seed},
       {"fresh_head", c.fresh_head},
       {"head_hidden", c.head_hidden},
       {"head_warmup_epochs", c.head_warmup_epochs},
       {"head_warmup_lr", c.head_warmup_lr}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  c = FinetuneConfig{};
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("schedule")) c.linear_decay = j.at("schedule").get<std::string>() == "linear-decay";
  c.seed = j.value("seed", c.seed);
  c.fresh_head = j.value("fresh_head", c.fresh_head);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.head_warmup_epochs = j.value("head_warmup_epochs", c.head_warmup_epochs);
  c.head_warmup_lr = j.value("head_warmup_lr", c.head_warmup_lr);
}

template <class T>
std::vector<int> predict(const FusionModel<T>& m, std::span<const RgbdSample<T>> samples, std::size_t threads = 0,
                         std::size_t batch = 32) {
  std::vector<int> out(samples.size());
  parallel_ranges(samples.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; s += batch) {
      std::size_t n = std::min(batch, e - s);
      nn::Graph<T> g(false);
      const auto& logits = g.value(fusion::forward<T>(g, samples.subspan(s, n), m));
      for (std::size_t r = 0; r < n; ++r) {
        const T* z = logits.row(r);
        out[s + r] = static_cast<int>(std::max_element(z, z + logits.cols()) - z);
      }
    }
  });
  return out;
}

template <class T>
std::vector<int> labels_of(std::span<const RgbdSample<T>> samples) {
  std::vector<int> y;
  for (const auto& s : samples) y.push_back(s.label);
  return y;
}

template <class T>
EvalReport evaluate(const FusionModel<T>& m, std::span<const RgbdSample<T>> samples, std::size_t threads = 0,
                    std::vector<std::string> names = {}) {
  auto r = make_report("finetune", predict(m, samples, threads), labels_of(samples), m.spec.base.num_classes,
                       std::move(names));
  r.config = {{"fusion", m.spec.label()}, {"fingerprint", fusion::fingerprint(m)}};
  return r;
}

// Logit averaging across models (all must share num_classes).
template <class T>
EvalReport evaluate_ensemble(const std::vector<FusionModel<T>>& models, std::span<const RgbdSample<T>> samples,
                             std::vector<std::string> names = {}) {
  if (models.empty()) throw InvalidArgument("ensemble needs at least one model");
  const std::size_t c = models.front().spec.base.num_classes;
  std::vector<double> sum(samples.size() * c, 0.0);
  for (const auto& m : models) {
    if (m.spec.base.num_classes != c) throw InvalidArgument("ensemble members disagree on class count");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      auto z = fusion::forward(samples[i], m);
      for (std::size_t k = 0; k < c; ++k) sum[i * c + k] += z.data[k];
    }
  }
  std::vector<int> pred(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    pred[i] = static_cast<int>(std::max_element(sum.begin() + i * c, sum.begin() + (i + 1) * c) - (sum.begin() + i * c));
  auto r = make_report("ensemble", pred, labels_of(samples), c, std::move(names));
  r.config = {{"members", models.size()}};
  return r;
}

template <class T>
struct FinetuneResult {
  FusionModel<T> model;
  EvalReport report;
  // Entry 0 is the mean training loss before any update, then one per epoch.
  std::vector<double> loss_log;
};

template <class T>
double mean_loss(const FusionModel<T>& m, std::span<const RgbdSample<T>> samples, std::size_t batch) {
  double total = 0.0;
  for (std::size_t s = 0; s < samples.size(); s += batch) {
    auto part = samples.subspan(s, std::min(batch, samples.size() - s));
    nn::Graph<T> g(false);
    auto labels = labels_of(part);
    nn::Var loss = nn::cross_entropy<T>(g, fusion::forward<T>(g, part, m), labels);
    total += double(g.value(loss).data[0]) * double(part.size());
  }
  return total / double(samples.size());
}

// End-to-end AdamW training with linear decay; the model is evaluated on
// `test` afterwards (skipped when `test` is empty).
template <class T>
FinetuneResult<T> finetune(FusionModel<T> m, std::span<const RgbdSample<T>> train, std::span<const RgbdSample<T>> test,
                           const FinetuneConfig& cfg, std::vector<std::string> names = {}) {
  if (train.empty()) throw EmptyInput("fine-tuning needs at least one training sample");
  if (cfg.epochs + cfg.head_warmup_epochs == 0 || cfg.batch == 0) throw InvalidArgument("epochs and batch must be positive");
  m.spec.validate();
  for (const auto& s : train)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= m.spec.base.num_classes)
      throw InvalidArgument("training label " + std::to_string(s.label) + " outside " +
                            std::to_string(m.spec.base.num_classes) + " classes");
  std::size_t batch = cfg.batch;
  if (batch > train.size()) {
    log(LogLevel::warn, "batch size " + std::to_string(batch) + " exceeds the " + std::to_string(train.size()) +
                            " training samples; clamping");
    batch = train.size();
  }
  if (cfg.fresh_head) {
    m.spec.base.head_hidden = cfg.head_hidden ? cfg.head_hidden : m.spec.feature_width();
    std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
    nn::init_head(m.params, m.spec.base, m.spec.feature_width(), rng);
  }
  const std::size_t steps_per_epoch = (train.size() + batch - 1) / batch;
  auto opt = nn::OptimizerConfig::adamw(cfg.lr, cfg.weight_decay, cfg.linear_decay ? steps_per_epoch * cfg.epochs : 0);
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  nn::OptimizerState<T> st(opt);

  auto warm = nn::OptimizerConfig::adamw(cfg.head_warmup_lr, cfg.weight_decay, 0);
  warm.beta1 = cfg.beta1;
  warm.beta2 = cfg.beta2;
  nn::OptimizerState<T> warm_st(warm);

  FinetuneResult<T> res;
  res.loss_log.push_back(mean_loss(m, train, batch));
  std::vector<std::size_t> order(train.size());
  std::vector<RgbdSample<T>> mb;
  const std::size_t total_epochs = cfg.head_warmup_epochs + cfg.epochs;
  for (std::size_t epoch = 1; epoch <= total_epochs; ++epoch) {
    const bool head_only = epoch <= cfg.head_warmup_epochs;
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, epoch);
    shuffle(order, rng);
    double total = 0.0;
    for (std::size_t s = 0, step = 0; s < order.size(); s += batch, ++step) {
      mb.clear();
      for (std::size_t i = s; i < std::min(order.size(), s + batch); ++i) mb.push_back(train[order[i]]);
      nn::Graph<T> g;
      nn::Var logits = fusion::forward<T>(g, mb, m);
      auto labels = labels_of<T>(mb);
      nn::Var loss = nn::cross_entropy<T>(g, logits, labels);
      const double l = g.value(loss).data[0];
      if (!std::isfinite(l))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      try {
        auto grads = g.backward(loss);
        if (head_only) {
          std::erase_if(grads, [](const auto& kv) { return kv.first.rfind("head.", 0) != 0; });
          nn::optimizer_step(m.params, grads, warm_st);
        } else {
          nn::optimizer_step(m.params, grads, st);
        }
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step) + ")");
      }
      total += l * double(mb.size());
    }
    res.loss_log.push_back(total / double(train.size()));
  }
  if (!fusion::is_unimodal(m.spec.mode)) m.rgbd_trained = true;
  res.report = test.empty() ? make_report("finetune", {}, {}, m.spec.base.num_classes, names)
                            : evaluate<T>(m, test, cfg.threads, names);
  nlohmann::json c = cfg;
  c["effective_batch"] = batch;
  c["fusion"] = m.spec.label();
  c["train_samples"] = train.size();
  res.report.config = c;
  res.report.extra["loss_log"] = res.loss_log;
  res.model = std::move(m);
  return res;
}

// ---------------------------------------------------------------------------
// Transfer

struct TransferRow {
  std::string mode;
  std::size_t shots = 0;  // 0: no target training
  std::string source;     // "transfer" or "target-only"
  std::size_t train_samples = 0;
  EvalReport report;
};

inline void to_json(nlohmann::json& j, const TransferRow& r) {
  j = {{"mode", r.mode}, {"shots", r.shots}, {"source", r.source}, {"train_samples", r.train_samples},
       {"top1", r.report.top1}, {"report", r.report}};
}

struct TransferConfig {
  std::vector<fusion::FusionSpec> modes;  // base spec taken from the source
  std::vector<std::size_t> shots = {0, 1, 5, 10, 20};
  FinetuneConfig finetune;
  std::uint64_t seed = 0;
  bool target_only = true;
};

// Target-domain model for `mode`: the source checkpoint itself when it already
// is a model of that mode with the right classes, otherwise weight-copy
// initialization from the unimodal source.
template <class T>
FusionModel<T> transfer_init(const nn::Checkpoint<T>& source, fusion::FusionSpec mode, std::size_t classes,
                             std::uint64_t seed) {
  auto src_spec = fusion::spec_of(source);
  if (src_spec.mode == mode.mode && src_spec.late_op == mode.late_op && source.spec.num_classes == classes)
    return fusion::model_from_checkpoint(source);
  mode.base = source.spec;
  mode.base.num_classes = classes;
  mode.base.head_hidden = 0;
  return fusion::init_from_rgb_checkpoint(source, mode, seed);
}

template <class T>
std::vector<TransferRow> transfer_experiment(const nn::Checkpoint<T>& source, std::span<const RgbdSample<T>> train,
                                             std::span<const RgbdSample<T>> test, std::size_t classes,
                                             const TransferConfig& cfg, std::vector<std::string> names = {}) {
  std::vector<std::size_t> shots = cfg.shots;
  std::sort(shots.begin(), shots.end());
  shots.erase(std::unique(shots.begin(), shots.end()), shots.end());
  std::vector<std::string> ids;
  for (const auto& s : train) ids.push_back(s.id);
  std::vector<TransferRow> rows;
  for (const auto& mode : cfg.modes) {
    for (std::size_t k : shots) {
      auto m = transfer_init(source, mode, classes, cfg.seed);
      TransferRow row{m.spec.label(), k, "transfer", 0, {}};
      if (k == 0) {
        row.report = evaluate<T>(m, test, cfg.finetune.threads, names);
      } else {
        auto picked = data::few_shot_subset(ids, k, cfg.seed + k);
        std::set<std::string> keep(picked.begin(), picked.end());
        std::vector<RgbdSample<T>> subset;
        for (const auto& s : train)
          if (keep.count(s.id)) subset.push_back(s);
        row.train_samples = subset.size();
        row.report = finetune<T>(std::move(m), subset, test, cfg.finetune, names).report;
      }
      row.report.regime = "transfer";
      rows.push_back(std::move(row));
    }
    if (cfg.target_only) {
      fusion::FusionSpec f = mode;
      f.base = source.spec;
      f.base.num_classes = classes;
      f.base.head_hidden = 0;
      auto m = fusion::init_model<T>(f, cfg.seed);
      TransferRow row{f.label(), train.size(), "target-only", train.size(), {}};
      row.report = finetune<T>(std::move(m), train, test, cfg.finetune, names).report;
      row.report.regime = "target-only";
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace rgbdvit::eval
