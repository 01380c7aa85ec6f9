#pragma once

// Open-ended teaching with a growing k-NN support set, the simulated-teacher
// protocol, and its summary metrics (QCI, ALC, AIC, GCA, APA).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rgbdvit/data.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/evalharness.hpp"
#include "rgbdvit/random.hpp"
#include "rgbdvit/util.hpp"

namespace rgbdvit::lifelong {

enum class Provenance { taught, corrected };
enum class EventKind { teach, ask, correct };

inline std::string to_string(Provenance p) { return p == Provenance::taught ? "taught" : "corrected"; }
inline std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::teach: return "teach";
    case EventKind::ask: return "ask";
    case EventKind::correct: return "correct";
  }
  return "?";
}
inline EventKind event_kind_from_string(std::string_view s) {
  if (s == "teach") return EventKind::teach;
  if (s == "ask") return EventKind::ask;
  if (s == "correct") return EventKind::correct;
  throw InvalidArgument("unknown event kind '" + std::string(s) + "'");
}

inline std::string encode_floats(std::span<const float> v) {
  std::vector<std::uint8_t> raw(v.size() * sizeof(float));
  if (!raw.empty()) std::memcpy(raw.data(), v.data(), raw.size());
  return base64_encode(raw);
}

inline std::vector<float> decode_floats(std::string_view s) {
  auto raw = base64_decode(s);
  if (raw.size() % sizeof(float)) throw PayloadError("feature payload is not a whole number of floats");
  std::vector<float> v(raw.size() / sizeof(float));
  if (!raw.empty()) std::memcpy(v.data(), raw.data(), raw.size());
  return v;
}

// ---------------------------------------------------------------------------
// Support set

struct SupportRow {
  std::string sample_id;
  int category = -1;
  Provenance provenance = Provenance::taught;
};

class SupportSet {
 public:
  std::size_t width() const { return width_; }
  std::size_t size() const { return rows_.size(); }
  const std::vector<SupportRow>& rows() const { return rows_; }
  const std::vector<std::string>& categories() const { return categories_; }
  const float* feature(std::size_t r) const { return data_.data() + r * width_; }

  int category_id(std::string_view name) const {
    auto it = std::find(categories_.begin(), categories_.end(), name);
    return it == categories_.end() ? -1 : static_cast<int>(it - categories_.begin());
  }

  // Returns the id and whether the category is new.
  std::pair<int, bool> ensure_category(const std::string& name) {
    if (name.empty()) throw InvalidArgument("category name must not be empty");
    int id = category_id(name);
    if (id >= 0) return {id, false};
    categories_.push_back(name);
    return {static_cast<int>(categories_.size() - 1), true};
  }

  void add(std::span<const float> f, int category, Provenance p, std::string sample_id) {
    if (category < 0 || static_cast<std::size_t>(category) >= categories_.size())
      throw InvalidArgument("support row category is not a known category");
    if (rows_.empty() && width_ == 0) width_ = f.size();
    if (f.size() != width_ || width_ == 0)
      throw InvalidArgument("feature width " + std::to_string(f.size()) + " does not match support width " +
                            std::to_string(width_));
    data_.insert(data_.end(), f.begin(), f.end());
    labels_.push_back(category);
    norms_.push_back(eval::norm_of(f.data(), f.size()));
    rows_.push_back({std::move(sample_id), category, p});
  }

  eval::KnnTable view() const { return {data_.data(), labels_.data(), rows_.size(), width_, norms_.data()}; }

  eval::FeatureTable as_table() const {
    eval::FeatureTable t;
    t.width = width_;
    t.data = data_;
    t.labels = labels_;
    for (const auto& r : rows_) t.ids.push_back(r.sample_id);
    return t;
  }

  std::vector<std::size_t> rows_per_category() const {
    std::vector<std::size_t> n(categories_.size(), 0);
    for (int l : labels_) ++n[l];
    return n;
  }

  bool operator==(const SupportSet& o) const {
    return width_ == o.width_ && data_ == o.data_ && labels_ == o.labels_ && categories_ == o.categories_ &&
           rows_.size() == o.rows_.size() &&
           std::equal(rows_.begin(), rows_.end(), o.rows_.begin(), [](const SupportRow& a, const SupportRow& b) {
             return a.sample_id == b.sample_id && a.category == b.category && a.provenance == b.provenance;
           });
  }

 private:
  std::size_t width_ = 0;
  std::vector<float> data_;
  std::vector<int> labels_;
  std::vector<double> norms_;
  std::vector<SupportRow> rows_;
  std::vector<std::string> categories_;
};

// ---------------------------------------------------------------------------
// Session

struct Interaction {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::teach;
  std::string sample_id;
  int category = -1;   // taught / true category (-1: unknown at ask time)
  int predicted = -1;  // asks only
  std::optional<bool> correct;  // asks only; filled by a later correction when unknown
  std::uint64_t corrects = 0;   // correct events: the ask they refer to
  std::vector<float> features;
};

struct TeachAck {
  std::uint64_t seq = 0;
  int category = -1;
  bool new_category = false;
  std::size_t support_size = 0;
};

struct AskResult {
  std::uint64_t seq = 0;
  int predicted = -1;  // -1 with no known categories
  std::string label;   // "unknown" with no known categories
  std::optional<bool> correct;
  std::vector<double> scores;  // best similarity per known category
  std::vector<eval::Neighbor> neighbors;
};

inline constexpr const char* kUnknownLabel = "unknown";

class Session {
 public:
  explicit Session(std::size_t k = 3) : k_(k) {
    if (k < 1) throw InvalidArgument("k must be at least 1");
  }

  std::size_t k() const { return k_; }
  const SupportSet& support() const { return support_; }
  const std::vector<Interaction>& log() const { return log_; }
  std::uint64_t qci() const { return qci_; }
  std::uint64_t last_seq() const { return log_.empty() ? 0 : log_.back().seq; }

  TeachAck teach(std::span<const float> f, const std::string& category, std::string sample_id) {
    check_width(f);
    auto [id, fresh] = support_.ensure_category(category);
    support_.add(f, id, Provenance::taught, sample_id);
    Interaction e;
    e.kind = EventKind::teach;
    e.sample_id = std::move(sample_id);
    e.category = id;
    e.features.assign(f.begin(), f.end());
    push(std::move(e));
    return {log_.back().seq, id, fresh, support_.size()};
  }

  // Classification without recording an event.
  AskResult classify(std::span<const float> f) const {
    AskResult r;
    r.label = kUnknownLabel;
    if (support_.size() == 0) return r;
    check_width(f);
    auto d = eval::knn_decide(support_.view(), f.data(), k_);
    r.predicted = d.label;
    r.label = support_.categories()[d.label];
    r.neighbors = std::move(d.neighbors);
    r.scores.assign(support_.categories().size(), -1.0);
    auto v = support_.view();
    const double nq = eval::norm_of(f.data(), f.size());
    for (std::size_t row = 0; row < v.rows; ++row) {
      double s = eval::cosine(f.data(), nq, support_.feature(row), v.norms[row], v.width);
      r.scores[v.labels[row]] = std::max(r.scores[v.labels[row]], s);
    }
    return r;
  }

  AskResult ask(std::span<const float> f, std::string sample_id, std::optional<std::string> truth = std::nullopt) {
    if (support_.size() == 0) throw ProtocolError("ask before any category was taught");
    AskResult r = classify(f);
    Interaction e;
    e.kind = EventKind::ask;
    e.sample_id = std::move(sample_id);
    e.predicted = r.predicted;
    if (truth) {
      e.category = support_.category_id(*truth);
      e.correct = e.category == r.predicted;
    }
    e.features.assign(f.begin(), f.end());
    r.correct = e.correct;
    push(std::move(e));
    ++qci_;
    r.seq = log_.back().seq;
    return r;
  }

  // Stores the features of ask `ask_seq` under its true category.
  TeachAck correct_event(std::uint64_t ask_seq, const std::string& truth) {
    auto it = std::find_if(log_.begin(), log_.end(), [&](const Interaction& e) { return e.seq == ask_seq; });
    if (it == log_.end() || it->kind != EventKind::ask)
      throw NotFound("no ask event with sequence number " + std::to_string(ask_seq));
    for (const auto& e : log_)
      if (e.kind == EventKind::correct && e.corrects == ask_seq)
        throw Conflict("ask " + std::to_string(ask_seq) + " was already corrected");
    const std::size_t ask_index = static_cast<std::size_t>(it - log_.begin());
    const int truth_id = support_.category_id(truth);
    if ((it->correct && *it->correct) || truth_id == it->predicted)
      throw ProtocolError("ask " + std::to_string(ask_seq) + " was answered correctly; nothing to correct");
    auto [id, fresh] = support_.ensure_category(truth);
    Interaction e;
    e.kind = EventKind::correct;
    e.sample_id = log_[ask_index].sample_id;
    e.category = id;
    e.corrects = ask_seq;
    e.features = log_[ask_index].features;
    support_.add(e.features, id, Provenance::corrected, e.sample_id);
    log_[ask_index].correct = false;
    if (log_[ask_index].category < 0) log_[ask_index].category = id;
    push(std::move(e));
    ++qci_;
    return {log_.back().seq, id, fresh, support_.size()};
  }

  // Corrects the most recent ask on `sample_id`.
  TeachAck correct(const std::string& sample_id, const std::string& truth) {
    for (auto it = log_.rbegin(); it != log_.rend(); ++it)
      if (it->kind == EventKind::ask && it->sample_id == sample_id) return correct_event(it->seq, truth);
    throw ProtocolError("no preceding ask on sample '" + sample_id + "'");
  }

 private:
  void check_width(std::span<const float> f) const {
    if (f.empty()) throw InvalidArgument("empty feature vector");
    if (support_.width() && f.size() != support_.width())
      throw InvalidArgument("feature width " + std::to_string(f.size()) + " does not match support width " +
                            std::to_string(support_.width()));
  }
  void push(Interaction e) {
    e.seq = last_seq() + 1;
    log_.push_back(std::move(e));
  }

  std::size_t k_;
  SupportSet support_;
  std::vector<Interaction> log_;
  std::uint64_t qci_ = 0;
};

inline nlohmann::json to_json(const Interaction& e, const std::vector<std::string>& names, bool with_features) {
  auto name = [&](int id) -> nlohmann::json {
    return id >= 0 && static_cast<std::size_t>(id) < names.size() ? nlohmann::json(names[id]) : nlohmann::json(nullptr);
  };
  nlohmann::json j = {{"seq", e.seq}, {"kind", to_string(e.kind)}, {"sample_id", e.sample_id},
                      {"category", name(e.category)}};
  if (e.kind == EventKind::ask) {
    j["predicted"] = name(e.predicted);
    j["correct"] = e.correct ? nlohmann::json(*e.correct) : nlohmann::json(nullptr);
  }
  if (e.kind == EventKind::correct) j["corrects"] = e.corrects;
  if (e.kind != EventKind::ask) j["provenance"] = e.kind == EventKind::teach ? "taught" : "corrected";
  if (with_features) j["features"] = encode_floats(e.features);
  return j;
}

// ---------------------------------------------------------------------------
// Protocol configuration and metrics

enum class Outcome { all_learned, budget_exhausted };

inline std::string to_string(Outcome o) { return o == Outcome::all_learned ? "all-learned" : "budget-exhausted"; }

struct TeacherConfig {
  double threshold = 0.67;
  // Gate window: window_factor * (#known categories) most recent asks of the
  // phase, and at least that many asks before the gate can fire.
  std::size_t window_factor = 3;
  // Iterations (asks + corrections) in one phase before giving up.
  std::size_t budget = 100;
  std::uint64_t seed = 0;
  std::size_t k = 3;
  bool count_teaches = false;
  bool shuffle_categories = true;

  static constexpr std::array<double, 4> benchmark_thresholds = {0.67, 0.7, 0.8, 0.9};

  void validate() const {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidArgument("protocol threshold must lie in (0, 1]");
    if (window_factor < 1) throw InvalidArgument("window factor must be at least 1");
    if (k < 1) throw InvalidArgument("k must be at least 1");
  }

  std::size_t window(std::size_t known) const { return window_factor * known; }

  // 0.67 stands for "correct answers at least double the errors", i.e. 2/3.
  double effective_threshold() const { return std::abs(threshold - 0.67) < 1e-9 ? 2.0 / 3.0 : threshold; }

  bool gate(std::size_t correct, std::size_t window_size) const {
    const double t = effective_threshold();
    if (std::abs(t - 2.0 / 3.0) < 1e-12) return correct >= 2 * (window_size - correct);
    return double(correct) >= t * double(window_size) - 1e-9;
  }
};

inline void to_json(nlohmann::json& j, const TeacherConfig& c) {
  j = {{"threshold", c.threshold},
       {"effective_threshold", c.effective_threshold()},
       {"window_rule", std::to_string(c.window_factor) + " x known categories, minimum as many asks per phase"},
       {"window_factor", c.window_factor},
       {"budget", c.budget},
       {"budget_rule", "iterations within one category phase"},
       {"seed", c.seed},
       {"k", c.k},
       {"metric", "cosine"},
       {"count_teaches", c.count_teaches},
       {"shuffle_categories", c.shuffle_categories},
       {"aic_rule", "mean support rows over learned categories (aic_all: over introduced categories)"}};
}

inline void from_json(const nlohmann::json& j, TeacherConfig& c) {
  c = TeacherConfig{};
  c.threshold = j.value("threshold", c.threshold);
  c.window_factor = j.value("window_factor", c.window_factor);
  c.budget = j.value("budget", c.budget);
  c.seed = j.value("seed", c.seed);
  c.k = j.value("k", c.k);
  c.count_teaches = j.value("count_teaches", c.count_teaches);
  c.shuffle_categories = j.value("shuffle_categories", c.shuffle_categories);
}

struct ProtocolReport {
  std::uint64_t qci = 0;
  std::size_t alc = 0;
  double aic = 0.0;
  double aic_all = 0.0;
  double gca = 0.0;
  double apa = 0.0;
  Outcome outcome = Outcome::budget_exhausted;
  std::string annotation;
  std::size_t total_categories = 0;
  std::size_t introduced = 0;
  std::size_t asks = 0;
  std::vector<std::string> learned;
  std::vector<double> phase_accuracy;
  TeacherConfig config;
  nlohmann::json log = nlohmann::json::array();
};

inline void to_json(nlohmann::json& j, const ProtocolReport& r) {
  j = {{"config", r.config},
       {"QCI", r.qci},
       {"ALC", r.alc},
       {"AIC", r.aic},
       {"AIC_all", r.aic_all},
       {"GCA", r.gca},
       {"APA", r.apa},
       {"outcome", to_string(r.outcome)},
       {"total_categories", r.total_categories},
       {"introduced", r.introduced},
       {"asks", r.asks},
       {"learned", r.learned},
       {"phase_accuracy", r.phase_accuracy},
       {"log", r.log}};
  if (!r.annotation.empty()) j["annotation"] = r.annotation;
}

// Replays a log: a phase starts at each teach of a new category; the phase's
// category is learned when the gate fires within it. Asks with unknown truth
// that were never corrected count as correct.
inline ProtocolReport compute_metrics(const std::vector<Interaction>& log, std::size_t total_categories,
                                      const TeacherConfig& cfg, const std::vector<std::string>& names = {}) {
  cfg.validate();
  ProtocolReport r;
  r.config = cfg;
  r.total_categories = total_categories;
  if (log.empty()) {
    r.annotation = "empty log";
    return r;
  }
  struct Phase {
    int category;
    std::size_t asks = 0, correct = 0;
    bool learned = false;
    std::deque<bool> window;
  };
  std::vector<Phase> phases;
  std::map<int, std::size_t> rows;
  std::size_t total_asks = 0, total_correct = 0;
  std::vector<char> known;
  for (const auto& e : log) {
    switch (e.kind) {
      case EventKind::teach:
        ++rows[e.category];
        if (static_cast<std::size_t>(e.category) >= known.size()) known.resize(e.category + 1, 0);
        if (!known[e.category]) {
          known[e.category] = 1;
          phases.push_back({e.category});
        }
        if (cfg.count_teaches) ++r.qci;
        break;
      case EventKind::correct:
        ++rows[e.category];
        ++r.qci;
        break;
      case EventKind::ask: {
        ++r.qci;
        const bool ok = e.correct.value_or(true);
        ++total_asks;
        total_correct += ok;
        if (phases.empty()) break;
        auto& p = phases.back();
        ++p.asks;
        p.correct += ok;
        const std::size_t w = cfg.window(static_cast<std::size_t>(std::count(known.begin(), known.end(), 1)));
        p.window.push_back(ok);
        while (p.window.size() > w) p.window.pop_front();
        if (!p.learned && p.window.size() >= w &&
            cfg.gate(static_cast<std::size_t>(std::count(p.window.begin(), p.window.end(), true)), w))
          p.learned = true;
        break;
      }
    }
  }
  r.asks = total_asks;
  r.introduced = phases.size();
  r.gca = total_asks ? 100.0 * double(total_correct) / double(total_asks) : 0.0;
  double apa = 0.0, learned_rows = 0.0, all_rows = 0.0;
  std::size_t scored = 0;
  for (const auto& p : phases) {
    all_rows += double(rows[p.category]);
    if (p.asks) {
      double acc = 100.0 * double(p.correct) / double(p.asks);
      r.phase_accuracy.push_back(acc);
      apa += acc;
      ++scored;
    }
    if (p.learned) {
      ++r.alc;
      learned_rows += double(rows[p.category]);
      r.learned.push_back(static_cast<std::size_t>(p.category) < names.size() ? names[p.category]
                                                                              : std::to_string(p.category));
    }
  }
  r.apa = scored ? apa / double(scored) : 0.0;
  r.aic = r.alc ? learned_rows / double(r.alc) : 0.0;
  r.aic_all = phases.empty() ? 0.0 : all_rows / double(phases.size());
  r.outcome = total_categories > 0 && r.alc == total_categories ? Outcome::all_learned : Outcome::budget_exhausted;
  if (total_asks == 0) r.annotation = "no questions asked";
  return r;
}

// ---------------------------------------------------------------------------
// Simulated teacher

struct ProtocolDataset {
  std::vector<std::string> categories;
  std::vector<std::vector<std::string>> views;  // sample ids per category
};

inline ProtocolDataset protocol_dataset(const data::DatasetIndex& idx, const std::vector<std::string>& ids = {}) {
  ProtocolDataset d;
  d.categories = idx.categories;
  d.views.resize(d.categories.size());
  std::map<std::string, int> label;
  for (const auto& e : idx.entries) label[e.id()] = idx.label_of(e.category);
  for (const auto& id : ids.empty() ? idx.ids() : ids) {
    auto it = label.find(id);
    if (it == label.end()) throw NotFound("no dataset entry '" + id + "'");
    d.views[it->second].push_back(id);
  }
  // Drop categories with no views.
  ProtocolDataset out;
  for (std::size_t c = 0; c < d.categories.size(); ++c)
    if (!d.views[c].empty()) {
      out.categories.push_back(d.categories[c]);
      out.views.push_back(std::move(d.views[c]));
    }
  return out;
}

using Extractor = std::function<std::vector<float>(const std::string& sample_id)>;

// Draws views of one category without replacement; reshuffles when exhausted.
class ViewSampler {
 public:
  ViewSampler(std::vector<std::string> ids, Rng rng) : ids_(std::move(ids)), rng_(std::move(rng)) {
    shuffle(ids_, rng_);
  }
  const std::string& next(const std::string& category) {
    if (pos_ == ids_.size()) {
      log(LogLevel::info, "views of '" + category + "' exhausted; reshuffling");
      shuffle(ids_, rng_);
      pos_ = 0;
      ++restarts_;
    }
    return ids_[pos_++];
  }
  std::size_t restarts() const { return restarts_; }

 private:
  std::vector<std::string> ids_;
  Rng rng_;
  std::size_t pos_ = 0, restarts_ = 0;
};

struct ProtocolRun {
  ProtocolReport report;
  Session session;
};

inline ProtocolRun run_protocol_session(const ProtocolDataset& ds, const Extractor& extract, const TeacherConfig& cfg) {
  cfg.validate();
  const std::size_t c = ds.categories.size();
  if (c == 0) throw EmptyInput("protocol needs at least one category with views");
  if (ds.views.size() != c) throw InvalidArgument("protocol dataset views do not match categories");
  for (std::size_t i = 0; i < c; ++i)
    if (ds.views[i].empty()) throw EmptyInput("category '" + ds.categories[i] + "' has no views");
  if (cfg.budget < cfg.window(c))
    throw InvalidArgument("budget " + std::to_string(cfg.budget) + " is below the final gate window " +
                          std::to_string(cfg.window(c)) + "; the last category could never be learned");

  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  if (cfg.shuffle_categories) {
    Rng rng = derive_rng(cfg.seed, 1);
    shuffle(order, rng);
  }
  std::vector<ViewSampler> samplers;
  for (std::size_t i = 0; i < c; ++i)
    samplers.emplace_back(ds.views[i], derive_rng(cfg.seed, data::fnv1a(ds.categories[i]) + 2));
  Rng ask_rng = derive_rng(cfg.seed, 3);

  Session s(cfg.k);
  std::string annotation;
  bool exhausted = false;
  std::vector<std::size_t> known;  // dataset indices in introduction order
  try {
    for (std::size_t next : order) {
      known.push_back(next);
      const std::string& teach_id = samplers[next].next(ds.categories[next]);
      s.teach(extract(teach_id), ds.categories[next], teach_id);
      const std::size_t w = cfg.window(known.size());
      std::deque<bool> window;
      std::deque<std::size_t> queue;
      std::size_t iterations = 0;
      bool learned = false;
      while (!learned) {
        if (iterations >= cfg.budget) {
          exhausted = true;
          break;
        }
        if (queue.empty()) {
          queue.assign(known.begin(), known.end());
          shuffle(queue, ask_rng);
        }
        const std::size_t cat = queue.front();
        queue.pop_front();
        const std::string& id = samplers[cat].next(ds.categories[cat]);
        auto f = extract(id);
        auto res = s.ask(f, id, ds.categories[cat]);
        ++iterations;
        if (!*res.correct) {
          s.correct_event(res.seq, ds.categories[cat]);
          ++iterations;
        }
        window.push_back(*res.correct);
        while (window.size() > w) window.pop_front();
        if (window.size() >= w && cfg.gate(static_cast<std::size_t>(std::count(window.begin(), window.end(), true)), w))
          learned = true;
      }
      if (exhausted) break;
    }
  } catch (const std::exception& e) {
    exhausted = true;
    annotation = std::string("extractor failure: ") + e.what();
  }

  ProtocolRun run{compute_metrics(s.log(), c, cfg, s.support().categories()), std::move(s)};
  if (exhausted) run.report.outcome = Outcome::budget_exhausted;
  if (!annotation.empty()) run.report.annotation = annotation;
  for (const auto& e : run.session.log()) run.report.log.push_back(to_json(e, run.session.support().categories(), false));
  return run;
}

inline ProtocolReport run_protocol(const ProtocolDataset& ds, const Extractor& extract, const TeacherConfig& cfg) {
  return run_protocol_session(ds, extract, cfg).report;
}

// Mean and sample standard deviation over seeded runs.
struct Aggregate {
  std::size_t runs = 0;
  std::map<std::string, std::pair<double, double>> metrics;  // name -> (mean, sd)
  std::size_t all_learned = 0;
};

inline Aggregate aggregate(const std::vector<ProtocolReport>& reports) {
  Aggregate a;
  a.runs = reports.size();
  if (reports.empty()) return a;
  auto stat = [&](auto get) {
    double m = 0.0;
    for (const auto& r : reports) m += get(r);
    m /= double(reports.size());
    double v = 0.0;
    for (const auto& r : reports) v += (get(r) - m) * (get(r) - m);
    double sd = reports.size() > 1 ? std::sqrt(v / double(reports.size() - 1)) : 0.0;
    return std::make_pair(m, sd);
  };
  a.metrics["QCI"] = stat([](const ProtocolReport& r) { return double(r.qci); });
  a.metrics["ALC"] = stat([](const ProtocolReport& r) { return double(r.alc); });
  a.metrics["AIC"] = stat([](const ProtocolReport& r) { return r.aic; });
  a.metrics["GCA"] = stat([](const ProtocolReport& r) { return r.gca; });
  a.metrics["APA"] = stat([](const ProtocolReport& r) { return r.apa; });
  for (const auto& r : reports) a.all_learned += r.outcome == Outcome::all_learned;
  return a;
}

inline void to_json(nlohmann::json& j, const Aggregate& a) {
  j = {{"runs", a.runs}, {"all_learned", a.all_learned}};
  for (const auto& [k, v] : a.metrics) j[k] = {{"mean", v.first}, {"sd", v.second}};
}

inline std::string format_table(const Aggregate& a) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(1);
  o << "QCI\tALC\tAIC\tGCA\tAPA\n";
  const char* order[] = {"QCI", "ALC", "AIC", "GCA", "APA"};
  for (std::size_t i = 0; i < 5; ++i) {
    auto it = a.metrics.find(order[i]);
    if (it == a.metrics.end()) o << "-";
    else o << it->second.first << " +/- " << it->second.second;
    o << (i + 1 < 5 ? "\t" : "\n");
  }
  return o.str();
}

// Seeds seed, seed+1, ...; runs may execute on several threads.
inline std::vector<ProtocolReport> run_many(const ProtocolDataset& ds, const Extractor& extract, TeacherConfig cfg,
                                            std::size_t runs, std::size_t threads = 1) {
  std::vector<ProtocolReport> out(runs);
  eval::parallel_ranges(runs, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      TeacherConfig c = cfg;
      c.seed = cfg.seed + r;
      out[r] = run_protocol(ds, extract, c);
    }
  });
  return out;
}

}  // namespace rgbdvit::lifelong
