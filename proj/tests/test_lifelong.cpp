#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rgbdvit/lifelong.hpp"

using namespace rgbdvit;
using namespace rgbdvit::lifelong;

namespace {

std::vector<float> onehot(std::size_t n, std::size_t i, float scale = 1.0f) {
  std::vector<float> v(n, 0.0f);
  v[i] = scale;
  return v;
}

// C categories, `views` ids each, named "c<k>/i0/v<j>".
ProtocolDataset make_dataset(std::size_t c, std::size_t views) {
  ProtocolDataset d;
  for (std::size_t k = 0; k < c; ++k) {
    d.categories.push_back("c" + std::to_string(k));
    d.views.emplace_back();
    for (std::size_t j = 0; j < views; ++j)
      d.views.back().push_back("c" + std::to_string(k) + "/i0/v" + std::to_string(j));
  }
  return d;
}

std::size_t category_of_id(const std::string& id) { return std::stoul(id.substr(1, id.find('/') - 1)); }

// Features that carry the label exactly.
Extractor oracle_extractor(std::size_t c) {
  return [c](const std::string& id) { return onehot(c, category_of_id(id)); };
}

// Label direction plus a per-view perturbation.
Extractor noisy_extractor(std::size_t c, double noise) {
  return [c, noise](const std::string& id) {
    Rng rng = derive_rng(7, data::fnv1a(id));
    std::vector<float> v(c + 4);
    for (auto& x : v) x = static_cast<float>(noise * normal(rng));
    v[category_of_id(id)] += 1.0f;
    return v;
  };
}

// Features independent of the label.
Extractor random_extractor(std::size_t width) {
  return [width](const std::string& id) {
    Rng rng = derive_rng(11, data::fnv1a(id));
    std::vector<float> v(width);
    for (auto& x : v) x = static_cast<float>(normal(rng));
    return v;
  };
}

Interaction teach_event(int cat) {
  Interaction e;
  e.kind = EventKind::teach;
  e.category = cat;
  return e;
}

Interaction ask_event(int cat, bool ok) {
  Interaction e;
  e.kind = EventKind::ask;
  e.category = cat;
  e.predicted = ok ? cat : cat + 100;
  e.correct = ok;
  return e;
}

Interaction correct_event(int cat) {
  Interaction e;
  e.kind = EventKind::correct;
  e.category = cat;
  return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// Session primitives

TEST(Session, TeachGrowsSupportAndCategories) {
  Session s;
  auto a = s.teach(onehot(4, 0), "mug", "m1");
  EXPECT_TRUE(a.new_category);
  EXPECT_EQ(s.support().categories().size(), 1u);
  EXPECT_EQ(s.support().size(), 1u);
  auto b = s.teach(onehot(4, 1), "mug", "m2");
  EXPECT_FALSE(b.new_category);
  EXPECT_EQ(b.category, 0);
  EXPECT_EQ(s.support().categories().size(), 1u);
  EXPECT_EQ(s.support().size(), 2u);
  EXPECT_EQ(s.support().width(), 4u);
  EXPECT_THROW(s.teach(onehot(5, 1), "mug", "m3"), InvalidArgument);
  EXPECT_EQ(s.support().size(), 2u);
  EXPECT_EQ(s.qci(), 0u);
}

TEST(Session, AskSingleCategoryAndCounter) {
  Session s;
  EXPECT_THROW(s.ask(onehot(3, 0), "q0"), ProtocolError);
  s.teach(onehot(3, 0), "cup", "t");
  for (int i = 0; i < 5; ++i) {
    auto r = s.ask(onehot(3, i % 3, -1.0f), "q" + std::to_string(i), "cup");
    EXPECT_EQ(r.label, "cup");
    EXPECT_TRUE(*r.correct);
    EXPECT_EQ(s.qci(), std::uint64_t(i + 1));
  }
  EXPECT_EQ(s.classify(onehot(3, 2)).scores.size(), 1u);
}

TEST(Session, AskMatchesKnnClassify) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> d;
  Session s(3);
  for (int i = 0; i < 60; ++i) {
    std::vector<float> v(6);
    for (auto& x : v) x = d(rng);
    s.teach(v, "k" + std::to_string(i % 7), "t" + std::to_string(i));
  }
  auto table = s.support().as_table();
  eval::FeatureTable queries;
  for (int i = 0; i < 100; ++i) {
    std::vector<float> v(6);
    for (auto& x : v) x = d(rng);
    queries.append(v, -1, "q" + std::to_string(i));
  }
  auto expected = eval::knn_classify(table, queries, 3);
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    auto r = s.ask(std::span<const float>(queries.row(i), 6), queries.ids[i]);
    EXPECT_EQ(r.predicted, expected[i]);
  }
  EXPECT_EQ(s.support().size(), 60u);  // asks never add rows
}

TEST(Session, CorrectionAddsCorrectedRow) {
  Session s(1);
  s.teach(std::vector<float>{1, 0}, "a", "ta");
  s.teach(std::vector<float>{0, 1}, "b", "tb");
  auto r = s.ask(std::vector<float>{1, 0.2f}, "q", "b");
  ASSERT_FALSE(*r.correct);
  EXPECT_EQ(r.label, "a");
  auto ack = s.correct("q", "b");
  EXPECT_EQ(ack.support_size, 3u);
  EXPECT_EQ(s.support().rows().back().provenance, Provenance::corrected);
  EXPECT_EQ(s.support().rows().back().sample_id, "q");
  EXPECT_EQ(s.qci(), 2u);
  EXPECT_EQ(s.ask(std::vector<float>{1, 0.2f}, "q", "b").label, "b");
  EXPECT_THROW(s.correct_event(r.seq, "b"), Conflict);
  auto good = s.ask(std::vector<float>{0, 1}, "g", "b");
  EXPECT_THROW(s.correct_event(good.seq, "b"), ProtocolError);
  EXPECT_THROW(s.correct("never-asked", "b"), ProtocolError);
  EXPECT_THROW(s.correct_event(999, "b"), NotFound);
  // Audit trail
  const auto& log = s.log();
  EXPECT_EQ(log[3].kind, EventKind::correct);
  EXPECT_EQ(log[3].corrects, r.seq);
  auto j = to_json(log[3], s.support().categories(), false);
  EXPECT_EQ(j["provenance"], "corrected");
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_GT(log[i].seq, log[i - 1].seq);
}

TEST(Session, CorrectionWithoutKnownTruthMarksAskWrong) {
  Session s(1);
  s.teach(std::vector<float>{1, 0}, "a", "ta");
  auto r = s.ask(std::vector<float>{1, 0}, "q");
  EXPECT_FALSE(r.correct.has_value());
  EXPECT_THROW(s.correct_event(r.seq, "a"), ProtocolError);
  s.correct_event(r.seq, "z");
  EXPECT_EQ(s.log()[1].correct, false);
  EXPECT_EQ(s.support().categories().size(), 2u);
}

TEST(Session, EmptySessionClassifiesUnknown) {
  Session s;
  auto r = s.classify(onehot(3, 0));
  EXPECT_EQ(r.label, "unknown");
  EXPECT_TRUE(r.scores.empty());
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, GcaRatio) {
  std::vector<Interaction> log{teach_event(0)};
  for (int i = 0; i < 10; ++i) log.push_back(ask_event(0, i < 8));
  auto r = compute_metrics(log, 1, TeacherConfig{});
  EXPECT_DOUBLE_EQ(r.gca, 80.0);
  EXPECT_EQ(r.qci, 10u);
  // Single phase: APA equals GCA.
  EXPECT_DOUBLE_EQ(r.apa, r.gca);
}

TEST(Metrics, HandBuiltTwoPhaseLog) {
  // Phase 1 (1 known, window 3): asks T T T -> learned after 3.
  // Phase 2 (2 known, window 6): asks F T T F T T T T, two corrections.
  std::vector<Interaction> log{teach_event(0), ask_event(0, true), ask_event(0, true), ask_event(0, true),
                               teach_event(1)};
  const bool p2[] = {false, true, true, false, true, true, true, true};
  for (bool ok : p2) {
    log.push_back(ask_event(1, ok));
    if (!ok) log.push_back(correct_event(1));
  }
  TeacherConfig cfg;  // 0.67 means correct >= 2 * errors
  auto r = compute_metrics(log, 2, cfg, {"a", "b"});
  // Spreadsheet values:
  // QCI = 11 asks + 2 corrections = 13
  // Phase 2 windows of 6: [F T T F T T] 4/6 passes 4 >= 2*2
  // ALC = 2; rows: a 1, b 1 + 2 = 3; AIC = (1 + 3) / 2 = 2
  // GCA = 9/11; APA = (100 + 75) / 2
  EXPECT_EQ(r.qci, 13u);
  EXPECT_EQ(r.alc, 2u);
  EXPECT_DOUBLE_EQ(r.aic, 2.0);
  EXPECT_DOUBLE_EQ(r.aic_all, 2.0);
  EXPECT_NEAR(r.gca, 100.0 * 9.0 / 11.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.apa, 87.5);
  EXPECT_EQ(r.outcome, Outcome::all_learned);
  EXPECT_EQ(r.learned, (std::vector<std::string>{"a", "b"}));

  // Teaches counted on request.
  cfg.count_teaches = true;
  EXPECT_EQ(compute_metrics(log, 2, cfg).qci, 15u);

  // 0.7 needs 5/6 in a window: [T T F T T T] at the 7th ask of phase 2.
  cfg = TeacherConfig{};
  cfg.threshold = 0.7;
  EXPECT_EQ(compute_metrics(log, 2, cfg).alc, 2u);
  cfg.threshold = 0.9;  // needs 6/6: last six are T T F... no
  auto strict = compute_metrics(log, 2, cfg);
  EXPECT_EQ(strict.alc, 1u);
  EXPECT_DOUBLE_EQ(strict.aic, 1.0);
  EXPECT_DOUBLE_EQ(strict.aic_all, 2.0);
  EXPECT_EQ(strict.outcome, Outcome::budget_exhausted);
}

TEST(Metrics, TwoThirdsGateIsExact) {
  TeacherConfig c;
  EXPECT_TRUE(c.gate(4, 6));   // 4 correct vs 2 errors
  EXPECT_FALSE(c.gate(3, 5));  // 3 vs 2
  EXPECT_TRUE(c.gate(2, 3));
  c.threshold = 0.7;
  EXPECT_FALSE(c.gate(4, 6));
  EXPECT_TRUE(c.gate(7, 10));
}

TEST(Metrics, EmptyLog) {
  auto r = compute_metrics({}, 3, TeacherConfig{});
  EXPECT_EQ(r.qci, 0u);
  EXPECT_EQ(r.alc, 0u);
  EXPECT_EQ(r.gca, 0.0);
  EXPECT_EQ(r.apa, 0.0);
  EXPECT_FALSE(r.annotation.empty());
}

TEST(Metrics, RaisingThresholdNeverIncreasesAlc) {
  auto ds = make_dataset(6, 30);
  TeacherConfig run_cfg;
  run_cfg.budget = 60;
  run_cfg.threshold = 0.67;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    run_cfg.seed = seed;
    auto run = run_protocol_session(ds, noisy_extractor(6, 0.9), run_cfg);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double t : {0.5, 0.6, 0.67, 0.7, 0.75, 0.8, 0.9, 1.0}) {
      TeacherConfig c = run_cfg;
      c.threshold = t;
      auto r = compute_metrics(run.session.log(), 6, c);
      EXPECT_LE(r.alc, prev) << "seed " << seed << " tau " << t;
      prev = r.alc;
    }
  }
}

// ---------------------------------------------------------------------------
// Protocol

TEST(Protocol, OracleExtractorLearnsEverythingAtEveryPreset) {
  auto ds = make_dataset(8, 20);
  for (double t : TeacherConfig::benchmark_thresholds) {
    TeacherConfig c;
    c.threshold = t;
    auto r = run_protocol(ds, oracle_extractor(8), c);
    EXPECT_EQ(r.outcome, Outcome::all_learned) << t;
    EXPECT_EQ(r.alc, 8u);
    EXPECT_DOUBLE_EQ(r.aic, 1.0);
    EXPECT_DOUBLE_EQ(r.gca, 100.0);
    EXPECT_DOUBLE_EQ(r.apa, 100.0);
    // Phase with n known categories needs exactly 3n asks.
    EXPECT_EQ(r.qci, 3u * (8 * 9 / 2));
  }
}

TEST(Protocol, SeparableFeaturesAllLearned) {
  auto ds = make_dataset(10, 40);
  TeacherConfig c;
  auto r = run_protocol(ds, noisy_extractor(10, 0.3), c);
  EXPECT_EQ(r.outcome, Outcome::all_learned);
  EXPECT_EQ(r.alc, 10u);
  EXPECT_GE(r.aic, 1.0);
  EXPECT_LE(r.gca, 100.0);
  EXPECT_GE(r.apa, 0.0);
}

TEST(Protocol, RandomFeaturesStrictThresholdExhaustsBudget) {
  auto ds = make_dataset(10, 40);
  TeacherConfig c;
  c.threshold = 0.9;
  auto r = run_protocol(ds, random_extractor(16), c);
  EXPECT_EQ(r.outcome, Outcome::budget_exhausted);
  EXPECT_LT(r.alc, 10u);
  EXPECT_TRUE(r.annotation.empty());
}

TEST(Protocol, RunStateMatchesReplayedMetrics) {
  auto ds = make_dataset(6, 25);
  TeacherConfig c;
  c.seed = 3;
  auto run = run_protocol_session(ds, noisy_extractor(6, 0.8), c);
  auto replay = compute_metrics(run.session.log(), 6, c);
  EXPECT_EQ(run.report.alc, replay.alc);
  EXPECT_EQ(run.report.qci, run.session.qci());
  EXPECT_EQ(run.report.log.size(), run.session.log().size());
  // Every support row category is known and support never shrinks.
  std::size_t rows = 0;
  for (const auto& e : run.session.log()) {
    if (e.kind != EventKind::ask) ++rows;
    ASSERT_LT(static_cast<std::size_t>(e.category), run.session.support().categories().size());
  }
  EXPECT_EQ(rows, run.session.support().size());
}

TEST(Protocol, DeterministicPerSeedAndSeedsDiffer) {
  auto ds = make_dataset(5, 20);
  TeacherConfig c;
  auto a = run_protocol(ds, noisy_extractor(5, 0.8), c);
  auto b = run_protocol(ds, noisy_extractor(5, 0.8), c);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
  c.seed = 99;
  auto d = run_protocol(ds, noisy_extractor(5, 0.8), c);
  EXPECT_NE(nlohmann::json(a)["log"].dump(), nlohmann::json(d)["log"].dump());
}

TEST(Protocol, ReportHeaderSurfacesAssumptions) {
  auto r = run_protocol(make_dataset(2, 10), oracle_extractor(2), TeacherConfig{});
  nlohmann::json j = r;
  EXPECT_TRUE(j["config"].contains("window_rule"));
  EXPECT_TRUE(j["config"].contains("budget_rule"));
  EXPECT_TRUE(j["config"].contains("aic_rule"));
  EXPECT_DOUBLE_EQ(j["config"]["effective_threshold"].get<double>(), 2.0 / 3.0);
}

TEST(Protocol, ExtractorFailureYieldsAnnotatedReport) {
  auto ds = make_dataset(4, 10);
  int calls = 0;
  Extractor flaky = [&](const std::string& id) {
    if (++calls == 12) throw IoError("disk gone");
    return onehot(4, category_of_id(id));
  };
  auto r = run_protocol(ds, flaky, TeacherConfig{});
  EXPECT_EQ(r.outcome, Outcome::budget_exhausted);
  EXPECT_NE(r.annotation.find("disk gone"), std::string::npos);
  EXPECT_GT(r.qci, 0u);
}

TEST(Protocol, ViewsReshuffleWhenExhausted) {
  auto ds = make_dataset(2, 2);
  auto r = run_protocol(ds, oracle_extractor(2), TeacherConfig{});
  EXPECT_EQ(r.outcome, Outcome::all_learned);
}

TEST(Protocol, ConfigValidation) {
  auto ds = make_dataset(3, 5);
  TeacherConfig c;
  c.threshold = 0.0;
  EXPECT_THROW(run_protocol(ds, oracle_extractor(3), c), InvalidArgument);
  c.threshold = 1.1;
  EXPECT_THROW(run_protocol(ds, oracle_extractor(3), c), InvalidArgument);
  c = TeacherConfig{};
  c.budget = 8;  // final window is 9
  EXPECT_THROW(run_protocol(ds, oracle_extractor(3), c), InvalidArgument);
  EXPECT_THROW(run_protocol(ProtocolDataset{}, oracle_extractor(3), TeacherConfig{}), EmptyInput);
}

TEST(Protocol, AggregateIsArithmeticMean) {
  auto ds = make_dataset(5, 20);
  TeacherConfig c;
  auto reports = run_many(ds, noisy_extractor(5, 0.9), c, 6, 2);
  auto serial = run_many(ds, noisy_extractor(5, 0.9), c, 6, 1);
  auto a = aggregate(reports);
  EXPECT_EQ(a.runs, 6u);
  double qci = 0, gca = 0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    qci += double(reports[i].qci);
    gca += reports[i].gca;
    EXPECT_EQ(nlohmann::json(reports[i]).dump(), nlohmann::json(serial[i]).dump());
    EXPECT_EQ(reports[i].config.seed, c.seed + i);
  }
  EXPECT_DOUBLE_EQ(a.metrics["QCI"].first, qci / 6);
  EXPECT_DOUBLE_EQ(a.metrics["GCA"].first, gca / 6);
  auto table = format_table(a);
  EXPECT_EQ(table.rfind("QCI\tALC\tAIC\tGCA\tAPA\n", 0), 0u);
}

TEST(Protocol, DatasetFromIndexGroupsViewsByCategory) {
  auto root = std::filesystem::temp_directory_path() / "rgbdvit_lifelong_index";
  std::filesystem::remove_all(root);
  data::SynthConfig c;
  c.categories = 3;
  c.views = 2;
  auto idx = data::gen_synthetic(c, root);
  auto ds = protocol_dataset(idx);
  ASSERT_EQ(ds.categories, idx.categories);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(ds.views[k].size(), 4u);
    for (const auto& id : ds.views[k]) EXPECT_EQ(id.rfind(idx.categories[k] + "/", 0), 0u);
  }
  // A subset that skips a category drops it.
  auto sub = protocol_dataset(idx, {ds.views[0][0], ds.views[2][1]});
  EXPECT_EQ(sub.categories, (std::vector<std::string>{idx.categories[0], idx.categories[2]}));
  EXPECT_THROW(protocol_dataset(idx, {"nope/inst00/v000"}), NotFound);
}
