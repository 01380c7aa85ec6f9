#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "fusion_fixtures.hpp"
#include "rgbdvit/evalharness.hpp"

using namespace rgbdvit;
using namespace rgbdvit::eval;
using fusion::FusionSpec;
using fusion::LateOp;
using fusion::Mode;
using oracle::random_samples;
using oracle::toy_spec;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rgbdvit_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

FeatureTable random_table(std::size_t rows, std::size_t width, int labels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  FeatureTable t;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<float> v(width);
    for (auto& x : v) x = d(rng);
    t.append(v, static_cast<int>(rng() % labels), "row" + std::to_string(r));
  }
  return t;
}

// Exhaustive scan: long-double cosine for every row, full stable sort, vote.
int oracle_knn(const FeatureTable& t, const float* q, std::size_t k) {
  auto nrm = [&](const float* v) {
    long double s = 0;
    for (std::size_t i = 0; i < t.width; ++i) s += (long double)v[i] * v[i];
    return std::sqrt(s);
  };
  struct C {
    long double sim;
    bool zero;
    std::size_t row;
  };
  std::vector<C> all;
  long double nq = nrm(q);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    long double nr = nrm(t.row(r)), dot = 0;
    for (std::size_t i = 0; i < t.width; ++i) dot += (long double)q[i] * t.row(r)[i];
    bool zero = nr == 0 || nq == 0;
    all.push_back({zero ? -1.0L : dot / (nr * nq), nr == 0, r});
  }
  std::stable_sort(all.begin(), all.end(), [](const C& a, const C& b) {
    if (a.zero != b.zero) return !a.zero;
    return a.sim > b.sim;
  });
  std::map<int, std::pair<int, long double>> votes;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) {
    auto& v = votes[t.labels[all[i].row]];
    v.first++;
    v.second += all[i].sim;
  }
  int best = -1, count = -1;
  long double sum = 0;
  for (auto& [label, v] : votes)
    if (v.first > count || (v.first == count && v.second > sum + 1e-12L)) {
      best = label;
      count = v.first;
      sum = v.second;
    }
  return best;
}

std::vector<fusion::RgbdSample<float>> instance_samples(const nn::ModelSpec& s, std::size_t classes,
                                                        std::size_t instances, std::size_t views,
                                                        std::uint64_t seed) {
  auto spec = s;
  spec.num_classes = classes;
  auto out = random_samples<float>(spec, classes * instances * views, seed);
  std::size_t i = 0;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t n = 0; n < instances; ++n)
      for (std::size_t v = 0; v < views; ++v, ++i) {
        out[i].label = static_cast<int>(c);
        out[i].instance = static_cast<int>(n);
        out[i].id = "c" + std::to_string(c) + "/i" + std::to_string(n) + "/v" + std::to_string(v);
      }
  return out;
}

// Samples whose class is readable from the mean RGB intensity.
std::vector<fusion::RgbdSample<float>> easy_samples(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  auto s = instance_samples(toy_spec(classes), classes, 1, per_class, seed);
  for (auto& x : s)
    for (auto& v : x.rgb.data) v = 0.3f * v + (float(x.label) - float(classes - 1) / 2.0f);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// k-NN

TEST(Knn, NearestDirection) {
  FeatureTable t;
  t.append(std::vector<float>{1, 0}, 0, "A");
  t.append(std::vector<float>{-1, 0}, 1, "B");
  FeatureTable q;
  q.append(std::vector<float>{0.9f, 0}, -1, "q");
  EXPECT_EQ(knn_classify(t, q, 1), std::vector<int>{0});
}

TEST(Knn, MatchesExhaustiveOracleK3) {
  auto train = random_table(200, 8, 5, 1);
  auto queries = random_table(300, 8, 5, 2);
  auto pred = knn_classify(train, queries, 3);
  for (std::size_t q = 0; q < queries.rows(); ++q) EXPECT_EQ(pred[q], oracle_knn(train, queries.row(q), 3)) << q;
}

TEST(Knn, MatchesOracleAtTableLimit) {
  auto train = random_table(1000, 6, 10, 3);
  auto queries = random_table(200, 6, 10, 4);
  for (std::size_t k : {1u, 3u, 7u}) {
    auto pred = knn_classify(train, queries, k);
    for (std::size_t q = 0; q < queries.rows(); ++q) ASSERT_EQ(pred[q], oracle_knn(train, queries.row(q), k));
  }
}

TEST(Knn, DistinctLabelsFallBackToSummedSimilarity) {
  // 200 labels over 200 rows: almost every top-3 has three distinct labels.
  auto train = random_table(200, 4, 1, 5);
  for (std::size_t r = 0; r < train.rows(); ++r) train.labels[r] = static_cast<int>(r);
  auto queries = random_table(200, 4, 1, 6);
  auto pred = knn_classify(train, queries, 3);
  std::size_t distinct = 0;
  auto norms = row_norms(train);
  KnnTable view{train.data.data(), train.labels.data(), train.rows(), train.width, norms.data()};
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    auto d = knn_decide(view, queries.row(q), 3);
    if (d.votes.size() == 3) {
      ++distinct;
      EXPECT_EQ(d.label, train.labels[d.neighbors[0].row]);  // each vote sums one similarity
    }
    EXPECT_EQ(pred[q], oracle_knn(train, queries.row(q), 3));
  }
  EXPECT_EQ(distinct, queries.rows());
}

TEST(Knn, ExactTiesGoToLowestLabel) {
  FeatureTable t;
  t.append(std::vector<float>{1, 1}, 7, "a");
  t.append(std::vector<float>{1, 1}, 3, "b");
  t.append(std::vector<float>{2, 2}, 5, "c");
  t.append(std::vector<float>{-1, 0}, 0, "d");
  FeatureTable q;
  q.append(std::vector<float>{1, 1}, -1, "q");
  // Three neighbors with identical similarity and distinct labels.
  EXPECT_EQ(knn_classify(t, q, 3), std::vector<int>{3});
  // Majority beats similarity.
  t.append(std::vector<float>{0.2f, 1}, 0, "e");
  t.append(std::vector<float>{1, 0.2f}, 0, "f");
  FeatureTable q2;
  q2.append(std::vector<float>{1, 0.9f}, -1, "q");
  auto d = knn_decide({t.data.data(), t.labels.data(), t.rows(), t.width, nullptr}, q2.row(0), 5);
  EXPECT_EQ(d.label, 0);
}

TEST(Knn, ZeroNormRowsRankLast) {
  FeatureTable t;
  t.append(std::vector<float>{0, 0}, 0, "zero");
  t.append(std::vector<float>{-1, 0}, 1, "opposite");
  FeatureTable q;
  q.append(std::vector<float>{1, 0}, -1, "q");
  // cos = -1 for both; the nonzero row still wins.
  EXPECT_EQ(knn_classify(t, q, 1), std::vector<int>{1});
  FeatureTable zq;
  zq.append(std::vector<float>{0, 0}, -1, "zq");
  EXPECT_EQ(knn_classify(t, zq, 1), std::vector<int>{1});
}

TEST(Knn, Errors) {
  FeatureTable empty, q;
  q.append(std::vector<float>{1, 0}, 0, "q");
  EXPECT_THROW(knn_classify(empty, q, 3), EmptyInput);
  auto t = random_table(5, 2, 2, 1);
  EXPECT_THROW(knn_classify(t, q, 0), InvalidArgument);
  auto wide = random_table(1, 3, 2, 1);
  EXPECT_THROW(knn_classify(t, wide, 1), InvalidArgument);
  EXPECT_THROW(t.append(std::vector<float>{1, 2, 3}, 0, "x"), InvalidArgument);
  auto other = random_table(2, 2, 2, 9);
  t.fingerprint = "a";
  other.fingerprint = "b";
  EXPECT_THROW(knn_classify(t, other, 1), InvalidArgument);
}

TEST(Knn, AccuracyInvariantUnderTestPermutation) {
  auto train = random_table(150, 5, 3, 11);
  auto test = random_table(120, 5, 3, 12);
  auto base = knn_eval(train, test, 3, 3);
  std::vector<std::size_t> perm(test.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(3);
  std::shuffle(perm.begin(), perm.end(), rng);
  FeatureTable shuffled;
  for (auto r : perm) shuffled.append(std::span<const float>(test.row(r), test.width), test.labels[r], test.ids[r]);
  auto again = knn_eval(train, shuffled, 3, 3);
  EXPECT_EQ(base.top1, again.top1);
  EXPECT_EQ(base.class_correct, again.class_correct);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, CountsAndBounds) {
  auto r = make_report("knn", {0, 1, 1, 2, 0}, {0, 1, 2, 2, 1}, 3, {"a", "b", "c"});
  EXPECT_DOUBLE_EQ(r.top1, 60.0);
  EXPECT_EQ(r.samples, 5u);
  std::size_t total = 0;
  for (auto c : r.class_counts) total += c;
  EXPECT_EQ(total, r.samples);
  EXPECT_DOUBLE_EQ(r.class_accuracy(1), 50.0);
  nlohmann::json j = r;
  EXPECT_EQ(j["per_class"].size(), 3u);
  EXPECT_EQ(j["per_class"][2]["name"], "c");
  EXPECT_THROW(make_report("x", {0}, {0, 1}, 2), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Feature extraction

TEST(Extract, WidthsPerMode) {
  auto tiny = nn::ModelSpec::preset("tiny");
  tiny.image_size = 32;
  tiny.num_classes = 3;
  auto samples = random_samples<float>(tiny, 2, 1);
  auto late = fusion::init_model<float>(FusionSpec::make(Mode::late, tiny, LateOp::cat), 1);
  EXPECT_EQ(extract_features<float>(samples, late).width, 384u);
  auto rgb = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, tiny), 1);
  EXPECT_EQ(extract_features<float>(samples, rgb).width, 192u);
}

TEST(Extract, EarlyModeNeedsRgbdTraining) {
  auto spec = toy_spec(3);
  auto samples = random_samples<float>(spec, 3, 1);
  auto rgb = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, spec), 2);
  auto ck = fusion::to_checkpoint(rgb);
  for (auto mode : {Mode::early_dual, Mode::early_joint}) {
    auto m = fusion::init_from_rgb_checkpoint(ck, FusionSpec::make(mode, spec), 3);
    EXPECT_THROW(extract_features<float>(samples, m), UnsupportedRegime);
    m.rgbd_trained = true;
    EXPECT_EQ(extract_features<float>(samples, m).rows(), 3u);
  }
}

TEST(Extract, BitIdenticalAndOrderStableAcrossThreads) {
  auto spec = toy_spec(3);
  auto samples = random_samples<float>(spec, 23, 4);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].id = "s" + std::to_string(i);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::late, spec, LateOp::avg), 5);
  auto a = extract_features<float>(samples, m, 1, 4);
  auto b = extract_features<float>(samples, m, 1, 4);
  EXPECT_EQ(a, b);
  auto c = extract_features<float>(samples, m, 3, 4);
  EXPECT_EQ(a.ids, c.ids);
  EXPECT_EQ(a.labels, c.labels);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto single = fusion::extract<float>(std::span<const fusion::RgbdSample<float>>(&samples[r], 1), m);
    for (std::size_t k = 0; k < a.width; ++k) ASSERT_NEAR(c.row(r)[k], single.data[k], 1e-5);
  }
}

TEST(Extract, CacheKeyedByFingerprint) {
  auto dir = temp_dir("cache");
  auto spec = toy_spec(3);
  auto samples = random_samples<float>(spec, 4, 1);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].id = "s" + std::to_string(i);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, spec), 1);
  auto path = dir / "features.json";
  auto first = cached_features<float>(path, samples, m);
  ASSERT_TRUE(fs::exists(path));
  EXPECT_EQ(load_table(path), first);
  // A tampered cache with the right fingerprint is reused as-is.
  auto tampered = first;
  tampered.data[0] = 1234.5f;
  save_table(path, tampered);
  EXPECT_EQ(cached_features<float>(path, samples, m).data[0], 1234.5f);
  // A different extractor invalidates it.
  auto m2 = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, spec), 2);
  auto fresh = cached_features<float>(path, samples, m2);
  EXPECT_EQ(fresh.fingerprint, fusion::fingerprint(m2));
  EXPECT_NE(fresh.data[0], 1234.5f);
  EXPECT_NE(first.fingerprint, fresh.fingerprint);
}

// ---------------------------------------------------------------------------
// Linear evaluation

TEST(LinearEval, DefaultsEchoed) {
  LinearConfig c;
  EXPECT_DOUBLE_EQ(c.lr, 5e-4);
  EXPECT_DOUBLE_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.batch, 128u);
  auto train = random_table(20, 3, 2, 1);
  auto r = linear_eval(train, train, 2, c);
  EXPECT_EQ(r.regime, "linear");
  EXPECT_DOUBLE_EQ(r.config["lr"].get<double>(), 5e-4);
  EXPECT_DOUBLE_EQ(r.config["momentum"].get<double>(), 0.9);
  EXPECT_EQ(r.config["batch"].get<std::size_t>(), 128u);
  EXPECT_EQ(r.config["optimizer"], "sgd-momentum");
  EXPECT_EQ(r.config["seed"].get<std::uint64_t>(), 0u);
}

TEST(LinearEval, SeparableTwoClass) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> d(0.0f, 0.3f);
  FeatureTable train, test;
  for (int i = 0; i < 400; ++i) {
    int y = i % 2;
    std::vector<float> v{(y ? 2.0f : -2.0f) + d(rng), d(rng), d(rng)};
    (i < 300 ? train : test).append(v, y, std::to_string(i));
  }
  auto r = linear_eval(train, test, 2);
  EXPECT_DOUBLE_EQ(r.top1, 100.0);
  EXPECT_LE(r.top1, 100.0);
}

TEST(LinearEval, ShuffledLabelsGiveChance) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d(0.0f, 0.3f);
  const int classes = 4;
  FeatureTable train, test;
  for (int i = 0; i < 1200; ++i) {
    int y = i % classes;
    std::vector<float> v(6);
    for (auto& x : v) x = d(rng);
    v[y] += 2.0f;
    (i < 800 ? train : test).append(v, y, std::to_string(i));
  }
  // Labels on both sides are permuted, so every test prediction is an
  // independent 1/C guess.
  auto train_truth = train.labels, test_truth = test.labels;
  std::shuffle(train.labels.begin(), train.labels.end(), rng);
  std::shuffle(test.labels.begin(), test.labels.end(), rng);
  auto r = linear_eval(train, test, classes);
  const double n = double(test.rows()), p = 1.0 / classes;
  const double sigma = 100.0 * std::sqrt(p * (1 - p) / n);
  EXPECT_LE(std::abs(r.top1 - 100.0 * p), 3 * sigma) << r.top1;
  // Unshuffled control on the same features learns the task.
  train.labels = train_truth;
  test.labels = test_truth;
  EXPECT_GT(linear_eval(train, test, classes).top1, 95.0);
}

TEST(LinearEval, WidthMismatch) {
  auto a = random_table(10, 3, 2, 1), b = random_table(10, 4, 2, 2);
  EXPECT_THROW(linear_eval(a, b, 2), InvalidArgument);
  EXPECT_THROW(linear_eval(FeatureTable{}, b, 2), EmptyInput);
  EXPECT_THROW(linear_eval(a, a, 1), InvalidArgument);  // labels up to 1 need two classes
}

// ---------------------------------------------------------------------------
// Fine-tuning

TEST(Finetune, DefaultsAndVariant) {
  FinetuneConfig c;
  EXPECT_DOUBLE_EQ(c.lr, 9e-5);
  EXPECT_EQ(c.batch, 512u);
  EXPECT_EQ(c.epochs, 10u);
  EXPECT_TRUE(c.linear_decay);
  nlohmann::json j = c;
  EXPECT_EQ(j["optimizer"], "adamw");
  EXPECT_EQ(j["schedule"], "linear-decay");
  auto v = FinetuneConfig::variant();
  EXPECT_DOUBLE_EQ(v.lr, 3e-5);
  EXPECT_EQ(v.batch, 64u);
  FinetuneConfig back = j.get<FinetuneConfig>();
  EXPECT_DOUBLE_EQ(back.lr, c.lr);
  EXPECT_EQ(back.batch, c.batch);
}

TEST(Finetune, EchoClampAndMlpHead) {
  auto spec = toy_spec(4);
  auto train = random_samples<float>(spec, 8, 1);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, spec), 1);
  FinetuneConfig c;
  c.epochs = 1;
  auto res = finetune<float>(m, train, train, c);
  EXPECT_EQ(res.report.config["effective_batch"].get<std::size_t>(), 8u);
  EXPECT_EQ(res.report.config["batch"].get<std::size_t>(), 512u);
  EXPECT_DOUBLE_EQ(res.report.config["lr"].get<double>(), 9e-5);
  EXPECT_EQ(res.report.config["optimizer"], "adamw");
  EXPECT_TRUE(res.model.params.count("head.fc1.weight"));
  EXPECT_EQ(res.model.spec.base.head_hidden, spec.embed_dim);
  EXPECT_EQ(res.loss_log.size(), 2u);
  EXPECT_FALSE(res.model.rgbd_trained);
}

TEST(Finetune, EpochZeroLossIsLogC) {
  for (std::size_t classes : {2u, 5u, 10u}) {
    auto spec = toy_spec(classes);
    auto train = random_samples<float>(spec, classes * 6, 7);
    for (auto mc : oracle::all_modes()) {
      auto m = fusion::init_model<float>(FusionSpec{mc.mode, mc.op, spec}, 3);
      FinetuneConfig c;
      c.epochs = 1;
      c.batch = 16;
      auto res = finetune<float>(m, train, {}, c);
      EXPECT_NEAR(res.loss_log[0], std::log(double(classes)), 0.1) << FusionSpec{mc.mode, mc.op, spec}.label();
    }
  }
}

TEST(Finetune, MemorizesEightSamples) {
  auto spec = toy_spec(4);
  auto train = random_samples<float>(spec, 8, 2);
  for (auto mc : {oracle::ModeCase{Mode::rgb_only, {}}, oracle::ModeCase{Mode::late, LateOp::cat},
                  oracle::ModeCase{Mode::early_dual, {}}}) {
    auto m = fusion::init_model<float>(FusionSpec{mc.mode, mc.op, spec}, 4);
    FinetuneConfig c;
    c.lr = 1e-3;
    c.batch = 8;
    c.epochs = 300;
    c.linear_decay = false;
    auto res = finetune<float>(m, train, train, c);
    EXPECT_LT(mean_loss<float>(res.model, train, 8), 0.01);
    EXPECT_LT(res.loss_log.back(), 0.05);
    EXPECT_DOUBLE_EQ(res.report.top1, 100.0);
    EXPECT_EQ(res.model.rgbd_trained, mc.mode != Mode::rgb_only);
  }
}

TEST(Finetune, NanAbortsWithLocation) {
  auto spec = toy_spec(2);
  auto train = random_samples<float>(spec, 4, 1);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, spec), 1);
  FinetuneConfig c;
  c.epochs = 2;
  c.batch = 2;
  c.fresh_head = false;
  m.params.at("block0.mlp.fc1.weight").data[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    finetune<float>(m, train, {}, c);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Finetune, DeterministicForFixedSeed) {
  auto spec = toy_spec(3);
  auto train = random_samples<float>(spec, 9, 1);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::late, spec, LateOp::max), 1);
  FinetuneConfig c;
  c.epochs = 2;
  c.batch = 4;
  c.lr = 1e-3;
  auto a = finetune<float>(m, train, train, c), b = finetune<float>(m, train, train, c);
  EXPECT_EQ(a.loss_log, b.loss_log);
  EXPECT_EQ(a.model.params, b.model.params);
}

TEST(Finetune, HeadWarmupFreezesBackbone) {
  auto spec = toy_spec(3);
  auto train = random_samples<float>(spec, 9, 2);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::late, spec, LateOp::cat), 1);
  FinetuneConfig c;
  c.epochs = 0;
  c.head_warmup_epochs = 5;
  c.batch = 3;
  auto r = finetune<float>(m, train, {}, c);
  ASSERT_EQ(r.loss_log.size(), 6u);
  EXPECT_LT(r.loss_log.back(), r.loss_log.front());
  std::size_t head = 0;
  for (const auto& [k, v] : r.model.params) {
    if (k.rfind("head.", 0) == 0) {
      ++head;
      continue;
    }
    EXPECT_EQ(v, m.params.at(k)) << k;
  }
  EXPECT_EQ(head, 4u);
  EXPECT_EQ(nlohmann::json(c).get<FinetuneConfig>().head_warmup_epochs, 5u);

  c.epochs = 1;
  auto both = finetune<float>(m, train, {}, c);
  EXPECT_EQ(both.loss_log.size(), 7u);
  EXPECT_NE(both.model.params.at("embedder.weight"), m.params.at("embedder.weight"));
}

TEST(Finetune, EnsembleAveragesLogits) {
  auto s = easy_samples(3, 6, 1);
  auto m = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, toy_spec(3)), 1);
  FinetuneConfig c;
  c.lr = 1e-3;
  c.batch = 9;
  c.epochs = 20;
  auto trained = finetune<float>(m, s, s, c).model;
  auto r = evaluate_ensemble<float>({trained, trained}, s);
  EXPECT_DOUBLE_EQ(r.top1, evaluate<float>(trained, s).top1);
}

// ---------------------------------------------------------------------------
// Transfer

TEST(Transfer, RowsAscendingPerModeWithCeiling) {
  auto spec = toy_spec(3);
  auto source = fusion::init_model<float>(FusionSpec::make(Mode::rgb_only, spec), 1);
  auto ck = fusion::to_checkpoint(source);
  auto train = instance_samples(spec, 3, 2, 4, 2);
  auto test = instance_samples(spec, 3, 1, 2, 3);
  TransferConfig cfg;
  cfg.modes = {FusionSpec::make(Mode::early_dual, spec), FusionSpec::make(Mode::late, spec, LateOp::cat)};
  cfg.shots = {5, 0, 1};
  cfg.finetune.epochs = 1;
  cfg.finetune.batch = 8;
  auto rows = transfer_experiment<float>(ck, train, test, 3, cfg);
  ASSERT_EQ(rows.size(), 8u);
  const std::vector<std::size_t> shots = {0, 1, 5};
  for (std::size_t m = 0; m < 2; ++m) {
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& r = rows[m * 4 + k];
      EXPECT_EQ(r.mode, cfg.modes[m].label());
      EXPECT_EQ(r.shots, shots[k]);
      EXPECT_EQ(r.source, "transfer");
      EXPECT_EQ(r.train_samples, std::min<std::size_t>(shots[k], 4) * 6);
      EXPECT_EQ(r.report.samples, test.size());
    }
    EXPECT_EQ(rows[m * 4 + 3].source, "target-only");
    EXPECT_EQ(rows[m * 4 + 3].train_samples, train.size());
  }
  // Zero-shot row equals evaluating the initialization directly.
  auto init = transfer_init(ck, cfg.modes[1], 3, cfg.seed);
  EXPECT_DOUBLE_EQ(rows[4].report.top1, evaluate<float>(init, test).top1);
}

TEST(Transfer, MatchingSourceUsedDirectly) {
  auto spec = toy_spec(3);
  auto late = fusion::init_model<float>(FusionSpec::make(Mode::late, spec, LateOp::cat), 4);
  late.rgbd_trained = true;
  auto ck = fusion::to_checkpoint(late);
  auto m = transfer_init(ck, FusionSpec::make(Mode::late, spec, LateOp::cat), 3, 0);
  EXPECT_EQ(m.params, late.params);
  EXPECT_THROW(transfer_init(ck, FusionSpec::make(Mode::early_dual, spec), 3, 0), IncompatibleCheckpoint);
}
