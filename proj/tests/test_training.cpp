#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "lmt/training.hpp"

using namespace lmt;

namespace {

ConsecutivePair make_pair(std::vector<double> fi, std::vector<double> fj,
                          int si, int sj, double ti_days, double tj_days) {
  ConsecutivePair p;
  p.exam_i.features = std::move(fi);
  p.exam_i.grade = si;
  p.exam_i.t_days = ti_days;
  p.exam_ip1.features = std::move(fj);
  p.exam_ip1.grade = sj;
  p.exam_ip1.t_days = tj_days;
  return p;
}

CohortConfig tiny_cohort_config() {
  CohortConfig cfg;
  cfg.n_patients = 40;
  cfg.feature_dim = 8;
  return cfg;
}

LmtConfig fast_train_config() {
  LmtConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.node.adjoint = false;
  cfg.node.discrete_steps = 5;
  cfg.node_hidden = 16;
  return cfg;
}

bool same_data(std::vector<Tensor*> a, std::vector<Tensor*> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i]->data != b[i]->data) return false;
  return true;
}

}  // namespace

TEST_CASE("encoder split and resume reproduce the full forward pass",
          "[training]") {
  Rng rng(3);
  Encoder enc(6, rng);
  REQUIRE(enc.num_layers() == 4);
  REQUIRE(enc.latent_dim() == 64);
  Tensor x = Tensor::randn({3, 6}, rng);
  Tensor full = enc.forward(x);
  for (std::size_t k = 0; k <= enc.num_layers(); ++k) {
    Tensor joined = enc.forward_suffix(enc.forward_prefix(x, k), k);
    REQUIRE(joined.data == full.data);
  }
  REQUIRE_THROWS_AS(enc.forward_prefix(x, 5), std::invalid_argument);
}

TEST_CASE("mixing with lambda 1 keeps the earlier exam's representation",
          "[training]") {
  Rng rng(5);
  Encoder enc(6, rng);
  Tensor xi = Tensor::randn({2, 6}, rng);
  Tensor xj = Tensor::randn({2, 6}, rng);
  Tensor base = enc.forward(xi);
  for (int k : {0, 2, 3, 4}) {
    Tensor z = z_mix_forward(enc, xi, xj, {1.0, 1.0}, k);
    for (std::size_t i = 0; i < z.numel(); ++i)
      REQUIRE(std::abs(z[i] - base[i]) < 1e-12);
  }
}

TEST_CASE("mixing identical exams is independent of lambda and layer",
          "[training]") {
  Rng rng(7);
  Encoder enc(6, rng);
  Tensor x = Tensor::randn({2, 6}, rng);
  Tensor base = enc.forward(x);
  for (int k : {0, 2, 4})
    for (double l : {0.0, 0.3, 0.8}) {
      Tensor z = z_mix_forward(enc, x, x, {l, l}, k);
      REQUIRE(z.data == base.data);
    }
}

TEST_CASE("input mixing and hidden mixing disagree on generic inputs",
          "[training]") {
  Rng rng(9);
  Encoder enc(6, rng);
  Tensor xi = Tensor::randn({1, 6}, rng);
  Tensor xj = Tensor::randn({1, 6}, rng);
  Tensor z0 = z_mix_forward(enc, xi, xj, {0.5}, 0);
  Tensor z3 = z_mix_forward(enc, xi, xj, {0.5}, 3);
  double diff = 0.0;
  for (std::size_t i = 0; i < z0.numel(); ++i)
    diff = std::max(diff, std::abs(z0[i] - z3[i]));
  REQUIRE(diff > 1e-6);
}

TEST_CASE("time consistency is the batch mean of squared errors",
          "[training]") {
  Tensor pred0({2, 1}, {0.0, 1.0});
  REQUIRE(time_consistency({0.0, 1.0}, pred0).value() == 0.0);
  Tensor pred1({1, 1}, {1.0});
  REQUIRE(time_consistency(0.0, pred1).value() == 1.0);
  Tensor pred2({2, 1}, {1.0, 1.0});
  REQUIRE(time_consistency({0.0, 1.0}, pred2).value() == 0.5);
  Tensor wide({1, 2}, {0.0, 1.0});
  REQUIRE_THROWS_AS(time_consistency(0.0, wide), std::invalid_argument);
}

TEST_CASE("paired loss matches a scalar hand transcription", "[training]") {
  // two-layer encoder on two features, hidden mixing after layer 1,
  // lambda = 1/2, grades 1 -> 3 over exactly one normalized time unit
  Rng rng(11);
  Encoder enc(2, rng, {2, 2});
  Heads heads(2, rng);
  enc.w[0].data = {0.3, -0.2, 0.1, 0.4};
  enc.b[0].data = {0.05, -0.05};
  enc.w[1].data = {0.2, 0.3, -0.1, 0.25};
  enc.b[1].data = {0.0, 0.1};
  heads.w1 = Tensor({2, 5}, {0.1, -0.1, 0.2, 0.05, -0.2,
                             0.15, 0.1, -0.05, 0.2, 0.1});
  heads.b1 = Tensor({1, 5}, {0.01, -0.01, 0.02, 0.0, 0.03});
  heads.w2 = Tensor({2, 1}, {0.4, -0.3});
  heads.b2 = Tensor({1, 1}, {0.1});

  ConsecutivePair pair = make_pair({0.8, -0.5}, {-0.3, 0.6}, 1, 3, 0.0, 730.0);
  MixDraw draw{0.5, 1, 2.0};
  const double got = lmt_loss(enc, heads, pair, draw, ProfileKind::kLinear).value();

  // transcription with plain loops
  auto layer = [&](const double in[2], const Tensor& w, const Tensor& bias,
                   double out[2]) {
    for (int j = 0; j < 2; ++j) {
      double acc = bias[static_cast<std::size_t>(j)];
      for (int k = 0; k < 2; ++k)
        acc += in[k] * w.at(static_cast<std::size_t>(k), static_cast<std::size_t>(j));
      out[j] = acc > 0.0 ? acc : 0.0;
    }
  };
  double hi[2], hj[2], hm[2], z[2];
  const double xi[2] = {0.8, -0.5}, xj[2] = {-0.3, 0.6};
  layer(xi, enc.w[0], enc.b[0], hi);
  layer(xj, enc.w[0], enc.b[0], hj);
  for (int j = 0; j < 2; ++j) hm[j] = 0.5 * hi[j] + 0.5 * hj[j];
  layer(hm, enc.w[1], enc.b[1], z);
  const double t_mix = 0.5;                      // Mix(0, 1, 1/2)
  const double sev = 1.0 + t_mix * (3.0 - 1.0);  // = 2
  double target[5] = {0, 0, 0, 0, 0};
  target[2] = 1.0;  // soft label of an integral severity
  double bce = 0.0;
  for (int j = 0; j < 5; ++j) {
    double logit = heads.b1[static_cast<std::size_t>(j)];
    for (int k = 0; k < 2; ++k)
      logit += z[k] * heads.w1.at(static_cast<std::size_t>(k), static_cast<std::size_t>(j));
    double p = 1.0 / (1.0 + std::exp(-logit));
    p = std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
    bce += -(target[j] * std::log(p) + (1.0 - target[j]) * std::log(1.0 - p));
  }
  bce /= 5.0;
  double t_hat = heads.b2[0];
  for (int k = 0; k < 2; ++k) t_hat += z[k] * heads.w2[static_cast<std::size_t>(k)];
  const double expect = bce + (t_hat - t_mix) * (t_hat - t_mix);
  REQUIRE(std::abs(got - expect) < 1e-12);
  REQUIRE(std::abs(sev - 2.0) < 1e-15);
}

TEST_CASE("lambda 1 reduces the paired loss to plain supervision",
          "[training]") {
  Rng rng(13);
  Encoder enc(6, rng);
  Heads heads(enc.latent_dim(), rng);
  ConsecutivePair pair = make_pair({0.2, -0.1, 0.5, 0.3, -0.4, 0.1},
                                   {0.6, 0.2, -0.3, 0.1, 0.0, -0.2}, 2, 4,
                                   100.0, 600.0);
  for (int k : {0, 2, 4}) {
    MixDraw draw{1.0, k, 2.0};
    const double got =
        lmt_loss(enc, heads, pair, draw, ProfileKind::kLinear).value();
    Tensor xi({1, 6}, pair.exam_i.features);
    Tensor z = enc.forward(xi);
    Tensor onehot({1, 5});
    onehot.at(0, 2) = 1.0;
    const double expect =
        bce_soft(sigmoid(heads.h1(z)), onehot).value() +
        time_consistency(normalize_time(100.0), heads.h2(z)).value();
    REQUIRE(std::abs(got - expect) < 1e-12);
  }
}

TEST_CASE("equal grades pin the classification target for every lambda",
          "[training]") {
  std::vector<ConsecutivePair> pairs = {
      make_pair({0.1, 0.2}, {0.3, 0.4}, 3, 3, 0.0, 400.0)};
  PairBatch b = make_pair_batch(pairs, {0}, 0, 1);
  for (double l : {0.1, 0.5, 0.9}) {
    auto t_mix = lmt::detail::mixed_times(b, {l});
    auto sev = lmt::detail::interpolated_severities(b, t_mix, ProfileKind::kLinear);
    Tensor target = soft_label_rows(sev);
    REQUIRE(target.at(0, 3) == 1.0);
    REQUIRE(target.at(0, 0) == 0.0);
    REQUIRE(target.at(0, 2) == 0.0);
  }
}

TEST_CASE("paired loss aborts with diagnostics on non-finite values",
          "[training]") {
  Rng rng(15);
  Encoder enc(2, rng, {2, 2});
  Heads heads(2, rng);
  heads.w2[0] = std::numeric_limits<double>::infinity();
  ConsecutivePair pair = make_pair({0.5, 0.5}, {0.4, 0.4}, 1, 2, 0.0, 365.0);
  MixDraw draw{0.4, 1, 2.0};
  REQUIRE_THROWS_WITH(
      lmt_loss(enc, heads, pair, draw, ProfileKind::kLinear),
      Catch::Matchers::ContainsSubstring("lambda=") &&
          Catch::Matchers::ContainsSubstring("pair id="));
}

TEST_CASE("setup S2 with lambda 1 supervises the current grade exactly",
          "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 3),
                                 {0.6, 0.2, 0.2}, 1);
  LmtConfig cfg = fast_train_config();
  cfg.setup = Setup::kS2;
  Rng rng(17);
  TimeAwareModel model(cohort.config.feature_dim, cfg, rng);
  auto pairs = extract_pairs(cohort, Split::kTrain);
  std::vector<std::size_t> order = {0, 1, 2};
  PairBatch b = make_pair_batch(pairs, order, 0, 3);
  Tensor loss = setup_loss(model, b, {1.0, 1.0, 1.0}, 2, cfg);
  Tensor z = model.enc.forward(b.xi);
  Tensor expect = bce_soft(sigmoid(model.heads.h3(z)), onehot_rows(b.si));
  REQUIRE(std::abs(loss.value() - expect.value()) < 1e-14);
}

TEST_CASE("recurrent model rejects the combined setup", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 5),
                                 {0.6, 0.2, 0.2}, 1);
  REQUIRE_THROWS_AS(
      train_setup(Setup::kS3, ModelKind::kTlstm, cohort, fast_train_config()),
      std::invalid_argument);
}

TEST_CASE("zero-epoch training returns the initialization untouched",
          "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 7),
                                 {0.6, 0.2, 0.2}, 1);
  LmtConfig cfg = fast_train_config();
  cfg.epochs = 0;
  cfg.seed = 21;
  TrainedTimeAware t = train_setup(Setup::kS1, ModelKind::kNode, cohort, cfg);
  REQUIRE(t.result.history.empty());
  REQUIRE_FALSE(t.result.failed);
  Rng init_rng = Rng(cfg.seed).fork(1);
  TimeAwareModel fresh(cohort.config.feature_dim, cfg, init_rng);
  REQUIRE(same_data(t.model.params(), fresh.params()));
}

TEST_CASE("each setup trains a small cohort without diverging", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 9),
                                 {0.6, 0.2, 0.2}, 1);
  LmtConfig cfg = fast_train_config();
  for (Setup s : {Setup::kS1, Setup::kS2, Setup::kS3}) {
    TrainedTimeAware t = train_setup(s, ModelKind::kNode, cohort, cfg);
    REQUIRE_FALSE(t.result.failed);
    REQUIRE(t.result.history.size() == 2);
    REQUIRE(std::isfinite(t.result.best_val));
    const double auc =
        evaluate_next_visit_auc(t.model, cohort, Split::kTest, 3, cfg);
    REQUIRE(auc >= 0.0);
    REQUIRE(auc <= 1.0);
  }
  for (Setup s : {Setup::kS1, Setup::kS2}) {
    TrainedTimeAware t = train_setup(s, ModelKind::kTlstm, cohort, cfg);
    REQUIRE_FALSE(t.result.failed);
    REQUIRE(t.result.history.size() == 2);
  }
}

TEST_CASE("training is deterministic per seed", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 11),
                                 {0.6, 0.2, 0.2}, 1);
  LmtConfig cfg = fast_train_config();
  cfg.seed = 5;
  TrainedTimeAware a = train_setup(Setup::kS2, ModelKind::kNode, cohort, cfg);
  TrainedTimeAware b = train_setup(Setup::kS2, ModelKind::kNode, cohort, cfg);
  REQUIRE(same_data(a.model.params(), b.model.params()));
  REQUIRE(a.result.history.size() == b.result.history.size());
  for (std::size_t i = 0; i < a.result.history.size(); ++i) {
    REQUIRE(a.result.history[i].train_loss == b.result.history[i].train_loss);
    REQUIRE(a.result.history[i].val_loss == b.result.history[i].val_loss);
  }
  cfg.seed = 6;
  TrainedTimeAware c = train_setup(Setup::kS2, ModelKind::kNode, cohort, cfg);
  REQUIRE_FALSE(same_data(a.model.params(), c.model.params()));
}

TEST_CASE("grading methods parse and train", "[training]") {
  REQUIRE(grade_method_from_string("lmm") == GradeMethod::kLongManifoldMixup);
  REQUIRE(std::string(to_string(GradeMethod::kManifoldMixup)) == "mm");
  REQUIRE_THROWS_AS(grade_method_from_string("bogus"), std::invalid_argument);

  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 13),
                                 {0.6, 0.2, 0.2}, 1);
  LmtConfig cfg = fast_train_config();
  cfg.epochs = 2;
  for (GradeMethod m : {GradeMethod::kMixupRand, GradeMethod::kManifoldMixup,
                        GradeMethod::kLongManifoldMixup}) {
    TrainedGrading t = train_grading(m, cohort, cfg);
    REQUIRE_FALSE(t.result.failed);
    const double kappa = evaluate_grading_kappa(t.model.enc, t.model.heads,
                                                cohort, Split::kTest);
    REQUIRE(kappa >= -1.0);
    REQUIRE(kappa <= 1.0);
  }
}

TEST_CASE("history csv lists one line per epoch", "[training]") {
  std::vector<EpochStats> h = {{0, 0.5, 0.6, 1e-3, 12.0},
                               {1, 0.4, 0.55, 2e-3, 11.5}};
  const std::string path = "/tmp/lmt_history_test.csv";
  write_history_csv(path, h);
  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "epoch,train_loss,val_loss,lr,wall_ms");
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "0,0.500000,0.600000,0.001000,12.000");
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "1,0.400000,0.550000,0.002000,11.500");
  REQUIRE_FALSE(std::getline(f, line));
  std::remove(path.c_str());
}

TEST_CASE("progression dataset honors the follow-up horizon", "[training]") {
  Cohort c;
  c.config.feature_dim = 2;
  Patient p;
  p.patient_id = 0;
  p.split = Split::kTrain;
  Eye e;
  e.eye_id = 0;
  for (int i = 0; i < 3; ++i) {
    Exam x;
    x.patient_id = 0;
    x.eye_id = 0;
    x.features = {static_cast<double>(i), 0.0};
    x.grade = i;
    x.t_days = i == 0 ? 0.0 : (i == 1 ? 400.0 : 1300.0);
    e.exams.push_back(x);
  }
  p.eyes.push_back(e);
  c.patients.push_back(p);
  // gaps are 400 and 900 days; only the first pair fits within the horizon
  BinaryDataset d = make_progression_dataset(c, Split::kTrain, Task::kMildPlus);
  REQUIRE(d.y.size() == 1);
  REQUIRE(d.y[0] == 1);  // next grade 1 >= mild+ threshold
  REQUIRE(d.x.at(0, 0) == 0.0);
}

TEST_CASE("linear probe never touches the encoder", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 15),
                                 {0.6, 0.2, 0.2}, 1);
  Rng rng(23);
  Encoder enc(cohort.config.feature_dim, rng);
  std::vector<std::vector<double>> before;
  for (Tensor* p : enc.params()) before.push_back(p->data);
  ProbeConfig pc;
  pc.epochs = 3;
  DownstreamResult r = linear_probe(enc, cohort, Task::kModeratePlus, pc);
  auto params = enc.params();
  for (std::size_t i = 0; i < params.size(); ++i)
    REQUIRE(params[i]->data == before[i]);
  REQUIRE(r.auc >= 0.0);
  REQUIRE(r.auc <= 1.0);
}

TEST_CASE("constant features give chance-level probe AUC", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 17),
                                 {0.6, 0.2, 0.2}, 1);
  for (Patient& p : cohort.patients)
    for (Eye& e : p.eyes)
      for (Exam& x : e.exams)
        std::fill(x.features.begin(), x.features.end(), 1.0);
  Rng rng(29);
  Encoder enc(cohort.config.feature_dim, rng);
  ProbeConfig pc;
  pc.epochs = 2;
  DownstreamResult r = linear_probe(enc, cohort, Task::kModeratePlus, pc);
  REQUIRE(r.auc == 0.5);  // identical scores everywhere, tie convention
}

TEST_CASE("a planted future-grade feature is linearly readable", "[training]") {
  CohortConfig ccfg = tiny_cohort_config();
  ccfg.n_patients = 120;
  Cohort cohort = split_patients(generate_cohort(ccfg, 19), {0.6, 0.2, 0.2}, 1);
  for (Patient& p : cohort.patients)
    for (Eye& e : p.eyes)
      for (std::size_t i = 0; i + 1 < e.exams.size(); ++i)
        e.exams[i].features[0] = static_cast<double>(e.exams[i + 1].grade);
  Rng rng(31);
  Encoder enc(cohort.config.feature_dim, rng);
  ProbeConfig pc;
  pc.epochs = 20;
  DownstreamResult r = linear_probe(enc, cohort, Task::kModeratePlus, pc);
  REQUIRE(r.auc > 0.95);
}

TEST_CASE("single-class task labels are rejected", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 21),
                                 {0.6, 0.2, 0.2}, 1);
  for (Patient& p : cohort.patients)
    for (Eye& e : p.eyes)
      for (Exam& x : e.exams) x.grade = std::min(x.grade, 1);
  Rng rng(37);
  Encoder enc(cohort.config.feature_dim, rng);
  ProbeConfig pc;
  REQUIRE_THROWS_AS(linear_probe(enc, cohort, Task::kSeverePlus, pc),
                    std::invalid_argument);
}

TEST_CASE("zero-epoch fine-tune equals a zero-epoch probe", "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 23),
                                 {0.6, 0.2, 0.2}, 1);
  Rng rng(41);
  Encoder enc(cohort.config.feature_dim, rng);
  ProbeConfig pc;
  pc.epochs = 0;
  pc.seed = 9;
  DownstreamResult probe = linear_probe(enc, cohort, Task::kModeratePlus, pc);
  DownstreamResult tuned = fine_tune(enc, cohort, Task::kModeratePlus, pc);
  REQUIRE(probe.auc == tuned.auc);
  REQUIRE(probe.train.history.empty());
  REQUIRE(tuned.train.history.empty());
}

TEST_CASE("fine-tune is deterministic and leaves the caller's encoder alone",
          "[training]") {
  Cohort cohort = split_patients(generate_cohort(tiny_cohort_config(), 25),
                                 {0.6, 0.2, 0.2}, 1);
  Rng rng(43);
  Encoder enc(cohort.config.feature_dim, rng);
  std::vector<std::vector<double>> before;
  for (Tensor* p : enc.params()) before.push_back(p->data);
  ProbeConfig pc;
  pc.epochs = 3;
  DownstreamResult a = fine_tune(enc, cohort, Task::kModeratePlus, pc);
  DownstreamResult b = fine_tune(enc, cohort, Task::kModeratePlus, pc);
  REQUIRE(a.auc == b.auc);
  auto params = enc.params();
  for (std::size_t i = 0; i < params.size(); ++i)
    REQUIRE(params[i]->data == before[i]);
}
