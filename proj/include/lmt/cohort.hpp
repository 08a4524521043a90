#pragma once

// Synthetic longitudinal cohort: per-eye latent severity trajectories,
// irregular visit schedules, and feature rendering with a shared mixing
// matrix. Stands in for a real screening dataset.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmt/checkpoint.hpp"
#include "lmt/progression.hpp"
#include "lmt/rng.hpp"

namespace lmt {

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

struct CohortConfig {
  std::size_t n_patients = 1000;
  std::size_t feature_dim = 32;
  std::size_t eyes_per_patient = 1;
  int min_visits = 2;
  int max_visits = 5;
  double gap_median_days = 365.0;
  double gap_sigma = 0.5;
  double gap_min_days = 90.0;
  double gap_max_days = 1460.0;
  double noise_sd = 0.1;
  // fraction of eyes whose severity decreases over time
  double regress_frac = 0.10;
  // fraction of eyes with a constant trajectory; these never show a grade
  // change and are dropped by the retention filter
  double flat_frac = 0.05;
  // logistic steepness per day; median transition spans ~500 days
  double rate_median = 0.009;
  double rate_sigma = 0.6;
  // strength of the progression-rate component in the rendered features;
  // 0 makes features a function of the current severity alone, so the
  // next-visit outcome is unpredictable beyond the severity marginal
  double rate_gain = 1.0;
  // width of the fixed random tanh layer the basis is pushed through
  // before mixing; 0 renders features as a plain linear map of the basis
  std::size_t render_hidden = 32;
};

struct Exam {
  std::vector<double> features;
  int grade = 0;
  double t_days = 0.0;
  int eye_id = 0;
  int patient_id = 0;
};

struct ConsecutivePair {
  Exam exam_i;
  Exam exam_ip1;  // same eye, exam_i.t_days < exam_ip1.t_days
};

struct Eye {
  int eye_id = 0;
  std::vector<Exam> exams;  // time-sorted
};

struct Patient {
  int patient_id = 0;
  Split split = Split::kTrain;
  std::vector<Eye> eyes;
};

struct Cohort {
  CohortConfig config;
  std::vector<Patient> patients;
};

// Feature model shared by every exam of a cohort. The basis mixes a cubic
// polynomial of the normalized latent severity with two progression terms
// r and r*s, where r is the eye's rate squashed through tanh and scaled by
// rate_gain. With render_hidden = 0 features are a plain linear map of the
// basis, B*phi + eta; otherwise the basis first passes through a fixed
// random tanh layer, so recovering severity and rate is a genuinely
// nonlinear problem for the encoder.
struct FeatureModel {
  std::size_t dim = 0;
  std::size_t hidden = 0;
  std::vector<double> basis_mix;  // (hidden ? hidden : dim) x 6, row-major
  std::vector<double> out_mix;    // dim x hidden, row-major; empty if linear
  double noise_sd = 0.0;
  double rate_gain = 0.0;
  double rate_scale = 1.0;  // tanh normalizer, 2x the median rate
};

inline constexpr std::size_t kFeatureBasis = 6;

inline FeatureModel make_feature_model(const CohortConfig& cfg, Rng& rng) {
  FeatureModel m;
  m.dim = cfg.feature_dim;
  m.hidden = cfg.render_hidden;
  m.noise_sd = cfg.noise_sd;
  m.rate_gain = cfg.rate_gain;
  m.rate_scale = 2.0 * cfg.rate_median;
  const std::size_t rows = m.hidden ? m.hidden : m.dim;
  m.basis_mix.resize(rows * kFeatureBasis);
  for (double& v : m.basis_mix) v = rng.normal();
  if (m.hidden) {
    m.out_mix.resize(m.dim * m.hidden);
    const double sd = 1.0 / std::sqrt(static_cast<double>(m.hidden));
    for (double& v : m.out_mix) v = rng.normal(0.0, sd);
  }
  return m;
}

inline std::vector<double> render_exam(int grade, double latent_severity,
                                       double rate_per_day, Rng& rng,
                                       const FeatureModel& model) {
  check_grade(grade);
  const double s = latent_severity / 4.0;
  const double r = model.rate_gain * std::tanh(rate_per_day / model.rate_scale);
  const double phi[kFeatureBasis] = {1.0, s, s * s, s * s * s, r, r * s};
  const std::size_t rows = model.hidden ? model.hidden : model.dim;
  std::vector<double> u(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < kFeatureBasis; ++k)
      acc += model.basis_mix[i * kFeatureBasis + k] * phi[k];
    u[i] = model.hidden ? std::tanh(acc) : acc;
  }
  std::vector<double> f(model.dim);
  for (std::size_t i = 0; i < model.dim; ++i) {
    double acc = 0.0;
    if (model.hidden) {
      for (std::size_t k = 0; k < model.hidden; ++k)
        acc += model.out_mix[i * model.hidden + k] * u[k];
    } else {
      acc = u[i];
    }
    f[i] = acc + (model.noise_sd > 0.0 ? rng.normal(0.0, model.noise_sd) : 0.0);
  }
  return f;
}

namespace detail {

inline double logistic_latent(double t, double onset, double rate) {
  return 4.0 / (1.0 + std::exp(-rate * (t - onset)));
}

// Draws one eye; returns false when the trajectory never changes grade
// across its visits (the eye is then discarded).
inline bool generate_eye(int patient_id, int eye_id, Rng& rng,
                         const CohortConfig& cfg, const FeatureModel& model,
                         Eye& out) {
  const int m =
      cfg.min_visits +
      static_cast<int>(rng.uniform_index(
          static_cast<std::size_t>(cfg.max_visits - cfg.min_visits + 1)));
  std::vector<double> times(static_cast<std::size_t>(m), 0.0);
  for (int i = 1; i < m; ++i) {
    const double gap =
        std::clamp(rng.lognormal_median(cfg.gap_median_days, cfg.gap_sigma),
                   cfg.gap_min_days, cfg.gap_max_days);
    times[static_cast<std::size_t>(i)] =
        times[static_cast<std::size_t>(i - 1)] + gap;
  }
  const double span = times.back();

  const bool flat = rng.uniform() < cfg.flat_frac;
  const bool regress = rng.uniform() < cfg.regress_frac;
  double rate = flat ? 0.0 : rng.lognormal_median(cfg.rate_median, cfg.rate_sigma);
  if (regress) rate = -rate;
  const double onset = rng.uniform(-0.25 * span, 1.25 * span);

  out.eye_id = eye_id;
  out.exams.clear();
  out.exams.reserve(static_cast<std::size_t>(m));
  bool changed = false;
  int first_grade = 0;
  for (int i = 0; i < m; ++i) {
    const double t = times[static_cast<std::size_t>(i)];
    const double latent = logistic_latent(t, onset, rate);
    const int grade =
        std::clamp(static_cast<int>(std::lround(latent)), 0, kNumGrades - 1);
    if (i == 0) first_grade = grade;
    if (grade != first_grade) changed = true;
    Exam e;
    e.patient_id = patient_id;
    e.eye_id = eye_id;
    e.t_days = t;
    e.grade = grade;
    e.features = render_exam(grade, latent, rate, rng, model);
    out.exams.push_back(std::move(e));
  }
  return changed;
}

}  // namespace detail

// Generates candidate patients from counter-based per-patient RNG streams
// until n_patients are retained; a patient is retained when at least one of
// its eyes shows a grade change. Deterministic for a given seed.
inline Cohort generate_cohort(const CohortConfig& cfg, std::uint64_t seed) {
  if (cfg.n_patients == 0 || cfg.eyes_per_patient == 0)
    throw std::invalid_argument("generate_cohort: empty configuration");
  if (cfg.min_visits < 2 || cfg.max_visits < cfg.min_visits)
    throw std::invalid_argument("generate_cohort: visit range invalid");

  Rng root(seed);
  Rng model_rng = root.fork(1);
  const FeatureModel model = make_feature_model(cfg, model_rng);

  Cohort cohort;
  cohort.config = cfg;
  cohort.patients.reserve(cfg.n_patients);
  const std::size_t max_attempts = 50 * cfg.n_patients;
  for (std::size_t attempt = 0;
       attempt < max_attempts && cohort.patients.size() < cfg.n_patients;
       ++attempt) {
    // one independent stream per candidate, so generation order or worker
    // count can never change the result
    Rng prng = root.fork(1000 + attempt);
    Patient p;
    p.patient_id = static_cast<int>(attempt);
    for (std::size_t e = 0; e < cfg.eyes_per_patient; ++e) {
      Eye eye;
      const int eye_id =
          static_cast<int>(attempt * cfg.eyes_per_patient + e);
      if (detail::generate_eye(p.patient_id, eye_id, prng, cfg, model, eye))
        p.eyes.push_back(std::move(eye));
    }
    if (!p.eyes.empty()) cohort.patients.push_back(std::move(p));
  }
  if (cohort.patients.empty())
    throw std::runtime_error(
        "generate_cohort: no eye retained a grade change; widen the "
        "trajectory configuration");
  if (cohort.patients.size() < cfg.n_patients)
    throw std::runtime_error(
        "generate_cohort: only " + std::to_string(cohort.patients.size()) +
        " of " + std::to_string(cfg.n_patients) +
        " patients retained within the attempt budget");
  return cohort;
}

// Patient-level split assignment; never splits below the patient.
inline Cohort split_patients(Cohort cohort,
                             std::array<double, 3> fractions,
                             std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split_patients: negative fraction");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_patients: fractions must sum to 1");

  const std::size_t n = cohort.patients.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train =
      static_cast<std::size_t>(std::lround(fractions[0] * static_cast<double>(n)));
  const std::size_t n_train_val = static_cast<std::size_t>(
      std::lround((fractions[0] + fractions[1]) * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    Split s = Split::kTest;
    if (i < n_train)
      s = Split::kTrain;
    else if (i < n_train_val)
      s = Split::kVal;
    cohort.patients[order[i]].split = s;
  }
  return cohort;
}

// Every consecutive same-eye visit pair of the given split, in cohort order:
// an eye with m visits contributes exactly m-1 pairs.
inline std::vector<ConsecutivePair> extract_pairs(const Cohort& cohort,
                                                  Split split) {
  std::vector<ConsecutivePair> pairs;
  for (const Patient& p : cohort.patients) {
    if (p.split != split) continue;
    for (const Eye& eye : p.eyes)
      for (std::size_t i = 0; i + 1 < eye.exams.size(); ++i)
        pairs.push_back({eye.exams[i], eye.exams[i + 1]});
  }
  return pairs;
}

inline constexpr char kCohortMagic[8] = {'L', 'M', 'T', 'C', 'O', 'H', '1', '\0'};

inline void save_cohort(const std::string& path, const Cohort& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cohort: cannot open '" + path + "' for write");
  f.write(kCohortMagic, sizeof(kCohortMagic));
  const CohortConfig& g = c.config;
  detail::write_u64(f, g.n_patients);
  detail::write_u64(f, g.feature_dim);
  detail::write_u64(f, g.eyes_per_patient);
  detail::write_u64(f, static_cast<std::uint64_t>(g.min_visits));
  detail::write_u64(f, static_cast<std::uint64_t>(g.max_visits));
  detail::write_f64(f, g.gap_median_days);
  detail::write_f64(f, g.gap_sigma);
  detail::write_f64(f, g.gap_min_days);
  detail::write_f64(f, g.gap_max_days);
  detail::write_f64(f, g.noise_sd);
  detail::write_f64(f, g.regress_frac);
  detail::write_f64(f, g.flat_frac);
  detail::write_f64(f, g.rate_median);
  detail::write_f64(f, g.rate_sigma);
  detail::write_f64(f, g.rate_gain);
  detail::write_u64(f, g.render_hidden);

  detail::write_u64(f, c.patients.size());
  std::uint64_t n_exams = 0;
  for (const Patient& p : c.patients) {
    detail::write_u64(f, static_cast<std::uint64_t>(p.patient_id));
    detail::write_u64(f, static_cast<std::uint64_t>(p.split));
    for (const Eye& e : p.eyes) n_exams += e.exams.size();
  }
  detail::write_u64(f, n_exams);
  for (const Patient& p : c.patients)
    for (const Eye& e : p.eyes)
      for (const Exam& x : e.exams) {
        detail::write_u64(f, static_cast<std::uint64_t>(x.patient_id));
        detail::write_u64(f, static_cast<std::uint64_t>(x.eye_id));
        detail::write_f64(f, x.t_days);
        detail::write_u64(f, static_cast<std::uint64_t>(x.grade));
        if (x.features.size() != g.feature_dim)
          throw std::runtime_error("cohort: exam feature width mismatch");
        for (double v : x.features) detail::write_f64(f, v);
      }
  if (!f) throw std::runtime_error("cohort: write failed for '" + path + "'");
}

inline Cohort load_cohort(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cohort: cannot open '" + path + "'");
  char magic[sizeof(kCohortMagic)];
  f.read(magic, sizeof(magic));
  if (f.gcount() != sizeof(magic) ||
      !std::equal(magic, magic + sizeof(magic), kCohortMagic))
    throw std::runtime_error("cohort: '" + path + "' is not a cohort file");
  Cohort c;
  CohortConfig& g = c.config;
  g.n_patients = detail::read_u64(f);
  g.feature_dim = detail::read_u64(f);
  g.eyes_per_patient = detail::read_u64(f);
  g.min_visits = static_cast<int>(detail::read_u64(f));
  g.max_visits = static_cast<int>(detail::read_u64(f));
  g.gap_median_days = detail::read_f64(f);
  g.gap_sigma = detail::read_f64(f);
  g.gap_min_days = detail::read_f64(f);
  g.gap_max_days = detail::read_f64(f);
  g.noise_sd = detail::read_f64(f);
  g.regress_frac = detail::read_f64(f);
  g.flat_frac = detail::read_f64(f);
  g.rate_median = detail::read_f64(f);
  g.rate_sigma = detail::read_f64(f);
  g.rate_gain = detail::read_f64(f);
  g.render_hidden = detail::read_u64(f);

  const std::uint64_t n_patients = detail::read_u64(f);
  c.patients.resize(n_patients);
  for (std::uint64_t i = 0; i < n_patients; ++i) {
    c.patients[i].patient_id = static_cast<int>(detail::read_u64(f));
    const std::uint64_t s = detail::read_u64(f);
    if (s > 2) throw std::runtime_error("cohort: bad split label in file");
    c.patients[i].split = static_cast<Split>(s);
  }
  const std::uint64_t n_exams = detail::read_u64(f);
  std::size_t pi = 0;
  for (std::uint64_t k = 0; k < n_exams; ++k) {
    Exam x;
    x.patient_id = static_cast<int>(detail::read_u64(f));
    x.eye_id = static_cast<int>(detail::read_u64(f));
    x.t_days = detail::read_f64(f);
    x.grade = static_cast<int>(detail::read_u64(f));
    check_grade(x.grade);
    x.features.resize(g.feature_dim);
    for (double& v : x.features) v = detail::read_f64(f);
    while (pi < c.patients.size() && c.patients[pi].patient_id != x.patient_id)
      ++pi;
    if (pi == c.patients.size())
      throw std::runtime_error("cohort: exam references unknown patient");
    Patient& p = c.patients[pi];
    if (p.eyes.empty() || p.eyes.back().eye_id != x.eye_id)
      p.eyes.push_back(Eye{x.eye_id, {}});
    p.eyes.back().exams.push_back(std::move(x));
  }
  return c;
}

inline void export_cohort_csv(const std::string& path, const Cohort& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cohort: cannot open '" + path + "' for write");
  f << "patient_id,eye_id,t_days,grade\n";
  char buf[64];
  for (const Patient& p : c.patients)
    for (const Eye& e : p.eyes)
      for (const Exam& x : e.exams) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.3f,%d\n", x.patient_id,
                      x.eye_id, x.t_days, x.grade);
        f << buf;
      }
  if (!f) throw std::runtime_error("cohort: write failed for '" + path + "'");
}

}  // namespace lmt
