#pragma once

// Mixed-pair training: encoder/heads, the interpolated-severity loss, the
// three time-aware training setups, grading trainers for the mixing-method
// comparison, and the downstream probe/fine-tune protocols.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmt/cohort.hpp"
#include "lmt/metrics.hpp"
#include "lmt/mixing.hpp"
#include "lmt/optim.hpp"
#include "lmt/progression.hpp"
#include "lmt/tensor.hpp"
#include "lmt/timeaware.hpp"

namespace lmt {

// ---------------------------------------------------------------------------
// Encoder: n affine+relu layers with split/resume access so mixing can be
// applied to any hidden representation. forward_suffix(forward_prefix(x, k), k)
// reproduces forward(x) exactly for every k.

struct Encoder {
  std::size_t in_dim = 0;
  std::vector<std::size_t> widths;
  std::vector<Tensor> w, b;

  Encoder() = default;

  Encoder(std::size_t in_dim_, Rng& rng,
          std::vector<std::size_t> widths_ = {128, 128, 64, 64})
      : in_dim(in_dim_), widths(std::move(widths_)) {
    std::size_t prev = in_dim;
    for (std::size_t width : widths) {
      const double sd = std::sqrt(2.0 / static_cast<double>(prev));
      w.push_back(Tensor::randn({prev, width}, rng, sd));
      b.push_back(Tensor({1, width}));
      prev = width;
    }
  }

  std::size_t num_layers() const { return w.size(); }
  std::size_t latent_dim() const { return widths.back(); }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < w.size(); ++l) {
      out.push_back(&w[l]);
      out.push_back(&b[l]);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_params(
      const std::string& prefix = "enc.") {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t l = 0; l < w.size(); ++l) {
      out.emplace_back(prefix + "w" + std::to_string(l), &w[l]);
      out.emplace_back(prefix + "b" + std::to_string(l), &b[l]);
    }
    return out;
  }

  // Applies layers [from, to), each relu(x*W + b).
  Tensor forward_range(const Tensor& x, std::size_t from, std::size_t to) const {
    if (from > to || to > num_layers())
      throw std::invalid_argument("encoder: bad layer range");
    Tensor h = x;
    for (std::size_t l = from; l < to; ++l)
      h = relu(add_rowwise(matmul(h, w[l]), b[l]));
    return h;
  }

  Tensor forward(const Tensor& x) const {
    return forward_range(x, 0, num_layers());
  }
  // first k layers
  Tensor forward_prefix(const Tensor& x, std::size_t k) const {
    return forward_range(x, 0, k);
  }
  // remaining layers after k
  Tensor forward_suffix(const Tensor& h, std::size_t k) const {
    return forward_range(h, k, num_layers());
  }
};

// Three single-affine heads on the final latent: severity logits, a scalar
// time regressor, and next-visit logits.
struct Heads {
  Tensor w1, b1;  // latent -> 5 severity logits
  Tensor w2, b2;  // latent -> 1 predicted mixing time
  Tensor w3, b3;  // latent -> 5 next-visit logits

  Heads() = default;

  Heads(std::size_t latent, Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(latent));
    w1 = Tensor::randn({latent, static_cast<std::size_t>(kNumGrades)}, rng, sd);
    b1 = Tensor({1, static_cast<std::size_t>(kNumGrades)});
    w2 = Tensor::randn({latent, 1}, rng, sd);
    b2 = Tensor({1, 1});
    w3 = Tensor::randn({latent, static_cast<std::size_t>(kNumGrades)}, rng, sd);
    b3 = Tensor({1, static_cast<std::size_t>(kNumGrades)});
  }

  Tensor h1(const Tensor& z) const { return add_rowwise(matmul(z, w1), b1); }
  Tensor h2(const Tensor& z) const { return add_rowwise(matmul(z, w2), b2); }
  Tensor h3(const Tensor& z) const { return add_rowwise(matmul(z, w3), b3); }

  std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

  std::vector<std::pair<std::string, Tensor*>> named_params(
      const std::string& prefix = "heads.") {
    return {{prefix + "w1", &w1}, {prefix + "b1", &b1}, {prefix + "w2", &w2},
            {prefix + "b2", &b2}, {prefix + "w3", &w3}, {prefix + "b3", &b3}};
  }
};

// ---------------------------------------------------------------------------
// Run configuration.

enum class Setup { kS1 = 1, kS2 = 2, kS3 = 3 };
enum class ModelKind { kNode, kTlstm };

inline Setup setup_from_string(const std::string& s) {
  if (s == "S1" || s == "s1") return Setup::kS1;
  if (s == "S2" || s == "s2") return Setup::kS2;
  if (s == "S3" || s == "s3") return Setup::kS3;
  throw std::invalid_argument("unknown setup '" + s + "'");
}
inline const char* to_string(Setup s) {
  switch (s) {
    case Setup::kS1: return "S1";
    case Setup::kS2: return "S2";
    case Setup::kS3: return "S3";
  }
  return "?";
}

inline ModelKind model_from_string(const std::string& s) {
  if (s == "node") return ModelKind::kNode;
  if (s == "tlstm") return ModelKind::kTlstm;
  throw std::invalid_argument("unknown model '" + s + "'");
}
inline const char* to_string(ModelKind m) {
  return m == ModelKind::kNode ? "node" : "tlstm";
}

struct LmtConfig {
  double alpha = 2.0;
  ProfileKind profile = ProfileKind::kLinear;
  Setup setup = Setup::kS3;
  ModelKind model = ModelKind::kNode;
  int epochs = 30;
  int batch_size = 64;
  double max_lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool per_sample_lambda = false;
  bool softmax_targets = false;
  std::vector<int> eligible_layers = {2, 3, 4};
  std::size_t node_hidden = 64;
  NodeConfig node;
};

inline void validate(const LmtConfig& cfg) {
  if (cfg.alpha <= 0.0)
    throw std::invalid_argument("config: alpha must be > 0");
  if (cfg.batch_size < 1)
    throw std::invalid_argument("config: batch size must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("config: negative epochs");
}

// ---------------------------------------------------------------------------
// Batched pair data.

struct PairBatch {
  Tensor xi, xj;           // features of the earlier / later exam
  std::vector<int> si, sj;
  std::vector<double> ti, tj;  // normalized times
  std::vector<int> pair_ids;   // position in the source pair list
};

inline PairBatch make_pair_batch(const std::vector<ConsecutivePair>& pairs,
                                 const std::vector<std::size_t>& order,
                                 std::size_t begin, std::size_t end) {
  const std::size_t b = end - begin;
  const std::size_t d = pairs[order[begin]].exam_i.features.size();
  PairBatch out;
  out.xi = Tensor({b, d});
  out.xj = Tensor({b, d});
  out.si.resize(b);
  out.sj.resize(b);
  out.ti.resize(b);
  out.tj.resize(b);
  out.pair_ids.resize(b);
  for (std::size_t r = 0; r < b; ++r) {
    const ConsecutivePair& p = pairs[order[begin + r]];
    std::copy(p.exam_i.features.begin(), p.exam_i.features.end(),
              out.xi.data.begin() + r * d);
    std::copy(p.exam_ip1.features.begin(), p.exam_ip1.features.end(),
              out.xj.data.begin() + r * d);
    out.si[r] = p.exam_i.grade;
    out.sj[r] = p.exam_ip1.grade;
    out.ti[r] = normalize_time(p.exam_i.t_days);
    out.tj[r] = normalize_time(p.exam_ip1.t_days);
    out.pair_ids[r] = static_cast<int>(order[begin + r]);
  }
  return out;
}

inline Tensor onehot_rows(const std::vector<int>& grades,
                          int num_grades = kNumGrades) {
  Tensor t({grades.size(), static_cast<std::size_t>(num_grades)});
  for (std::size_t r = 0; r < grades.size(); ++r) {
    check_grade(grades[r]);
    t.at(r, static_cast<std::size_t>(grades[r])) = 1.0;
  }
  return t;
}

inline Tensor soft_label_rows(const std::vector<double>& severities,
                              int num_grades = kNumGrades) {
  Tensor t({severities.size(), static_cast<std::size_t>(num_grades)});
  for (std::size_t r = 0; r < severities.size(); ++r) {
    const auto row = soft_label(severities[r], num_grades);
    std::copy(row.begin(), row.end(),
              t.data.begin() + r * static_cast<std::size_t>(num_grades));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Mixed forward pass and the paired loss.

// k = 0 mixes the inputs; k > 0 mixes the hidden representation after layer
// k and resumes the forward pass from there. lambdas has one weight per row.
inline Tensor z_mix_forward(const Encoder& enc, const Tensor& xi,
                            const Tensor& xj,
                            const std::vector<double>& lambdas, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > enc.num_layers())
    throw std::invalid_argument("z_mix_forward: layer " + std::to_string(k) +
                                " outside [0, " +
                                std::to_string(enc.num_layers()) + "]");
  const std::size_t uk = static_cast<std::size_t>(k);
  if (k == 0) return enc.forward(mix_rows(xi, xj, lambdas));
  Tensor hi = enc.forward_prefix(xi, uk);
  Tensor hj = enc.forward_prefix(xj, uk);
  return enc.forward_suffix(mix_rows(hi, hj, lambdas), uk);
}

inline Tensor z_mix_forward(const Encoder& enc, const ConsecutivePair& pair,
                            const MixDraw& draw) {
  const std::size_t d = pair.exam_i.features.size();
  Tensor xi({1, d}, pair.exam_i.features);
  Tensor xj({1, d}, pair.exam_ip1.features);
  return z_mix_forward(enc, xi, xj, {draw.lambda}, draw.layer_k);
}

// Batch mean of squared differences between the drawn mixing times and the
// regression head's predictions.
inline Tensor time_consistency(const std::vector<double>& t_mix,
                               const Tensor& t_hat) {
  if (t_hat.rows() != t_mix.size() || t_hat.cols() != 1)
    throw std::invalid_argument("time_consistency: expected one scalar per sample");
  Tensor target({t_mix.size(), 1}, t_mix);
  return mse(t_hat, target);
}

inline Tensor time_consistency(double t_mix, const Tensor& t_hat) {
  return time_consistency(std::vector<double>(t_hat.rows(), t_mix), t_hat);
}

namespace detail {

inline Tensor grade_loss(const Tensor& logits, const Tensor& target,
                         bool softmax_targets) {
  return softmax_targets ? softmax_xent(logits, target)
                         : bce_soft(sigmoid(logits), target);
}

inline std::vector<double> mixed_times(const PairBatch& b,
                                       const std::vector<double>& lambdas) {
  std::vector<double> t(b.ti.size());
  for (std::size_t r = 0; r < t.size(); ++r)
    t[r] = mix(b.ti[r], b.tj[r], lambdas[r]);
  return t;
}

inline std::vector<double> interpolated_severities(
    const PairBatch& b, const std::vector<double>& t_mix, ProfileKind profile) {
  std::vector<double> s(t_mix.size());
  for (std::size_t r = 0; r < s.size(); ++r)
    s[r] = interpolate_severity(profile, b.si[r], b.sj[r], b.ti[r], b.tj[r],
                                t_mix[r]);
  return s;
}

}  // namespace detail

// Classification against the interpolated severity at t_mix plus the time
// consistency term, both weighted 1. Aborts with diagnostics on a
// non-finite value.
inline Tensor lmt_loss_batch(const Encoder& enc, const Heads& heads,
                             const PairBatch& batch,
                             const std::vector<double>& lambdas, int layer_k,
                             ProfileKind profile, bool softmax_targets = false) {
  Tensor z = z_mix_forward(enc, batch.xi, batch.xj, lambdas, layer_k);
  const std::vector<double> t_mix = detail::mixed_times(batch, lambdas);
  const std::vector<double> sev =
      detail::interpolated_severities(batch, t_mix, profile);
  Tensor class_loss =
      detail::grade_loss(heads.h1(z), soft_label_rows(sev), softmax_targets);
  Tensor total = add(class_loss, time_consistency(t_mix, heads.h2(z)));
  if (!std::isfinite(total.value()))
    throw std::runtime_error(
        "lmt_loss: non-finite loss (lambda=" + std::to_string(lambdas[0]) +
        ", k=" + std::to_string(layer_k) +
        ", pair id=" + std::to_string(batch.pair_ids.empty() ? -1 : batch.pair_ids[0]) +
        ")");
  return total;
}

inline Tensor lmt_loss(const Encoder& enc, const Heads& heads,
                       const ConsecutivePair& pair, const MixDraw& draw,
                       ProfileKind profile, bool softmax_targets = false) {
  std::vector<ConsecutivePair> one = {pair};
  PairBatch b = make_pair_batch(one, {0}, 0, 1);
  return lmt_loss_batch(enc, heads, b, {draw.lambda}, draw.layer_k, profile,
                        softmax_targets);
}

// ---------------------------------------------------------------------------
// Time-aware model bundle.

struct TimeAwareModel {
  ModelKind kind = ModelKind::kNode;
  Encoder enc;
  Heads heads;
  NodeDynamics dyn;
  TLstmCell cell;

  TimeAwareModel() = default;

  TimeAwareModel(std::size_t in_dim, const LmtConfig& cfg, Rng& rng)
      : kind(cfg.model), enc(in_dim, rng), heads(enc.latent_dim(), rng) {
    if (kind == ModelKind::kNode)
      dyn = NodeDynamics(enc.latent_dim(), cfg.node_hidden, rng);
    else
      cell = TLstmCell(enc.latent_dim(), rng);
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out = enc.params();
    for (Tensor* p : heads.params()) out.push_back(p);
    const auto extra =
        kind == ModelKind::kNode ? dyn.params() : cell.params();
    for (Tensor* p : extra) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    auto out = enc.named_params();
    for (auto& kv : heads.named_params()) out.push_back(kv);
    const auto extra = kind == ModelKind::kNode ? dyn.named_params()
                                                : cell.named_params();
    for (auto& kv : extra) out.push_back(kv);
    return out;
  }

  // Propagates latent rows from per-row start times to target times.
  Tensor propagate(const Tensor& z, const std::vector<double>& t_start,
                   const std::vector<double>& t_target,
                   const NodeConfig& node_cfg) const {
    if (kind == ModelKind::kNode)
      return node_forward(dyn, z, t_start, t_target, node_cfg);
    std::vector<double> dt(t_start.size());
    for (std::size_t r = 0; r < dt.size(); ++r)
      dt[r] = t_target[r] - t_start[r];
    return tlstm_forward(cell, z, dt);
  }
};

// Loss for one batch under the given setup and a shared mixing draw.
inline Tensor setup_loss(const TimeAwareModel& model, const PairBatch& batch,
                         const std::vector<double>& lambdas, int layer_k,
                         const LmtConfig& cfg) {
  Tensor z = model.enc.forward(batch.xi);
  switch (cfg.setup) {
    case Setup::kS1: {
      Tensor zt = model.propagate(z, batch.ti, batch.tj, cfg.node);
      return detail::grade_loss(model.heads.h3(zt), onehot_rows(batch.sj),
                                cfg.softmax_targets);
    }
    case Setup::kS2:
    case Setup::kS3: {
      const std::vector<double> t_mix = detail::mixed_times(batch, lambdas);
      const std::vector<double> sev =
          detail::interpolated_severities(batch, t_mix, cfg.profile);
      Tensor zt = model.propagate(z, batch.ti, t_mix, cfg.node);
      Tensor prop_loss = detail::grade_loss(
          model.heads.h3(zt), soft_label_rows(sev), cfg.softmax_targets);
      if (cfg.setup == Setup::kS2) return prop_loss;
      Tensor mixed = lmt_loss_batch(model.enc, model.heads, batch, lambdas,
                                    layer_k, cfg.profile, cfg.softmax_targets);
      return add(prop_loss, mixed);
    }
  }
  throw std::logic_error("setup_loss: unreachable");
}

// ---------------------------------------------------------------------------
// Shared training loop.

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  bool failed = false;
  std::string fail_reason;
  std::vector<EpochStats> history;
  double best_val = std::numeric_limits<double>::infinity();
};

inline void write_history_csv(const std::string& path,
                              const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("history: cannot open '" + path + "'");
  f << "epoch,train_loss,val_loss,lr,wall_ms\n";
  char buf[160];
  for (const EpochStats& e : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.3f\n", e.epoch,
                  e.train_loss, e.val_loss, e.lr, e.wall_ms);
    f << buf;
  }
  if (!f) throw std::runtime_error("history: write failed for '" + path + "'");
}

namespace detail {

// Epoch/batch driver shared by every trainer. batch_loss must build the loss
// for order[begin, end) on the given tape; val_loss must be deterministic.
// Keeps the best-validation parameter snapshot and restores it at the end.
template <typename BatchLoss, typename ValLoss>
TrainResult train_loop(std::vector<Tensor*> params, std::size_t n_train,
                       const LmtConfig& cfg, Rng& rng, BatchLoss&& batch_loss,
                       ValLoss&& val_loss) {
  TrainResult result;
  if (cfg.epochs == 0) return result;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n_train + bs - 1) / bs;
  const std::size_t total_steps =
      static_cast<std::size_t>(cfg.epochs) * steps_per_epoch;

  OptimState state = make_optim_state(params);
  AdamWConfig opt;
  opt.weight_decay = cfg.weight_decay;

  std::vector<std::vector<double>> best_data;
  for (Tensor* p : params) best_data.push_back(p->data);

  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;

  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double train_sum = 0.0;
    std::size_t batches = 0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < n_train; begin += bs) {
      const std::size_t end = std::min(begin + bs, n_train);
      lr = onecycle_lr(step, total_steps, cfg.max_lr);
      opt.lr = lr;
      Tape tape;
      for (Tensor* p : params) tape.watch(*p);
      Tensor loss;
      try {
        loss = batch_loss(order, begin, end, rng);
      } catch (const std::runtime_error& e) {
        result.failed = true;
        result.fail_reason = e.what();
        for (Tensor* p : params) p->detach();
        return result;
      }
      const double lv = loss.value();
      if (!std::isfinite(lv)) {
        result.failed = true;
        result.fail_reason = "non-finite training loss at epoch " +
                             std::to_string(epoch);
        for (Tensor* p : params) p->detach();
        return result;
      }
      train_sum += lv;
      batches++;
      tape.backward(loss);
      std::vector<std::span<const double>> grads;
      grads.reserve(params.size());
      for (Tensor* p : params) grads.push_back(tape.grad(*p));
      adamw_step(params, grads, state, opt);
      for (Tensor* p : params) p->detach();
      step++;
    }
    const double val = val_loss();
    const auto t1 = std::chrono::steady_clock::now();
    EpochStats es;
    es.epoch = epoch;
    es.train_loss = train_sum / static_cast<double>(batches);
    es.val_loss = val;
    es.lr = lr;
    es.wall_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    result.history.push_back(es);
    if (val < result.best_val) {
      result.best_val = val;
      for (std::size_t i = 0; i < params.size(); ++i)
        best_data[i] = params[i]->data;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i]->data = std::move(best_data[i]);
  return result;
}

// One (lambda vector, layer) draw; lambdas are shared per batch unless
// per-sample draws are configured.
inline std::pair<std::vector<double>, int> draw_mix(std::size_t rows,
                                                    const LmtConfig& cfg,
                                                    Rng& rng) {
  std::vector<double> lambdas(rows);
  if (cfg.per_sample_lambda) {
    for (double& l : lambdas) l = sample_lambda(cfg.alpha, rng);
  } else {
    const double l = sample_lambda(cfg.alpha, rng);
    std::fill(lambdas.begin(), lambdas.end(), l);
  }
  const int k = select_mix_layer(cfg.eligible_layers, rng);
  return {std::move(lambdas), k};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Time-aware setup training.

struct TrainedTimeAware {
  TimeAwareModel model;
  TrainResult result;
};

inline TrainedTimeAware train_setup(Setup kind, ModelKind model_kind,
                                    const Cohort& cohort, LmtConfig cfg) {
  cfg.setup = kind;
  cfg.model = model_kind;
  validate(cfg);
  if (model_kind == ModelKind::kTlstm && kind == Setup::kS3)
    throw std::invalid_argument(
        "train_setup: the recurrent model supports setups S1 and S2 only");

  const auto train_pairs = extract_pairs(cohort, Split::kTrain);
  const auto val_pairs = extract_pairs(cohort, Split::kVal);
  if (train_pairs.empty() || val_pairs.empty())
    throw std::invalid_argument("train_setup: cohort lacks train/val pairs");

  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng loop_rng = root.fork(2);
  Rng val_rng = root.fork(3);

  TrainedTimeAware out;
  out.model = TimeAwareModel(cohort.config.feature_dim, cfg, init_rng);
  TimeAwareModel& model = out.model;

  // fixed validation draws so epoch losses are comparable
  const std::size_t vbs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> val_order(val_pairs.size());
  for (std::size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  std::vector<std::pair<std::vector<double>, int>> val_draws;
  for (std::size_t begin = 0; begin < val_pairs.size(); begin += vbs) {
    const std::size_t end = std::min(begin + vbs, val_pairs.size());
    val_draws.push_back(detail::draw_mix(end - begin, cfg, val_rng));
  }

  auto batch_loss = [&](const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end, Rng& rng) {
    PairBatch b = make_pair_batch(train_pairs, order, begin, end);
    auto [lambdas, k] = detail::draw_mix(end - begin, cfg, rng);
    return setup_loss(model, b, lambdas, k, cfg);
  };
  auto val_loss = [&]() {
    NoGradGuard pause_all;  // validation never records
    double sum = 0.0;
    std::size_t nb = 0;
    for (std::size_t begin = 0; begin < val_pairs.size(); begin += vbs) {
      const std::size_t end = std::min(begin + vbs, val_pairs.size());
      PairBatch b = make_pair_batch(val_pairs, val_order, begin, end);
      const auto& [lambdas, k] = val_draws[nb];
      sum += setup_loss(model, b, lambdas, k, cfg).value();
      nb++;
    }
    return sum / static_cast<double>(nb);
  };

  out.result = detail::train_loop(model.params(), train_pairs.size(), cfg,
                                  loop_rng, batch_loss, val_loss);
  return out;
}

// Next-visit AUC for the task "next grade >= min_grade": propagate each
// exam's latent to its actual next visit time and score with h3.
inline double evaluate_next_visit_auc(const TimeAwareModel& model,
                                      const Cohort& cohort, Split split,
                                      int min_grade, const LmtConfig& cfg) {
  NoGradGuard pause_all;
  const auto pairs = extract_pairs(cohort, split);
  if (pairs.empty())
    throw std::invalid_argument("evaluate_next_visit_auc: no pairs in split");
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t begin = 0; begin < pairs.size(); begin += bs) {
    const std::size_t end = std::min(begin + bs, pairs.size());
    PairBatch b = make_pair_batch(pairs, order, begin, end);
    Tensor z = model.enc.forward(b.xi);
    Tensor zt = model.propagate(z, b.ti, b.tj, cfg.node);
    Tensor probs = softmax(model.heads.h3(zt));
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      double s = 0.0;
      for (int g = min_grade; g < kNumGrades; ++g)
        s += probs.at(r, static_cast<std::size_t>(g));
      scores.push_back(s);
      labels.push_back(b.sj[r] >= min_grade ? 1 : 0);
    }
  }
  return roc_auc(scores, labels);
}

// ---------------------------------------------------------------------------
// Grading trainers: the mixing-method comparison on severity assessment.

enum class GradeMethod {
  kMixupRand,          // random pairs, mixed one-hot labels, input mixing
  kManifoldMixupRand,  // random pairs, mixed one-hot labels, hidden mixing
  kMixup,              // consecutive pairs, mixed one-hot labels, input mixing
  kManifoldMixup,      // consecutive pairs, mixed one-hot labels, hidden mixing
  kLongMixup,          // consecutive pairs, interpolated severity, input mixing
  kLongManifoldMixup,  // consecutive pairs, interpolated severity, hidden mixing
};

inline GradeMethod grade_method_from_string(const std::string& s) {
  if (s == "mixup_rand") return GradeMethod::kMixupRand;
  if (s == "mm_rand") return GradeMethod::kManifoldMixupRand;
  if (s == "mixup") return GradeMethod::kMixup;
  if (s == "mm") return GradeMethod::kManifoldMixup;
  if (s == "lm") return GradeMethod::kLongMixup;
  if (s == "lmm") return GradeMethod::kLongManifoldMixup;
  throw std::invalid_argument("unknown method '" + s + "'");
}
inline const char* to_string(GradeMethod m) {
  switch (m) {
    case GradeMethod::kMixupRand: return "mixup_rand";
    case GradeMethod::kManifoldMixupRand: return "mm_rand";
    case GradeMethod::kMixup: return "mixup";
    case GradeMethod::kManifoldMixup: return "mm";
    case GradeMethod::kLongMixup: return "lm";
    case GradeMethod::kLongManifoldMixup: return "lmm";
  }
  return "?";
}

inline bool uses_input_mixing(GradeMethod m) {
  return m == GradeMethod::kMixupRand || m == GradeMethod::kMixup ||
         m == GradeMethod::kLongMixup;
}
inline bool uses_random_pairs(GradeMethod m) {
  return m == GradeMethod::kMixupRand || m == GradeMethod::kManifoldMixupRand;
}
inline bool uses_severity_interpolation(GradeMethod m) {
  return m == GradeMethod::kLongMixup || m == GradeMethod::kLongManifoldMixup;
}

struct GradingModel {
  Encoder enc;
  Heads heads;

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out = enc.params();
    for (Tensor* p : heads.params()) out.push_back(p);
    return out;
  }
  std::vector<std::pair<std::string, Tensor*>> named_params() {
    auto out = enc.named_params();
    for (auto& kv : heads.named_params()) out.push_back(kv);
    return out;
  }
};

struct TrainedGrading {
  GradingModel model;
  TrainResult result;
};

namespace detail {

// Flat exam list of one split, for random-pair methods and grading eval.
inline std::vector<const Exam*> exams_of_split(const Cohort& cohort,
                                               Split split) {
  std::vector<const Exam*> out;
  for (const Patient& p : cohort.patients) {
    if (p.split != split) continue;
    for (const Eye& e : p.eyes)
      for (const Exam& x : e.exams) out.push_back(&x);
  }
  return out;
}

inline Tensor features_of(const std::vector<const Exam*>& exams,
                          const std::vector<std::size_t>& idx) {
  const std::size_t d = exams[0]->features.size();
  Tensor t({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(exams[idx[r]]->features.begin(), exams[idx[r]]->features.end(),
              t.data.begin() + r * d);
  return t;
}

// Loss of the label-mixing methods: mixed one-hot targets on h1.
inline Tensor label_mix_loss(const GradingModel& model, const Tensor& xa,
                             const Tensor& xb, const std::vector<int>& sa,
                             const std::vector<int>& sb,
                             const std::vector<double>& lambdas, int layer_k,
                             bool softmax_targets) {
  Tensor z = z_mix_forward(model.enc, xa, xb, lambdas, layer_k);
  Tensor ta = onehot_rows(sa), tb = onehot_rows(sb);
  Tensor target = mix_rows(ta, tb, lambdas);
  return grade_loss(model.heads.h1(z), target, softmax_targets);
}

}  // namespace detail

inline TrainedGrading train_grading(GradeMethod method, const Cohort& cohort,
                                    LmtConfig cfg) {
  validate(cfg);
  if (uses_input_mixing(method)) cfg.eligible_layers = {0};

  const auto train_pairs = extract_pairs(cohort, Split::kTrain);
  const auto val_pairs = extract_pairs(cohort, Split::kVal);
  const auto train_exams = detail::exams_of_split(cohort, Split::kTrain);
  const auto val_exams = detail::exams_of_split(cohort, Split::kVal);
  if (train_pairs.empty() || val_pairs.empty())
    throw std::invalid_argument("train_grading: cohort lacks train/val pairs");

  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng loop_rng = root.fork(2);
  Rng val_rng = root.fork(3);

  TrainedGrading out;
  out.model.enc = Encoder(cohort.config.feature_dim, init_rng);
  out.model.heads = Heads(out.model.enc.latent_dim(), init_rng);
  GradingModel& model = out.model;

  const bool random_pairs = uses_random_pairs(method);
  const std::size_t n_train =
      random_pairs ? train_exams.size() : train_pairs.size();

  // pre-sampled validation pairing and draws, fixed across epochs
  const std::size_t vbs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_val = random_pairs ? val_exams.size() : val_pairs.size();
  std::vector<std::size_t> val_order(n_val), val_partner(n_val);
  for (std::size_t i = 0; i < n_val; ++i) val_order[i] = i;
  for (std::size_t i = 0; i < n_val; ++i)
    val_partner[i] = val_rng.uniform_index(n_val);
  std::vector<std::pair<std::vector<double>, int>> val_draws;
  for (std::size_t begin = 0; begin < n_val; begin += vbs) {
    const std::size_t end = std::min(begin + vbs, n_val);
    val_draws.push_back(detail::draw_mix(end - begin, cfg, val_rng));
  }

  auto batch_of = [&](const std::vector<const Exam*>& exams,
                      const std::vector<std::size_t>& order, std::size_t begin,
                      std::size_t end, const std::vector<std::size_t>& partner,
                      Rng* rng, Tensor& xa, Tensor& xb, std::vector<int>& sa,
                      std::vector<int>& sb) {
    std::vector<std::size_t> ia(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                order.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<std::size_t> ib(ia.size());
    for (std::size_t r = 0; r < ib.size(); ++r)
      ib[r] = rng ? rng->uniform_index(exams.size()) : partner[ia[r]];
    xa = detail::features_of(exams, ia);
    xb = detail::features_of(exams, ib);
    sa.resize(ia.size());
    sb.resize(ib.size());
    for (std::size_t r = 0; r < ia.size(); ++r) {
      sa[r] = exams[ia[r]]->grade;
      sb[r] = exams[ib[r]]->grade;
    }
  };

  auto method_loss = [&](const std::vector<ConsecutivePair>& pairs,
                         const std::vector<const Exam*>& exams,
                         const std::vector<std::size_t>& order,
                         std::size_t begin, std::size_t end,
                         const std::vector<double>& lambdas, int k,
                         const std::vector<std::size_t>& partner, Rng* rng) {
    if (uses_severity_interpolation(method)) {
      PairBatch b = make_pair_batch(pairs, order, begin, end);
      return lmt_loss_batch(model.enc, model.heads, b, lambdas, k, cfg.profile,
                            cfg.softmax_targets);
    }
    if (random_pairs) {
      Tensor xa, xb;
      std::vector<int> sa, sb;
      batch_of(exams, order, begin, end, partner, rng, xa, xb, sa, sb);
      return detail::label_mix_loss(model, xa, xb, sa, sb, lambdas, k,
                                    cfg.softmax_targets);
    }
    PairBatch b = make_pair_batch(pairs, order, begin, end);
    return detail::label_mix_loss(model, b.xi, b.xj, b.si, b.sj, lambdas, k,
                                  cfg.softmax_targets);
  };

  auto batch_loss = [&](const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end, Rng& rng) {
    auto [lambdas, k] = detail::draw_mix(end - begin, cfg, rng);
    return method_loss(train_pairs, train_exams, order, begin, end, lambdas, k,
                       {}, &rng);
  };
  auto val_loss = [&]() {
    NoGradGuard pause_all;
    double sum = 0.0;
    std::size_t nb = 0;
    for (std::size_t begin = 0; begin < n_val; begin += vbs) {
      const std::size_t end = std::min(begin + vbs, n_val);
      const auto& [lambdas, k] = val_draws[nb];
      sum += method_loss(val_pairs, val_exams, val_order, begin, end, lambdas,
                         k, val_partner, nullptr)
                 .value();
      nb++;
    }
    return sum / static_cast<double>(nb);
  };

  out.result = detail::train_loop(model.params(), n_train, cfg, loop_rng,
                                  batch_loss, val_loss);
  return out;
}

// Kappa of h1 grade decoding over every exam of the split.
inline double evaluate_grading_kappa(const Encoder& enc, const Heads& heads,
                                     const Cohort& cohort, Split split,
                                     int batch_size = 256) {
  NoGradGuard pause_all;
  const auto exams = detail::exams_of_split(cohort, split);
  if (exams.size() < 2)
    throw std::invalid_argument("evaluate_grading_kappa: too few exams");
  std::vector<int> y_true, y_pred;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < exams.size();
       begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(begin + static_cast<std::size_t>(batch_size), exams.size());
    idx.clear();
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    Tensor x = detail::features_of(exams, idx);
    Tensor logits = heads.h1(enc.forward(x));
    for (int g : grades_from_logit_rows(logits)) y_pred.push_back(g);
    for (std::size_t i = begin; i < end; ++i) y_true.push_back(exams[i]->grade);
  }
  return quadratic_weighted_kappa(y_true, y_pred);
}

// ---------------------------------------------------------------------------
// Downstream protocols: linear probe and fine-tune on future-grade tasks.

enum class Task { kMildPlus = 1, kModeratePlus = 2, kSeverePlus = 3 };

inline Task task_from_string(const std::string& s) {
  if (s == "mild+") return Task::kMildPlus;
  if (s == "moderate+") return Task::kModeratePlus;
  if (s == "severe+") return Task::kSeverePlus;
  throw std::invalid_argument("unknown task '" + s + "'");
}
inline const char* to_string(Task t) {
  switch (t) {
    case Task::kMildPlus: return "mild+";
    case Task::kModeratePlus: return "moderate+";
    case Task::kSeverePlus: return "severe+";
  }
  return "?";
}

inline constexpr double kDownstreamHorizonDays = 730.0;

struct BinaryDataset {
  Tensor x;
  std::vector<int> y;
};

// One sample per exam whose immediately next same-eye exam falls within the
// horizon; label = next grade >= task threshold. Later exams never leak into
// the features.
inline BinaryDataset make_progression_dataset(const Cohort& cohort, Split split,
                                              Task task) {
  std::vector<const Exam*> xs;
  std::vector<int> ys;
  for (const Patient& p : cohort.patients) {
    if (p.split != split) continue;
    for (const Eye& e : p.eyes)
      for (std::size_t i = 0; i + 1 < e.exams.size(); ++i) {
        const Exam& cur = e.exams[i];
        const Exam& nxt = e.exams[i + 1];
        if (nxt.t_days - cur.t_days > kDownstreamHorizonDays) continue;
        xs.push_back(&cur);
        ys.push_back(nxt.grade >= static_cast<int>(task) ? 1 : 0);
      }
  }
  BinaryDataset out;
  if (xs.empty()) return out;
  const std::size_t d = xs[0]->features.size();
  out.x = Tensor({xs.size(), d});
  for (std::size_t r = 0; r < xs.size(); ++r)
    std::copy(xs[r]->features.begin(), xs[r]->features.end(),
              out.x.data.begin() + r * d);
  out.y = std::move(ys);
  return out;
}

struct ProbeConfig {
  int epochs = 20;
  int batch_size = 64;
  double max_lr = 1e-2;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
};

namespace detail {

struct ProbeHead {
  Tensor w, b;
};

inline ProbeHead make_probe_head(std::size_t latent, std::uint64_t seed) {
  Rng rng = Rng(seed).fork(77);
  ProbeHead h;
  h.w = Tensor::randn({latent, 1}, rng, 1.0 / std::sqrt(static_cast<double>(latent)));
  h.b = Tensor({1, 1});
  return h;
}

inline void require_both_classes(const std::vector<int>& y,
                                 const char* where) {
  bool pos = false, neg = false;
  for (int v : y) (v ? pos : neg) = true;
  if (!pos || !neg)
    throw std::invalid_argument(std::string(where) +
                                ": task labels contain a single class");
}

inline std::vector<double> head_scores(const Tensor& latents,
                                       const ProbeHead& head) {
  Tensor s = add_rowwise(matmul(latents, head.w), head.b);
  return s.data;
}

}  // namespace detail

struct DownstreamResult {
  double auc = 0.0;
  TrainResult train;
};

// Trains only the affine probe on frozen-encoder latents; encoder parameters
// receive no gradient and are never updated.
inline DownstreamResult linear_probe(const Encoder& enc, const Cohort& cohort,
                                     Task task, const ProbeConfig& pcfg) {
  BinaryDataset train = make_progression_dataset(cohort, Split::kTrain, task);
  BinaryDataset test = make_progression_dataset(cohort, Split::kTest, task);
  BinaryDataset val = make_progression_dataset(cohort, Split::kVal, task);
  if (train.y.empty() || test.y.empty() || val.y.empty())
    throw std::invalid_argument("linear_probe: empty task dataset");
  detail::require_both_classes(train.y, "linear_probe");
  detail::require_both_classes(test.y, "linear_probe");

  // latents computed once, as constants: nothing can reach the encoder
  Tensor z_train, z_test, z_val;
  {
    NoGradGuard pause_all;
    z_train = enc.forward(train.x);
    z_test = enc.forward(test.x);
    z_val = enc.forward(val.x);
  }
  detail::ProbeHead head = detail::make_probe_head(enc.latent_dim(), pcfg.seed);

  LmtConfig loop_cfg;
  loop_cfg.epochs = pcfg.epochs;
  loop_cfg.batch_size = pcfg.batch_size;
  loop_cfg.max_lr = pcfg.max_lr;
  loop_cfg.weight_decay = pcfg.weight_decay;
  loop_cfg.seed = pcfg.seed;

  Rng loop_rng = Rng(pcfg.seed).fork(2);
  auto slice = [&](const Tensor& z, const std::vector<int>& y,
                   const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t end, Tensor& xs, Tensor& ys) {
    const std::size_t d = z.cols();
    xs = Tensor({end - begin, d});
    ys = Tensor({end - begin, 1});
    for (std::size_t r = 0; r < end - begin; ++r) {
      std::copy(z.data.begin() + order[begin + r] * d,
                z.data.begin() + (order[begin + r] + 1) * d,
                xs.data.begin() + r * d);
      ys[r] = static_cast<double>(y[order[begin + r]]);
    }
  };
  auto batch_loss = [&](const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end, Rng&) {
    Tensor xs, ys;
    slice(z_train, train.y, order, begin, end, xs, ys);
    Tensor logits = add_rowwise(matmul(xs, head.w), head.b);
    return bce_soft(sigmoid(logits), ys);
  };
  std::vector<std::size_t> val_order(val.y.size());
  for (std::size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  auto val_loss = [&]() {
    NoGradGuard pause_all;
    Tensor xs, ys;
    slice(z_val, val.y, val_order, 0, val.y.size(), xs, ys);
    Tensor logits = add_rowwise(matmul(xs, head.w), head.b);
    return bce_soft(sigmoid(logits), ys).value();
  };

  DownstreamResult out;
  out.train = detail::train_loop({&head.w, &head.b}, train.y.size(), loop_cfg,
                                 loop_rng, batch_loss, val_loss);
  NoGradGuard pause_all;
  out.auc = roc_auc(detail::head_scores(z_test, head), test.y);
  return out;
}

// Same protocol with every parameter trainable at a tenth of the probe rate.
// Takes the encoder by value: the caller's copy stays untouched.
inline DownstreamResult fine_tune(Encoder enc, const Cohort& cohort, Task task,
                                  const ProbeConfig& pcfg) {
  BinaryDataset train = make_progression_dataset(cohort, Split::kTrain, task);
  BinaryDataset test = make_progression_dataset(cohort, Split::kTest, task);
  BinaryDataset val = make_progression_dataset(cohort, Split::kVal, task);
  if (train.y.empty() || test.y.empty() || val.y.empty())
    throw std::invalid_argument("fine_tune: empty task dataset");
  detail::require_both_classes(train.y, "fine_tune");
  detail::require_both_classes(test.y, "fine_tune");

  detail::ProbeHead head = detail::make_probe_head(enc.latent_dim(), pcfg.seed);

  LmtConfig loop_cfg;
  loop_cfg.epochs = pcfg.epochs;
  loop_cfg.batch_size = pcfg.batch_size;
  loop_cfg.max_lr = 0.1 * pcfg.max_lr;
  loop_cfg.weight_decay = pcfg.weight_decay;
  loop_cfg.seed = pcfg.seed;

  std::vector<Tensor*> params = enc.params();
  params.push_back(&head.w);
  params.push_back(&head.b);

  Rng loop_rng = Rng(pcfg.seed).fork(2);
  auto slice_raw = [&](const Tensor& x, const std::vector<int>& y,
                       const std::vector<std::size_t>& order,
                       std::size_t begin, std::size_t end, Tensor& xs,
                       Tensor& ys) {
    const std::size_t d = x.cols();
    xs = Tensor({end - begin, d});
    ys = Tensor({end - begin, 1});
    for (std::size_t r = 0; r < end - begin; ++r) {
      std::copy(x.data.begin() + order[begin + r] * d,
                x.data.begin() + (order[begin + r] + 1) * d,
                xs.data.begin() + r * d);
      ys[r] = static_cast<double>(y[order[begin + r]]);
    }
  };
  auto batch_loss = [&](const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end, Rng&) {
    Tensor xs, ys;
    slice_raw(train.x, train.y, order, begin, end, xs, ys);
    Tensor logits = add_rowwise(matmul(enc.forward(xs), head.w), head.b);
    return bce_soft(sigmoid(logits), ys);
  };
  std::vector<std::size_t> val_order(val.y.size());
  for (std::size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  auto val_loss = [&]() {
    NoGradGuard pause_all;
    Tensor xs, ys;
    slice_raw(val.x, val.y, val_order, 0, val.y.size(), xs, ys);
    Tensor logits = add_rowwise(matmul(enc.forward(xs), head.w), head.b);
    return bce_soft(sigmoid(logits), ys).value();
  };

  DownstreamResult out;
  out.train = detail::train_loop(params, train.y.size(), loop_cfg, loop_rng,
                                 batch_loss, val_loss);
  NoGradGuard pause_all;
  out.auc = roc_auc(detail::head_scores(enc.forward(test.x), head), test.y);
  return out;
}

}  // namespace lmt
