#pragma once

// Mini-batch Adam training with deterministic gradient reduction, resumable
// from checkpoints, plus batched scoring.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fin/metrics.hpp"
#include "fin/model.hpp"
#include "fin/params.hpp"
#include "fin/rng.hpp"

namespace fin {

struct train_options {
  std::size_t epochs = 5;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
  adam_config adam;
  // Worker threads for gradient computation (0 = hardware concurrency). The
  // result does not depend on this.
  std::size_t threads = 0;
  // A batch is always reduced as this many contiguous slices, summed in order.
  std::size_t slices = 4;
};

struct train_report {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;
  double test_auc = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
  std::size_t steps = 0;
  std::size_t parameter_count = 0;
  bool diverged = false;
  std::string error;
};

namespace detail {

inline std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested == 0 ? std::max(1U, std::thread::hardware_concurrency()) : requested;
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs job(i) for i in [0, jobs) on up to `threads` workers; each job index
// is owned by exactly one worker so results are independent of scheduling.
template <typename Job>
void parallel_for(std::size_t jobs, std::size_t threads, Job job) {
  const std::size_t workers = worker_count(threads, jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) job(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < jobs; i += workers) job(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hex_double(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

}  // namespace detail

class trainer {
 public:
  trainer(fin_model& model, std::span<const encoded_sample> samples, train_options opt)
      : model_(model), samples_(samples), opt_(opt) {
    if (samples_.empty()) throw training_error("training set is empty");
    if (opt_.batch_size == 0) throw config_error("batch_size must be >= 1");
    if (opt_.slices == 0) opt_.slices = 1;
    opt_.adam.validate();
    slice_grads_.reserve(opt_.slices);
    for (std::size_t i = 0; i < opt_.slices; ++i) slice_grads_.emplace_back(model_.params());
    slice_loss_.assign(opt_.slices, 0.0);
    start_epoch();
  }

  bool done() const { return epoch_ >= opt_.epochs; }
  std::size_t epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }
  const std::vector<double>& epoch_losses() const { return epoch_losses_; }
  const std::vector<double>& step_losses() const { return step_losses_; }
  const train_options& options() const { return opt_; }

  /// One mini-batch: averaged gradients, one Adam update. Returns the mean
  /// batch loss.
  double step() {
    if (done()) throw training_error("training already finished");
    const std::size_t begin = cursor_;
    const std::size_t end = std::min(order_.size(), begin + opt_.batch_size);
    const std::size_t n = end - begin;
    const std::size_t slices = std::min(opt_.slices, n);
    detail::parallel_for(slices, opt_.threads, [&](std::size_t s) {
      const std::size_t lo = begin + s * n / slices;
      const std::size_t hi = begin + (s + 1) * n / slices;
      grad_buffer& g = slice_grads_[s];
      g.set_zero();
      double total = 0.0;
      const param_view view(model_.params(), &g);
      for (std::size_t i = lo; i < hi; ++i) {
        tape t;
        const var l = model_.loss(t, view, samples_[order_[i]]);
        total += l.value()[0];
        t.backward(l);
      }
      slice_loss_[s] = total;
    });
    param_store& store = model_.params();
    const double inv = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t s = 0; s < slices; ++s) loss += slice_loss_[s];
    for (param_id id = 0; id < store.size(); ++id) {
      matrix& dst = store[id].grad;
      dst.set_zero();
      for (std::size_t s = 0; s < slices; ++s) {
        const matrix& src = slice_grads_[s][id];
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      for (double& x : dst.values()) x *= inv;
    }
    if (!std::isfinite(loss)) throw training_error("non-finite loss at step " + std::to_string(store.step()));
    adam_step(store, opt_.adam);
    const double mean = loss * inv;
    step_losses_.push_back(mean);
    epoch_loss_sum_ += loss;
    epoch_loss_count_ += n;
    cursor_ = end;
    if (cursor_ >= order_.size()) {
      epoch_losses_.push_back(epoch_loss_sum_ / static_cast<double>(epoch_loss_count_));
      ++epoch_;
      start_epoch();
    }
    return mean;
  }

  void run() {
    while (!done()) step();
  }

  /// Trainer position and loss trace, stored alongside the parameters.
  std::string state() const {
    std::ostringstream o;
    o << "trainer.epoch=" << epoch_ << '\n'
      << "trainer.cursor=" << cursor_ << '\n'
      << "trainer.seed=" << opt_.seed << '\n'
      << "trainer.batch_size=" << opt_.batch_size << '\n'
      << "trainer.slices=" << opt_.slices << '\n'
      << "trainer.epochs=" << opt_.epochs << '\n'
      << "trainer.samples=" << samples_.size() << '\n'
      << "trainer.epoch_loss_sum=" << detail::hex_double(epoch_loss_sum_) << '\n'
      << "trainer.epoch_loss_count=" << epoch_loss_count_ << '\n';
    o << "trainer.epoch_losses=";
    for (std::size_t i = 0; i < epoch_losses_.size(); ++i) o << (i ? "," : "") << detail::hex_double(epoch_losses_[i]);
    o << '\n' << "trainer.step_losses=";
    for (std::size_t i = 0; i < step_losses_.size(); ++i) o << (i ? "," : "") << detail::hex_double(step_losses_[i]);
    o << '\n';
    return o.str();
  }

  void save(std::ostream& out) const {
    save_checkpoint(out, model_.params(), opt_.adam, serialize(model_.config()) + state());
  }
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot open '" + path + "' for writing");
    save(out);
  }

  /// Restores parameters, optimizer state and position from a checkpoint
  /// written by save() for the same model shape and training set.
  void resume(const checkpoint& ck) {
    const auto kv = parse_key_values(ck.meta);
    const auto get = [&](const char* k) -> std::string {
      const auto it = kv.find(k);
      if (it == kv.end()) throw format_error(std::string("checkpoint missing trainer key ") + k);
      return it->second;
    };
    if (std::stoull(get("trainer.samples")) != samples_.size() ||
        std::stoull(get("trainer.batch_size")) != opt_.batch_size ||
        std::stoull(get("trainer.slices")) != opt_.slices || std::stoull(get("trainer.seed")) != opt_.seed) {
      throw format_error("checkpoint was written for a different training setup");
    }
    restore_params(model_.params(), ck.params);
    opt_.adam = ck.adam;
    epoch_ = std::stoull(get("trainer.epoch"));
    cursor_ = std::stoull(get("trainer.cursor"));
    epoch_loss_sum_ = detail::parse_hex_double(get("trainer.epoch_loss_sum"));
    epoch_loss_count_ = std::stoull(get("trainer.epoch_loss_count"));
    epoch_losses_ = parse_list(get("trainer.epoch_losses"));
    step_losses_ = parse_list(get("trainer.step_losses"));
    build_order();
  }

 private:
  static std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream in(s);
    std::string part;
    while (std::getline(in, part, ','))
      if (!part.empty()) out.push_back(detail::parse_hex_double(part));
    return out;
  }

  void build_order() {
    order_.resize(samples_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng r(derive_seed(opt_.seed, 0x5eed0000ULL + epoch_));
    r.shuffle(order_);
  }

  void start_epoch() {
    cursor_ = 0;
    epoch_loss_sum_ = 0.0;
    epoch_loss_count_ = 0;
    if (!done()) build_order();
  }

  fin_model& model_;
  std::span<const encoded_sample> samples_;
  train_options opt_;
  std::vector<grad_buffer> slice_grads_;
  std::vector<double> slice_loss_;
  std::vector<std::size_t> order_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  double epoch_loss_sum_ = 0.0;
  std::size_t epoch_loss_count_ = 0;
  std::vector<double> epoch_losses_;
  std::vector<double> step_losses_;
};

/// Click probabilities for every sample; scoring fans out over threads and
/// results land at their sample's index.
inline std::vector<double> predict_all(const fin_model& model, std::span<const encoded_sample> samples,
                                       std::size_t threads = 0) {
  std::vector<double> out(samples.size());
  const std::size_t blocks = std::max<std::size_t>(1, std::min<std::size_t>(64, samples.size()));
  detail::parallel_for(blocks, threads, [&](std::size_t b) {
    const std::size_t lo = b * samples.size() / blocks;
    const std::size_t hi = (b + 1) * samples.size() / blocks;
    for (std::size_t i = lo; i < hi; ++i) out[i] = model.predict(samples[i]);
  });
  return out;
}

inline double evaluate_auc(const fin_model& model, std::span<const encoded_sample> samples, std::size_t threads = 0) {
  const auto scores = predict_all(model, samples, threads);
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const auto& s : samples) labels.push_back(s.label);
  return auc(scores, labels);
}

/// Trains from the model's current parameters and evaluates on `test`.
/// Divergence is reported rather than thrown.
inline train_report train(fin_model& model, std::span<const encoded_sample> train_set,
                          std::span<const encoded_sample> test_set, const train_options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  train_report rep;
  rep.variant = model.config().variant;
  rep.seed = opt.seed;
  rep.parameter_count = model.params().scalar_count();
  trainer tr(model, train_set, opt);
  try {
    tr.run();
  } catch (const training_error& e) {
    rep.diverged = true;
    rep.error = e.what();
  }
  rep.epoch_loss = tr.epoch_losses();
  rep.step_loss = tr.step_losses();
  rep.steps = rep.step_loss.size();
  if (!rep.diverged && !test_set.empty()) rep.test_auc = evaluate_auc(model, test_set, opt.threads);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace fin
