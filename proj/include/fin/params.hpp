#pragma once

// Named parameters with Adam state, gradient buffers, checkpoints, and a
// finite-difference gradient checker.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fin/autodiff.hpp"
#include "fin/errors.hpp"
#include "fin/matrix.hpp"
#include "fin/rng.hpp"

namespace fin {

enum class param_kind : std::uint8_t { weight, embedding, bias };

struct param {
  std::string name;
  param_kind kind = param_kind::weight;
  matrix value;
  matrix grad;
  matrix m;
  matrix v;
};

using param_id = std::size_t;

struct adam_config {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0) || !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) ||
        !(epsilon > 0.0)) {
      throw config_error("invalid Adam configuration");
    }
  }
};

class param_store {
 public:
  param_id add(std::string name, std::size_t rows, std::size_t cols, param_kind kind = param_kind::weight) {
    if (index_.count(name)) throw config_error("duplicate parameter '" + name + "'");
    param p;
    p.name = name;
    p.kind = kind;
    p.value = matrix(rows, cols);
    p.grad = matrix(rows, cols);
    p.m = matrix(rows, cols);
    p.v = matrix(rows, cols);
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  param& operator[](param_id id) { return params_[id]; }
  const param& operator[](param_id id) const { return params_[id]; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  param_id id_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw config_error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<param>& params() { return params_; }
  const std::vector<param>& params() const { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  /// Weights: uniform in +-sqrt(6 / (fan_in + fan_out)); embeddings: uniform
  /// in +-embedding_scale; biases: zero.
  void initialize(std::uint64_t seed, double embedding_scale = 0.05) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      rng r(derive_seed(seed, i));
      param& p = params_[i];
      double limit = 0.0;
      switch (p.kind) {
        case param_kind::weight:
          limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
          break;
        case param_kind::embedding:
          limit = embedding_scale;
          break;
        case param_kind::bias:
          limit = 0.0;
          break;
      }
      for (double& x : p.value.values()) x = limit == 0.0 ? 0.0 : r.uniform(-limit, limit);
      p.grad.set_zero();
      p.m.set_zero();
      p.v.set_zero();
    }
    step_ = 0;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.set_zero();
  }

 private:
  std::vector<param> params_;
  std::unordered_map<std::string, param_id> index_;
  std::uint64_t step_ = 0;
};

/// Gradient accumulator shaped like a param_store; one per worker.
class grad_buffer {
 public:
  grad_buffer() = default;
  explicit grad_buffer(const param_store& store) {
    grads_.reserve(store.size());
    for (const auto& p : store.params()) grads_.emplace_back(p.value.rows(), p.value.cols());
  }
  matrix& operator[](param_id id) { return grads_[id]; }
  const matrix& operator[](param_id id) const { return grads_[id]; }
  std::size_t size() const { return grads_.size(); }
  void set_zero() {
    for (auto& g : grads_) g.set_zero();
  }

 private:
  std::vector<matrix> grads_;
};

/// Read access to parameter values plus an optional gradient sink, used by
/// forward passes to bind parameters onto a tape.
class param_view {
 public:
  param_view(const param_store& store, grad_buffer* grads) : store_(&store), grads_(grads) {}

  const matrix& value(param_id id) const { return (*store_)[id].value; }
  matrix* grad(param_id id) const { return grads_ ? &(*grads_)[id] : nullptr; }
  var bind(tape& t, param_id id) const { return t.parameter(value(id), grad(id)); }
  const param_store& store() const { return *store_; }

 private:
  const param_store* store_;
  grad_buffer* grads_;
};

/// Bias-corrected Adam over every parameter, then zeroes the gradients.
/// A non-finite gradient aborts before anything is modified.
inline void adam_step(param_store& store, const adam_config& cfg) {
  for (const auto& p : store.params()) {
    if (!p.grad.all_finite()) throw training_error("non-finite gradient in parameter '" + p.name + "'");
  }
  const std::uint64_t t = store.step() + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& p : store.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.m[i] / c1;
      const double vhat = p.v[i] / c2;
      p.value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
    p.grad.set_zero();
  }
  store.set_step(t);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   magic "FINCKPT1" | u64 step | f64 lr, beta1, beta2, epsilon
//   u64 meta length | meta bytes
//   u64 parameter count
//   per parameter: u64 name length | name | u8 kind | u64 rows | u64 cols
//                  | value payload | m payload | v payload (rows*cols f64 each)

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw format_error("checkpoint truncated");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::uint64_t limit = (1ULL << 30)) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > limit) throw format_error("checkpoint string too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw format_error("checkpoint truncated");
  return s;
}

inline void write_payload(std::ostream& out, const matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline void read_payload(std::istream& in, matrix& m) {
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw format_error("checkpoint truncated");
}

inline constexpr char checkpoint_magic[8] = {'F', 'I', 'N', 'C', 'K', 'P', 'T', '1'};

}  // namespace detail

struct checkpoint {
  param_store params;
  adam_config adam;
  std::string meta;  // free-form key=value lines owned by the caller
};

inline void save_checkpoint(std::ostream& out, const param_store& store, const adam_config& adam,
                            const std::string& meta) {
  out.write(detail::checkpoint_magic, sizeof detail::checkpoint_magic);
  detail::write_pod<std::uint64_t>(out, store.step());
  detail::write_pod(out, adam.learning_rate);
  detail::write_pod(out, adam.beta1);
  detail::write_pod(out, adam.beta2);
  detail::write_pod(out, adam.epsilon);
  detail::write_string(out, meta);
  detail::write_pod<std::uint64_t>(out, store.size());
  for (const auto& p : store.params()) {
    detail::write_string(out, p.name);
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(p.kind));
    detail::write_pod<std::uint64_t>(out, p.value.rows());
    detail::write_pod<std::uint64_t>(out, p.value.cols());
    detail::write_payload(out, p.value);
    detail::write_payload(out, p.m);
    detail::write_payload(out, p.v);
  }
  if (!out) throw error("failed writing checkpoint");
}

inline checkpoint load_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, detail::checkpoint_magic, sizeof magic) != 0) {
    throw format_error("not a checkpoint file (bad magic)");
  }
  checkpoint ck;
  ck.params.set_step(detail::read_pod<std::uint64_t>(in));
  ck.adam.learning_rate = detail::read_pod<double>(in);
  ck.adam.beta1 = detail::read_pod<double>(in);
  ck.adam.beta2 = detail::read_pod<double>(in);
  ck.adam.epsilon = detail::read_pod<double>(in);
  ck.meta = detail::read_string(in);
  const auto count = detail::read_pod<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(in, 4096);
    const auto kind = detail::read_pod<std::uint8_t>(in);
    if (kind > 2) throw format_error("checkpoint: bad parameter kind");
    const auto rows = detail::read_pod<std::uint64_t>(in);
    const auto cols = detail::read_pod<std::uint64_t>(in);
    if (rows * cols > (1ULL << 32)) throw format_error("checkpoint: parameter too large");
    const param_id id = ck.params.add(std::move(name), rows, cols, static_cast<param_kind>(kind));
    param& p = ck.params[id];
    detail::read_payload(in, p.value);
    detail::read_payload(in, p.m);
    detail::read_payload(in, p.v);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const param_store& store, const adam_config& adam,
                            const std::string& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw error("cannot open '" + path + "' for writing");
  save_checkpoint(out, store, adam, meta);
}

inline checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

/// Copies values, moments and step from `src` into `dst`, matching by name
/// and shape.
inline void restore_params(param_store& dst, const param_store& src) {
  if (dst.size() != src.size()) throw format_error("checkpoint parameter count does not match the model");
  for (const auto& p : src.params()) {
    if (!dst.contains(p.name)) throw format_error("checkpoint has unknown parameter '" + p.name + "'");
    param& q = dst[dst.id_of(p.name)];
    if (!q.value.same_shape(p.value)) throw format_error("checkpoint shape mismatch for '" + p.name + "'");
    q.value = p.value;
    q.m = p.m;
    q.v = p.v;
    q.grad.set_zero();
  }
  dst.set_step(src.step());
}

// ---------------------------------------------------------------------------
// Gradient checking

/// |a - n| / max(|a|, |n|, floor). Symmetric in its two arguments; the floor
/// keeps coordinates whose true derivative is ~0 from reporting pure noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct grad_check_options {
  double eps = 1e-5;
  std::size_t samples = 64;
  std::uint64_t seed = 7;
  double floor = 1e-7;
};

struct grad_check_result {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Builds the scalar objective on a fresh tape for the given view.
using scalar_objective = std::function<var(tape&, const param_view&)>;

/// Compares backward-pass gradients with central finite differences on
/// sampled coordinates. Three quarters of the samples are drawn from
/// coordinates with a non-zero analytic gradient, the rest uniformly from all
/// coordinates (which also catches gradients the backward pass misses).
inline grad_check_result grad_check(param_store& store, const scalar_objective& f,
                                    const grad_check_options& opt = {}) {
  grad_buffer grads(store);
  {
    tape t;
    var out = f(t, param_view(store, &grads));
    t.backward(out);
  }
  struct coord {
    param_id id;
    std::size_t index;
  };
  std::vector<coord> nonzero, all;
  for (param_id id = 0; id < store.size(); ++id) {
    for (std::size_t i = 0; i < store[id].value.size(); ++i) {
      all.push_back({id, i});
      if (grads[id][i] != 0.0) nonzero.push_back({id, i});
    }
  }
  rng r(opt.seed);
  std::vector<coord> picks;
  const std::size_t want_nonzero = nonzero.empty() ? 0 : (opt.samples * 3) / 4;
  for (std::size_t k = 0; k < want_nonzero; ++k) picks.push_back(nonzero[r.below(nonzero.size())]);
  while (picks.size() < opt.samples && !all.empty()) picks.push_back(all[r.below(all.size())]);

  const auto evaluate = [&]() {
    tape t;
    return f(t, param_view(store, nullptr)).value()[0];
  };
  grad_check_result res;
  for (const auto& c : picks) {
    double& x = store[c.id].value[c.index];
    const double saved = x;
    x = saved + opt.eps;
    const double up = evaluate();
    x = saved - opt.eps;
    const double down = evaluate();
    x = saved;
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double e = relative_error(grads[c.id][c.index], numeric, opt.floor);
    if (e > res.max_relative_error || res.coordinates == 0) {
      res.worst_parameter = store[c.id].name;
      res.worst_index = c.index;
      res.worst_analytic = grads[c.id][c.index];
      res.worst_numeric = numeric;
      res.max_relative_error = e;
    }
    ++res.coordinates;
  }
  return res;
}

}  // namespace fin
