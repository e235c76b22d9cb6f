#pragma once

// Training runs over a prepared dataset: one variant at a time, or the whole
// ablation ladder over several seeds with a summary table.

#include <chrono>
#include <cstdint>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fin/model.hpp"
#include "fin/prepare.hpp"
#include "fin/train.hpp"

namespace fin {

/// Encoded splits shared by every variant; channels keep enough rows for
/// the largest configuration.
struct encoded_splits {
  std::vector<encoded_sample> train;
  std::vector<encoded_sample> test;
};

inline encoded_splits encode_splits(const prepared_dataset& d, const model_config& shape) {
  model_config widest = apply_variant(shape, "full_fin");
  const auto opt = encode_options_for(widest);
  return {encode_split(d, true, opt), encode_split(d, false, opt)};
}

struct variant_run {
  std::unique_ptr<fin_model> model;
  train_report report;
};

/// Builds, initialises and trains one variant. `base` supplies the shape;
/// vocabulary sizes come from `d`.
inline variant_run run_variant(const prepared_dataset& d, const encoded_splits& splits, const model_config& base,
                               std::string_view variant, std::uint64_t init_seed, const train_options& opt) {
  variant_run out;
  out.model = std::make_unique<fin_model>(with_vocab(apply_variant(base, variant), d));
  out.model->initialize(init_seed);
  out.report = train(*out.model, splits.train, splits.test, opt);
  return out;
}

struct ablation_row {
  std::string variant;
  std::uint64_t seed = 0;
  double auc = 0.0;
  std::size_t parameter_count = 0;
  double seconds = 0.0;
  bool diverged = false;
};

struct ablation_result {
  std::vector<ablation_row> rows;

  /// Mean AUC per variant over seeds, in first-appearance order.
  std::vector<std::pair<std::string, double>> means() const {
    std::vector<std::pair<std::string, double>> out;
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows) {
      if (!acc.count(r.variant)) out.emplace_back(r.variant, 0.0);
      auto& a = acc[r.variant];
      a.first += r.auc;
      a.second += 1;
    }
    for (auto& [v, m] : out) m = acc[v].first / static_cast<double>(acc[v].second);
    return out;
  }

  double mean(std::string_view variant) const {
    for (const auto& [v, m] : means())
      if (v == variant) return m;
    throw config_error("variant '" + std::string(variant) + "' was not run");
  }

  std::string table() const {
    std::ostringstream o;
    o << std::left << std::setw(16) << "variant" << std::setw(8) << "seed" << std::setw(12) << "auc"
      << std::setw(12) << "params" << "seconds\n";
    for (const auto& r : rows) {
      o << std::left << std::setw(16) << r.variant << std::setw(8) << r.seed << std::setw(12) << std::fixed
        << std::setprecision(6) << r.auc << std::setw(12) << r.parameter_count << std::setprecision(1) << r.seconds
        << (r.diverged ? "  diverged" : "") << '\n';
    }
    o << '\n' << std::left << std::setw(16) << "variant" << "mean_auc\n";
    for (const auto& [v, m] : means()) o << std::left << std::setw(16) << v << std::fixed << std::setprecision(6) << m << '\n';
    return o.str();
  }
};

/// Trains every variant for every seed on the same data and budget. A seed
/// sets both the parameter initialisation and the shuffle order.
template <typename Progress>
ablation_result run_ablation(const prepared_dataset& d, const model_config& base,
                             const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                             train_options opt, Progress progress) {
  for (const auto& v : variants) (void)apply_variant(base, v);
  const encoded_splits splits = encode_splits(d, base);
  ablation_result res;
  for (std::uint64_t seed : seeds) {
    for (const auto& v : variants) {
      opt.seed = seed;
      const train_report r = run_variant(d, splits, base, v, seed, opt).report;
      res.rows.push_back({v, seed, r.test_auc, r.parameter_count, r.seconds, r.diverged});
      progress(res.rows.back());
    }
  }
  return res;
}

inline ablation_result run_ablation(const prepared_dataset& d, const model_config& base,
                                    const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                                    const train_options& opt) {
  return run_ablation(d, base, variants, seeds, opt, [](const ablation_row&) {});
}

}  // namespace fin
