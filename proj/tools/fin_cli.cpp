// fin: data generation, preparation, training, evaluation, ablation and
// inference from one flat configuration.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fin/fin.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum exit_code : int { ok = 0, other_error = 1, config_failure = 2, data_failure = 3, training_failure = 4 };

struct run_dir {
  fs::path root;
  fs::path path;
  std::string command;
};

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// <root>/<command>-<config hash>-<UTC timestamp>, with the effective config
// echoed as config.txt.
run_dir open_run(const fin::run_config& cfg, const std::string& command) {
  run_dir r;
  r.root = cfg.get("run.root");
  r.command = command;
  const std::string base = command + "-" + cfg.hash().substr(0, 12) + "-" + utc_stamp();
  r.path = r.root / base;
  for (int n = 1; fs::exists(r.path); ++n) r.path = r.root / (base + "-" + std::to_string(n));
  fs::create_directories(r.path);
  std::ofstream(r.path / "config.txt") << cfg.text();
  return r;
}

// Marks a finished run as the newest output of its command.
void publish(const run_dir& r) {
  std::ofstream(r.root / ("latest-" + r.command)) << fs::absolute(r.path).string() << '\n';
}

fs::path latest(const fin::run_config& cfg, const std::string& command) {
  const fs::path pointer = fs::path(cfg.get("run.root")) / ("latest-" + command);
  std::ifstream in(pointer);
  std::string line;
  if (!in || !std::getline(in, line) || line.empty()) {
    throw fin::data_error("no finished `" + command + "` run under '" + cfg.get("run.root") + "'; run `fin " +
                          command + "` first");
  }
  return line;
}

fs::path resolve(const fin::run_config& cfg, const std::string& key, const std::string& producer,
                 const std::string& sub) {
  const std::string& given = cfg.get(key);
  if (!given.empty()) return given;
  return latest(cfg, producer) / sub;
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

std::string fixed(double v, int digits = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

double timed_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const fin::run_config& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string source = cfg.get("data.source");
  fin::raw_dataset raw;
  json summary;
  std::vector<double> oracle;
  if (source == "synthetic") {
    auto syn = fin::generate_synthetic(fin::synthetic_spec_from(cfg));
    raw = std::move(syn.raw);
    oracle = std::move(syn.oracle);
  } else {
    const auto schema = fin::review_schema_from(cfg);
    if (cfg.get("data.reviews").empty()) throw fin::config_error("data.reviews is required for source " + source);
    fin::ingest_options opt;
    opt.schema = schema;
    opt.skip_malformed = cfg.get_bool("data.skip_malformed");
    opt.seed = cfg.get_uint("data.negative_seed");
    const std::string meta = cfg.get("data.metadata");
    auto res = fin::ingest_reviews(fs::path(cfg.get("data.reviews")), opt, meta.empty() ? fs::path() : fs::path(meta));
    raw = std::move(res.data);
    summary["skipped_rows"] = res.skipped_rows;
    summary["skipped_negatives"] = res.skipped_negatives;
  }
  const run_dir run = open_run(cfg, "gen-data");
  fin::save_raw_dataset(raw, run.path / "raw");
  summary["source"] = source;
  summary["behaviors"] = raw.behaviors.size();
  summary["samples"] = raw.samples.size();
  if (!oracle.empty()) {
    std::ofstream out(run.path / "raw" / "oracle.tsv");
    out << std::setprecision(17);
    for (double p : oracle) out << p << '\n';
    std::vector<int> labels;
    for (const auto& s : raw.samples) labels.push_back(s.label);
    summary["oracle_auc"] = fin::auc(oracle, labels);
  }
  summary["seconds"] = timed_seconds(t0);
  write_json(run.path / "summary.json", summary);
  std::ofstream rep(run.path / "report.txt");
  for (const auto& [k, v] : summary.items()) rep << k << '=' << v.dump() << '\n';
  publish(run);
  std::cout << "gen-data: " << raw.behaviors.size() << " behaviors, " << raw.samples.size() << " samples -> "
            << (run.path / "raw").string() << '\n';
  return ok;
}

int cmd_prepare(const fin::run_config& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path raw_dir = resolve(cfg, "paths.raw", "gen-data", "raw");
  const auto raw = fin::load_raw_dataset(raw_dir);
  const auto d = fin::prepare(raw, fin::prepare_config_from(cfg));
  const run_dir run = open_run(cfg, "prepare");
  fin::save_prepared(d, run.path / "prepared");
  json summary;
  summary["raw"] = fs::absolute(raw_dir).string();
  summary["train_samples"] = d.train_count();
  summary["test_samples"] = d.test_count();
  summary["users"] = d.users.key_count();
  summary["meal_periods"] = d.binner.effective_bins();
  summary["test_oov_rate"] = d.test_oov.rate();
  json fields;
  for (std::size_t f = 0; f < fin::max_field_count; ++f) {
    fields[fin::field_names[f]] = {{"vocab", d.fields[f].key_count()},
                                   {"test_lookups", d.test_oov.lookups[f]},
                                   {"test_oov", d.test_oov.misses[f]}};
  }
  fields["user"] = {{"vocab", d.users.key_count()},
                    {"test_lookups", d.test_oov.lookups[fin::max_field_count]},
                    {"test_oov", d.test_oov.misses[fin::max_field_count]}};
  summary["fields"] = fields;
  summary["seconds"] = timed_seconds(t0);
  write_json(run.path / "summary.json", summary);
  std::ofstream rep(run.path / "report.txt");
  rep << "train_samples=" << d.train_count() << "\ntest_samples=" << d.test_count()
      << "\ntest_oov_rate=" << fixed(d.test_oov.rate(), 8) << '\n';
  publish(run);
  std::cout << "prepare: " << d.train_count() << " train / " << d.test_count() << " test samples, test OOV rate "
            << fixed(d.test_oov.rate(), 4) << " -> " << (run.path / "prepared").string() << '\n';
  return ok;
}

void write_train_report(const fs::path& dir, const fin::train_report& r, const fs::path& prepared) {
  std::ofstream rep(dir / "report.txt");
  rep << "variant=" << r.variant << "\nseed=" << r.seed << "\nsteps=" << r.steps
      << "\nparameter_count=" << r.parameter_count << '\n';
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) rep << "epoch_loss." << (e + 1) << '=' << fixed(r.epoch_loss[e], 8) << '\n';
  rep << "test_auc=" << fixed(r.test_auc, 8) << "\nseconds=" << fixed(r.seconds, 2) << "\ndiverged=" << r.diverged << '\n';
  if (!r.error.empty()) rep << "error=" << r.error << '\n';
  {
    std::ofstream loss(dir / "loss.tsv");
    loss << "step\tloss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < r.step_loss.size(); ++i) loss << (i + 1) << '\t' << r.step_loss[i] << '\n';
  }
  json j;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["steps"] = r.steps;
  j["parameter_count"] = r.parameter_count;
  j["epoch_loss"] = r.epoch_loss;
  j["test_auc"] = std::isfinite(r.test_auc) ? json(r.test_auc) : json(nullptr);
  j["seconds"] = r.seconds;
  j["diverged"] = r.diverged;
  j["prepared"] = fs::absolute(prepared).string();
  write_json(dir / "summary.json", j);
}

int cmd_train(const fin::run_config& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto shape = fin::model_config_from(cfg);
  auto opt = fin::train_options_from(cfg);
  const fs::path prepared = resolve(cfg, "paths.prepared", "prepare", "prepared");
  const auto d = fin::load_prepared(prepared);
  fin::fin_model model(fin::with_vocab(shape, d));
  model.initialize(cfg.get_uint("model.init_seed"));
  const auto enc = fin::encode_options_for(model.config());
  const auto train_set = fin::encode_split(d, true, enc);
  const auto test_set = fin::encode_split(d, false, enc);

  const run_dir run = open_run(cfg, "train");
  fin::trainer tr(model, train_set, opt);
  if (!cfg.get("train.resume").empty()) tr.resume(fin::load_checkpoint(cfg.get("train.resume")));
  const std::size_t every = cfg.get_size("train.checkpoint_every");
  fin::train_report rep;
  rep.variant = model.config().variant;
  rep.seed = opt.seed;
  rep.parameter_count = model.params().scalar_count();
  try {
    while (!tr.done()) {
      tr.step();
      if (every > 0 && tr.step_losses().size() % every == 0) {
        tr.save((run.path / ("checkpoint-step" + std::to_string(tr.step_losses().size()) + ".bin")).string());
      }
    }
  } catch (const fin::training_error& e) {
    rep.diverged = true;
    rep.error = e.what();
  }
  rep.epoch_loss = tr.epoch_losses();
  rep.step_loss = tr.step_losses();
  rep.steps = rep.step_loss.size();
  if (!rep.diverged) {
    tr.save((run.path / "checkpoint.bin").string());
    rep.test_auc = fin::evaluate_auc(model, test_set, opt.threads);
  }
  rep.seconds = timed_seconds(t0);
  write_train_report(run.path, rep, prepared);
  if (rep.diverged) {
    std::cerr << "fin train: " << rep.error << " (report in " << run.path.string() << ")\n";
    return training_failure;
  }
  publish(run);
  std::cout << "train: " << rep.variant << " test AUC " << fixed(rep.test_auc) << " after " << rep.steps
            << " steps -> " << (run.path / "checkpoint.bin").string() << '\n';
  return ok;
}

struct loaded_model {
  std::unique_ptr<fin::fin_model> model;
  fs::path prepared;
};

// Rebuilds the model stored in a checkpoint; the prepared dataset defaults to
// the one the checkpoint's train run used.
loaded_model load_model(const fin::run_config& cfg, const std::string& key) {
  fs::path ck_path = cfg.get(key);
  if (ck_path.empty()) ck_path = latest(cfg, "train") / "checkpoint.bin";
  if (!fs::exists(ck_path)) throw fin::data_error("missing checkpoint '" + ck_path.string() + "'; run `fin train` first");
  const auto ck = fin::load_checkpoint(ck_path.string());
  loaded_model out;
  out.model = std::make_unique<fin::fin_model>(fin::deserialize_model_config(ck.meta));
  fin::restore_params(out.model->params(), ck.params);
  out.prepared = cfg.get("paths.prepared");
  if (out.prepared.empty()) {
    std::ifstream in(ck_path.parent_path() / "summary.json");
    if (in) {
      const json j = json::parse(in, nullptr, false);
      if (j.is_object() && j.contains("prepared")) out.prepared = j["prepared"].get<std::string>();
    }
  }
  if (out.prepared.empty()) out.prepared = latest(cfg, "prepare") / "prepared";
  return out;
}

int cmd_eval(const fin::run_config& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  auto lm = load_model(cfg, "eval.checkpoint");
  const auto d = fin::load_prepared(lm.prepared);
  const auto& m = *lm.model;
  if (m.config().field_vocab != fin::with_vocab(m.config(), d).field_vocab) {
    throw fin::data_error("checkpoint vocabulary does not match '" + lm.prepared.string() + "'");
  }
  const auto enc = fin::encode_options_for(m.config());
  std::vector<const fin::prepared_sample*> refs;
  std::vector<fin::encoded_sample> test;
  for (const auto& s : d.samples) {
    if (s.train) continue;
    refs.push_back(&s);
    test.push_back(fin::encode_sample(d, s, enc));
  }
  if (test.empty()) throw fin::data_error("test split is empty");
  const std::size_t threads = cfg.get_size("run.threads");
  const auto scores = fin::predict_all(m, test, threads);
  std::vector<int> labels;
  double loss = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    labels.push_back(test[i].label);
    loss += fin::nll(scores[i], test[i].label);
  }
  loss /= static_cast<double>(test.size());
  const double overall = fin::auc(scores, labels);

  const run_dir run = open_run(cfg, "eval");
  {
    std::ofstream out(run.path / "scores.tsv");
    out << "user\titem\tperiod\tlabel\tscore\n" << std::setprecision(17);
    for (std::size_t i = 0; i < test.size(); ++i) {
      out << refs[i]->user << '\t' << refs[i]->query.item_id << '\t' << refs[i]->query.period_id << '\t'
          << test[i].label << '\t' << scores[i] << '\n';
    }
  }
  // Exposure and score per meal-time period.
  struct period_acc {
    std::vector<double> scores;
    std::vector<int> labels;
  };
  std::map<int, period_acc> periods;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto& p = periods[refs[i]->query.period_id];
    p.scores.push_back(scores[i]);
    p.labels.push_back(labels[i]);
  }
  {
    const auto& bounds = d.binner.boundaries();
    std::ofstream out(run.path / "periods.tsv");
    out << "period\tfirst_minute\tend_minute\texposures\tclicks\tmean_score\tauc\n";
    for (const auto& [period, acc] : periods) {
      const int first = period == 0 ? 0 : bounds[static_cast<std::size_t>(period) - 1];
      const int end = static_cast<std::size_t>(period) < bounds.size() ? bounds[static_cast<std::size_t>(period)] : 1440;
      double sum = 0.0;
      int clicks = 0;
      for (std::size_t i = 0; i < acc.scores.size(); ++i) {
        sum += acc.scores[i];
        clicks += acc.labels[i];
      }
      out << period << '\t' << first << '\t' << end << '\t' << acc.scores.size() << '\t' << clicks << '\t'
          << fixed(sum / static_cast<double>(acc.scores.size())) << '\t';
      if (clicks > 0 && static_cast<std::size_t>(clicks) < acc.scores.size()) {
        out << fixed(fin::auc(acc.scores, acc.labels));
      } else {
        out << "NA";
      }
      out << '\n';
    }
  }
  json j;
  j["variant"] = m.config().variant;
  j["prepared"] = fs::absolute(lm.prepared).string();
  j["test_samples"] = test.size();
  j["auc"] = overall;
  j["logloss"] = loss;
  j["seconds"] = timed_seconds(t0);
  write_json(run.path / "summary.json", j);
  std::ofstream(run.path / "report.txt") << "variant=" << m.config().variant << "\ntest_samples=" << test.size()
                                         << "\nauc=" << fixed(overall, 8) << "\nlogloss=" << fixed(loss, 8) << '\n';
  publish(run);
  std::cout << "eval: " << m.config().variant << " AUC " << fixed(overall) << " on " << test.size()
            << " samples -> " << run.path.string() << '\n';
  return ok;
}

int cmd_ablate(const fin::run_config& cfg) {
  const auto shape = fin::model_config_from(cfg);
  const auto variants = cfg.get_list("ablate.variants");
  const auto seeds = cfg.get_uint_list("ablate.seeds");
  if (variants.empty() || seeds.empty()) throw fin::config_error("ablate.variants and ablate.seeds must be non-empty");
  for (const auto& v : variants) (void)fin::apply_variant(shape, v);
  const auto opt = fin::train_options_from(cfg);
  const fs::path prepared = resolve(cfg, "paths.prepared", "prepare", "prepared");
  const auto d = fin::load_prepared(prepared);
  const run_dir run = open_run(cfg, "ablate");
  std::ofstream rows(run.path / "ablation.tsv");
  rows << "variant\tseed\tauc\tparams\tseconds\tdiverged\n";
  const auto res = fin::run_ablation(d, shape, variants, seeds, opt, [&](const fin::ablation_row& r) {
    rows << r.variant << '\t' << r.seed << '\t' << fixed(r.auc, 8) << '\t' << r.parameter_count << '\t'
         << fixed(r.seconds, 2) << '\t' << r.diverged << std::endl;
    std::cout << "ablate: " << r.variant << " seed " << r.seed << " AUC " << fixed(r.auc) << " (" << fixed(r.seconds, 1)
              << " s)" << std::endl;
  });
  const std::string table = res.table();
  std::ofstream(run.path / "report.txt") << table;
  json j;
  j["prepared"] = fs::absolute(prepared).string();
  json arr = json::array();
  for (const auto& r : res.rows) {
    arr.push_back({{"variant", r.variant},
                   {"seed", r.seed},
                   {"auc", r.auc},
                   {"params", r.parameter_count},
                   {"seconds", r.seconds},
                   {"diverged", r.diverged}});
  }
  j["rows"] = arr;
  json means;
  for (const auto& [v, m] : res.means()) means[v] = m;
  j["mean_auc"] = means;
  write_json(run.path / "summary.json", j);
  publish(run);
  std::cout << table;
  bool diverged = false;
  for (const auto& r : res.rows) diverged = diverged || r.diverged;
  return diverged ? training_failure : ok;
}

int cmd_infer(const fin::run_config& cfg, std::string input) {
  if (input.empty()) input = cfg.get("infer.input");
  if (input.empty()) throw fin::config_error("infer needs an input file (--input or infer.input)");
  auto lm = load_model(cfg, "infer.checkpoint");
  const auto d = fin::load_prepared(lm.prepared);
  std::ifstream in(input);
  if (!in) throw fin::data_error("cannot open input '" + input + "'");
  // Lines are either `label \t behavior` or a bare 7-column behavior line.
  std::vector<fin::raw_sample> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (fin::detail::trim(line).empty()) continue;
    const auto s = fin::detail::strip_cr(line);
    try {
      if (fin::detail::split(s, '\t').size() == 7) {
        raw.push_back({fin::parse_behavior_line(s, line_no), 0});
      } else {
        raw.push_back(fin::parse_sample_line(s, line_no));
      }
    } catch (const fin::format_error& e) {
      throw fin::data_error(input + ": " + e.what());
    }
  }
  const auto enc = fin::encode_options_for(lm.model->config());
  std::vector<fin::encoded_sample> samples;
  for (const auto& r : raw) samples.push_back(fin::encode_sample(d, fin::prepare_request(d, r), enc));
  const auto scores = fin::predict_all(*lm.model, samples, cfg.get_size("run.threads"));
  const run_dir run = open_run(cfg, "infer");
  std::ofstream out(run.path / "scores.tsv");
  out << "line\tuser\titem\tscore\n" << std::setprecision(17);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out << (i + 1) << '\t' << raw[i].query.user_id << '\t' << raw[i].query.item_id << '\t' << scores[i] << '\n';
  }
  json j;
  j["input"] = fs::absolute(input).string();
  j["prepared"] = fs::absolute(lm.prepared).string();
  j["scored"] = raw.size();
  write_json(run.path / "summary.json", j);
  std::ofstream(run.path / "report.txt") << "scored=" << raw.size() << '\n';
  publish(run);
  std::cout << "infer: scored " << raw.size() << " samples -> " << (run.path / "scores.tsv").string() << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CTR training over spatial-temporal behavior sequences"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "key = value config file");
  app.add_option("-s,--set", sets, "override one key, e.g. --set train.epochs=3 (repeatable)");
  app.add_flag_callback(
      "--list-keys",
      [] {
        std::cout << fin::run_config::help();
        std::exit(ok);
      },
      "print every config key with its default");

  std::string infer_input;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset or ingest reviews");
  auto* prep = app.add_subcommand("prepare", "split, fit binners, build vocabularies");
  auto* train = app.add_subcommand("train", "train one variant and save a checkpoint");
  auto* eval = app.add_subcommand("eval", "score the test split: AUC and a per-period table");
  auto* ablate = app.add_subcommand("ablate", "train every ablation variant for every seed");
  auto* infer = app.add_subcommand("infer", "score a file of requests");
  infer->add_option("-i,--input", infer_input, "requests: label<TAB>behavior line, or bare behavior lines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : config_failure;
  }

  try {
    fin::run_config cfg;
    if (!config_path.empty()) cfg.load(fs::path(config_path));
    for (const auto& s : sets) cfg.set_assignment(s);
    if (*gen) return cmd_gen_data(cfg);
    if (*prep) return cmd_prepare(cfg);
    if (*train) return cmd_train(cfg);
    if (*eval) return cmd_eval(cfg);
    if (*ablate) return cmd_ablate(cfg);
    if (*infer) return cmd_infer(cfg, infer_input);
    return other_error;
  } catch (const fin::config_error& e) {
    std::cerr << "fin: config error: " << e.what() << '\n';
    return config_failure;
  } catch (const fin::training_error& e) {
    std::cerr << "fin: training error: " << e.what() << '\n';
    return training_failure;
  } catch (const fin::data_error& e) {
    std::cerr << "fin: data error: " << e.what() << '\n';
    return data_failure;
  } catch (const fin::format_error& e) {
    std::cerr << "fin: data error: " << e.what() << '\n';
    return data_failure;
  } catch (const std::exception& e) {
    std::cerr << "fin: error: " << e.what() << '\n';
    return other_error;
  }
}
