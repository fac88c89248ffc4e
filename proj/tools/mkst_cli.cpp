#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>

#include "mkst/mkst.hpp"

#ifndef MKST_VERSION
#define MKST_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kNumerical = 3, kIo = 4 };

struct Options {
  std::string dataset_config;
  std::string model_config;
  std::string train_config;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string checkpoint;
  std::string span;
  std::vector<std::string> sites;
  std::string trace;
  double epsilon = 1e-6;
  double fraction = 0.05;
};

std::string utc_now() {
  const auto now = std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
  return mkst::data::format_instant(now);
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw mkst::IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw mkst::IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string sha256_files(const std::vector<fs::path>& files) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 unavailable");
  std::vector<char> buf(1 << 16);
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw mkst::IoError("cannot open " + f.string());
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof(byte), "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

fs::path prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw mkst::ValidationError("--out-dir is required");
  fs::create_directories(dir);
  return dir;
}

class Manifest {
 public:
  Manifest(std::string command, const Options& opt) : start_(utc_now()) {
    doc_["command"] = std::move(command);
    doc_["version"] = MKST_VERSION;
    doc_["seed"] = opt.seed;
    json configs = json::object();
    if (!opt.dataset_config.empty()) configs["dataset"] = opt.dataset_config;
    if (!opt.model_config.empty()) configs["model"] = opt.model_config;
    if (!opt.train_config.empty()) configs["train"] = opt.train_config;
    if (!opt.checkpoint.empty()) configs["checkpoint"] = opt.checkpoint;
    if (!opt.trace.empty()) configs["trace"] = opt.trace;
    doc_["inputs"] = configs;
    doc_["artifacts"] = json::array();
  }

  json& operator[](const char* key) { return doc_[key]; }
  void artifact(const fs::path& p) { doc_["artifacts"].push_back(p.string()); }

  void write(const fs::path& path) {
    doc_["start_time"] = start_;
    doc_["end_time"] = utc_now();
    write_atomic(path, doc_.dump(2) + "\n");
  }

 private:
  std::string start_;
  json doc_;
};

mkst::KeyValueConfig read_config(const std::string& path, const char* what) {
  if (path.empty()) return mkst::KeyValueConfig::from_string("format = 1\n");
  if (!fs::exists(path)) throw mkst::IoError(std::string(what) + " config not found: " + path);
  return mkst::KeyValueConfig::from_file(path);
}

struct Configs {
  mkst::data::DatasetConfig dataset;
  mkst::ModelConfig model;
  mkst::TrainConfig train;
};

// Every file is parsed before any error is raised so all problems surface together.
Configs load_configs(const Options& opt, bool need_train) {
  Configs c;
  std::vector<std::string> problems;
  auto collect = [&](auto&& body) {
    try {
      body();
    } catch (const mkst::ValidationError& e) {
      problems.push_back(e.what());
    }
  };
  if (opt.dataset_config.empty())
    problems.push_back("--dataset-config is required");
  else
    collect([&] {
      auto kv = read_config(opt.dataset_config, "dataset");
      c.dataset = mkst::data::DatasetConfig::parse(kv);
    });
  collect([&] {
    auto kv = read_config(opt.model_config, "model");
    c.model = mkst::ModelConfig::parse(kv);
    kv.throw_if_errors("model config");
  });
  if (need_train)
    collect([&] {
      auto kv = read_config(opt.train_config, "train");
      c.train = mkst::TrainConfig::parse(kv);
      kv.throw_if_errors("train config");
    });
  if (!problems.empty()) {
    std::string msg = problems.front();
    for (std::size_t i = 1; i < problems.size(); ++i) msg += "\n" + problems[i];
    throw mkst::ValidationError(msg);
  }
  return c;
}

std::vector<fs::path> dataset_files(const mkst::data::DatasetConfig& cfg) {
  auto files = cfg.energy_files;
  files.insert(files.end(), cfg.weather_files.begin(), cfg.weather_files.end());
  return files;
}

json metadata_for(const mkst::data::DatasetSplit& split, const mkst::data::DatasetConfig& cfg) {
  const auto& st = split.normalization_stats;
  return {{"site_ids", split.data.site_ids},
          {"location_ids", split.data.location_ids},
          {"variable_names", split.data.variable_names},
          {"capacities", st.capacity},
          {"weather_mean", st.mean},
          {"weather_stddev", st.stddev},
          {"energy_type", cfg.energy_type == mkst::data::EnergyType::solar ? "solar" : "wind"}};
}

void report_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_train(const Options& opt) {
  auto cfg = load_configs(opt, true);
  const auto out = prepare_out_dir(opt.out_dir);
  Manifest manifest("train", opt);
  manifest["dataset_sha256"] = sha256_files(dataset_files(cfg.dataset));

  mkst::data::IngestReport ingest_report;
  auto split = mkst::data::load_dataset(cfg.dataset, &ingest_report);
  for (const auto& r : ingest_report.rejected_rows) std::cerr << "rejected row: " << r << "\n";
  report_warnings(split.warnings);
  if (split.train.empty()) throw mkst::ValidationError("training split holds no complete window");
  if (split.validation.empty()) throw mkst::ValidationError("validation split holds no complete window");

  auto& mc = cfg.model;
  mc.energy_sites = split.data.site_ids.size();
  mc.weather_sites = split.data.location_ids.size();
  mc.history = cfg.dataset.history;
  mc.horizon = cfg.dataset.horizon;
  mc.weather_vars = split.data.variable_names.size();
  mc.validate();
  cfg.train.seed = opt.seed;

  std::mt19937_64 rng(opt.seed);
  auto model = mkst::Forecaster<double>::create(mc, rng);

  const auto log_path = out / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw mkst::IoError("cannot write " + log_path.string());
  auto result = mkst::fit(model, split.train, split.validation, cfg.train, [&](const mkst::EpochRecord& r) {
    log << json{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"lr", r.lr},
                {"seconds", r.seconds}}
               .dump()
        << "\n"
        << std::flush;
    std::cerr << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << " lr " << r.lr << "\n";
  });
  if (!log) throw mkst::IoError("failed writing " + log_path.string());

  auto meta = metadata_for(split, cfg.dataset);
  meta["seed"] = opt.seed;
  meta["best_epoch"] = result.best_epoch;
  meta["best_val_loss"] = result.best_val_loss;
  const auto ckpt = out / "model.ckpt";
  mkst::save_checkpoint(ckpt, model, meta);

  manifest["model_config"] = mc.to_json();
  manifest["train_config"] = {{"learning_rate", cfg.train.learning_rate},
                              {"batch_size", cfg.train.batch_size},
                              {"plateau_factor", cfg.train.plateau_factor},
                              {"plateau_patience", cfg.train.plateau_patience},
                              {"min_lr", cfg.train.min_lr},
                              {"early_stop_patience", cfg.train.early_stop_patience},
                              {"early_stopping", cfg.train.early_stopping},
                              {"max_epochs", cfg.train.max_epochs},
                              {"dropout", mc.dropout}};
  manifest["samples"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
  manifest["best_epoch"] = result.best_epoch;
  manifest["epochs_run"] = result.log.size();
  manifest["early_stopped"] = result.early_stopped;
  manifest.artifact(ckpt);
  manifest.artifact(log_path);
  manifest.write(out / "train.manifest.json");
  std::cout << "best epoch " << result.best_epoch << " val_loss " << mkst::eval::format_number(result.best_val_loss)
            << "\ncheckpoint " << ckpt.string() << "\n";
  return kOk;
}

void check_against(const json& meta, const char* key, const std::vector<std::string>& actual) {
  if (!meta.contains(key)) return;
  if (meta.at(key).get<std::vector<std::string>>() != actual)
    throw mkst::ValidationError(std::string("checkpoint/config disagreement: ") + key + " differ from the dataset");
}

int cmd_evaluate(const Options& opt) {
  if (opt.checkpoint.empty()) throw mkst::ValidationError("--checkpoint is required");
  auto cfg = load_configs(opt, false);
  std::optional<mkst::eval::TimeSpan> span;
  if (!opt.span.empty()) span = mkst::eval::parse_span(opt.span);
  const auto out = prepare_out_dir(opt.out_dir);
  Manifest manifest("evaluate", opt);
  manifest["dataset_sha256"] = sha256_files(dataset_files(cfg.dataset));

  auto loaded = mkst::load_checkpoint<double>(opt.checkpoint);
  auto split = mkst::data::load_dataset(cfg.dataset);
  report_warnings(split.warnings);
  const auto& mc = loaded.model.config();
  check_against(loaded.metadata, "site_ids", split.data.site_ids);
  check_against(loaded.metadata, "location_ids", split.data.location_ids);
  check_against(loaded.metadata, "variable_names", split.data.variable_names);
  if (mc.energy_sites != split.data.site_ids.size() || mc.weather_sites != split.data.location_ids.size() ||
      mc.history != cfg.dataset.history || mc.horizon != cfg.dataset.horizon ||
      mc.weather_vars != split.data.variable_names.size())
    throw mkst::ValidationError("checkpoint/config disagreement: model expects L_E=" + std::to_string(mc.energy_sites) +
                                " L_W=" + std::to_string(mc.weather_sites) + " T_h=" + std::to_string(mc.history) +
                                " T_f=" + std::to_string(mc.horizon) + " D_W=" + std::to_string(mc.weather_vars));
  if (loaded.metadata.contains("weather_mean") &&
      loaded.metadata.at("weather_mean").get<std::vector<std::vector<double>>>() != split.normalization_stats.mean)
    std::cerr << "warning: normalization statistics differ from the ones the checkpoint was trained with\n";
  if (split.test.empty()) throw mkst::ValidationError("test split holds no complete window");

  auto batch = mkst::predict_batch(loaded.model, split.test);
  std::vector<mkst::Tensor<double>> targets;
  for (const auto& s : split.test) targets.push_back(s.target);
  const bool physical = !cfg.dataset.capacity.empty() || cfg.dataset.default_capacity != 1.0;
  const auto metrics = mkst::eval::compute_metrics(batch.predictions, targets, split.data.site_ids,
                                                   physical ? split.normalization_stats.capacity : std::vector<double>{});
  const auto metrics_path = out / "metrics.csv";
  const auto trace_path = out / "trace.csv";
  mkst::eval::write_metrics_csv(metrics_path, metrics);
  mkst::eval::write_trace_csv(trace_path, split.test, batch.predictions, split.data.site_ids, span);

  manifest["test_samples"] = split.test.size();
  manifest["mean_mae"] = metrics.mean_mae;
  manifest["mean_rmse"] = metrics.mean_rmse;
  manifest.artifact(metrics_path);
  manifest.artifact(trace_path);
  manifest.write(out / "evaluate.manifest.json");
  std::cout << "MAE " << mkst::eval::format_number(metrics.mean_mae) << " RMSE "
            << mkst::eval::format_number(metrics.mean_rmse) << " over " << split.test.size() << " windows\n";
  return kOk;
}

std::vector<std::string> ids_or_default(const json& meta, const char* key, std::size_t n, const char* prefix) {
  if (meta.contains(key)) {
    auto ids = meta.at(key).get<std::vector<std::string>>();
    if (ids.size() == n) return ids;
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return ids;
}

int cmd_export_attention(const Options& opt) {
  if (opt.checkpoint.empty()) throw mkst::ValidationError("--checkpoint is required");
  const auto out = prepare_out_dir(opt.out_dir);
  Manifest manifest("export-attention", opt);
  auto loaded = mkst::load_checkpoint<double>(opt.checkpoint);
  const auto y = loaded.model.spatial_matrix().value();
  const auto sites = ids_or_default(loaded.metadata, "site_ids", y.dim(0), "site");
  const auto locs = ids_or_default(loaded.metadata, "location_ids", y.dim(1), "location");
  std::string text = "site";
  for (const auto& l : locs) text += "," + l;
  text += "\n";
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    text += sites[i];
    for (std::size_t j = 0; j < y.dim(1); ++j) text += "," + mkst::eval::format_number(y.at(i, j));
    text += "\n";
  }
  const auto path = out / "attention.csv";
  write_atomic(path, text);
  manifest.artifact(path);
  manifest.write(out / "export-attention.manifest.json");
  std::cout << path.string() << "\n";
  return kOk;
}

int cmd_plot(const Options& opt) {
  if (opt.trace.empty()) throw mkst::ValidationError("--trace is required");
  if (opt.span.empty()) throw mkst::ValidationError("--span is required");
  const auto span = mkst::eval::parse_span(opt.span);
  const auto out = prepare_out_dir(opt.out_dir);
  Manifest manifest("plot", opt);
  const auto path = out / "plot.svg";
  mkst::plot::write_plot(opt.trace, span, opt.sites, path);
  manifest.artifact(path);
  manifest.write(out / "plot.manifest.json");
  std::cout << path.string() << "\n";
  return kOk;
}

int cmd_gradcheck(const Options& opt) {
  auto kv = read_config(opt.model_config, "model");
  mkst::ModelConfig mc;
  if (opt.model_config.empty()) {
    mc.model_dim = 8;
    mc.key_dim = 4;
    mc.value_dim = 4;
    mc.kernel_sizes = {3, 5};
    mc.levels = 2;
    mc.blocks = 1;
    mc.lambda_dim = 4;
  } else {
    mc = mkst::ModelConfig::parse(kv);
  }
  kv.throw_if_errors("model config");
  mc.energy_sites = 2;
  mc.weather_sites = 3;
  mc.history = 8;
  mc.horizon = 4;
  mc.weather_vars = 2;
  mc.validate();

  std::mt19937_64 rng(opt.seed);
  auto model = mkst::Forecaster<double>::create(mc, rng);
  // Zero-initialised projections park ReLU and max-pool on their kinks, so
  // the check runs at a generic point.
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& p : model.parameters())
    for (auto& v : p.var.mutable_value().storage()) v = u(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto fill = [&](mkst::Shape shape) {
    mkst::Tensor<double> t(std::move(shape));
    for (auto& v : t.storage()) v = unit(rng);
    return t;
  };
  mkst::data::ForecastSample<double> s;
  s.energy_history = fill({mc.energy_sites, mc.history, 1});
  s.weather_history = fill({mc.weather_sites, mc.history, mc.weather_vars});
  s.weather_future = fill({mc.weather_sites, mc.horizon, mc.weather_vars});
  s.target = fill({mc.energy_sites, mc.horizon, 1});
  const auto report = mkst::gradient_check(model, s, opt.epsilon, opt.fraction, opt.seed);
  const bool pass = report.max_rel_error < 1e-3;
  std::cout << json{{"epsilon", opt.epsilon},
                    {"checked", report.checked},
                    {"max_rel_error", report.max_rel_error},
                    {"worst", report.worst},
                    {"pass", pass}}
                   .dump()
            << "\n";
  return pass ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-site renewable energy forecaster"};
  app.require_subcommand(1);
  app.set_version_flag("--version", MKST_VERSION);
  Options opt;

  auto add_common = [&](CLI::App* cmd) { cmd->add_option("--seed", opt.seed, "Seed for every random draw"); };
  auto* train = app.add_subcommand("train", "Fit a model and write checkpoint, log and manifest");
  train->add_option("--dataset-config", opt.dataset_config, "Dataset config file")->required();
  train->add_option("--model-config", opt.model_config, "Model config file");
  train->add_option("--train-config", opt.train_config, "Training config file");
  train->add_option("--out-dir", opt.out_dir, "Output directory")->required();
  add_common(train);

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on the test split");
  evaluate->add_option("--checkpoint", opt.checkpoint, "Checkpoint file")->required();
  evaluate->add_option("--dataset-config", opt.dataset_config, "Dataset config file")->required();
  evaluate->add_option("--out-dir", opt.out_dir, "Output directory")->required();
  evaluate->add_option("--span", opt.span, "Trace span FROM/TO");
  add_common(evaluate);

  auto* attention = app.add_subcommand("export-attention", "Write the learned spatial matrix as CSV");
  attention->add_option("--checkpoint", opt.checkpoint, "Checkpoint file")->required();
  attention->add_option("--out-dir", opt.out_dir, "Output directory")->required();
  add_common(attention);

  auto* plot = app.add_subcommand("plot", "Render target and prediction traces to SVG");
  plot->add_option("--trace", opt.trace, "Trace CSV from evaluate")->required();
  plot->add_option("--span", opt.span, "Span FROM/TO")->required();
  plot->add_option("--sites", opt.sites, "Site ids, comma separated")->delimiter(',');
  plot->add_option("--out-dir", opt.out_dir, "Output directory")->required();
  add_common(plot);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check on a tiny model");
  gradcheck->add_option("--model-config", opt.model_config, "Model config file (architecture keys)");
  gradcheck->add_option("--epsilon", opt.epsilon, "Central-difference step");
  gradcheck->add_option("--fraction", opt.fraction, "Fraction of parameters checked");
  add_common(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*train) return cmd_train(opt);
    if (*evaluate) return cmd_evaluate(opt);
    if (*attention) return cmd_export_attention(opt);
    if (*plot) return cmd_plot(opt);
    if (*gradcheck) return cmd_gradcheck(opt);
  } catch (const mkst::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const mkst::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const mkst::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  }
  return kValidation;
}
