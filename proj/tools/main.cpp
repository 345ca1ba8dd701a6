// Command-line front end: synthesis, training, encoding, prediction,
// leave-one-out evaluation and statistical analysis over expression
// sequence datasets.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "fvscore/data_io.hpp"
#include "fvscore/fisher_vector.hpp"
#include "fvscore/pipeline.hpp"
#include "fvscore/random.hpp"
#include "fvscore/stats.hpp"
#include "fvscore/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fvscore;

namespace {

struct CommonOptions {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "JSON pipeline configuration");
  cmd->add_option("--out", opts.out_dir, "output directory");
  cmd->add_option("--seed", opts.seed, "seed override");
  cmd->add_option("--threads", opts.threads, "worker threads (fold-level)");
}

PipelineConfig resolve_config(const CommonOptions& opts, const std::string& fallback_preset) {
  PipelineConfig config = opts.config_path.empty()
                              ? PipelineConfig::defaults_for(fallback_preset)
                              : load_pipeline_config(opts.config_path);
  if (opts.seed) config.seed = *opts.seed;
  if (opts.threads) config.threads = *opts.threads;
  return config;
}

// When no config names a preset, take it from the labels file.
PipelineConfig resolve_config_for_dataset(const CommonOptions& opts,
                                          const LabeledDataset& dataset) {
  PipelineConfig config = resolve_config(opts, dataset.scale.scale_name);
  if (opts.config_path.empty()) config.scale_preset = dataset.scale.scale_name;
  return config;
}

fs::path ensure_out(const CommonOptions& opts) {
  fs::path dir(opts.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot open for writing: " + file.string());
  out << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

LabeledDataset load_validated(const std::string& data_dir, const std::string& labels_file) {
  LabeledDataset dataset = load_dataset(data_dir, labels_file);
  const std::vector<ValidationIssue> issues = validate_dataset(dataset);
  if (!issues.empty()) {
    std::string msg = "dataset invalid (" + std::to_string(issues.size()) + " issues):";
    for (std::size_t i = 0; i < issues.size() && i < 5; ++i) {
      msg += "\n  [" + issues[i].video_id + "] " + issues[i].message;
    }
    throw std::runtime_error(msg);
  }
  return dataset;
}

std::string format_cell(const CorrelationCell& cell) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%5.2f", cell.rho);
  std::string out(buf);
  if (cell.significance == Significance::kP001) {
    out += "**";
  } else if (cell.significance == Significance::kP01) {
    out += "*";
  }
  return out;
}

json metric_to_json(const MetricSummary& m) {
  return json{{"pcc", m.pcc}, {"mae", m.mae}, {"rmse", m.rmse}};
}

std::string metric_line(const std::string& name, const MetricSummary& m) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "  %-24s PCC %6.3f   MAE %6.3f   RMSE %6.3f\n",
                name.c_str(), m.pcc, m.mae, m.rmse);
  return buf;
}

int cmd_synth(const CommonOptions& opts) {
  SyntheticSpec spec;
  if (!opts.config_path.empty()) spec = load_synthetic_spec(opts.config_path);
  if (opts.seed) spec.seed = *opts.seed;
  const SyntheticResult result = generate_synthetic(spec);
  const fs::path out = ensure_out(opts);
  save_sequences(result.dataset.sequences, out / "sequences");
  save_labels({result.dataset.scale, result.dataset.records}, out / "labels.txt");
  save_manifest(result.manifest, out / "manifest.json");
  std::cout << "generated " << result.dataset.sequences.size() << " videos ("
            << result.dataset.scale.scale_name << ") under " << out << "\n";
  return 0;
}

int cmd_validate(const std::string& data_dir, const std::string& labels_file,
                 double min_detection, const CommonOptions& opts) {
  const LabeledDataset dataset = load_dataset(data_dir, labels_file);
  const std::vector<ValidationIssue> issues = validate_dataset(dataset, min_detection);
  json report = json::array();
  for (const ValidationIssue& issue : issues) {
    report.push_back({{"video_id", issue.video_id}, {"message", issue.message}});
    std::cout << "[" << issue.video_id << "] " << issue.message << "\n";
  }
  if (!opts.out_dir.empty() && opts.out_dir != ".") {
    write_json(ensure_out(opts) / "validation.json",
               json{{"issues", report}, {"videos", dataset.sequences.size()}});
  }
  if (issues.empty()) {
    std::cout << "dataset ok: " << dataset.sequences.size() << " videos, scale "
              << dataset.scale.scale_name << "\n";
    return 0;
  }
  std::cout << issues.size() << " issue(s) found\n";
  return 1;
}

int cmd_fit_gmm(const std::string& data_dir, const CommonOptions& opts) {
  const std::vector<ExpressionSequence> sequences = load_sequences(data_dir);
  if (sequences.empty()) throw std::runtime_error("no sequences under " + data_dir);
  PipelineConfig config = resolve_config(opts, "PANSS-NEG");

  const std::size_t stride = std::max<std::size_t>(1, config.frame_subsample_stride);
  std::size_t total = 0;
  for (const auto& seq : sequences) total += (seq.frame_count() + stride - 1) / stride;
  Matrix pooled(total, sequences.front().dim());
  std::size_t row = 0;
  for (const auto& seq : sequences) {
    const ExpressionSequence normalized = normalize_sequence(seq);
    for (std::size_t t = 0; t < normalized.frame_count(); t += stride) {
      std::copy(normalized.frames.row(t).begin(), normalized.frames.row(t).end(),
                pooled.row(row++).begin());
    }
  }

  EmConfig em = config.em;
  em.variance_floor = config.variance_floor;
  em.seed = mix_seed(config.seed, 2);
  const EmResult result = fit_em(pooled, config.gmm_components, em);

  const fs::path out = ensure_out(opts);
  save_gmm({result.model, sequences.front().expression_names}, out / "gmm.txt");
  write_json(out / "gmm_fit.json",
             json{{"iterations", result.iterations},
                  {"converged", result.converged},
                  {"log_likelihood", result.log_likelihood_trace}});
  std::cout << "fit " << config.gmm_components << "-component mixture on " << row
            << " frames in " << result.iterations
            << " iterations; final log-likelihood "
            << result.log_likelihood_trace.back() << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& labels_file,
              const CommonOptions& opts) {
  const LabeledDataset dataset = load_validated(data_dir, labels_file);
  const PipelineConfig config = resolve_config_for_dataset(opts, dataset);
  const ModelBundle bundle = run_training_stages(dataset, config);
  const fs::path out = ensure_out(opts);
  save_model(bundle, out / "model.txt");
  json stages = json::array();
  for (const StageLogEntry& entry : bundle.stage_log) {
    stages.push_back({{"stage", entry.stage},
                      {"iterations", entry.iterations},
                      {"initial_cost", entry.initial_cost},
                      {"final_cost", entry.final_cost}});
    std::cout << "stage " << entry.stage << ": " << entry.iterations << " iterations, cost "
              << entry.initial_cost << " -> " << entry.final_cost << "\n";
  }
  write_json(out / "stage_log.json", stages);
  std::cout << "model written to " << (out / "model.txt") << "\n";
  return 0;
}

int cmd_encode(const std::string& model_path, const std::string& gmm_path,
               const std::string& input, const CommonOptions& opts) {
  GaussianMixture gmm;
  std::vector<std::string> names;
  double threshold = kDefaultPosteriorThreshold;
  if (!model_path.empty()) {
    const ModelBundle bundle = load_model(model_path);
    gmm = bundle.stack.mixture();
    names = bundle.expression_names;
    threshold = bundle.config.posterior_threshold;
  } else {
    const GmmFile file = load_gmm(gmm_path);
    gmm = file.gmm;
    names = file.expression_names;
  }
  const ExpressionSequence raw = load_sequence(input);
  if (!names.empty() && !raw.expression_names.empty() && names != raw.expression_names) {
    throw std::runtime_error("sequence expression names do not match the model");
  }
  const ExpressionSequence normalized = normalize_sequence(raw);
  const FisherVector fv = encode(normalized, gmm, {threshold});

  const fs::path out = ensure_out(opts);
  const fs::path target = out / (raw.video_id + "_fv.txt");
  std::string text;
  for (std::size_t i = 0; i < fv.values.size(); ++i) {
    text += (i > 0 ? " " : "") + format_double(fv.values[i]);
  }
  write_text(target, text + "\n");
  std::cout << "encoded " << raw.video_id << " (" << raw.frame_count() << " frames) to "
            << fv.values.size() << "-dimensional descriptor: " << target << "\n";
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& data_dir,
                const std::string& labels_file, const CommonOptions& opts) {
  const ModelBundle bundle = load_model(model_path);
  const std::vector<ExpressionSequence> sequences = load_sequences(data_dir);
  if (sequences.empty()) throw std::runtime_error("no sequences under " + data_dir);

  json rows = json::array();
  std::string table;
  std::vector<FoldResult> scored;
  std::optional<LabelFile> labels;
  if (!labels_file.empty()) labels = load_labels(labels_file);

  for (const ExpressionSequence& seq : sequences) {
    const SymptomRecord pred = predict(bundle, seq);
    json row{{"video_id", pred.video_id},
             {"symptom_scores", pred.symptom_scores},
             {"total_score", pred.total_score}};
    table += pred.video_id + ":";
    for (std::size_t w = 0; w < pred.symptom_scores.size(); ++w) {
      table += " " + bundle.stack.scale.symptom_names[w] + "=" +
               std::to_string(pred.symptom_scores[w]);
    }
    table += " total=" + std::to_string(pred.total_score) + "\n";
    if (labels) {
      for (const SymptomRecord& truth : labels->records) {
        if (truth.video_id == pred.video_id) {
          scored.push_back({pred.video_id, pred, truth, {}});
          row["truth_symptom_scores"] = truth.symptom_scores;
          row["truth_total_score"] = truth.total_score;
        }
      }
    }
    rows.push_back(std::move(row));
  }

  json output{{"predictions", rows}};
  if (scored.size() >= 2) {
    const LoocvResult metrics = aggregate_folds(scored, bundle.stack.scale);
    json per_symptom = json::array();
    table += "\nagainst labels:\n";
    for (std::size_t w = 0; w < metrics.per_symptom.size(); ++w) {
      per_symptom.push_back(metric_to_json(metrics.per_symptom[w]));
      table += metric_line(bundle.stack.scale.symptom_names[w], metrics.per_symptom[w]);
    }
    table += metric_line("total", metrics.total);
    output["metrics"] = {{"per_symptom", per_symptom},
                         {"total", metric_to_json(metrics.total)}};
  }

  const fs::path out = ensure_out(opts);
  write_json(out / "predictions.json", output);
  write_text(out / "predictions.txt", table);
  std::cout << table;
  return 0;
}

int cmd_loocv(const std::string& data_dir, const std::string& labels_file,
              const CommonOptions& opts) {
  const LabeledDataset dataset = load_validated(data_dir, labels_file);
  const PipelineConfig config = resolve_config_for_dataset(opts, dataset);
  const LoocvResult result = loocv(dataset, config);

  json folds = json::array();
  for (const FoldResult& fold : result.folds) {
    folds.push_back({{"held_out_id", fold.held_out_id},
                     {"training_ids", fold.training_ids},
                     {"predicted_symptom_scores", fold.predicted.symptom_scores},
                     {"predicted_total", fold.predicted.total_score},
                     {"truth_symptom_scores", fold.truth.symptom_scores},
                     {"truth_total", fold.truth.total_score}});
  }
  json per_symptom = json::array();
  std::string table = "leave-one-subject-out over " +
                      std::to_string(result.folds.size()) + " videos\n";
  for (std::size_t w = 0; w < result.per_symptom.size(); ++w) {
    per_symptom.push_back(metric_to_json(result.per_symptom[w]));
    table += metric_line(dataset.scale.symptom_names[w], result.per_symptom[w]);
  }
  table += metric_line("total", result.total);

  const fs::path out = ensure_out(opts);
  write_json(out / "folds.json", folds);
  write_json(out / "metrics.json", json{{"per_symptom", per_symptom},
                                        {"total", metric_to_json(result.total)}});
  write_text(out / "metrics.txt", table);
  std::cout << table;
  return 0;
}

int cmd_correlate(const std::string& data_dir, const std::string& labels_file,
                  const CommonOptions& opts) {
  const LabeledDataset dataset = load_validated(data_dir, labels_file);
  PipelineConfig config = resolve_config_for_dataset(opts, dataset);
  const Matrix frequencies =
      frequency_matrix(dataset.sequences, config.binarize_threshold);

  // Outlier banding happens per expression; every cell in a row reuses that
  // expression's retained cohort.
  std::vector<std::vector<std::size_t>> retained(frequencies.cols());
  std::vector<double> column(frequencies.rows());
  for (std::size_t i = 0; i < frequencies.cols(); ++i) {
    for (std::size_t v = 0; v < frequencies.rows(); ++v) column[v] = frequencies(v, i);
    retained[i] = outlier_band_filter(column);
  }
  const CorrelationTable table =
      correlation_table(frequencies, dataset.records, dataset.scale,
                        dataset.sequences.front().expression_names, retained);

  std::string text = "Spearman correlations (" + dataset.scale.scale_name +
                     "); ** p<=0.001, * p<=0.01\n";
  std::size_t name_width = 10;
  for (const auto& name : table.expression_names) {
    name_width = std::max(name_width, name.size() + 2);
  }
  text += std::string(name_width, ' ');
  for (const auto& column_name : table.column_names) {
    text += "  " + column_name;
  }
  text += "\n";
  json cells = json::array();
  for (std::size_t i = 0; i < table.expression_names.size(); ++i) {
    text += table.expression_names[i] +
            std::string(name_width - table.expression_names[i].size(), ' ');
    json row = json::array();
    for (std::size_t c = 0; c < table.cells[i].size(); ++c) {
      const CorrelationCell& cell = table.cells[i][c];
      const std::string rendered = format_cell(cell);
      const std::size_t width = std::max(table.column_names[c].size(), rendered.size());
      text += "  " + rendered + std::string(width - rendered.size(), ' ');
      row.push_back({{"rho", cell.rho},
                     {"p_value", cell.p_value},
                     {"significance", cell.significance == Significance::kP001  ? "p001"
                                      : cell.significance == Significance::kP01 ? "p01"
                                                                                : "none"},
                     {"retained", retained[i].size()}});
    }
    text += "\n";
    cells.push_back(std::move(row));
  }

  const fs::path out = ensure_out(opts);
  write_text(out / "correlations.txt", text);
  write_json(out / "correlations.json",
             json{{"expressions", table.expression_names},
                  {"columns", table.column_names},
                  {"cells", cells}});
  // Frequencies are part of the analysis record.
  std::string freq_csv = "video_id";
  for (const auto& name : table.expression_names) freq_csv += "," + name;
  freq_csv += "\n";
  for (std::size_t v = 0; v < frequencies.rows(); ++v) {
    freq_csv += dataset.sequences[v].video_id;
    for (std::size_t i = 0; i < frequencies.cols(); ++i) {
      freq_csv += "," + format_double(frequencies(v, i));
    }
    freq_csv += "\n";
  }
  write_text(out / "frequencies.csv", freq_csv);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fisher-vector symptom severity pipeline"};
  app.require_subcommand(1);

  CommonOptions opts;
  std::string data_dir, labels_file, model_path, gmm_path, input_file;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  add_common(synth, opts);

  CLI::App* validate = app.add_subcommand("validate", "check dataset invariants");
  double min_detection = 0.0;
  validate->add_option("--data", data_dir, "sequence directory")->required();
  validate->add_option("--labels", labels_file, "labels file")->required();
  validate->add_option("--min-detection", min_detection,
                       "flag videos whose detected-frame ratio falls below this");
  add_common(validate, opts);

  CLI::App* fit = app.add_subcommand("fit-gmm", "unsupervised mixture estimation");
  fit->add_option("--data", data_dir, "sequence directory")->required();
  add_common(fit, opts);

  CLI::App* train = app.add_subcommand("train", "run the training stages");
  train->add_option("--data", data_dir, "sequence directory")->required();
  train->add_option("--labels", labels_file, "labels file")->required();
  add_common(train, opts);

  CLI::App* enc = app.add_subcommand("encode", "encode one sequence to its descriptor");
  enc->add_option("--model", model_path, "model checkpoint");
  enc->add_option("--gmm", gmm_path, "mixture file (alternative to --model)");
  enc->add_option("--input", input_file, "sequence file")->required();
  add_common(enc, opts);

  CLI::App* pred = app.add_subcommand("predict", "score sequences with a trained model");
  pred->add_option("--model", model_path, "model checkpoint")->required();
  pred->add_option("--data", data_dir, "sequence directory")->required();
  pred->add_option("--labels", labels_file, "optional labels for metrics");
  add_common(pred, opts);

  CLI::App* cv = app.add_subcommand("loocv", "leave-one-subject-out evaluation");
  cv->add_option("--data", data_dir, "sequence directory")->required();
  cv->add_option("--labels", labels_file, "labels file")->required();
  add_common(cv, opts);

  CLI::App* corr = app.add_subcommand("correlate", "frequency features + correlation table");
  corr->add_option("--data", data_dir, "sequence directory")->required();
  corr->add_option("--labels", labels_file, "labels file")->required();
  add_common(corr, opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(opts);
    if (validate->parsed()) {
      return cmd_validate(data_dir, labels_file, min_detection, opts);
    }
    if (fit->parsed()) return cmd_fit_gmm(data_dir, opts);
    if (train->parsed()) return cmd_train(data_dir, labels_file, opts);
    if (enc->parsed()) {
      if (model_path.empty() == gmm_path.empty()) {
        throw std::runtime_error("encode needs exactly one of --model or --gmm");
      }
      return cmd_encode(model_path, gmm_path, input_file, opts);
    }
    if (pred->parsed()) return cmd_predict(model_path, data_dir, labels_file, opts);
    if (cv->parsed()) return cmd_loocv(data_dir, labels_file, opts);
    if (corr->parsed()) return cmd_correlate(data_dir, labels_file, opts);
  } catch (const ParseError& e) {
    std::cerr << json{{"error", e.what()},
                      {"file", e.file().string()},
                      {"line", e.line()}}
                     .dump()
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
