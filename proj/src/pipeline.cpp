#include "fvscore/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "fvscore/random.hpp"
#include "fvscore/stats.hpp"

namespace fvscore {

PipelineConfig PipelineConfig::defaults_for(const std::string& scale_preset) {
  PipelineConfig config;
  config.scale_preset = scale_preset;
  config.stage3.momentum = 0.9;
  config.stage3.epochs = 300;
  config.stage4.momentum = 0.9;
  config.stage4.learning_rate = 0.01;
  config.stage4.epochs = 1000;
  if (scale_preset == "CAINS-EXP") {
    config.stage3.learning_rate = 0.005;
    config.learn_scaling = true;
  } else {
    config.stage3.learning_rate = 0.001;
    config.learn_scaling = false;
  }
  return config;
}

namespace {

// Pooled normalized frames in canonical video order, optionally strided.
Matrix pool_frames(const std::vector<ExpressionSequence>& normalized, std::size_t stride) {
  if (stride == 0) stride = 1;
  std::size_t total = 0;
  for (const auto& seq : normalized) total += (seq.frame_count() + stride - 1) / stride;
  const std::size_t n = normalized.empty() ? 0 : normalized.front().dim();
  Matrix pooled(total, n);
  std::size_t row = 0;
  for (const auto& seq : normalized) {
    for (std::size_t t = 0; t < seq.frame_count(); t += stride) {
      std::copy(seq.frames.row(t).begin(), seq.frames.row(t).end(), pooled.row(row).begin());
      ++row;
    }
  }
  return pooled;
}

}  // namespace

ModelBundle run_training_stages(const LabeledDataset& dataset, const PipelineConfig& config) {
  const std::vector<ValidationIssue> issues = validate_dataset(dataset);
  if (!issues.empty()) {
    std::string msg = "training aborted, dataset invalid:";
    for (std::size_t i = 0; i < issues.size() && i < 5; ++i) {
      msg += "\n  [" + issues[i].video_id + "] " + issues[i].message;
    }
    if (issues.size() > 5) msg += "\n  ... " + std::to_string(issues.size() - 5) + " more";
    throw std::invalid_argument(msg);
  }
  if (dataset.sequences.empty()) throw std::invalid_argument("empty dataset");

  LabeledDataset ordered = dataset;
  sort_by_video_id(ordered);
  const std::size_t v_count = ordered.sequences.size();
  if (ordered.scale.scale_name != config.scale_preset) {
    throw std::invalid_argument("config scale preset '" + config.scale_preset +
                                "' does not match dataset scale '" +
                                ordered.scale.scale_name + "'");
  }
  const SymptomScaleSpec scale = ordered.scale;
  const std::size_t w_count = scale.symptom_count();

  std::vector<ExpressionSequence> normalized;
  normalized.reserve(v_count);
  for (const auto& seq : ordered.sequences) normalized.push_back(normalize_sequence(seq));

  ModelBundle bundle;
  bundle.config = config;
  bundle.expression_names = ordered.sequences.front().expression_names;

  // Stage 2: unsupervised mixture estimation on the pooled frames.
  const Matrix pooled = pool_frames(normalized, config.frame_subsample_stride);
  EmConfig em = config.em;
  em.variance_floor = config.variance_floor;
  em.seed = mix_seed(config.seed, 2);
  const EmResult em_result = fit_em(pooled, config.gmm_components, em);
  bundle.stage_log.push_back({"fit-gmm", em_result.iterations,
                              em_result.log_likelihood_trace.front(),
                              em_result.log_likelihood_trace.back()});

  // Stage 3: end-to-end refinement of mixture + encoding + FC1 on the
  // per-symptom targets.
  std::vector<Matrix> frames;
  frames.reserve(v_count);
  for (const auto& seq : normalized) frames.push_back(seq.frames);
  Matrix targets(v_count, w_count);
  std::vector<double> totals(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    for (std::size_t w = 0; w < w_count; ++w) {
      targets(v, w) = static_cast<double>(ordered.records[v].symptom_scores[w]);
    }
    totals[v] = static_cast<double>(ordered.records[v].total_score);
  }
  const std::size_t fv_len =
      fisher_vector_length(config.gmm_components, bundle.expression_names.size());
  DenseLayer fc1 =
      make_dense_layer(fv_len, w_count, Activation::kRelu, mix_seed(config.seed, 3));
  TrainConfig stage3 = config.stage3;
  stage3.seed = mix_seed(config.seed, 3);
  RefineResult refined = refine_end_to_end(
      RefinableStack::from_mixture(em_result.model, std::move(fc1), scale), frames, targets,
      stage3, config.posterior_threshold);
  bundle.stack = std::move(refined.stack);
  bundle.stage_log.push_back({"refine", stage3.epochs, refined.loss_trace.front(),
                              refined.loss_trace.back()});

  // Training-set predictions feed the output scalings and FC2.
  Matrix fc1_predictions(v_count, w_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    const std::vector<double> out =
        stack_forward(bundle.stack, frames[v], config.posterior_threshold);
    for (std::size_t w = 0; w < w_count; ++w) fc1_predictions(v, w) = out[w];
  }
  if (config.learn_scaling) {
    bundle.fc1_scaling.resize(w_count);
    std::vector<double> column(v_count);
    for (std::size_t w = 0; w < w_count; ++w) {
      for (std::size_t v = 0; v < v_count; ++v) column[v] = fc1_predictions(v, w);
      bundle.fc1_scaling[w] = learn_output_scaling(column, scale);
    }
  }

  // Stage 4: FC2 on the total score, everything earlier frozen.
  TrainConfig stage4 = config.stage4;
  stage4.seed = mix_seed(config.seed, 4);
  const auto fc2_mse = [&](const DenseLayer& fc2) {
    Matrix fc2_pred(v_count, 1);
    Matrix fc2_target(v_count, 1);
    for (std::size_t v = 0; v < v_count; ++v) {
      fc2_pred(v, 0) = forward(fc2, fc1_predictions.row(v))[0];
      fc2_target(v, 0) = totals[v];
    }
    return mse_cost(fc2_pred, fc2_target);
  };
  const double fc2_initial_cost =
      fc2_mse(make_dense_layer(w_count, 1, Activation::kRelu, stage4.seed));
  bundle.fc2 = train_fc2(fc1_predictions, totals, stage4);
  if (config.learn_scaling) {
    std::vector<double> fc2_out(v_count);
    for (std::size_t v = 0; v < v_count; ++v) {
      fc2_out[v] = forward(bundle.fc2, fc1_predictions.row(v))[0];
    }
    bundle.fc2_scaling = learn_output_scaling(
        fc2_out, static_cast<double>(scale.total_min), static_cast<double>(scale.total_max));
  }
  bundle.stage_log.push_back({"fc2", stage4.epochs, fc2_initial_cost, fc2_mse(bundle.fc2)});
  return bundle;
}

SymptomRecord predict(const ModelBundle& bundle, const ExpressionSequence& raw_seq) {
  if (!bundle.expression_names.empty() && !raw_seq.expression_names.empty() &&
      bundle.expression_names != raw_seq.expression_names) {
    throw std::invalid_argument("sequence expression names do not match the model");
  }
  const ExpressionSequence normalized = normalize_sequence(raw_seq);
  const Prediction p =
      predict(bundle.stack, bundle.fc2, normalized.frames, bundle.config.posterior_threshold,
              bundle.fc1_scaling, bundle.fc2_scaling);
  SymptomRecord record;
  record.video_id = raw_seq.video_id;
  record.symptom_scores = p.symptom_scores;
  record.total_score = p.total;
  return record;
}

LoocvResult aggregate_folds(std::vector<FoldResult> folds, const SymptomScaleSpec& scale) {
  const std::size_t w_count = scale.symptom_count();
  const std::size_t f_count = folds.size();
  LoocvResult result;
  result.per_symptom.resize(w_count);

  std::vector<double> pred(f_count);
  std::vector<double> truth(f_count);
  const auto summary = [&pred, &truth]() {
    MetricSummary m;
    // Undefined correlations (constant columns) surface as NaN in reports.
    try {
      m.pcc = pearson(pred, truth);
    } catch (const std::domain_error&) {
      m.pcc = std::numeric_limits<double>::quiet_NaN();
    }
    m.mae = mae(pred, truth);
    m.rmse = rmse(pred, truth);
    return m;
  };

  for (std::size_t w = 0; w < w_count; ++w) {
    for (std::size_t f = 0; f < f_count; ++f) {
      pred[f] = static_cast<double>(folds[f].predicted.symptom_scores[w]);
      truth[f] = static_cast<double>(folds[f].truth.symptom_scores[w]);
    }
    result.per_symptom[w] = summary();
  }
  for (std::size_t f = 0; f < f_count; ++f) {
    pred[f] = static_cast<double>(folds[f].predicted.total_score);
    truth[f] = static_cast<double>(folds[f].truth.total_score);
  }
  result.total = summary();
  result.folds = std::move(folds);
  return result;
}

LoocvResult loocv(const LabeledDataset& dataset, const PipelineConfig& config) {
  LabeledDataset ordered = dataset;
  sort_by_video_id(ordered);
  const std::size_t v_count = ordered.sequences.size();
  if (v_count < 2) throw std::invalid_argument("leave-one-out needs at least two videos");
  if (ordered.records.size() != v_count) {
    throw std::invalid_argument("sequences and records must correspond");
  }

  std::vector<FoldResult> folds(v_count);
  const auto run_fold = [&](std::size_t held_out) {
    LabeledDataset training;
    training.scale = ordered.scale;
    training.sequences.reserve(v_count - 1);
    training.records.reserve(v_count - 1);
    FoldResult& fold = folds[held_out];
    for (std::size_t v = 0; v < v_count; ++v) {
      if (v == held_out) continue;
      training.sequences.push_back(ordered.sequences[v]);
      training.records.push_back(ordered.records[v]);
      fold.training_ids.push_back(ordered.sequences[v].video_id);
    }
    const ModelBundle bundle = run_training_stages(training, config);
    fold.held_out_id = ordered.sequences[held_out].video_id;
    fold.truth = ordered.records[held_out];
    fold.predicted = predict(bundle, ordered.sequences[held_out]);
  };

  const std::size_t threads = std::max<std::size_t>(1, config.threads);
  if (threads == 1) {
    for (std::size_t v = 0; v < v_count; ++v) run_fold(v);
  } else {
    // Folds are independent and indexed, so results do not depend on the
    // worker count.
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    const std::size_t worker_count = std::min(threads, v_count);
    pool.reserve(worker_count);
    for (std::size_t i = 0; i < worker_count; ++i) {
      pool.emplace_back([&]() {
        for (;;) {
          const std::size_t v = next.fetch_add(1);
          if (v >= v_count) return;
          try {
            run_fold(v);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  return aggregate_folds(std::move(folds), ordered.scale);
}

std::vector<double> activation_frequency(const ExpressionSequence& raw_seq,
                                         double binarize_threshold) {
  const std::size_t t_count = raw_seq.frame_count();
  const std::size_t n = raw_seq.dim();
  if (t_count == 0 || n == 0) {
    throw std::invalid_argument("activation_frequency: empty sequence");
  }
  std::vector<double> freq(n, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      // At-threshold counts as active.
      if (raw_seq.frames(t, j) >= binarize_threshold) freq[j] += 1.0;
    }
  }
  for (double& f : freq) f /= static_cast<double>(t_count);
  return freq;
}

Matrix frequency_matrix(const std::vector<ExpressionSequence>& sequences,
                        double binarize_threshold) {
  if (sequences.empty()) throw std::invalid_argument("frequency_matrix: no sequences");
  const std::size_t n = sequences.front().dim();
  Matrix out(sequences.size(), n);
  for (std::size_t v = 0; v < sequences.size(); ++v) {
    const std::vector<double> freq = activation_frequency(sequences[v], binarize_threshold);
    if (freq.size() != n) {
      throw std::invalid_argument("frequency_matrix: inconsistent dimensionality");
    }
    std::copy(freq.begin(), freq.end(), out.row(v).begin());
  }
  return out;
}

std::vector<std::size_t> outlier_band_filter(std::span<const double> frequencies) {
  const std::size_t v_count = frequencies.size();
  if (v_count < 2) {
    throw std::invalid_argument("outlier_band_filter: needs at least two videos");
  }
  double mean = 0.0;
  for (double f : frequencies) mean += f;
  mean /= static_cast<double>(v_count);
  double var = 0.0;
  for (double f : frequencies) var += (f - mean) * (f - mean);
  var /= static_cast<double>(v_count);  // population variance
  const double band = 1.5 * std::sqrt(var);
  std::vector<std::size_t> retained;
  retained.reserve(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    if (std::fabs(frequencies[v] - mean) <= band) retained.push_back(v);
  }
  return retained;
}

OutputScaling learn_output_scaling(std::span<const double> training_predictions, double lo,
                                   double hi) {
  if (training_predictions.empty()) {
    throw std::invalid_argument("learn_output_scaling: empty predictions");
  }
  double p_min = training_predictions[0];
  double p_max = training_predictions[0];
  for (double p : training_predictions) {
    p_min = std::min(p_min, p);
    p_max = std::max(p_max, p);
  }
  OutputScaling scaling;
  scaling.enabled = true;
  if (p_max == p_min) {
    // Degenerate training predictions map to the midpoint of the range.
    scaling.slope = 0.0;
    scaling.offset = 0.5 * (lo + hi);
  } else {
    scaling.slope = (hi - lo) / (p_max - p_min);
    scaling.offset = lo - scaling.slope * p_min;
  }
  return scaling;
}

OutputScaling learn_output_scaling(std::span<const double> training_predictions,
                                   const SymptomScaleSpec& scale) {
  return learn_output_scaling(training_predictions, static_cast<double>(scale.min_score),
                              static_cast<double>(scale.max_score));
}

}  // namespace fvscore
