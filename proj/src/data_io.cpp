#include "fvscore/data_io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string_view>

namespace fvscore {

using nlohmann::json;

ParseError::ParseError(std::filesystem::path file, std::size_t line,
                       const std::string& message)
    : std::runtime_error(file.string() +
                         (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " +
                         message),
      file_(std::move(file)),
      line_(line) {}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

double parse_double(const std::string& token, bool& ok) {
  const char* begin = token.c_str();
  char* end = nullptr;
  const double value = std::strtod(begin, &end);
  ok = end == begin + token.size() && !token.empty();
  return value;
}

namespace {

std::uint64_t fnv1a64(std::string_view payload) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : payload) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string checksum_hex(std::string_view payload) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(payload)));
  return buf;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream in(line);
  std::string t;
  while (in >> t) tokens.push_back(t);
  return tokens;
}

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void check_token_safe(const std::string& name, const char* what) {
  if (name.empty() || name.find_first_of(" \t\n\r,") != std::string::npos) {
    throw std::invalid_argument(std::string(what) + " '" + name +
                                "' must be non-empty without whitespace or commas");
  }
}

std::ofstream open_out(const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot open for writing: " + file.string());
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ParseError(file, 0, "cannot open file");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(strip_cr(std::move(line)));
  return lines;
}

// Sequential reader over a checksummed, line-oriented document.
class LineReader {
 public:
  LineReader(std::filesystem::path file, std::vector<std::string> lines)
      : file_(std::move(file)), lines_(std::move(lines)) {}

  // Consumes and verifies the trailing checksum line.
  void verify_checksum() {
    if (lines_.empty()) throw ParseError(file_, 0, "empty file");
    const std::vector<std::string> tokens = split_ws(lines_.back());
    if (tokens.size() != 2 || tokens[0] != "checksum") {
      throw ParseError(file_, lines_.size(), "missing checksum line (truncated file?)");
    }
    std::string payload;
    for (std::size_t i = 0; i + 1 < lines_.size(); ++i) payload += lines_[i] + "\n";
    if (checksum_hex(payload) != tokens[1]) {
      throw ParseError(file_, lines_.size(), "checksum mismatch (corrupted file)");
    }
    lines_.pop_back();
  }

  bool done() const { return next_ >= lines_.size(); }
  std::size_t line_number() const { return next_; }  // 1-based after next()

  std::vector<std::string> next(const char* expected_head) {
    if (done()) {
      throw ParseError(file_, lines_.size(),
                       std::string("unexpected end of file, expected '") + expected_head +
                           "'");
    }
    const std::size_t number = ++next_;
    std::vector<std::string> tokens = split_ws(lines_[number - 1]);
    if (tokens.empty() || tokens[0] != expected_head) {
      throw ParseError(file_, number,
                       std::string("expected '") + expected_head + "' line");
    }
    return tokens;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError(file_, next_, message);
  }

  const std::filesystem::path& file() const { return file_; }

 private:
  std::filesystem::path file_;
  std::vector<std::string> lines_;
  std::size_t next_ = 0;
};

double require_double(const LineReader& reader, const std::string& token) {
  bool ok = false;
  const double v = parse_double(token, ok);
  if (!ok) reader.fail("malformed number '" + token + "'");
  return v;
}

long require_int(const LineReader& reader, const std::string& token) {
  try {
    std::size_t used = 0;
    const long v = std::stol(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
    return v;
  } catch (const std::exception&) {
    reader.fail("malformed integer '" + token + "'");
  }
}

std::vector<double> require_values(const LineReader& reader,
                                   const std::vector<std::string>& tokens,
                                   std::size_t offset, std::size_t count) {
  if (tokens.size() != offset + count) {
    reader.fail("expected " + std::to_string(count) + " values, got " +
                std::to_string(tokens.size() - offset));
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    values[i] = require_double(reader, tokens[offset + i]);
  }
  return values;
}

void write_values_line(std::string& payload, const char* head,
                       std::span<const double> values) {
  payload += head;
  for (double v : values) {
    payload += ' ';
    payload += format_double(v);
  }
  payload += '\n';
}

void finish_checksummed(const std::filesystem::path& file, const std::string& payload) {
  std::ofstream out = open_out(file);
  out << payload << "checksum " << checksum_hex(payload) << "\n";
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

}  // namespace

// --- sequences ---------------------------------------------------------------

ExpressionSequence load_sequence(const std::filesystem::path& file) {
  const std::vector<std::string> lines = read_lines(file);
  ExpressionSequence seq;
  seq.video_id = file.stem().string();

  std::size_t row = 0;
  std::size_t header_line = 0;
  std::vector<std::vector<double>> frames;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::vector<std::string> tokens = split_ws(line.substr(1));
      if (tokens.size() == 2 && tokens[0] == "frame_rate_hz") {
        bool ok = false;
        const double rate = parse_double(tokens[1], ok);
        if (!ok || rate <= 0.0) {
          throw ParseError(file, i + 1, "malformed frame rate '" + tokens[1] + "'");
        }
        seq.frame_rate_hz = rate;
      } else if (tokens.size() == 2 && tokens[0] == "detected_frame_ratio") {
        bool ok = false;
        const double ratio = parse_double(tokens[1], ok);
        if (!ok || ratio < 0.0 || ratio > 1.0) {
          throw ParseError(file, i + 1, "malformed detection ratio '" + tokens[1] + "'");
        }
        seq.detected_frame_ratio = ratio;
      }
      continue;
    }
    if (header_line == 0) {
      header_line = i + 1;
      for (const std::string& name : split_on(line, ',')) {
        if (name.empty()) throw ParseError(file, i + 1, "empty expression name in header");
        seq.expression_names.push_back(name);
      }
      continue;
    }
    const std::vector<std::string> fields = split_on(line, ',');
    if (fields.size() != seq.expression_names.size()) {
      throw ParseError(file, i + 1,
                       "row has " + std::to_string(fields.size()) + " fields, header has " +
                           std::to_string(seq.expression_names.size()));
    }
    std::vector<double> values(fields.size());
    for (std::size_t j = 0; j < fields.size(); ++j) {
      bool ok = false;
      values[j] = parse_double(fields[j], ok);
      if (!ok) throw ParseError(file, i + 1, "malformed probability '" + fields[j] + "'");
    }
    frames.push_back(std::move(values));
    ++row;
  }
  if (header_line == 0) throw ParseError(file, 0, "missing header row");
  if (frames.empty()) throw ParseError(file, 0, "sequence has no frames");

  seq.frames = Matrix(frames.size(), seq.expression_names.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    std::copy(frames[t].begin(), frames[t].end(), seq.frames.row(t).begin());
  }
  return seq;
}

void save_sequence(const ExpressionSequence& seq, const std::filesystem::path& file) {
  for (const std::string& name : seq.expression_names) {
    check_token_safe(name, "expression name");
  }
  if (seq.expression_names.size() != seq.dim()) {
    throw std::invalid_argument("expression name count does not match columns");
  }
  std::ofstream out = open_out(file);
  out << "# frame_rate_hz " << format_double(seq.frame_rate_hz) << "\n";
  if (seq.detected_frame_ratio != 1.0) {
    out << "# detected_frame_ratio " << format_double(seq.detected_frame_ratio) << "\n";
  }
  for (std::size_t j = 0; j < seq.expression_names.size(); ++j) {
    out << (j > 0 ? "," : "") << seq.expression_names[j];
  }
  out << "\n";
  for (std::size_t t = 0; t < seq.frame_count(); ++t) {
    for (std::size_t j = 0; j < seq.dim(); ++j) {
      out << (j > 0 ? "," : "") << format_double(seq.frames(t, j));
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::vector<ExpressionSequence> load_sequences(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<ExpressionSequence> sequences;
  sequences.reserve(files.size());
  for (const auto& file : files) sequences.push_back(load_sequence(file));
  return sequences;
}

void save_sequences(const std::vector<ExpressionSequence>& sequences,
                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const ExpressionSequence& seq : sequences) {
    check_token_safe(seq.video_id, "video id");
    save_sequence(seq, dir / (seq.video_id + ".csv"));
  }
}

// --- labels ------------------------------------------------------------------

LabelFile load_labels(const std::filesystem::path& file) {
  std::vector<std::string> raw = read_lines(file);
  LabelFile labels;
  bool scale_seen = false;
  std::vector<std::string> symptom_names;

  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::string& line = raw[i];
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> tokens = split_ws(line);
    if (tokens[0] == "scale") {
      if (tokens.size() != 2) throw ParseError(file, i + 1, "expected 'scale <preset>'");
      try {
        labels.scale = SymptomScaleSpec::preset(tokens[1]);
      } catch (const std::invalid_argument& e) {
        throw ParseError(file, i + 1, e.what());
      }
      scale_seen = true;
    } else if (tokens[0] == "symptoms") {
      if (!scale_seen) throw ParseError(file, i + 1, "'symptoms' before 'scale'");
      if (tokens.size() < 2) throw ParseError(file, i + 1, "no symptom names given");
      symptom_names.assign(tokens.begin() + 1, tokens.end());
      labels.scale =
          SymptomScaleSpec::preset_with_symptoms(labels.scale.scale_name, symptom_names);
    } else if (tokens[0] == "video") {
      if (!scale_seen) throw ParseError(file, i + 1, "'video' before 'scale'");
      const std::size_t w_count = labels.scale.symptom_count();
      // video <id> <w scores> total <total>
      if (tokens.size() != w_count + 4 || tokens[tokens.size() - 2] != "total") {
        throw ParseError(file, i + 1,
                         "expected 'video <id> <" + std::to_string(w_count) +
                             " scores> total <total>'");
      }
      SymptomRecord rec;
      rec.video_id = tokens[1];
      for (std::size_t w = 0; w < w_count; ++w) {
        try {
          rec.symptom_scores.push_back(std::stoi(tokens[2 + w]));
        } catch (const std::exception&) {
          throw ParseError(file, i + 1, "malformed score '" + tokens[2 + w] + "'");
        }
      }
      try {
        rec.total_score = std::stoi(tokens.back());
      } catch (const std::exception&) {
        throw ParseError(file, i + 1, "malformed total '" + tokens.back() + "'");
      }
      labels.records.push_back(std::move(rec));
    } else {
      throw ParseError(file, i + 1, "unknown directive '" + tokens[0] + "'");
    }
  }
  if (!scale_seen) throw ParseError(file, 0, "missing 'scale' line");
  return labels;
}

void save_labels(const LabelFile& labels, const std::filesystem::path& file) {
  for (const std::string& name : labels.scale.symptom_names) {
    check_token_safe(name, "symptom name");
  }
  std::ofstream out = open_out(file);
  out << "scale " << labels.scale.scale_name << "\n";
  out << "symptoms";
  for (const std::string& name : labels.scale.symptom_names) out << " " << name;
  out << "\n";
  for (const SymptomRecord& rec : labels.records) {
    check_token_safe(rec.video_id, "video id");
    out << "video " << rec.video_id;
    for (int s : rec.symptom_scores) out << " " << s;
    out << " total " << rec.total_score << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

LabeledDataset load_dataset(const std::filesystem::path& sequence_dir,
                            const std::filesystem::path& labels_file) {
  LabeledDataset dataset;
  dataset.sequences = load_sequences(sequence_dir);
  LabelFile labels = load_labels(labels_file);
  dataset.records = std::move(labels.records);
  dataset.scale = std::move(labels.scale);
  sort_by_video_id(dataset);
  return dataset;
}

// --- configuration -----------------------------------------------------------

namespace {

void train_config_to_json(const TrainConfig& config, json& j) {
  j = json{{"learning_rate", config.learning_rate},
           {"momentum", config.momentum},
           {"epochs", config.epochs},
           {"seed", config.seed},
           {"cains_scaling", config.cains_scaling}};
}

void train_config_from_json(const json& j, TrainConfig& config) {
  config.learning_rate = j.value("learning_rate", config.learning_rate);
  config.momentum = j.value("momentum", config.momentum);
  config.epochs = j.value("epochs", config.epochs);
  config.seed = j.value("seed", config.seed);
  config.cains_scaling = j.value("cains_scaling", config.cains_scaling);
}

json pipeline_config_to_json(const PipelineConfig& config) {
  json stage3;
  json stage4;
  train_config_to_json(config.stage3, stage3);
  train_config_to_json(config.stage4, stage4);
  return json{{"gmm_components", config.gmm_components},
              {"variance_floor", config.variance_floor},
              {"posterior_threshold", config.posterior_threshold},
              {"binarize_threshold", config.binarize_threshold},
              {"scale_preset", config.scale_preset},
              {"em",
               {{"max_iters", config.em.max_iters},
                {"tol", config.em.tol},
                {"variance_floor", config.em.variance_floor},
                {"seed", config.em.seed}}},
              {"stage3", stage3},
              {"stage4", stage4},
              {"learn_scaling", config.learn_scaling},
              {"seed", config.seed},
              {"frame_subsample_stride", config.frame_subsample_stride},
              {"threads", config.threads}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig config =
      PipelineConfig::defaults_for(j.value("scale_preset", std::string("PANSS-NEG")));
  config.gmm_components = j.value("gmm_components", config.gmm_components);
  config.variance_floor = j.value("variance_floor", config.variance_floor);
  config.posterior_threshold = j.value("posterior_threshold", config.posterior_threshold);
  config.binarize_threshold = j.value("binarize_threshold", config.binarize_threshold);
  if (j.contains("em")) {
    const json& em = j.at("em");
    config.em.max_iters = em.value("max_iters", config.em.max_iters);
    config.em.tol = em.value("tol", config.em.tol);
    config.em.variance_floor = em.value("variance_floor", config.variance_floor);
    config.em.seed = em.value("seed", config.em.seed);
  }
  config.em.variance_floor = config.variance_floor;
  if (j.contains("stage3")) train_config_from_json(j.at("stage3"), config.stage3);
  if (j.contains("stage4")) train_config_from_json(j.at("stage4"), config.stage4);
  config.learn_scaling = j.value("learn_scaling", config.learn_scaling);
  config.seed = j.value("seed", config.seed);
  config.frame_subsample_stride =
      j.value("frame_subsample_stride", config.frame_subsample_stride);
  config.threads = j.value("threads", config.threads);
  return config;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) return {};
  Matrix m(j.size(), j.at(0).size());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const json& row = j.at(r);
    if (row.size() != m.cols()) throw std::runtime_error("ragged matrix in JSON");
    for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = row.at(c).get<double>();
  }
  return m;
}

json parse_json_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ParseError(file, 0, "cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(file, 0, std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

PipelineConfig load_pipeline_config(const std::filesystem::path& file) {
  try {
    return pipeline_config_from_json(parse_json_file(file));
  } catch (const json::exception& e) {
    throw ParseError(file, 0, std::string("invalid config: ") + e.what());
  }
}

void save_pipeline_config(const PipelineConfig& config, const std::filesystem::path& file) {
  std::ofstream out = open_out(file);
  out << pipeline_config_to_json(config).dump(2) << "\n";
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& file) {
  const json root = parse_json_file(file);
  try {
    const json j = root.contains("synthetic") ? root.at("synthetic") : root;
    SyntheticSpec spec;
    spec.video_count = j.value("video_count", spec.video_count);
    spec.min_frames = j.value("min_frames", spec.min_frames);
    spec.max_frames = j.value("max_frames", spec.max_frames);
    spec.dim = j.value("dim", spec.dim);
    spec.true_components = j.value("true_components", spec.true_components);
    spec.noise_sd = j.value("noise_sd", spec.noise_sd);
    spec.scale_preset = j.value("scale_preset", spec.scale_preset);
    spec.binarize_threshold = j.value("binarize_threshold", spec.binarize_threshold);
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("score_map")) {
      ScoreMap map;
      map.weights = matrix_from_json(j.at("score_map").at("weights"));
      map.offsets = j.at("score_map").at("offsets").get<std::vector<double>>();
      spec.score_map = std::move(map);
    }
    return spec;
  } catch (const json::exception& e) {
    throw ParseError(file, 0, std::string("invalid synthetic spec: ") + e.what());
  }
}

namespace {

json synthetic_spec_to_json(const SyntheticSpec& spec) {
  json j{{"video_count", spec.video_count},
         {"min_frames", spec.min_frames},
         {"max_frames", spec.max_frames},
         {"dim", spec.dim},
         {"true_components", spec.true_components},
         {"noise_sd", spec.noise_sd},
         {"scale_preset", spec.scale_preset},
         {"binarize_threshold", spec.binarize_threshold},
         {"seed", spec.seed}};
  if (spec.score_map) {
    j["score_map"] = json{{"weights", matrix_to_json(spec.score_map->weights)},
                          {"offsets", spec.score_map->offsets}};
  }
  return j;
}

}  // namespace

void save_manifest(const SyntheticManifest& manifest, const std::filesystem::path& file) {
  json j{{"spec", synthetic_spec_to_json(manifest.spec)},
         {"score_map",
          {{"weights", matrix_to_json(manifest.score_map.weights)},
           {"offsets", manifest.score_map.offsets}}},
         {"component_logit_means", matrix_to_json(manifest.component_logit_means)},
         {"component_logit_sds", matrix_to_json(manifest.component_logit_sds)},
         {"video_mixture_weights", matrix_to_json(manifest.video_mixture_weights)},
         {"true_frequencies", matrix_to_json(manifest.true_frequencies)},
         {"noise", matrix_to_json(manifest.noise)}};
  std::ofstream out = open_out(file);
  out << j.dump(2) << "\n";
}

SyntheticManifest load_manifest(const std::filesystem::path& file) {
  const json j = parse_json_file(file);
  try {
    SyntheticManifest manifest;
    const json& spec = j.at("spec");
    {
      SyntheticSpec s;
      s.video_count = spec.at("video_count").get<std::size_t>();
      s.min_frames = spec.at("min_frames").get<std::size_t>();
      s.max_frames = spec.at("max_frames").get<std::size_t>();
      s.dim = spec.at("dim").get<std::size_t>();
      s.true_components = spec.at("true_components").get<std::size_t>();
      s.noise_sd = spec.at("noise_sd").get<double>();
      s.scale_preset = spec.at("scale_preset").get<std::string>();
      s.binarize_threshold = spec.at("binarize_threshold").get<double>();
      s.seed = spec.at("seed").get<std::uint64_t>();
      if (spec.contains("score_map")) {
        ScoreMap map;
        map.weights = matrix_from_json(spec.at("score_map").at("weights"));
        map.offsets = spec.at("score_map").at("offsets").get<std::vector<double>>();
        s.score_map = std::move(map);
      }
      manifest.spec = std::move(s);
    }
    manifest.score_map.weights = matrix_from_json(j.at("score_map").at("weights"));
    manifest.score_map.offsets = j.at("score_map").at("offsets").get<std::vector<double>>();
    manifest.component_logit_means = matrix_from_json(j.at("component_logit_means"));
    manifest.component_logit_sds = matrix_from_json(j.at("component_logit_sds"));
    manifest.video_mixture_weights = matrix_from_json(j.at("video_mixture_weights"));
    manifest.true_frequencies = matrix_from_json(j.at("true_frequencies"));
    manifest.noise = matrix_from_json(j.at("noise"));
    return manifest;
  } catch (const json::exception& e) {
    throw ParseError(file, 0, std::string("invalid manifest: ") + e.what());
  }
}

// --- mixture and model checkpoints -------------------------------------------

namespace {

void write_names_line(std::string& payload, const char* head,
                      const std::vector<std::string>& names, const char* what) {
  for (const std::string& name : names) check_token_safe(name, what);
  payload += head;
  for (const std::string& name : names) {
    payload += ' ';
    payload += name;
  }
  payload += '\n';
}

void write_gmm_section(std::string& payload, const GaussianMixture& gmm) {
  payload += "gmm " + std::to_string(gmm.component_count()) + " " +
             std::to_string(gmm.dim()) + " " + format_double(gmm.variance_floor) + "\n";
  write_values_line(payload, "w", gmm.weights);
  for (std::size_t k = 0; k < gmm.component_count(); ++k) {
    write_values_line(payload, "mean", gmm.means.row(k));
  }
  for (std::size_t k = 0; k < gmm.component_count(); ++k) {
    write_values_line(payload, "var", gmm.variances.row(k));
  }
}

GaussianMixture read_gmm_section(LineReader& reader) {
  const std::vector<std::string> head = reader.next("gmm");
  if (head.size() != 4) reader.fail("expected 'gmm <K> <N> <floor>'");
  const long k_count = require_int(reader, head[1]);
  const long n = require_int(reader, head[2]);
  if (k_count <= 0 || n <= 0) reader.fail("mixture dimensions must be positive");
  GaussianMixture gmm;
  gmm.variance_floor = require_double(reader, head[3]);
  gmm.weights = require_values(reader, reader.next("w"), 1, static_cast<std::size_t>(k_count));
  gmm.means = Matrix(k_count, n);
  gmm.variances = Matrix(k_count, n);
  for (long k = 0; k < k_count; ++k) {
    const std::vector<double> row =
        require_values(reader, reader.next("mean"), 1, static_cast<std::size_t>(n));
    std::copy(row.begin(), row.end(), gmm.means.row(k).begin());
  }
  for (long k = 0; k < k_count; ++k) {
    const std::vector<double> row =
        require_values(reader, reader.next("var"), 1, static_cast<std::size_t>(n));
    std::copy(row.begin(), row.end(), gmm.variances.row(k).begin());
  }
  return gmm;
}

void write_dense_section(std::string& payload, const char* name, const DenseLayer& layer) {
  payload += std::string(name) + " " + std::to_string(layer.in_dim) + " " +
             std::to_string(layer.out_dim) + " " +
             (layer.activation == Activation::kRelu ? "relu" : "identity") + "\n";
  for (std::size_t o = 0; o < layer.out_dim; ++o) {
    write_values_line(payload, (std::string(name) + "_w").c_str(), layer.weights.row(o));
  }
  write_values_line(payload, (std::string(name) + "_b").c_str(), layer.biases);
}

DenseLayer read_dense_section(LineReader& reader, const char* name) {
  const std::vector<std::string> head = reader.next(name);
  if (head.size() != 4) reader.fail(std::string("expected '") + name + " <in> <out> <act>'");
  DenseLayer layer;
  layer.in_dim = static_cast<std::size_t>(require_int(reader, head[1]));
  layer.out_dim = static_cast<std::size_t>(require_int(reader, head[2]));
  if (head[3] == "relu") {
    layer.activation = Activation::kRelu;
  } else if (head[3] == "identity") {
    layer.activation = Activation::kIdentity;
  } else {
    reader.fail("unknown activation '" + head[3] + "'");
  }
  layer.weights = Matrix(layer.out_dim, layer.in_dim);
  const std::string w_head = std::string(name) + "_w";
  for (std::size_t o = 0; o < layer.out_dim; ++o) {
    const std::vector<double> row =
        require_values(reader, reader.next(w_head.c_str()), 1, layer.in_dim);
    std::copy(row.begin(), row.end(), layer.weights.row(o).begin());
  }
  layer.biases = require_values(reader, reader.next((std::string(name) + "_b").c_str()), 1,
                                layer.out_dim);
  return layer;
}

void write_scaling_line(std::string& payload, const OutputScaling& scaling) {
  payload += std::string("map ") + (scaling.enabled ? "1" : "0") + " " +
             format_double(scaling.offset) + " " + format_double(scaling.slope) + "\n";
}

OutputScaling read_scaling_line(LineReader& reader) {
  const std::vector<std::string> tokens = reader.next("map");
  if (tokens.size() != 4) reader.fail("expected 'map <enabled> <offset> <slope>'");
  OutputScaling scaling;
  scaling.enabled = require_int(reader, tokens[1]) != 0;
  scaling.offset = require_double(reader, tokens[2]);
  scaling.slope = require_double(reader, tokens[3]);
  return scaling;
}

constexpr const char* kModelHeader = "fvscore model v1";
constexpr const char* kGmmHeader = "fvscore gmm v1";

}  // namespace

void save_gmm(const GmmFile& file_contents, const std::filesystem::path& file) {
  std::string payload = std::string(kGmmHeader) + "\n";
  write_names_line(payload, "expressions", file_contents.expression_names,
                   "expression name");
  write_gmm_section(payload, file_contents.gmm);
  finish_checksummed(file, payload);
}

GmmFile load_gmm(const std::filesystem::path& file) {
  LineReader reader(file, read_lines(file));
  reader.verify_checksum();
  const std::vector<std::string> header = reader.next("fvscore");
  if (header != split_ws(kGmmHeader)) reader.fail("not a mixture file (bad header)");
  GmmFile contents;
  const std::vector<std::string> names = reader.next("expressions");
  contents.expression_names.assign(names.begin() + 1, names.end());
  contents.gmm = read_gmm_section(reader);
  if (!reader.done()) reader.fail("trailing content after mixture section");
  return contents;
}

void save_model(const ModelBundle& bundle, const std::filesystem::path& file) {
  std::string payload = std::string(kModelHeader) + "\n";
  payload += "config " + pipeline_config_to_json(bundle.config).dump() + "\n";
  write_names_line(payload, "expressions", bundle.expression_names, "expression name");
  payload += "scale " + bundle.stack.scale.scale_name + "\n";
  write_names_line(payload, "symptoms", bundle.stack.scale.symptom_names, "symptom name");

  // Unconstrained stack parameters are authoritative; the materialized
  // mixture below is informational and verified on load.
  write_values_line(payload, "weight_logits", bundle.stack.weight_logits);
  for (std::size_t k = 0; k < bundle.stack.component_count(); ++k) {
    write_values_line(payload, "stack_mean", bundle.stack.means.row(k));
  }
  for (std::size_t k = 0; k < bundle.stack.component_count(); ++k) {
    write_values_line(payload, "stack_logvar", bundle.stack.log_variances.row(k));
  }
  write_gmm_section(payload, bundle.stack.mixture());

  write_dense_section(payload, "fc1", bundle.stack.fc1);
  write_dense_section(payload, "fc2", bundle.fc2);

  payload += "fc1_scaling " + std::to_string(bundle.fc1_scaling.size()) + "\n";
  for (const OutputScaling& scaling : bundle.fc1_scaling) {
    write_scaling_line(payload, scaling);
  }
  payload += "fc2_scaling\n";
  write_scaling_line(payload, bundle.fc2_scaling);
  finish_checksummed(file, payload);
}

ModelBundle load_model(const std::filesystem::path& file) {
  LineReader reader(file, read_lines(file));
  reader.verify_checksum();
  const std::vector<std::string> header = reader.next("fvscore");
  if (header != split_ws(kModelHeader)) reader.fail("not a model file (bad header)");

  ModelBundle bundle;
  {
    const std::vector<std::string> tokens = reader.next("config");
    std::string raw;
    for (std::size_t i = 1; i < tokens.size(); ++i) raw += (i > 1 ? " " : "") + tokens[i];
    try {
      bundle.config = pipeline_config_from_json(json::parse(raw));
    } catch (const json::exception& e) {
      reader.fail(std::string("invalid embedded config: ") + e.what());
    }
  }
  {
    const std::vector<std::string> names = reader.next("expressions");
    bundle.expression_names.assign(names.begin() + 1, names.end());
  }
  std::string scale_name;
  {
    const std::vector<std::string> tokens = reader.next("scale");
    if (tokens.size() != 2) reader.fail("expected 'scale <preset>'");
    scale_name = tokens[1];
  }
  {
    const std::vector<std::string> names = reader.next("symptoms");
    if (names.size() < 2) reader.fail("no symptom names");
    try {
      bundle.stack.scale = SymptomScaleSpec::preset_with_symptoms(
          scale_name, {names.begin() + 1, names.end()});
    } catch (const std::invalid_argument& e) {
      reader.fail(e.what());
    }
  }

  {
    std::vector<std::string> logits_line = reader.next("weight_logits");
    const std::size_t k_count = logits_line.size() - 1;
    if (k_count == 0) reader.fail("empty weight logits");
    bundle.stack.weight_logits = require_values(reader, logits_line, 1, k_count);
    std::vector<std::vector<double>> means;
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::vector<std::string> tokens = reader.next("stack_mean");
      means.push_back(require_values(reader, tokens, 1, tokens.size() - 1));
      if (means.back().size() != means.front().size()) reader.fail("ragged stack means");
    }
    const std::size_t n = means.front().size();
    bundle.stack.means = Matrix(k_count, n);
    bundle.stack.log_variances = Matrix(k_count, n);
    for (std::size_t k = 0; k < k_count; ++k) {
      std::copy(means[k].begin(), means[k].end(), bundle.stack.means.row(k).begin());
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::vector<double> row =
          require_values(reader, reader.next("stack_logvar"), 1, n);
      std::copy(row.begin(), row.end(), bundle.stack.log_variances.row(k).begin());
    }
  }

  const GaussianMixture stored = read_gmm_section(reader);
  bundle.stack.variance_floor = stored.variance_floor;
  {
    // The stored mixture must be exactly what the stack materializes.
    const GaussianMixture derived = bundle.stack.mixture();
    if (derived.weights != stored.weights || derived.means != stored.means ||
        derived.variances != stored.variances) {
      reader.fail("stored mixture does not match the stack parameters");
    }
  }

  bundle.stack.fc1 = read_dense_section(reader, "fc1");
  bundle.fc2 = read_dense_section(reader, "fc2");
  {
    const std::vector<std::string> tokens = reader.next("fc1_scaling");
    if (tokens.size() != 2) reader.fail("expected 'fc1_scaling <count>'");
    const long count = require_int(reader, tokens[1]);
    for (long i = 0; i < count; ++i) {
      bundle.fc1_scaling.push_back(read_scaling_line(reader));
    }
  }
  reader.next("fc2_scaling");
  bundle.fc2_scaling = read_scaling_line(reader);
  if (!reader.done()) reader.fail("trailing content after model sections");

  if (bundle.stack.fc1.in_dim !=
      fisher_vector_length(bundle.stack.component_count(), bundle.stack.dim())) {
    reader.fail("fc1 input does not match the encoding length");
  }
  if (bundle.stack.fc1.out_dim != bundle.stack.scale.symptom_count()) {
    reader.fail("fc1 output does not match the symptom count");
  }
  return bundle;
}

}  // namespace fvscore
