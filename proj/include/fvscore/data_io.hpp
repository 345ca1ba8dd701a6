#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fvscore/pipeline.hpp"
#include "fvscore/synthetic.hpp"
#include "fvscore/types.hpp"

namespace fvscore {

// Malformed input never crashes a load; it surfaces as this, with location.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::filesystem::path file, std::size_t line, const std::string& message);

  const std::filesystem::path& file() const { return file_; }
  std::size_t line() const { return line_; }  // 0 when not line-specific

 private:
  std::filesystem::path file_;
  std::size_t line_;
};

// --- sequences: one delimited-text file per video -------------------------
// Optional "# frame_rate_hz <value>" comment, then a header row of
// expression names, then one comma-separated row per frame. The video id is
// the file stem. Values round-trip exactly.

ExpressionSequence load_sequence(const std::filesystem::path& file);
void save_sequence(const ExpressionSequence& seq, const std::filesystem::path& file);

// Loads every *.csv in the directory, sorted by video id.
std::vector<ExpressionSequence> load_sequences(const std::filesystem::path& dir);
void save_sequences(const std::vector<ExpressionSequence>& sequences,
                    const std::filesystem::path& dir);

// --- labels ----------------------------------------------------------------

struct LabelFile {
  SymptomScaleSpec scale;
  std::vector<SymptomRecord> records;
};

LabelFile load_labels(const std::filesystem::path& file);
void save_labels(const LabelFile& labels, const std::filesystem::path& file);

// Sequences directory + labels file, sorted into canonical id order. Range
// and correspondence problems are reported by validate_dataset, not here.
LabeledDataset load_dataset(const std::filesystem::path& sequence_dir,
                            const std::filesystem::path& labels_file);

// --- model checkpoints ------------------------------------------------------
// Versioned structured text with a trailing checksum. The refinable stack's
// unconstrained parameters are authoritative; the materialized mixture
// (weights, means, floored variances) is written alongside and verified on
// load. Round-trips preserve parameter bytes.

void save_model(const ModelBundle& bundle, const std::filesystem::path& file);
ModelBundle load_model(const std::filesystem::path& file);

struct GmmFile {
  GaussianMixture gmm;
  std::vector<std::string> expression_names;
};

void save_gmm(const GmmFile& file_contents, const std::filesystem::path& file);
GmmFile load_gmm(const std::filesystem::path& file);

// --- configuration and manifests (JSON) -------------------------------------

PipelineConfig load_pipeline_config(const std::filesystem::path& file);
void save_pipeline_config(const PipelineConfig& config, const std::filesystem::path& file);

SyntheticSpec load_synthetic_spec(const std::filesystem::path& file);
void save_manifest(const SyntheticManifest& manifest, const std::filesystem::path& file);
SyntheticManifest load_manifest(const std::filesystem::path& file);

// Serialization helpers shared by formats and determinism tests: shortest
// exact decimal form of a double and its exact inverse.
std::string format_double(double value);
double parse_double(const std::string& token, bool& ok);

}  // namespace fvscore
