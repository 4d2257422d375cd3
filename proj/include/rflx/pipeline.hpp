#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rflx/corpus.hpp"
#include "rflx/model.hpp"
#include "rflx/steering.hpp"

namespace rflx {

/// One generation prompt: the question template followed by `prefix`.
struct PromptItem {
  std::string id;
  std::string question;
  std::string prefix;
};

struct GenerateSpec {
  std::vector<PromptItem> items;
  std::size_t max_new = 32;
  Sampler sampler;
  bool think_token = false;
};

struct CorpusSpec {
  enum class Kind { Generate, Ingest };
  Kind kind = Kind::Generate;
  GenerateSpec generate;
  std::filesystem::path path;
  CorpusFormat format = CorpusFormat::JsonlText;
};

struct ModelSpec {
  bool export_files = true;
  bool planted = true;
  std::filesystem::path path;  // when not planted
  ModelConfig config;
  std::string trigger_first = " odd";
  std::string trigger_second = ".";
  double theta = 1.0;
  double beta = 50.0;
  std::optional<std::uint64_t> seed;
};

struct EvalSpec {
  std::vector<PromptItem> items;
  std::size_t max_new = 32;
  std::size_t window = 100;
  Sampler sampler;
  bool think_token = false;
  bool last_only = false;
  bool normalize = false;
};

struct ExperimentConfig {
  std::filesystem::path source;  // config file, empty when built in code
  std::uint64_t seed = 0;
  std::filesystem::path vocab;
  std::filesystem::path keywords;
  std::filesystem::path output_dir;
  std::size_t max_new_cap = 32784;
  ModelSpec model;

  bool corpus_enabled = false;
  CorpusSpec corpus;
  bool detect_enabled = false;
  std::size_t window = 100;
  bool collect_enabled = false;
  std::vector<std::uint32_t> collect_layers;  // empty: every layer
  bool extract_enabled = false;

  bool probe_enabled = false;
  std::filesystem::path probe_cases;
  std::vector<std::string> probe_questions;
  std::size_t probe_max_new = 32;
  std::size_t probe_window = 100;
  Sampler probe_sampler;
  bool probe_think_token = false;

  bool sweep_alpha_enabled = false;
  std::optional<std::uint32_t> sweep_alpha_layer;  // default: planted layer
  std::vector<double> alpha_grid;
  double val_fraction = 0.0;
  EvalSpec sweep_alpha_eval;

  bool sweep_layer_enabled = false;
  double layer_sweep_alpha = 0.01;
  std::vector<std::vector<std::uint32_t>> layer_groups;
  EvalSpec sweep_layer_eval;

  bool transfer_enabled = false;
  CorpusSpec transfer_corpus;

  bool project_enabled = false;
  std::vector<std::uint32_t> project_layers;

  bool protocols_enabled = false;
  std::optional<std::uint32_t> protocols_layer;
  double alpha_enhance = 0.1;
  double alpha_suppress = -0.1;
  std::size_t bf_waits = 1;
  std::size_t bf_segment_len = 8;
  EvalSpec protocols_eval;

  /// Canonical JSON of the parsed config, the input to hash().
  std::string canonical;
  std::string hash() const;
};

/// Parses and validates a JSON config. Relative paths resolve against the
/// config file's directory. Throws InvalidConfig or UnreadablePath.
ExperimentConfig parse_experiment_config(std::string_view json_text,
                                         const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct ManifestArtifact {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct Manifest {
  std::string config_hash;
  std::vector<std::string> completed_stages;
  std::vector<ManifestArtifact> artifacts;
  std::string status = "ok";
  std::string failed_stage;
  std::string error;
  int error_code = 0;  // rflx::Errc of the failure

  std::string to_json() const;
};

/// Runs the enabled stages in order (model, corpus, detect, collect,
/// extract, probe, sweep_alpha, sweep_layer, transfer, project, protocols)
/// and writes manifest.json into the output directory. A failing stage stops
/// the run; the manifest then records the completed stages and the error.
Manifest run_pipeline(const ExperimentConfig& config);

struct ProjectionReport {
  PointCloud2D cloud;
  double fisher = 0.0;
  double projected_gap = 0.0;   // |mean_x(reflect) - mean_x(non_reflect)|
  double pooled_std = 0.0;      // pooled within-cluster std along x
};

ProjectionReport projection_report(const HiddenStateSets& sets, std::uint32_t layer);

/// Writes layer_XX.csv (x,y,label) and layer_XX.json (fisher score,
/// explained variance, cluster gap) into `dir`; returns the files written.
/// Throws InvalidConfig when the layer is >= n_layers or was not collected.
std::vector<std::filesystem::path> emit_projection_report(const HiddenStateSets& sets,
                                                          std::uint32_t layer,
                                                          std::uint32_t n_layers,
                                                          const std::filesystem::path& dir);

/// First 16 hex digits of the SHA-256 of the encoded weights.
std::string model_id(const Model& model);

}  // namespace rflx
