#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace dastr {

// Plain-data mirror of the experiment config file.  Parsing is strict: every
// key is checked against the schema, unknown or missing keys raise errors
// naming the full path (e.g. "dastr.batch_q").  Shipped config files spell
// out all experiment-relevant values; fields with defaults here may be
// omitted from files.

struct PotentialConfig {
  std::string id;  // "brownian-annulus" | "rugged-mueller" | "brownian-interval"
  std::int64_t dim = 0;
  double beta = 0.0;  // 0: the potential's default
  // brownian-annulus
  double inner_radius = 1.0;
  double outer_radius = 2.0;
  // rugged-mueller
  double gamma = 9.0;
  double k = 5.0;
  double sigma = 0.05;
  double set_radius = 0.1;
};

struct NetConfig {
  std::vector<std::int64_t> hidden_widths;
  std::string activation = "tanh";
};

struct FlowShapeConfig {
  std::int64_t blocks = 5;
  std::int64_t layers_per_block = 8;
  std::int64_t hidden = 120;
  double s_max = 5.0;
};

struct LatentSection {
  bool enabled = false;
  std::int64_t d_latent = 2;
  std::vector<std::int64_t> ae_hidden_widths;
  std::int64_t ae_epochs = 500;
  std::int64_t ae_batch = 500;
  double ae_learning_rate = 1e-3;
  double energy_threshold = 0.0;
  double box_margin = 0.5;
  double min_acceptance = 0.5;
};

struct InitialSection {
  std::string kind = "uniform";  // "uniform" | "sde" | "metadynamics"
  // sde
  double dt = 1e-5;
  double beta = 0.0;  // 0: the potential's beta (artificial temperature otherwise)
  std::int64_t burn_in = 10000;
  std::int64_t stride = 100;
  // metadynamics
  double height = 1.0;
  double width = 0.1;
  std::int64_t deposit_interval = 1000;
  std::int64_t deposits = 100;
  std::int64_t sample_stride = 100;
  // keep the terminal metadynamics bias active inside the adaptive sampling
  // density (the biased-potential switch)
  bool bias_in_sampling = false;
};

struct DastrSection {
  std::string strategy = "dastr";  // "dastr" | "uniform-baseline" | "sde-baseline"
  std::int64_t n_adaptive = 1;
  std::int64_t n_e = 50;
  std::int64_t n_e_flow = 50;
  std::int64_t batch_q = 1000;
  std::int64_t boundary_batch = 0;
  std::int64_t chunk_q = 1000;
  std::int64_t batch_flow = 5000;
  std::int64_t chunk_flow = 512;
  double lambda = 10.0;
  double learning_rate_q = 1e-3;
  double lr_decay = 1.0;
  std::int64_t lr_decay_every = 0;
  double learning_rate_flow = 1e-3;
  std::string policy = "replace-all";  // "replace-all" | "keep-fraction"
  double keep_fraction = 0.5;
  std::int64_t n_interior = 5000;
  std::int64_t n_boundary_a = 5000;
  std::int64_t n_boundary_b = 5000;
  std::int64_t n_new_per_stage = 0;  // 0: same as n_interior
  std::string mixture_mode = "per-stage";  // "per-stage" | "pooled"
  double max_skip_fraction = 0.05;
  std::int64_t sample_max_passes = 100;
};

struct IsosurfaceSection {
  bool enabled = false;
  std::int64_t pool = 20000;
  double tol = 0.02;
  std::int64_t max_points = 200;
  std::int64_t bins = 12;
  std::int64_t n_traj = 200;
  double dt = 1e-5;
  std::int64_t max_steps = 1000000;
};

struct EvalSection {
  std::string metric = "none";  // "annulus-curve" | "none"
  std::int64_t curve_points = 5000;
  bool norm_histogram = false;
  std::int64_t norm_bins = 24;
  double norm_lo = 0.0;
  double norm_hi = 0.0;
  double band_lo = 0.0;  // band fraction column bounds; both 0 disables
  double band_hi = 0.0;
  IsosurfaceSection isosurface;
};

struct OutputSection {
  std::int64_t checkpoint_every = 1;
  // Stop the staged loop after this stage index completes (checkpoint
  // included); -1 runs to n_adaptive.  A later resume finishes the run.
  std::int64_t stop_after_stage = -1;
};

struct ExperimentConfig {
  std::string experiment;  // brownian20 | rugged-mueller10 | rugged-mueller-latent | flow-selftest
  std::uint64_t seed = 0;
  PotentialConfig potential;
  NetConfig net;
  FlowShapeConfig flow;
  LatentSection latent;
  InitialSection initial;
  DastrSection dastr;
  EvalSection eval;
  OutputSection output;
};

// Strict schema validation; throws Error with the offending key path.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides = {});

// Re-serializes a parsed config: the manifest snapshot, sufficient to re-run
// without the original file.
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);

// Applies one "dotted.path=value" override onto raw JSON before parsing; the
// value is interpreted as a JSON literal when possible, as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace dastr
