#include "dastr/config.hpp"

#include <fstream>
#include <set>

#include "dastr/common.hpp"

namespace dastr {

namespace {

// Tracks which keys of one JSON object were consumed so validation can
// reject anything the schema does not know.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw make_error("config: ", path_, " must be an object");
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& require(const std::string& key) {
    if (!j_.contains(key)) throw make_error("config: missing key ", key_path(key));
    seen_.insert(key);
    return j_.at(key);
  }

  const nlohmann::json* optional(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string string(const std::string& key) {
    const nlohmann::json& v = require(key);
    if (!v.is_string()) throw make_error("config: ", key_path(key), " must be a string");
    return v.get<std::string>();
  }
  std::string string_or(const std::string& key, const std::string& fallback) {
    return has(key) ? string(key) : fallback;
  }

  double number(const std::string& key) {
    const nlohmann::json& v = require(key);
    if (!v.is_number()) throw make_error("config: ", key_path(key), " must be a number");
    return v.get<double>();
  }
  double number_or(const std::string& key, double fallback) {
    return has(key) ? number(key) : fallback;
  }

  std::int64_t integer(const std::string& key) {
    const nlohmann::json& v = require(key);
    if (!v.is_number_integer()) {
      throw make_error("config: ", key_path(key), " must be an integer");
    }
    return v.get<std::int64_t>();
  }
  std::int64_t integer_or(const std::string& key, std::int64_t fallback) {
    return has(key) ? integer(key) : fallback;
  }

  bool boolean_or(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const nlohmann::json& v = require(key);
    if (!v.is_boolean()) throw make_error("config: ", key_path(key), " must be a boolean");
    return v.get<bool>();
  }

  std::vector<std::int64_t> int_list(const std::string& key) {
    const nlohmann::json& v = require(key);
    if (!v.is_array()) throw make_error("config: ", key_path(key), " must be an array");
    std::vector<std::int64_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) {
        throw make_error("config: ", key_path(key), " must contain integers");
      }
      out.push_back(e.get<std::int64_t>());
    }
    return out;
  }

  Section child(const std::string& key) { return Section(require(key), key_path(key)); }

  // Rejects keys the schema never consumed.
  void finish() {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw make_error("config: unknown key ", key_path(item.key()));
      }
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check_positive(std::int64_t v, const std::string& path) {
  if (v <= 0) throw make_error("config: ", path, " must be positive, got ", v);
}
void check_positive(double v, const std::string& path) {
  if (!(v > 0.0)) throw make_error("config: ", path, " must be positive, got ", v);
}

PotentialConfig parse_potential(Section s) {
  PotentialConfig p;
  p.id = s.string("id");
  if (p.id != "brownian-annulus" && p.id != "rugged-mueller" && p.id != "brownian-interval") {
    throw make_error("config: ", s.key_path("id"), " unknown potential '", p.id,
                     "' (expected brownian-annulus, rugged-mueller, or brownian-interval)");
  }
  p.dim = s.integer("dim");
  check_positive(p.dim, s.key_path("dim"));
  p.beta = s.number_or("beta", 0.0);
  p.inner_radius = s.number_or("inner_radius", p.inner_radius);
  p.outer_radius = s.number_or("outer_radius", p.outer_radius);
  p.gamma = s.number_or("gamma", p.gamma);
  p.k = s.number_or("k", p.k);
  p.sigma = s.number_or("sigma", p.sigma);
  p.set_radius = s.number_or("set_radius", p.set_radius);
  s.finish();
  return p;
}

NetConfig parse_net(Section s) {
  NetConfig n;
  n.hidden_widths = s.int_list("hidden_widths");
  if (n.hidden_widths.empty()) {
    throw make_error("config: ", s.key_path("hidden_widths"), " must not be empty");
  }
  for (const std::int64_t w : n.hidden_widths) {
    check_positive(w, s.key_path("hidden_widths"));
  }
  n.activation = s.string_or("activation", "tanh");
  s.finish();
  return n;
}

FlowShapeConfig parse_flow(Section s) {
  FlowShapeConfig f;
  f.blocks = s.integer_or("blocks", f.blocks);
  f.layers_per_block = s.integer_or("layers_per_block", f.layers_per_block);
  f.hidden = s.integer_or("hidden", f.hidden);
  f.s_max = s.number_or("s_max", f.s_max);
  check_positive(f.blocks, s.key_path("blocks"));
  check_positive(f.layers_per_block, s.key_path("layers_per_block"));
  check_positive(f.hidden, s.key_path("hidden"));
  check_positive(f.s_max, s.key_path("s_max"));
  s.finish();
  return f;
}

LatentSection parse_latent(Section s) {
  LatentSection l;
  l.enabled = true;
  l.d_latent = s.integer("d_latent");
  check_positive(l.d_latent, s.key_path("d_latent"));
  l.ae_hidden_widths = s.int_list("ae_hidden_widths");
  l.ae_epochs = s.integer_or("ae_epochs", l.ae_epochs);
  l.ae_batch = s.integer_or("ae_batch", l.ae_batch);
  l.ae_learning_rate = s.number_or("ae_learning_rate", l.ae_learning_rate);
  l.energy_threshold = s.number("energy_threshold");
  l.box_margin = s.number_or("box_margin", l.box_margin);
  l.min_acceptance = s.number_or("min_acceptance", l.min_acceptance);
  check_positive(l.ae_epochs, s.key_path("ae_epochs"));
  check_positive(l.ae_batch, s.key_path("ae_batch"));
  check_positive(l.ae_learning_rate, s.key_path("ae_learning_rate"));
  s.finish();
  return l;
}

InitialSection parse_initial(Section s) {
  InitialSection i;
  i.kind = s.string("kind");
  if (i.kind != "uniform" && i.kind != "sde" && i.kind != "metadynamics") {
    throw make_error("config: ", s.key_path("kind"), " unknown initial-set kind '", i.kind,
                     "' (expected uniform, sde, or metadynamics)");
  }
  i.dt = s.number_or("dt", i.dt);
  i.beta = s.number_or("beta", i.beta);
  i.burn_in = s.integer_or("burn_in", i.burn_in);
  i.stride = s.integer_or("stride", i.stride);
  i.height = s.number_or("height", i.height);
  i.width = s.number_or("width", i.width);
  i.deposit_interval = s.integer_or("deposit_interval", i.deposit_interval);
  i.deposits = s.integer_or("deposits", i.deposits);
  i.sample_stride = s.integer_or("sample_stride", i.sample_stride);
  i.bias_in_sampling = s.boolean_or("bias_in_sampling", false);
  check_positive(i.dt, s.key_path("dt"));
  s.finish();
  return i;
}

DastrSection parse_dastr(Section s) {
  DastrSection d;
  d.strategy = s.string_or("strategy", d.strategy);
  if (d.strategy != "dastr" && d.strategy != "uniform-baseline" &&
      d.strategy != "sde-baseline") {
    throw make_error("config: ", s.key_path("strategy"), " unknown strategy '", d.strategy,
                     "' (expected dastr, uniform-baseline, or sde-baseline)");
  }
  d.n_adaptive = s.integer("n_adaptive");
  d.n_e = s.integer("n_e");
  d.n_e_flow = s.integer_or("n_e_flow", d.n_e_flow);
  d.batch_q = s.integer("batch_q");
  d.boundary_batch = s.integer_or("boundary_batch", d.boundary_batch);
  d.chunk_q = s.integer_or("chunk_q", d.chunk_q);
  d.batch_flow = s.integer_or("batch_flow", d.batch_flow);
  d.chunk_flow = s.integer_or("chunk_flow", d.chunk_flow);
  d.lambda = s.number("lambda");
  d.learning_rate_q = s.number("learning_rate_q");
  d.lr_decay = s.number_or("lr_decay", d.lr_decay);
  d.lr_decay_every = s.integer_or("lr_decay_every", d.lr_decay_every);
  d.learning_rate_flow = s.number_or("learning_rate_flow", d.learning_rate_flow);
  d.policy = s.string_or("policy", d.policy);
  if (d.policy != "replace-all" && d.policy != "keep-fraction") {
    throw make_error("config: ", s.key_path("policy"), " unknown policy '", d.policy,
                     "' (expected replace-all or keep-fraction)");
  }
  d.keep_fraction = s.number_or("keep_fraction", d.keep_fraction);
  d.n_interior = s.integer("n_interior");
  d.n_boundary_a = s.integer("n_boundary_a");
  d.n_boundary_b = s.integer("n_boundary_b");
  d.n_new_per_stage = s.integer_or("n_new_per_stage", d.n_new_per_stage);
  d.mixture_mode = s.string_or("mixture_mode", d.mixture_mode);
  if (d.mixture_mode != "per-stage" && d.mixture_mode != "pooled") {
    throw make_error("config: ", s.key_path("mixture_mode"), " must be per-stage or pooled");
  }
  d.max_skip_fraction = s.number_or("max_skip_fraction", d.max_skip_fraction);
  d.sample_max_passes = s.integer_or("sample_max_passes", d.sample_max_passes);
  check_positive(d.n_adaptive, s.key_path("n_adaptive"));
  check_positive(d.n_e, s.key_path("n_e"));
  check_positive(d.n_e_flow, s.key_path("n_e_flow"));
  check_positive(d.batch_q, s.key_path("batch_q"));
  check_positive(d.batch_flow, s.key_path("batch_flow"));
  check_positive(d.lambda, s.key_path("lambda"));
  check_positive(d.learning_rate_q, s.key_path("learning_rate_q"));
  check_positive(d.learning_rate_flow, s.key_path("learning_rate_flow"));
  check_positive(d.n_interior, s.key_path("n_interior"));
  check_positive(d.n_boundary_a, s.key_path("n_boundary_a"));
  check_positive(d.n_boundary_b, s.key_path("n_boundary_b"));
  if (!(d.keep_fraction > 0.0 && d.keep_fraction <= 1.0)) {
    throw make_error("config: ", s.key_path("keep_fraction"), " must be in (0,1]");
  }
  s.finish();
  return d;
}

IsosurfaceSection parse_isosurface(Section s) {
  IsosurfaceSection i;
  i.enabled = s.boolean_or("enabled", true);
  i.pool = s.integer_or("pool", i.pool);
  i.tol = s.number_or("tol", i.tol);
  i.max_points = s.integer_or("max_points", i.max_points);
  i.bins = s.integer_or("bins", i.bins);
  i.n_traj = s.integer_or("n_traj", i.n_traj);
  i.dt = s.number_or("dt", i.dt);
  i.max_steps = s.integer_or("max_steps", i.max_steps);
  check_positive(i.pool, s.key_path("pool"));
  check_positive(i.tol, s.key_path("tol"));
  check_positive(i.max_points, s.key_path("max_points"));
  check_positive(i.n_traj, s.key_path("n_traj"));
  check_positive(i.dt, s.key_path("dt"));
  check_positive(i.max_steps, s.key_path("max_steps"));
  s.finish();
  return i;
}

EvalSection parse_eval(Section s) {
  EvalSection e;
  e.metric = s.string_or("metric", e.metric);
  if (e.metric != "annulus-curve" && e.metric != "none") {
    throw make_error("config: ", s.key_path("metric"), " must be annulus-curve or none");
  }
  e.curve_points = s.integer_or("curve_points", e.curve_points);
  e.norm_histogram = s.boolean_or("norm_histogram", false);
  e.norm_bins = s.integer_or("norm_bins", e.norm_bins);
  e.norm_lo = s.number_or("norm_lo", e.norm_lo);
  e.norm_hi = s.number_or("norm_hi", e.norm_hi);
  e.band_lo = s.number_or("band_lo", e.band_lo);
  e.band_hi = s.number_or("band_hi", e.band_hi);
  if (const nlohmann::json* iso = s.optional("isosurface")) {
    e.isosurface = parse_isosurface(Section(*iso, s.key_path("isosurface")));
  }
  check_positive(e.curve_points, s.key_path("curve_points"));
  s.finish();
  return e;
}

OutputSection parse_output(Section s) {
  OutputSection o;
  o.checkpoint_every = s.integer_or("checkpoint_every", o.checkpoint_every);
  check_positive(o.checkpoint_every, s.key_path("checkpoint_every"));
  o.stop_after_stage = s.integer_or("stop_after_stage", o.stop_after_stage);
  s.finish();
  return o;
}

}  // namespace

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  Section root(j, "");
  ExperimentConfig c;
  c.experiment = root.string("experiment");
  if (c.experiment != "brownian20" && c.experiment != "rugged-mueller10" &&
      c.experiment != "rugged-mueller-latent" && c.experiment != "flow-selftest") {
    throw make_error("config: experiment '", c.experiment,
                     "' unknown (expected brownian20, rugged-mueller10, "
                     "rugged-mueller-latent, or flow-selftest)");
  }
  {
    const nlohmann::json& seed = root.require("seed");
    if (!seed.is_number_integer() || seed.get<std::int64_t>() < 0) {
      throw make_error("config: seed must be a nonnegative integer");
    }
    c.seed = seed.get<std::uint64_t>();
  }
  c.potential = parse_potential(root.child("potential"));
  if (c.experiment != "flow-selftest") {
    c.net = parse_net(root.child("net"));
    c.dastr = parse_dastr(root.child("dastr"));
  }
  if (const nlohmann::json* flow = root.optional("flow")) {
    c.flow = parse_flow(Section(*flow, "flow"));
  }
  if (const nlohmann::json* latent = root.optional("latent")) {
    c.latent = parse_latent(Section(*latent, "latent"));
  }
  if (const nlohmann::json* initial = root.optional("initial")) {
    c.initial = parse_initial(Section(*initial, "initial"));
  }
  if (const nlohmann::json* eval = root.optional("eval")) {
    c.eval = parse_eval(Section(*eval, "eval"));
  }
  if (const nlohmann::json* output = root.optional("output")) {
    c.output = parse_output(Section(*output, "output"));
  }
  root.finish();

  if (c.experiment == "rugged-mueller-latent" && !c.latent.enabled) {
    throw make_error("config: experiment rugged-mueller-latent requires a latent section");
  }
  if (c.latent.enabled && c.latent.d_latent > c.potential.dim) {
    throw make_error("config: latent.d_latent exceeds potential.dim");
  }
  if (c.eval.metric == "annulus-curve" && c.potential.id != "brownian-annulus") {
    throw make_error("config: eval.metric annulus-curve requires the brownian-annulus potential");
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw make_error("config: cannot open ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw make_error("config: ", path, " is not valid JSON: ", e.what());
  }
  for (const std::string& assignment : overrides) apply_override(j, assignment);
  return parse_experiment_config(j);
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw make_error("config: override '", assignment, "' is not of the form path=value");
  }
  const std::string dotted = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw make_error("config: override path '", dotted, "' has an empty key");
    if (dot == std::string::npos) {
      nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
      if (value.is_discarded()) value = raw;  // plain strings need no quotes
      (*node)[key] = std::move(value);
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

namespace {

nlohmann::json potential_to_json(const PotentialConfig& p) {
  nlohmann::json j;
  j["id"] = p.id;
  j["dim"] = p.dim;
  j["beta"] = p.beta;
  if (p.id == "brownian-annulus") {
    j["inner_radius"] = p.inner_radius;
    j["outer_radius"] = p.outer_radius;
  }
  if (p.id == "rugged-mueller") {
    j["gamma"] = p.gamma;
    j["k"] = p.k;
    j["sigma"] = p.sigma;
    j["set_radius"] = p.set_radius;
  }
  return j;
}

}  // namespace

nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["experiment"] = c.experiment;
  j["seed"] = c.seed;
  j["potential"] = potential_to_json(c.potential);
  if (c.experiment != "flow-selftest") {
    j["net"] = {{"hidden_widths", c.net.hidden_widths}, {"activation", c.net.activation}};
    j["dastr"] = {{"strategy", c.dastr.strategy},
                  {"n_adaptive", c.dastr.n_adaptive},
                  {"n_e", c.dastr.n_e},
                  {"n_e_flow", c.dastr.n_e_flow},
                  {"batch_q", c.dastr.batch_q},
                  {"boundary_batch", c.dastr.boundary_batch},
                  {"chunk_q", c.dastr.chunk_q},
                  {"batch_flow", c.dastr.batch_flow},
                  {"chunk_flow", c.dastr.chunk_flow},
                  {"lambda", c.dastr.lambda},
                  {"learning_rate_q", c.dastr.learning_rate_q},
                  {"lr_decay", c.dastr.lr_decay},
                  {"lr_decay_every", c.dastr.lr_decay_every},
                  {"learning_rate_flow", c.dastr.learning_rate_flow},
                  {"policy", c.dastr.policy},
                  {"keep_fraction", c.dastr.keep_fraction},
                  {"n_interior", c.dastr.n_interior},
                  {"n_boundary_a", c.dastr.n_boundary_a},
                  {"n_boundary_b", c.dastr.n_boundary_b},
                  {"n_new_per_stage", c.dastr.n_new_per_stage},
                  {"mixture_mode", c.dastr.mixture_mode},
                  {"max_skip_fraction", c.dastr.max_skip_fraction},
                  {"sample_max_passes", c.dastr.sample_max_passes}};
  }
  j["flow"] = {{"blocks", c.flow.blocks},
               {"layers_per_block", c.flow.layers_per_block},
               {"hidden", c.flow.hidden},
               {"s_max", c.flow.s_max}};
  if (c.latent.enabled) {
    j["latent"] = {{"d_latent", c.latent.d_latent},
                   {"ae_hidden_widths", c.latent.ae_hidden_widths},
                   {"ae_epochs", c.latent.ae_epochs},
                   {"ae_batch", c.latent.ae_batch},
                   {"ae_learning_rate", c.latent.ae_learning_rate},
                   {"energy_threshold", c.latent.energy_threshold},
                   {"box_margin", c.latent.box_margin},
                   {"min_acceptance", c.latent.min_acceptance}};
  }
  j["initial"] = {{"kind", c.initial.kind},
                  {"dt", c.initial.dt},
                  {"beta", c.initial.beta},
                  {"burn_in", c.initial.burn_in},
                  {"stride", c.initial.stride},
                  {"height", c.initial.height},
                  {"width", c.initial.width},
                  {"deposit_interval", c.initial.deposit_interval},
                  {"deposits", c.initial.deposits},
                  {"sample_stride", c.initial.sample_stride},
                  {"bias_in_sampling", c.initial.bias_in_sampling}};
  j["eval"] = {{"metric", c.eval.metric},
               {"curve_points", c.eval.curve_points},
               {"norm_histogram", c.eval.norm_histogram},
               {"norm_bins", c.eval.norm_bins},
               {"norm_lo", c.eval.norm_lo},
               {"norm_hi", c.eval.norm_hi},
               {"band_lo", c.eval.band_lo},
               {"band_hi", c.eval.band_hi},
               {"isosurface", {{"enabled", c.eval.isosurface.enabled},
                               {"pool", c.eval.isosurface.pool},
                               {"tol", c.eval.isosurface.tol},
                               {"max_points", c.eval.isosurface.max_points},
                               {"bins", c.eval.isosurface.bins},
                               {"n_traj", c.eval.isosurface.n_traj},
                               {"dt", c.eval.isosurface.dt},
                               {"max_steps", c.eval.isosurface.max_steps}}}};
  j["output"] = {{"checkpoint_every", c.output.checkpoint_every},
                 {"stop_after_stage", c.output.stop_after_stage}};
  return j;
}

}  // namespace dastr
