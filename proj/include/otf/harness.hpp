#pragma once

#include "otf/common.hpp"
#include "otf/cot.hpp"
#include "otf/filters.hpp"
#include "otf/metrics.hpp"
#include "otf/oracle.hpp"
#include "otf/rng.hpp"
#include "otf/ssm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace otf::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Key-tree configuration files
// ---------------------------------------------------------------------------

/// Flat "dotted.key = value" configuration text. Lists are space separated;
/// '#' starts a comment. See presets/ for the documented schema.
struct KvTree {
  std::vector<std::pair<std::string, std::string>> entries;

  static KvTree parse(const std::string& text) {
    KvTree tree;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::vector<std::string> errors;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        errors.push_back("line " + std::to_string(lineno) + ": expected 'key = value'");
        continue;
      }
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      if (key.empty()) {
        errors.push_back("line " + std::to_string(lineno) + ": empty key");
        continue;
      }
      tree.entries.emplace_back(key, value);
    }
    if (!errors.empty()) {
      std::string msg = "config parse errors:";
      for (const auto& e : errors) msg += "\n  " + e;
      throw ConfigError(msg);
    }
    return tree;
  }

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
    return nullptr;
  }
};

namespace detail_cfg {

inline double to_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw ConfigError("field '" + key + "': expected a number, got '" + s + "'");
  }
}

inline int to_int(const std::string& key, const std::string& s) {
  const double v = to_double(key, s);
  const int i = static_cast<int>(v);
  if (static_cast<double>(i) != v) throw ConfigError("field '" + key + "': expected an integer, got '" + s + "'");
  return i;
}

inline bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("field '" + key + "': expected true/false, got '" + s + "'");
}

inline std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& tok : split(s)) out.push_back(to_double(key, tok));
  return out;
}

}  // namespace detail_cfg

enum class ExperimentKind { StaticBimodal, Lorenz63, Lorenz96, RateStudy, LinearGaussian };

struct FilterConfig {
  std::string name;
  filters::FilterKind kind = filters::FilterKind::Enkf;
  int particles = 250;
  double lambda = 0.0;  // applied to both penalties
  filters::RunConfig run;
};

struct ReferenceConfig {
  enum class Kind { Oracle, Sir, None } kind = Kind::None;
  int particles = 10000;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::Lorenz63;
  std::string out_dir = "out";
  std::vector<std::uint64_t> seeds{0};
  int t_steps = 100;
  int snapshot_stride = 1;

  ssm::StateSpaceModel model;
  // separate initial law for the hidden truth when provided
  std::optional<Vec> truth_init_mean;
  std::optional<Mat> truth_init_cov;

  std::vector<FilterConfig> filter_list;
  ReferenceConfig reference;
  std::vector<std::string> metric_names{"w2"};
  int w2_size_cap = 512;

  // static bimodal experiment
  std::vector<int> static_dims{1};
  double static_observation = 1.0;
  double static_sigma = 0.1;

  // rate study
  std::vector<int> rate_sample_sizes{250, 500, 1000, 2000, 4000};
  int rate_state_dim = 2;
  int rate_obs_dim = 1;
  double rate_obs_noise = 0.5;

  // stability probe
  double probe_shift = 3.0;
  int probe_particles = 10000;

  std::string serialized;  // canonical text (defaults filled)
  std::uint64_t config_hash = 0;
};

inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace detail_cfg {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_vec(const Vec& v) {
  std::string out;
  for (int i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt(v[i]);
  return out;
}

}  // namespace detail_cfg

/// Serializes the effective configuration (defaults filled) back to the
/// key-tree text form; loading the output reproduces the same structure.
std::string serialize_config(const ExperimentConfig& cfg);

/// Parses and validates an experiment configuration. Unknown fields are
/// rejected by name; all semantic violations are reported together.
ExperimentConfig parse_config(const std::string& text);

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Implementation of parsing
// ---------------------------------------------------------------------------

inline ExperimentConfig parse_config(const std::string& text) {
  const KvTree tree = KvTree::parse(text);
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  std::vector<std::string> known = {
      "experiment",        "out_dir",          "seeds",           "t_steps",         "snapshot_stride",
      "model.system",      "model.state_dim",  "model.obs_dim",   "model.dt",        "model.integrator",
      "model.sigma_proc",  "model.sigma_obs",  "model.obs_select", "model.init_mean", "model.init_cov_diag",
      "model.truth_process_noise", "model.l96_forcing", "model.linear_a_scale",
      "truth.init_mean",   "truth.init_cov_diag",
      "filters",           "reference.kind",   "reference.particles",
      "metrics",           "metric.w2.size_cap",
      "static.dims",       "static.observation", "static.sigma",
      "rate.sample_sizes", "rate.state_dim",   "rate.obs_dim",    "rate.obs_noise",
      "probe.shift",       "probe.particles",
  };
  std::vector<std::string> filter_names;
  if (const auto* f = tree.find("filters")) filter_names = detail_cfg::split(*f);

  auto known_filter_key = [&](const std::string& key) {
    for (const auto& name : filter_names) {
      const std::string prefix = "filter." + name + ".";
      if (key.rfind(prefix, 0) != 0) continue;
      const std::string sub = key.substr(prefix.size());
      for (const char* s : {"kind", "particles", "lambda", "width", "blocks", "ideal",
                            "train.iterations", "train.lr", "train.lr_psi", "train.lr_map",
                            "train.iter_decay", "train.min_iters", "train.elu_alpha",
                            "train.map_steps_per_psi_step", "train.pair_sample", "train.warm_start",
                            "train.lr_decay_start", "train.lr_floor", "train.average_frac", "sir_systematic"})
        if (sub == s) return true;
      return false;
    }
    return false;
  };

  for (const auto& [key, value] : tree.entries) {
    (void)value;
    const bool base = std::find(known.begin(), known.end(), key) != known.end();
    if (!base && !known_filter_key(key)) errors.push_back("unknown field '" + key + "'");
  }

  auto get = [&](const std::string& key) { return tree.find(key); };

  try {
    if (const auto* v = get("experiment")) {
      if (*v == "static_bimodal")
        cfg.experiment = ExperimentKind::StaticBimodal;
      else if (*v == "lorenz63")
        cfg.experiment = ExperimentKind::Lorenz63;
      else if (*v == "lorenz96")
        cfg.experiment = ExperimentKind::Lorenz96;
      else if (*v == "rate_study")
        cfg.experiment = ExperimentKind::RateStudy;
      else if (*v == "linear_gaussian")
        cfg.experiment = ExperimentKind::LinearGaussian;
      else
        errors.push_back("experiment: unknown kind '" + *v + "'");
    } else {
      errors.push_back("missing required field 'experiment'");
    }
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }

  auto read = [&](const std::string& key, auto&& fn) {
    if (const auto* v = get(key)) {
      try {
        fn(*v);
      } catch (const ConfigError& e) {
        errors.push_back(e.what());
      }
    }
  };

  read("out_dir", [&](const std::string& v) { cfg.out_dir = v; });
  read("seeds", [&](const std::string& v) {
    cfg.seeds.clear();
    for (const auto& tok : detail_cfg::split(v)) cfg.seeds.push_back(static_cast<std::uint64_t>(detail_cfg::to_int("seeds", tok)));
  });
  read("t_steps", [&](const std::string& v) { cfg.t_steps = detail_cfg::to_int("t_steps", v); });
  read("snapshot_stride", [&](const std::string& v) { cfg.snapshot_stride = detail_cfg::to_int("snapshot_stride", v); });

  // model block
  std::string system = "linear";
  read("model.system", [&](const std::string& v) { system = v; });
  int state_dim = 1, obs_dim = 1;
  read("model.state_dim", [&](const std::string& v) { state_dim = detail_cfg::to_int("model.state_dim", v); });
  read("model.obs_dim", [&](const std::string& v) { obs_dim = detail_cfg::to_int("model.obs_dim", v); });
  cfg.model.state_dim = state_dim;
  cfg.model.obs_dim = obs_dim;
  if (system == "lorenz63") {
    cfg.model.dynamics = ssm::Dynamics::Lorenz63;
    cfg.model.integrator = ssm::Integrator::Euler;
  } else if (system == "lorenz96") {
    cfg.model.dynamics = ssm::Dynamics::Lorenz96;
    cfg.model.integrator = ssm::Integrator::Rk4;
  } else if (system == "linear" || system == "squared_static") {
    cfg.model.dynamics = ssm::Dynamics::Linear;
    cfg.model.integrator = ssm::Integrator::Discrete;
    cfg.model.linear_a = Mat::Identity(state_dim, state_dim);
    if (system == "squared_static") cfg.model.obs_kind = ssm::ObsKind::Square;
  } else {
    errors.push_back("model.system: unknown system '" + system + "'");
  }
  read("model.linear_a_scale", [&](const std::string& v) {
    cfg.model.linear_a = detail_cfg::to_double("model.linear_a_scale", v) * Mat::Identity(state_dim, state_dim);
  });
  read("model.dt", [&](const std::string& v) { cfg.model.dt = detail_cfg::to_double("model.dt", v); });
  read("model.integrator", [&](const std::string& v) {
    if (v == "euler")
      cfg.model.integrator = ssm::Integrator::Euler;
    else if (v == "rk4")
      cfg.model.integrator = ssm::Integrator::Rk4;
    else if (v == "discrete")
      cfg.model.integrator = ssm::Integrator::Discrete;
    else
      errors.push_back("model.integrator: unknown integrator '" + v + "'");
  });
  cfg.model.sigma_proc = Vec::Zero(state_dim);
  cfg.model.sigma_obs = Vec::Ones(obs_dim);
  read("model.sigma_proc", [&](const std::string& v) {
    const auto vals = detail_cfg::to_doubles("model.sigma_proc", v);
    cfg.model.sigma_proc = vals.size() == 1 ? Vec(Vec::Constant(state_dim, vals[0]))
                                            : Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  });
  read("model.sigma_obs", [&](const std::string& v) {
    const auto vals = detail_cfg::to_doubles("model.sigma_obs", v);
    cfg.model.sigma_obs = vals.size() == 1 ? Vec(Vec::Constant(obs_dim, vals[0]))
                                           : Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  });
  read("model.obs_select", [&](const std::string& v) {
    cfg.model.obs_select.clear();
    for (const auto& tok : detail_cfg::split(v)) {
      const int idx = detail_cfg::to_int("model.obs_select", tok);
      cfg.model.obs_select.push_back(idx - 1);  // config uses 1-based component indices
    }
  });
  if (cfg.model.obs_kind == ssm::ObsKind::Select && cfg.model.obs_select.empty()) {
    cfg.model.obs_select.resize(static_cast<std::size_t>(obs_dim));
    for (int k = 0; k < obs_dim; ++k) cfg.model.obs_select[static_cast<std::size_t>(k)] = k;
  }
  cfg.model.init_mean = Vec::Zero(state_dim);
  cfg.model.init_cov = Mat::Identity(state_dim, state_dim);
  read("model.init_mean", [&](const std::string& v) {
    const auto vals = detail_cfg::to_doubles("model.init_mean", v);
    cfg.model.init_mean = vals.size() == 1 ? Vec(Vec::Constant(state_dim, vals[0]))
                                           : Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  });
  read("model.init_cov_diag", [&](const std::string& v) {
    const auto vals = detail_cfg::to_doubles("model.init_cov_diag", v);
    Vec diag = vals.size() == 1 ? Vec(Vec::Constant(state_dim, vals[0]))
                                : Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
    cfg.model.init_cov = diag.asDiagonal();
  });
  read("model.truth_process_noise",
       [&](const std::string& v) { cfg.model.truth_process_noise = detail_cfg::to_bool("model.truth_process_noise", v); });
  read("model.l96_forcing", [&](const std::string& v) { cfg.model.l96_forcing = detail_cfg::to_double("model.l96_forcing", v); });
  read("truth.init_mean", [&](const std::string& v) {
    const auto vals = detail_cfg::to_doubles("truth.init_mean", v);
    cfg.truth_init_mean = vals.size() == 1 ? Vec(Vec::Constant(state_dim, vals[0]))
                                           : Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  });
  read("truth.init_cov_diag", [&](const std::string& v) {
    const auto vals = detail_cfg::to_doubles("truth.init_cov_diag", v);
    Vec diag = vals.size() == 1 ? Vec(Vec::Constant(state_dim, vals[0]))
                                : Vec(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
    cfg.truth_init_cov = Mat(diag.asDiagonal());
  });

  // filters
  for (const auto& name : filter_names) {
    FilterConfig fc;
    fc.name = name;
    const std::string prefix = "filter." + name + ".";
    std::string kind = name;
    if (const auto* v = get(prefix + "kind")) kind = *v;
    if (kind == "otf")
      fc.kind = filters::FilterKind::Otf;
    else if (kind == "otf_enkf")
      fc.kind = filters::FilterKind::OtfEnkf;
    else if (kind == "enkf")
      fc.kind = filters::FilterKind::Enkf;
    else if (kind == "sir")
      fc.kind = filters::FilterKind::Sir;
    else {
      errors.push_back("filter." + name + ".kind: unknown filter kind '" + kind + "'");
      continue;
    }
    read(prefix + "particles", [&](const std::string& v) { fc.particles = detail_cfg::to_int(prefix + "particles", v); });
    read(prefix + "lambda", [&](const std::string& v) {
      fc.lambda = detail_cfg::to_double(prefix + "lambda", v);
      fc.run.otf.train.lambda_map = fc.lambda;
      fc.run.otf.train.lambda_psi = fc.lambda;
    });
    read(prefix + "width", [&](const std::string& v) { fc.run.otf.width = detail_cfg::to_int(prefix + "width", v); });
    read(prefix + "blocks", [&](const std::string& v) { fc.run.otf.blocks = detail_cfg::to_int(prefix + "blocks", v); });
    read(prefix + "ideal", [&](const std::string& v) { fc.run.otf.ideal = detail_cfg::to_bool(prefix + "ideal", v); });
    read(prefix + "sir_systematic",
         [&](const std::string& v) { fc.run.sir_systematic = detail_cfg::to_bool(prefix + "sir_systematic", v); });
    auto& t = fc.run.otf.train;
    read(prefix + "train.iterations", [&](const std::string& v) { t.iterations = detail_cfg::to_int(prefix + "train.iterations", v); });
    read(prefix + "train.lr", [&](const std::string& v) {
      t.lr_map = t.lr_psi = detail_cfg::to_double(prefix + "train.lr", v);
    });
    read(prefix + "train.lr_psi", [&](const std::string& v) { t.lr_psi = detail_cfg::to_double(prefix + "train.lr_psi", v); });
    read(prefix + "train.lr_map", [&](const std::string& v) { t.lr_map = detail_cfg::to_double(prefix + "train.lr_map", v); });
    read(prefix + "train.iter_decay", [&](const std::string& v) { t.iter_decay = detail_cfg::to_double(prefix + "train.iter_decay", v); });
    read(prefix + "train.min_iters", [&](const std::string& v) { t.min_iters = detail_cfg::to_int(prefix + "train.min_iters", v); });
    read(prefix + "train.elu_alpha", [&](const std::string& v) { t.elu_alpha = detail_cfg::to_double(prefix + "train.elu_alpha", v); });
    read(prefix + "train.map_steps_per_psi_step",
         [&](const std::string& v) { t.map_steps_per_psi_step = detail_cfg::to_int(prefix + "train.map_steps_per_psi_step", v); });
    read(prefix + "train.pair_sample", [&](const std::string& v) { t.pair_sample = detail_cfg::to_int(prefix + "train.pair_sample", v); });
    read(prefix + "train.warm_start", [&](const std::string& v) { t.warm_start = detail_cfg::to_bool(prefix + "train.warm_start", v); });
    read(prefix + "train.lr_decay_start",
         [&](const std::string& v) { t.lr_decay_start = detail_cfg::to_double(prefix + "train.lr_decay_start", v); });
    read(prefix + "train.lr_floor", [&](const std::string& v) { t.lr_floor = detail_cfg::to_double(prefix + "train.lr_floor", v); });
    read(prefix + "train.average_frac",
         [&](const std::string& v) { t.average_frac = detail_cfg::to_double(prefix + "train.average_frac", v); });
    cfg.filter_list.push_back(std::move(fc));
  }

  read("reference.kind", [&](const std::string& v) {
    if (v == "oracle")
      cfg.reference.kind = ReferenceConfig::Kind::Oracle;
    else if (v == "sir")
      cfg.reference.kind = ReferenceConfig::Kind::Sir;
    else if (v == "none")
      cfg.reference.kind = ReferenceConfig::Kind::None;
    else
      errors.push_back("reference.kind: unknown kind '" + v + "'");
  });
  read("reference.particles", [&](const std::string& v) { cfg.reference.particles = detail_cfg::to_int("reference.particles", v); });
  read("metrics", [&](const std::string& v) { cfg.metric_names = detail_cfg::split(v); });
  read("metric.w2.size_cap", [&](const std::string& v) { cfg.w2_size_cap = detail_cfg::to_int("metric.w2.size_cap", v); });
  read("static.dims", [&](const std::string& v) {
    cfg.static_dims.clear();
    for (const auto& tok : detail_cfg::split(v)) cfg.static_dims.push_back(detail_cfg::to_int("static.dims", tok));
  });
  read("static.observation", [&](const std::string& v) { cfg.static_observation = detail_cfg::to_double("static.observation", v); });
  read("static.sigma", [&](const std::string& v) { cfg.static_sigma = detail_cfg::to_double("static.sigma", v); });
  read("rate.sample_sizes", [&](const std::string& v) {
    cfg.rate_sample_sizes.clear();
    for (const auto& tok : detail_cfg::split(v)) cfg.rate_sample_sizes.push_back(detail_cfg::to_int("rate.sample_sizes", tok));
  });
  read("rate.state_dim", [&](const std::string& v) { cfg.rate_state_dim = detail_cfg::to_int("rate.state_dim", v); });
  read("rate.obs_dim", [&](const std::string& v) { cfg.rate_obs_dim = detail_cfg::to_int("rate.obs_dim", v); });
  read("rate.obs_noise", [&](const std::string& v) { cfg.rate_obs_noise = detail_cfg::to_double("rate.obs_noise", v); });
  read("probe.shift", [&](const std::string& v) { cfg.probe_shift = detail_cfg::to_double("probe.shift", v); });
  read("probe.particles", [&](const std::string& v) { cfg.probe_particles = detail_cfg::to_int("probe.particles", v); });

  // semantic validation
  if (cfg.seeds.empty()) errors.push_back("seeds: at least one seed is required");
  if (cfg.experiment != ExperimentKind::RateStudy && cfg.filter_list.empty())
    errors.push_back("filters: at least one filter is required");
  if (cfg.t_steps < 1) errors.push_back("t_steps must be >= 1");
  if (cfg.experiment != ExperimentKind::RateStudy && cfg.experiment != ExperimentKind::StaticBimodal) {
    try {
      cfg.model.validate();
    } catch (const Error& e) {
      errors.push_back(std::string("model: ") + e.what());
    }
  }
  for (const auto& fc : cfg.filter_list) {
    if (fc.particles < 2) errors.push_back("filter." + fc.name + ".particles must be >= 2");
    try {
      fc.run.otf.train.validate();
    } catch (const Error& e) {
      errors.push_back("filter." + fc.name + ": " + e.what());
    }
  }

  if (!errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }

  cfg.serialized = serialize_config(cfg);
  cfg.config_hash = fnv1a(cfg.serialized);
  return cfg;
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  const char* exp = nullptr;
  switch (cfg.experiment) {
    case ExperimentKind::StaticBimodal:
      exp = "static_bimodal";
      break;
    case ExperimentKind::Lorenz63:
      exp = "lorenz63";
      break;
    case ExperimentKind::Lorenz96:
      exp = "lorenz96";
      break;
    case ExperimentKind::RateStudy:
      exp = "rate_study";
      break;
    case ExperimentKind::LinearGaussian:
      exp = "linear_gaussian";
      break;
  }
  os << "experiment = " << exp << "\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  os << "seeds =";
  for (const auto s : cfg.seeds) os << " " << s;
  os << "\n";
  os << "t_steps = " << cfg.t_steps << "\n";
  os << "snapshot_stride = " << cfg.snapshot_stride << "\n";

  const char* system = "linear";
  switch (cfg.model.dynamics) {
    case ssm::Dynamics::Lorenz63:
      system = "lorenz63";
      break;
    case ssm::Dynamics::Lorenz96:
      system = "lorenz96";
      break;
    case ssm::Dynamics::Linear:
      system = cfg.model.obs_kind == ssm::ObsKind::Square ? "squared_static" : "linear";
      break;
  }
  os << "model.system = " << system << "\n";
  os << "model.state_dim = " << cfg.model.state_dim << "\n";
  os << "model.obs_dim = " << cfg.model.obs_dim << "\n";
  os << "model.dt = " << detail_cfg::fmt(cfg.model.dt) << "\n";
  os << "model.integrator = "
     << (cfg.model.integrator == ssm::Integrator::Euler ? "euler"
                                                        : cfg.model.integrator == ssm::Integrator::Rk4 ? "rk4" : "discrete")
     << "\n";
  os << "model.sigma_proc = " << detail_cfg::fmt_vec(cfg.model.sigma_proc) << "\n";
  os << "model.sigma_obs = " << detail_cfg::fmt_vec(cfg.model.sigma_obs) << "\n";
  if (cfg.model.obs_kind == ssm::ObsKind::Select) {
    os << "model.obs_select =";
    for (const int k : cfg.model.obs_select) os << " " << k + 1;
    os << "\n";
  }
  os << "model.init_mean = " << detail_cfg::fmt_vec(cfg.model.init_mean) << "\n";
  os << "model.init_cov_diag = " << detail_cfg::fmt_vec(cfg.model.init_cov.diagonal()) << "\n";
  os << "model.truth_process_noise = " << (cfg.model.truth_process_noise ? "true" : "false") << "\n";
  if (cfg.model.dynamics == ssm::Dynamics::Lorenz96) os << "model.l96_forcing = " << detail_cfg::fmt(cfg.model.l96_forcing) << "\n";
  if (cfg.truth_init_mean) os << "truth.init_mean = " << detail_cfg::fmt_vec(*cfg.truth_init_mean) << "\n";
  if (cfg.truth_init_cov) os << "truth.init_cov_diag = " << detail_cfg::fmt_vec(cfg.truth_init_cov->diagonal()) << "\n";

  os << "filters =";
  for (const auto& fc : cfg.filter_list) os << " " << fc.name;
  os << "\n";
  for (const auto& fc : cfg.filter_list) {
    const std::string p = "filter." + fc.name + ".";
    os << p << "kind = " << filters::kind_name(fc.kind) << "\n";
    os << p << "particles = " << fc.particles << "\n";
    if (fc.kind == filters::FilterKind::Otf || fc.kind == filters::FilterKind::OtfEnkf) {
      const auto& t = fc.run.otf.train;
      os << p << "lambda = " << detail_cfg::fmt(fc.lambda) << "\n";
      os << p << "width = " << fc.run.otf.width << "\n";
      os << p << "blocks = " << fc.run.otf.blocks << "\n";
      os << p << "ideal = " << (fc.run.otf.ideal ? "true" : "false") << "\n";
      os << p << "train.iterations = " << t.iterations << "\n";
      os << p << "train.lr_map = " << detail_cfg::fmt(t.lr_map) << "\n";
      os << p << "train.lr_psi = " << detail_cfg::fmt(t.lr_psi) << "\n";
      os << p << "train.iter_decay = " << detail_cfg::fmt(t.iter_decay) << "\n";
      os << p << "train.min_iters = " << t.min_iters << "\n";
      os << p << "train.elu_alpha = " << detail_cfg::fmt(t.elu_alpha) << "\n";
      os << p << "train.map_steps_per_psi_step = " << t.map_steps_per_psi_step << "\n";
      os << p << "train.pair_sample = " << t.pair_sample << "\n";
      os << p << "train.warm_start = " << (t.warm_start ? "true" : "false") << "\n";
      os << p << "train.lr_decay_start = " << detail_cfg::fmt(t.lr_decay_start) << "\n";
      os << p << "train.lr_floor = " << detail_cfg::fmt(t.lr_floor) << "\n";
      os << p << "train.average_frac = " << detail_cfg::fmt(t.average_frac) << "\n";
    }
    if (fc.kind == filters::FilterKind::Sir) os << p << "sir_systematic = " << (fc.run.sir_systematic ? "true" : "false") << "\n";
  }
  os << "reference.kind = "
     << (cfg.reference.kind == ReferenceConfig::Kind::Oracle ? "oracle"
                                                             : cfg.reference.kind == ReferenceConfig::Kind::Sir ? "sir" : "none")
     << "\n";
  os << "reference.particles = " << cfg.reference.particles << "\n";
  os << "metrics =";
  for (const auto& m : cfg.metric_names) os << " " << m;
  os << "\n";
  os << "metric.w2.size_cap = " << cfg.w2_size_cap << "\n";
  if (cfg.experiment == ExperimentKind::StaticBimodal) {
    os << "static.dims =";
    for (const int d : cfg.static_dims) os << " " << d;
    os << "\n";
    os << "static.observation = " << detail_cfg::fmt(cfg.static_observation) << "\n";
    os << "static.sigma = " << detail_cfg::fmt(cfg.static_sigma) << "\n";
  }
  if (cfg.experiment == ExperimentKind::RateStudy) {
    os << "rate.sample_sizes =";
    for (const int n : cfg.rate_sample_sizes) os << " " << n;
    os << "\n";
    os << "rate.state_dim = " << cfg.rate_state_dim << "\n";
    os << "rate.obs_dim = " << cfg.rate_obs_dim << "\n";
    os << "rate.obs_noise = " << detail_cfg::fmt(cfg.rate_obs_noise) << "\n";
  }
  os << "probe.shift = " << detail_cfg::fmt(cfg.probe_shift) << "\n";
  os << "probe.particles = " << cfg.probe_particles << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Result table
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string experiment;
  std::string filter;
  std::uint64_t seed = 0;
  int step = 0;
  std::string metric;
  double value = 0.0;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  std::uint64_t config_hash = 0;

  void sort() {
    std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
      return std::tie(a.experiment, a.filter, a.seed, a.step, a.metric) <
             std::tie(b.experiment, b.filter, b.seed, b.step, b.metric);
    });
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "experiment,filter,seed,step,metric,value\n";
    for (const auto& r : rows) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", r.value);
      os << r.experiment << "," << r.filter << "," << r.seed << "," << r.step << "," << r.metric << "," << buf << "\n";
    }
    return os.str();
  }

  static ResultTable from_csv(const std::string& text) {
    ResultTable table;
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ResultRow row;
      std::istringstream ls(line);
      std::string tok;
      std::getline(ls, row.experiment, ',');
      std::getline(ls, row.filter, ',');
      std::getline(ls, tok, ',');
      row.seed = std::stoull(tok);
      std::getline(ls, tok, ',');
      row.step = std::stoi(tok);
      std::getline(ls, row.metric, ',');
      std::getline(ls, tok, ',');
      row.value = std::stod(tok);
      table.rows.push_back(std::move(row));
    }
    return table;
  }
};

}  // namespace otf::harness
