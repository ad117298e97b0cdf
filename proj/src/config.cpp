#include "fibec/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fibec/errors.hpp"
#include "json.hpp"

namespace fibec {

using nlohmann::json;

Mode parse_mode(std::string_view name) {
  if (name == "fibecfed") return Mode::fibecfed;
  if (name == "no-curriculum") return Mode::no_curriculum;
  if (name == "full-sync") return Mode::full_sync;
  if (name == "no-mask") return Mode::no_mask;
  if (name == "fedavg-lora") return Mode::fedavg_lora;
  throw ConfigError("unknown mode '" + std::string(name) +
                        "' (expected fibecfed, no-curriculum, full-sync, no-mask or fedavg-lora)",
                    "mode");
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::fibecfed: return "fibecfed";
    case Mode::no_curriculum: return "no-curriculum";
    case Mode::full_sync: return "full-sync";
    case Mode::no_mask: return "no-mask";
    case Mode::fedavg_lora: return "fedavg-lora";
  }
  return "fibecfed";
}

ModeFlags flags_for(Mode mode) {
  switch (mode) {
    case Mode::fibecfed: return {true, true, true};
    case Mode::no_curriculum: return {false, true, true};
    case Mode::full_sync: return {true, false, true};
    case Mode::no_mask: return {true, true, false};
    case Mode::fedavg_lora: return {false, false, false};
  }
  return {};
}

// ---------------------------------------------------------------------------

namespace {

void check(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + ": " + what, key);
}

bool finite_positive(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace

void ExperimentConfig::validate() const {
  check(devices >= 1, "federation.devices", "must be >= 1");
  check(sampled_per_round >= 1 && sampled_per_round <= devices, "federation.sampled_per_round",
        "must be in [1, devices]");
  check(local_iterations >= 1, "federation.local_iterations", "must be >= 1");
  check(batch_size >= 1, "federation.batch_size", "must be >= 1");
  check(finite_positive(lr), "federation.lr", "must be a positive finite number");

  check(beta > 0.0 && beta <= 1.0, "curriculum.beta", "must be in (0, 1]");
  check(alpha > 0.0 && alpha <= 1.0, "curriculum.alpha", "must be in (0, 1]");

  check(finite_positive(noise_budget), "gal.noise_budget", "must be a positive finite number");
  check(std::isfinite(p_norm) && p_norm >= 1.0, "gal.p_norm", "must be a finite number >= 1");
  check(finite_positive(mu), "gal.mu", "must be a positive finite number");
  check(lipschitz_samples >= 2, "gal.lipschitz_samples", "must be >= 2");

  check(gamma_m >= 0.0 && gamma_m <= 1.0, "init.gamma_m", "must be in [0, 1]");
  check(t_prime >= 1, "init.t_prime", "must be >= 1");

  const auto& g = data.generator;
  check(g.num_classes >= 2, "data.num_classes", "must be >= 2");
  check(g.per_class >= 1, "data.per_class", "must be >= 1");
  check(g.dim >= 1, "data.dim", "must be >= 1");
  check(finite_positive(g.class_sep), "data.class_sep", "must be a positive finite number");
  check(finite_positive(data.dirichlet_alpha), "data.dirichlet_alpha", "must be a positive finite number");
  check(data.train_fraction > 0.0 && data.train_fraction < 1.0, "data.train_fraction", "must be in (0, 1)");

  check(model.rank >= 1, "model.rank", "must be >= 1");
  check(std::isfinite(model.a_sigma) && model.a_sigma >= 0.0, "model.a_sigma", "must be >= 0");
  for (std::size_t w : model.hidden) check(w >= 1, "model.hidden", "widths must be >= 1");
  const auto widths = shape().widths;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l)
    check(model.rank <= std::min(widths[l], widths[l + 1]), "model.rank",
          "exceeds min(d_in, d_out) of layer " + std::to_string(l));

  const std::size_t total = g.num_classes * g.per_class;
  check(devices * min_shard_size() <= total, "federation.devices",
        "dataset of " + std::to_string(total) + " samples cannot give " + std::to_string(devices) +
            " devices " + std::to_string(min_shard_size()) + " samples each");
}

PacingConfig ExperimentConfig::pacing() const {
  return {beta, alpha, pace, batch_size, std::max<std::size_t>(rounds, 1)};
}

NoiseConfig ExperimentConfig::noise() const { return {noise_budget, p_norm}; }

NetworkShape ExperimentConfig::shape() const {
  NetworkShape s;
  s.widths.push_back(data.generator.dim);
  s.widths.insert(s.widths.end(), model.hidden.begin(), model.hidden.end());
  s.widths.push_back(data.generator.num_classes);
  s.rank = model.rank;
  return s;
}

std::size_t ExperimentConfig::min_shard_size() const {
  // split() keeps clamp(round(f * n), 1, n - 1) for training; that must hold one full batch
  auto train_of = [&](std::size_t n) {
    const auto t = static_cast<std::size_t>(std::llround(data.train_fraction * static_cast<double>(n)));
    return std::clamp<std::size_t>(t, 1, n - 1);
  };
  std::size_t n = 2;
  while (train_of(n) < batch_size) ++n;
  return n;
}

// ---------------------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object())
      throw ConfigError(path_of("") + ": expected an object", prefix_.empty() ? "<root>" : prefix_);
    for (auto it = obj_.begin(); it != obj_.end(); ++it) pending_.push_back(it.key());
  }

  template <typename Fn>
  void field(const std::string& key, Fn&& assign) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    pending_.erase(std::remove(pending_.begin(), pending_.end(), key), pending_.end());
    assign(*it, path_of(key));
  }

  void count(const std::string& key, std::size_t& out) {
    field(key, [&](const json& v, const std::string& path) {
      if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(path + ": expected a non-negative integer", path);
      out = v.get<std::size_t>();
    });
  }

  void seed(const std::string& key, std::uint64_t& out) {
    field(key, [&](const json& v, const std::string& path) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned()))
        throw ConfigError(path + ": expected a non-negative integer", path);
      out = v.get<std::uint64_t>();
    });
  }

  void real(const std::string& key, double& out) {
    field(key, [&](const json& v, const std::string& path) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number", path);
      out = v.get<double>();
    });
  }

  void flag(const std::string& key, bool& out) {
    field(key, [&](const json& v, const std::string& path) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected true or false", path);
      out = v.get<bool>();
    });
  }

  template <typename Fn>
  void text(const std::string& key, Fn&& parse) {
    field(key, [&](const json& v, const std::string& path) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string", path);
      try {
        parse(v.get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what(), path);
      }
    });
  }

  template <typename Fn>
  void section(const std::string& key, Fn&& read) {
    field(key, [&](const json& v, const std::string& path) {
      Reader sub(v, path);
      read(sub);
      sub.finish();
    });
  }

  void finish() const {
    if (!pending_.empty()) {
      const std::string path = path_of(pending_.front());
      throw ConfigError("unknown key '" + path + "'", path);
    }
  }

 private:
  std::string path_of(const std::string& key) const {
    if (prefix_.empty()) return key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  const json& obj_;
  std::string prefix_;
  std::vector<std::string> pending_;
};

std::size_t line_of(std::string_view text, std::size_t byte) {
  const std::size_t end = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(end), '\n'));
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); });
  if (blank) {
    cfg.validate();
    return cfg;
  }

  json doc;
  try {
    doc = json::parse(text.begin(), text.end(), nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("line " + std::to_string(line_of(text, e.byte)) + ": malformed JSON: " + e.what(), "<document>");
  }

  Reader root(doc, "");
  root.seed("seed", cfg.seed);
  root.text("mode", [&](const std::string& s) { cfg.mode = parse_mode(s); });
  root.flag("record_wall_time", cfg.record_wall_time);
  root.section("federation", [&](Reader& r) {
    r.count("devices", cfg.devices);
    r.count("sampled_per_round", cfg.sampled_per_round);
    r.count("rounds", cfg.rounds);
    r.count("local_iterations", cfg.local_iterations);
    r.count("batch_size", cfg.batch_size);
    r.real("lr", cfg.lr);
  });
  root.section("curriculum", [&](Reader& r) {
    r.real("beta", cfg.beta);
    r.real("alpha", cfg.alpha);
    r.text("pace", [&](const std::string& s) { cfg.pace = parse_pace(s); });
  });
  root.section("gal", [&](Reader& r) {
    r.real("noise_budget", cfg.noise_budget);
    r.real("p_norm", cfg.p_norm);
    r.real("mu", cfg.mu);
    r.count("lipschitz_samples", cfg.lipschitz_samples);
  });
  root.section("init", [&](Reader& r) {
    r.real("gamma_m", cfg.gamma_m);
    r.count("t_warm", cfg.t_warm);
    r.count("t_prime", cfg.t_prime);
  });
  root.section("data", [&](Reader& r) {
    r.count("num_classes", cfg.data.generator.num_classes);
    r.count("per_class", cfg.data.generator.per_class);
    r.count("dim", cfg.data.generator.dim);
    r.real("class_sep", cfg.data.generator.class_sep);
    r.real("dirichlet_alpha", cfg.data.dirichlet_alpha);
    r.real("train_fraction", cfg.data.train_fraction);
  });
  root.section("model", [&](Reader& r) {
    r.field("hidden", [&](const json& v, const std::string& path) {
      if (!v.is_array()) throw ConfigError(path + ": expected an array of widths", path);
      cfg.model.hidden.clear();
      for (const auto& w : v) {
        if (!w.is_number_integer() || w.get<long long>() < 1)
          throw ConfigError(path + ": widths must be positive integers", path);
        cfg.model.hidden.push_back(w.get<std::size_t>());
      }
    });
    r.count("rank", cfg.model.rank);
    r.real("a_sigma", cfg.model.a_sigma);
  });
  root.finish();

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'", "<file>");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& cfg) {
  json doc;
  doc["seed"] = cfg.seed;
  doc["mode"] = std::string(to_string(cfg.mode));
  doc["record_wall_time"] = cfg.record_wall_time;
  doc["federation"] = {{"devices", cfg.devices},
                       {"sampled_per_round", cfg.sampled_per_round},
                       {"rounds", cfg.rounds},
                       {"local_iterations", cfg.local_iterations},
                       {"batch_size", cfg.batch_size},
                       {"lr", cfg.lr}};
  doc["curriculum"] = {{"beta", cfg.beta}, {"alpha", cfg.alpha}, {"pace", std::string(to_string(cfg.pace))}};
  doc["gal"] = {{"noise_budget", cfg.noise_budget},
                {"p_norm", cfg.p_norm},
                {"mu", cfg.mu},
                {"lipschitz_samples", cfg.lipschitz_samples}};
  doc["init"] = {{"gamma_m", cfg.gamma_m}, {"t_warm", cfg.t_warm}, {"t_prime", cfg.t_prime}};
  doc["data"] = {{"num_classes", cfg.data.generator.num_classes},
                 {"per_class", cfg.data.generator.per_class},
                 {"dim", cfg.data.generator.dim},
                 {"class_sep", cfg.data.generator.class_sep},
                 {"dirichlet_alpha", cfg.data.dirichlet_alpha},
                 {"train_fraction", cfg.data.train_fraction}};
  doc["model"] = {{"hidden", cfg.model.hidden}, {"rank", cfg.model.rank}, {"a_sigma", cfg.model.a_sigma}};
  return doc.dump(2) + "\n";
}

ExperimentConfig full_scale_preset() {
  ExperimentConfig cfg;
  cfg.devices = 100;
  cfg.sampled_per_round = 10;
  cfg.rounds = 100;
  cfg.local_iterations = 2;
  cfg.batch_size = 8;
  cfg.beta = 0.6;
  cfg.alpha = 0.8;
  cfg.pace = Pace::linear;
  cfg.data.generator.per_class = 200;
  return cfg;
}

}  // namespace fibec
