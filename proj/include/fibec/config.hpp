#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fibec/curriculum.hpp"
#include "fibec/data.hpp"
#include "fibec/gal.hpp"

namespace fibec {

// Which protocol components are active. fedavg_lora disables all three.
enum class Mode { fibecfed, no_curriculum, full_sync, no_mask, fedavg_lora };

Mode parse_mode(std::string_view name);
std::string_view to_string(Mode mode);

struct ModeFlags {
  bool curriculum = true;
  bool gal_selection = true;
  bool masking = true;
};

ModeFlags flags_for(Mode mode);

struct DataSpec {
  GeneratorSpec generator;
  double dirichlet_alpha = 1.0;
  double train_fraction = 0.8;
};

struct ModelSpec {
  std::vector<std::size_t> hidden{16, 16};
  std::size_t rank = 2;
  double a_sigma = 0.02;
};

struct ExperimentConfig {
  // federation
  std::size_t devices = 20;
  std::size_t sampled_per_round = 5;
  std::size_t rounds = 60;
  std::size_t local_iterations = 2;
  std::size_t batch_size = 8;
  double lr = 0.01;

  // curriculum
  double beta = 0.6;
  double alpha = 0.8;
  Pace pace = Pace::linear;

  // layer selection
  double noise_budget = 0.5;
  double p_norm = 2.0;
  double mu = 1.0;
  std::size_t lipschitz_samples = 64;

  // fisher / warmup
  double gamma_m = 0.9;
  std::size_t t_warm = 3;
  std::size_t t_prime = 3;

  DataSpec data;
  ModelSpec model;

  std::uint64_t seed = 1;
  Mode mode = Mode::fibecfed;
  bool record_wall_time = false;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  PacingConfig pacing() const;
  NoiseConfig noise() const;
  NetworkShape shape() const;
  // Smallest shard the partitioner may produce: one full training batch plus a test sample.
  std::size_t min_shard_size() const;
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys and ill-typed values
/// throw ConfigError carrying the dotted key path.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);

// Canonical JSON with every key, in parse_config's schema.
std::string dump_config(const ExperimentConfig& cfg);

// Full-scale setting: 100 devices, 10 per round, batch 8, beta 0.6, alpha 0.8.
ExperimentConfig full_scale_preset();

}  // namespace fibec
