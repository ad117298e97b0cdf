#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "fibec/numeric.hpp"

namespace fibec {

struct Sample {
  Vector x;
  std::size_t label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return samples.size(); }
  std::vector<std::size_t> class_counts() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GeneratorSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 200;
  std::size_t dim = 16;
  double class_sep = 3.0;
};

/// Gaussian blobs with unit covariance; class means are rescaled so the closest pair sits
/// exactly class_sep apart.
Dataset generate(const GeneratorSpec& spec, Rng& rng);

struct PartitionConfig {
  double concentration = 1.0;  // Dirichlet alpha
  std::size_t num_devices = 20;
  std::size_t min_samples = 1;  // every shard ends with at least this many samples
};

/// Per-class Dirichlet proportions, per-sample categorical assignment, then a top-up pass
/// that moves samples from the largest shard into any shard below min_samples.
std::vector<Dataset> dirichlet_partition(const Dataset& ds, const PartitionConfig& cfg, Rng& rng);

struct Split {
  Dataset train;
  Dataset test;
};

/// Label-stratified two-way split; train gets round(fraction * n) samples, clamped to [1, n-1].
Split split(const Dataset& shard, double train_fraction, Rng& rng);

// "FBDS", u32 version, u32 count, u32 dim, u32 classes, then per sample u32 label + f64 x[dim].
void save_dataset(const Dataset& ds, std::ostream& out);
Dataset load_dataset(std::istream& in);

}  // namespace fibec
