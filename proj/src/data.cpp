#include "fibec/data.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>

#include "fibec/binary_io.hpp"
#include "fibec/errors.hpp"

namespace fibec {

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& s : samples) ++counts.at(s.label);
  return counts;
}

Dataset generate(const GeneratorSpec& spec, Rng& rng) {
  require(spec.num_classes >= 1 && spec.per_class >= 1 && spec.dim >= 1,
          "generate: counts must be >= 1");
  require(spec.class_sep > 0.0, "generate: class_sep must be > 0");

  std::vector<Vector> means(spec.num_classes, Vector(spec.dim));
  for (auto& m : means)
    for (double& v : m) v = rng.normal();
  if (spec.num_classes > 1) {
    double closest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < means.size(); ++i)
      for (std::size_t j = i + 1; j < means.size(); ++j) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < spec.dim; ++k) d2 += std::pow(means[i][k] - means[j][k], 2);
        closest = std::min(closest, std::sqrt(d2));
      }
    require(closest > 0.0, "generate: coincident class means");
    // nudge up so rounding never leaves the closest pair a hair under class_sep
    const double scale = spec.class_sep / closest * (1.0 + 1e-12);
    for (auto& m : means)
      for (double& v : m) v *= scale;
  }

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.samples.reserve(spec.num_classes * spec.per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Sample s{Vector(spec.dim), c};
      for (std::size_t k = 0; k < spec.dim; ++k) s.x[k] = means[c][k] + rng.normal();
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

std::vector<Dataset> dirichlet_partition(const Dataset& ds, const PartitionConfig& cfg, Rng& rng) {
  const std::size_t k = cfg.num_devices;
  if (!(cfg.concentration > 0.0)) throw ConfigError("dirichlet concentration must be > 0", "dirichlet_alpha");
  if (k == 0) throw ConfigError("number of devices must be >= 1", "devices");
  if (k > ds.size()) throw ConfigError("more devices than samples", "devices");
  if (k * std::max<std::size_t>(cfg.min_samples, 1) > ds.size())
    throw ConfigError("dataset too small to give every device " + std::to_string(cfg.min_samples) +
                          " samples",
                      "devices");

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.samples[i].label).push_back(i);

  std::vector<std::vector<std::size_t>> assigned(k);
  for (auto& members : by_class) {
    if (members.empty()) continue;
    rng.shuffle(members);
    Vector p(k);
    double total = 0.0;
    for (double& v : p) total += (v = rng.gamma(cfg.concentration));
    if (!(total > 0.0)) {
      // every gamma draw underflowed (tiny concentration): fall back to one random device
      std::fill(p.begin(), p.end(), 0.0);
      p[rng.index(k)] = 1.0;
      total = 1.0;
    }
    Vector cdf(k);
    double run = 0.0;
    for (std::size_t d = 0; d < k; ++d) cdf[d] = (run += p[d] / total);
    for (std::size_t idx : members) {
      const double u = rng.uniform();
      auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const std::size_t d = it == cdf.end() ? k - 1 : static_cast<std::size_t>(it - cdf.begin());
      assigned[d].push_back(idx);
    }
  }

  const std::size_t floor_size = std::max<std::size_t>(cfg.min_samples, 1);
  for (std::size_t d = 0; d < k; ++d) {
    while (assigned[d].size() < floor_size) {
      std::size_t largest = 0;
      for (std::size_t e = 1; e < k; ++e)
        if (assigned[e].size() > assigned[largest].size()) largest = e;
      assigned[d].push_back(assigned[largest].back());
      assigned[largest].pop_back();
    }
  }

  std::vector<Dataset> shards(k);
  for (std::size_t d = 0; d < k; ++d) {
    std::sort(assigned[d].begin(), assigned[d].end());
    shards[d].num_classes = ds.num_classes;
    for (std::size_t idx : assigned[d]) shards[d].samples.push_back(ds.samples[idx]);
  }
  return shards;
}

Split split(const Dataset& shard, double train_fraction, Rng& rng) {
  const std::size_t n = shard.size();
  require(n >= 2, "split: shard needs at least 2 samples");
  require(train_fraction > 0.0 && train_fraction < 1.0, "split: train_fraction must be in (0, 1)");

  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n))), 1, n - 1);

  std::vector<std::vector<std::size_t>> by_class(shard.num_classes);
  for (std::size_t i = 0; i < n; ++i) by_class.at(shard.samples[i].label).push_back(i);

  // Largest-remainder apportionment of n_train across classes.
  std::vector<std::size_t> quota(by_class.size());
  std::vector<double> remainder(by_class.size());
  const double share = static_cast<double>(n_train) / static_cast<double>(n);
  std::size_t given = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double exact = share * static_cast<double>(by_class[c].size());
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(quota[c]);
    given += quota[c];
  }
  std::vector<std::size_t> order(by_class.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; given < n_train && i < order.size(); ++i) {
    const std::size_t c = order[i];
    if (quota[c] < by_class[c].size()) {
      ++quota[c];
      ++given;
    }
  }

  Split out;
  out.train.num_classes = out.test.num_classes = shard.num_classes;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto members = by_class[c];
    rng.shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i)
      (i < quota[c] ? out.train : out.test).samples.push_back(shard.samples[members[i]]);
  }
  rng.shuffle(out.train.samples);
  return out;
}

namespace {
constexpr std::uint32_t kDatasetVersion = 1;
}

void save_dataset(const Dataset& ds, std::ostream& out) {
  const std::size_t dim = ds.samples.empty() ? 0 : ds.samples.front().x.size();
  bin::put_magic(out, "FBDS");
  bin::put<std::uint32_t>(out, kDatasetVersion);
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.num_classes));
  for (const auto& s : ds.samples) {
    require(s.x.size() == dim, "save_dataset: ragged feature vectors");
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.label));
    bin::put_f64s(out, s.x);
  }
}

Dataset load_dataset(std::istream& in) {
  bin::expect_magic(in, "FBDS");
  const auto version = bin::get<std::uint32_t>(in);
  require(version == kDatasetVersion, "load_dataset: unsupported version " + std::to_string(version));
  const auto count = bin::get<std::uint32_t>(in);
  const auto dim = bin::get<std::uint32_t>(in);
  Dataset ds;
  ds.num_classes = bin::get<std::uint32_t>(in);
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s{Vector(dim), bin::get<std::uint32_t>(in)};
    require(s.label < ds.num_classes, "load_dataset: label out of range");
    bin::get_f64s(in, s.x);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace fibec
