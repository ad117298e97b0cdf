#include "fibec/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>

#include "fibec/binary_io.hpp"
#include "fibec/errors.hpp"

namespace fibec {

std::size_t GalPayload::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.a.size() + l.b.size();
  return n;
}

namespace {
constexpr std::uint32_t kPayloadVersion = 1;
}

std::vector<unsigned char> encode_payload(const GalPayload& payload) {
  std::ostringstream out(std::ios::binary);
  bin::put_magic(out, "FBGP");
  bin::put<std::uint32_t>(out, kPayloadVersion);
  bin::put<std::uint32_t>(out, payload.device);
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(payload.layers.size()));
  for (const auto& l : payload.layers) {
    bin::put<std::uint32_t>(out, l.index);
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.a.rows()));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.a.cols()));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.b.rows()));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.b.cols()));
    bin::put_f64s(out, l.a.data());
    bin::put_f64s(out, l.b.data());
  }
  const std::string s = out.str();
  return {s.begin(), s.end()};
}

GalPayload decode_payload(std::span<const unsigned char> bytes) {
  std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  bin::expect_magic(in, "FBGP");
  const auto version = bin::get<std::uint32_t>(in);
  require(version == kPayloadVersion, "decode_payload: unsupported version " + std::to_string(version));
  GalPayload p;
  p.device = bin::get<std::uint32_t>(in);
  const auto n = bin::get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    GalPayload::Layer l;
    l.index = bin::get<std::uint32_t>(in);
    const std::size_t ar = bin::get<std::uint32_t>(in);
    const std::size_t ac = bin::get<std::uint32_t>(in);
    const std::size_t br = bin::get<std::uint32_t>(in);
    const std::size_t bc = bin::get<std::uint32_t>(in);
    l.a = Matrix(ar, ac);
    l.b = Matrix(br, bc);
    bin::get_f64s(in, l.a.data());
    bin::get_f64s(in, l.b.data());
    p.layers.push_back(std::move(l));
  }
  return p;
}

GalPayload extract_payload(const LoraNetwork& net, std::span<const std::size_t> layers, std::uint32_t sender) {
  GalPayload p;
  p.device = sender;
  for (std::size_t l : layers) {
    require(l < net.num_layers(), "extract_payload: layer out of range");
    p.layers.push_back({static_cast<std::uint32_t>(l), net.layer(l).a(), net.layer(l).b()});
  }
  return p;
}

void install_payload(LoraNetwork& net, const GalPayload& payload) {
  for (const auto& l : payload.layers) {
    require(l.index < net.num_layers(), "install_payload: layer out of range");
    auto& layer = net.layer(l.index);
    require(l.a.rows() == layer.a().rows() && l.a.cols() == layer.a().cols() &&
                l.b.rows() == layer.b().rows() && l.b.cols() == layer.b().cols(),
            "install_payload: shape mismatch in layer " + std::to_string(l.index));
    layer.a() = l.a;
    layer.b() = l.b;
  }
}

CommBytes comm_bytes(const LoraNetwork& net, std::span<const std::size_t> gal_layers, std::size_t sampled) {
  std::uint64_t params = 0;
  for (std::size_t l : gal_layers) params += net.layer(l).lora_size();
  const std::uint64_t each = static_cast<std::uint64_t>(sampled) * params * sizeof(double);
  return {each, each};
}

std::vector<std::size_t> sample_devices(std::size_t num_devices, std::size_t count, std::uint64_t seed,
                                        std::size_t round) {
  require(count >= 1 && count <= num_devices, "sample_devices: count must be in [1, K]");
  Rng rng(mix_seed(mix_seed(seed, 0x73616d70), round));
  std::vector<std::size_t> ids(num_devices);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(ids[i], ids[i + rng.index(num_devices - i)]);
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------

std::vector<DeviceState> build_devices(const ExperimentConfig& cfg, const LoraNetwork& initial) {
  const Rng master(cfg.seed);
  Rng data_rng = master.derive(1);
  Rng part_rng = master.derive(2);
  const Dataset pool = generate(cfg.data.generator, data_rng);
  const auto shards = dirichlet_partition(
      pool, PartitionConfig{cfg.data.dirichlet_alpha, cfg.devices, cfg.min_shard_size()}, part_rng);

  std::vector<DeviceState> devices;
  devices.reserve(shards.size());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    Rng split_rng = master.derive(100 + k);
    Split parts = split(shards[k], cfg.data.train_fraction, split_rng);
    DeviceState dev(k, initial, std::move(parts.train), std::move(parts.test));
    for (std::size_t start = 0; start < dev.train.size(); start += cfg.batch_size) {
      std::vector<std::size_t> batch(std::min(cfg.batch_size, dev.train.size() - start));
      std::iota(batch.begin(), batch.end(), start);
      dev.batches.push_back(std::move(batch));
    }
    dev.mask = full_mask(initial);
    dev.ratios.assign(initial.num_layers(), std::nullopt);
    devices.push_back(std::move(dev));
  }
  return devices;
}

double train_batches(LoraNetwork& net, const Dataset& train,
                     const std::vector<std::vector<std::size_t>>& batches,
                     std::span<const std::size_t> which, double lr, const NeuronMask* mask,
                     std::size_t* samples_seen) {
  double loss_sum = 0.0;
  for (std::size_t j : which) {
    require(j < batches.size(), "train_batches: batch index out of range");
    Gradients acc = Gradients::zeros_like(net);
    for (std::size_t idx : batches[j]) {
      const Sample& s = train.samples.at(idx);
      acc.accumulate(backward(net, s.x, s.label, mask));
    }
    if (!std::isfinite(acc.loss)) throw NumericalError("training aborted: non-finite loss on batch " + std::to_string(j));
    apply_update(net, acc, lr, mask);
    loss_sum += acc.loss;
    if (samples_seen) *samples_seen += batches[j].size();
  }
  return loss_sum;
}

void fedavg_gal(ServerState& server, std::span<const WeightedUpdate> updates) {
  require(!updates.empty(), "fedavg_gal: no updates");
  double m = 0.0;
  for (const auto& u : updates) {
    require(u.n_k >= 0.0 && std::isfinite(u.n_k), "fedavg_gal: invalid weight");
    m += u.n_k;
  }
  require(m > 0.0, "fedavg_gal: zero total weight");

  GalPayload out;
  out.device = kServerId;
  const auto& shape = updates.front().params.layers;
  for (const auto& l : shape) out.layers.push_back({l.index, Matrix(l.a.rows(), l.a.cols()), Matrix(l.b.rows(), l.b.cols())});

  for (const auto& u : updates) {
    require(u.params.layers.size() == out.layers.size(), "fedavg_gal: layer count mismatch");
    const double w = u.n_k / m;
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
      const auto& src = u.params.layers[i];
      auto& dst = out.layers[i];
      require(src.index == dst.index && src.a.rows() == dst.a.rows() && src.a.cols() == dst.a.cols() &&
                  src.b.rows() == dst.b.rows() && src.b.cols() == dst.b.cols(),
              "fedavg_gal: shape mismatch in layer " + std::to_string(src.index));
      auto da = dst.a.data();
      auto sa = src.a.data();
      for (std::size_t e = 0; e < da.size(); ++e) da[e] += w * sa[e];
      auto db = dst.b.data();
      auto sb = src.b.data();
      for (std::size_t e = 0; e < db.size(); ++e) db[e] += w * sb[e];
    }
  }
  server.global = std::move(out);
}

ServerState init_phase(std::vector<DeviceState>& devices, const LoraNetwork& initial,
                       const ExperimentConfig& cfg) {
  require(!devices.empty(), "init_phase: no devices");
  for (const auto& dev : devices)
    if (dev.train.size() == 0) throw ConfigError("device " + std::to_string(dev.id) + " has no training data", "devices");

  const ModeFlags flags = flags_for(cfg.mode);
  const NoiseConfig noise = cfg.noise();
  const Vector initial_lora = flatten_lora(initial);
  const Rng master(cfg.seed);

  for (auto& dev : devices) {
    // Difficulty on the initial model, fixed for the rest of the run.
    dev.batch_scores.clear();
    for (std::size_t j = 0; j < dev.batches.size(); ++j) {
      Vector scores;
      for (std::size_t idx : dev.batches[j]) {
        const Sample& s = dev.train.samples[idx];
        scores.push_back(sample_score(sample_fim_diag(dev.net, s.x, s.label)));
      }
      dev.batch_scores.push_back({j, batch_score(scores)});
    }
    if (flags.curriculum) {
      dev.order = sort_batches(dev.batch_scores);
    } else {
      dev.order.resize(dev.batches.size());
      std::iota(dev.order.begin(), dev.order.end(), 0);
    }

    dev.layer_scores = device_layer_scores(dev.net, dev.train.samples, noise);

    std::vector<std::size_t> every(dev.batches.size());
    std::iota(every.begin(), every.end(), 0);
    dev.momentum_fim.reset();
    for (std::size_t e = 0; e < std::max(cfg.t_warm, cfg.t_prime); ++e) {
      if (e < cfg.t_prime)
        dev.momentum_fim = momentum_update(dev.momentum_fim, empirical_fim_diag(dev.net, dev.train.samples), cfg.gamma_m);
      if (e < cfg.t_warm) train_batches(dev.net, dev.train, dev.batches, every, cfg.lr, nullptr);
    }

    Rng lip_rng = master.derive(1000 + dev.id);
    dev.lossless = analyze_lossless(dev.net, dev.train.samples, initial_lora, lip_rng, cfg.lipschitz_samples);
  }

  ServerState server(initial);
  GalDecision& gal = server.gal;
  gal.mu = cfg.mu;
  std::vector<DeviceLayerScores> weighted;
  std::vector<DeviceRank> ranks;
  for (const auto& dev : devices) {
    const auto n_k = static_cast<double>(dev.n_k());
    weighted.push_back({n_k, dev.layer_scores});
    ranks.push_back({n_k, dev.lossless.r, dev.lossless.rank});
    gal.devices.push_back({dev.id, n_k, dev.lossless.r, dev.lossless.rank, dev.lossless.lipschitz, dev.layer_scores});
  }
  gal.global_scores = aggregate_layer_scores(weighted);
  gal.n_star = gal_count(ranks, initial.num_layers(), cfg.mu);
  if (flags.gal_selection) {
    gal.layers = select_gal(gal.global_scores, gal.n_star);
  } else {
    gal.layers.resize(initial.num_layers());
    std::iota(gal.layers.begin(), gal.layers.end(), 0);
  }

  const auto offsets = lora_offsets(initial);
  for (auto& dev : devices) {
    dev.mask = full_mask(dev.net);
    dev.ratios.assign(dev.net.num_layers(), std::nullopt);
    if (!flags.masking) continue;
    for (std::size_t l = 0; l < dev.net.num_layers(); ++l) {
      if (gal.contains(l)) continue;
      const LayerRatio ratio =
          layer_ratio_from_block(hessian_block(dev.lossless.hessian, offsets, l), dev.lossless.lipschitz);
      dev.ratios[l] = ratio;
      dev.mask[l] = build_mask(neuron_scores(*dev.momentum_fim, l), ratio.rho);
    }
  }

  std::vector<WeightedUpdate> starts;
  for (const auto& dev : devices)
    starts.push_back({static_cast<double>(dev.n_k()),
                      extract_payload(dev.net, gal.layers, static_cast<std::uint32_t>(dev.id))});
  fedavg_gal(server, starts);
  server.round = 0;
  return server;
}

LocalResult local_round(DeviceState& device, const GalPayload& global, std::size_t t,
                        const ExperimentConfig& cfg) {
  const ModeFlags flags = flags_for(cfg.mode);
  install_payload(device.net, global);

  const std::size_t count =
      flags.curriculum ? pace_count(cfg.pacing(), t, device.n_k()) : device.batches.size();
  LocalResult out;
  out.batches_used = select_batches(device.order, count);
  for (std::size_t it = 0; it < cfg.local_iterations; ++it)
    out.loss_sum += train_batches(device.net, device.train, device.batches, out.batches_used, cfg.lr,
                                  &device.mask, &out.samples_seen);

  std::vector<std::size_t> layers;
  for (const auto& l : global.layers) layers.push_back(l.index);
  out.update = extract_payload(device.net, layers, static_cast<std::uint32_t>(device.id));
  return out;
}

double accuracy(const LoraNetwork& net, const Dataset& data, std::size_t* correct) {
  std::size_t hits = 0;
  for (const auto& s : data.samples)
    if (argmax(forward(net, s.x).logits) == s.label) ++hits;
  if (correct) *correct = hits;
  return data.size() == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(data.size());
}

Evaluation evaluate(const ServerState& server, const std::vector<DeviceState>& devices) {
  std::size_t personal_hits = 0;
  std::size_t server_hits = 0;
  std::size_t total = 0;
  LoraNetwork server_view = server.reference;
  install_payload(server_view, server.global);
  for (const auto& dev : devices) {
    LoraNetwork personal = dev.net;
    install_payload(personal, server.global);
    std::size_t hits = 0;
    accuracy(personal, dev.test, &hits);
    personal_hits += hits;
    accuracy(server_view, dev.test, &hits);
    server_hits += hits;
    total += dev.test.size();
  }
  if (total == 0) return {};
  return {static_cast<double>(personal_hits) / static_cast<double>(total),
          static_cast<double>(server_hits) / static_cast<double>(total)};
}

RunResult run(const ExperimentConfig& cfg, const RoundObserver& observer) {
  cfg.validate();
  const Rng master(cfg.seed);
  Rng net_rng = master.derive(3);
  const LoraNetwork initial = LoraNetwork::create(cfg.shape(), net_rng, cfg.model.a_sigma);

  std::vector<DeviceState> devices = build_devices(cfg, initial);
  ServerState initialised = init_phase(devices, initial, cfg);
  RunResult result(std::move(initialised), std::move(devices));
  result.initial_frozen_digest = frozen_digest(initial);
  result.init_eval = evaluate(result.server, result.devices);
  if (observer) observer(0, result.server, result.devices);

  ServerState& server = result.server;
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto started = std::chrono::steady_clock::now();
    RoundReport report;
    report.round = t + 1;
    report.sampled = sample_devices(cfg.devices, cfg.sampled_per_round, cfg.seed, t);

    const auto broadcast = encode_payload(server.global);
    std::vector<WeightedUpdate> updates;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t k : report.sampled) {
      DeviceState& dev = result.devices[k];
      LocalResult local = local_round(dev, decode_payload(broadcast), t, cfg);
      loss_sum += local.loss_sum;
      seen += local.samples_seen;
      GalPayload uploaded = decode_payload(encode_payload(local.update));
      for (const auto& l : uploaded.layers)
        if (!server.gal.contains(l.index))
          throw NumericalError("device " + std::to_string(k) + " tried to upload non-GAL layer " +
                               std::to_string(l.index));
      updates.push_back({static_cast<double>(dev.n_k()), std::move(uploaded)});
    }
    fedavg_gal(server, updates);
    server.round = t + 1;

    const Evaluation eval = evaluate(server, result.devices);
    const CommBytes comm = comm_bytes(initial, server.gal.layers, report.sampled.size());
    report.train_loss = seen == 0 ? 0.0 : loss_sum / static_cast<double>(seen);
    report.weighted_test_acc = eval.weighted_test_acc;
    report.server_view_acc = eval.server_view_acc;
    report.bytes_down = comm.down;
    report.bytes_up = comm.up;
    if (cfg.record_wall_time)
      report.wall_ms = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                      std::chrono::steady_clock::now() - started)
                                                      .count());
    result.reports.push_back(std::move(report));
    if (observer) observer(t + 1, server, result.devices);
  }
  return result;
}

}  // namespace fibec
