#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fibec/config.hpp"
#include "fibec/curriculum.hpp"
#include "fibec/fisher.hpp"
#include "fibec/gal.hpp"
#include "fibec/lora.hpp"
#include "fibec/sparse_mask.hpp"

namespace fibec {

/// LoRA parameters of a subset of layers, as shipped between server and devices.
struct GalPayload {
  struct Layer {
    std::uint32_t index = 0;
    Matrix a;
    Matrix b;
  };
  std::uint32_t device = 0;  // sender; 0xffffffff for the server
  std::vector<Layer> layers;

  std::size_t param_count() const;
};

inline constexpr std::uint32_t kServerId = 0xffffffffu;

// "FBGP", u32 version, u32 sender, u32 layer count, per layer u32 index, u32 a rows, a cols,
// b rows, b cols, followed by A then B as f64.
std::vector<unsigned char> encode_payload(const GalPayload& payload);
GalPayload decode_payload(std::span<const unsigned char> bytes);

GalPayload extract_payload(const LoraNetwork& net, std::span<const std::size_t> layers, std::uint32_t sender);
void install_payload(LoraNetwork& net, const GalPayload& payload);

struct DeviceState {
  DeviceState(std::size_t id_, LoraNetwork net_, Dataset train_, Dataset test_)
      : id(id_), net(std::move(net_)), train(std::move(train_)), test(std::move(test_)) {}

  std::size_t id = 0;
  LoraNetwork net;
  Dataset train;
  Dataset test;
  std::vector<std::vector<std::size_t>> batches;  // indices into train, consecutive chunks
  std::vector<BatchScore> batch_scores;
  std::vector<std::size_t> order;                 // curriculum order over batches
  NeuronMask mask;                                // nullopt for GAL layers
  std::vector<std::optional<LayerRatio>> ratios;  // set for masked non-GAL layers
  std::optional<FimDiag> momentum_fim;
  Vector layer_scores;
  LosslessAnalysis lossless;

  std::size_t n_k() const noexcept { return train.size(); }
};

struct ServerState {
  explicit ServerState(LoraNetwork reference_) : reference(std::move(reference_)) {}

  GalDecision gal;
  GalPayload global;  // current aggregated GAL parameters
  std::size_t round = 0;
  LoraNetwork reference;  // initial network, used for the server-view evaluation
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  double train_loss = 0.0;
  double weighted_test_acc = 0.0;
  double server_view_acc = 0.0;
  std::uint64_t bytes_down = 0;
  std::uint64_t bytes_up = 0;
  std::uint64_t wall_ms = 0;
};

struct CommBytes {
  std::uint64_t down = 0;
  std::uint64_t up = 0;
};

/// Each direction: sampled * sum over GAL layers of (|A| + |B|) * 8 bytes.
CommBytes comm_bytes(const LoraNetwork& net, std::span<const std::size_t> gal_layers, std::size_t sampled);

/// Uniform without replacement, ascending ids. Deterministic in (seed, round).
std::vector<std::size_t> sample_devices(std::size_t num_devices, std::size_t count, std::uint64_t seed,
                                        std::size_t round);

/// Builds device shards, splits and batches from the config's data spec; every device starts
/// from a copy of `initial`.
std::vector<DeviceState> build_devices(const ExperimentConfig& cfg, const LoraNetwork& initial);

/// Scoring, warmup, GAL selection and masks. Returns the server with the weighted mean of the
/// devices' post-warmup GAL parameters.
ServerState init_phase(std::vector<DeviceState>& devices, const LoraNetwork& initial,
                       const ExperimentConfig& cfg);

struct LocalResult {
  GalPayload update;
  double loss_sum = 0.0;
  std::size_t samples_seen = 0;
  std::vector<std::size_t> batches_used;
};

/// Loads the broadcast GAL parameters, then runs local_iterations passes of SGD over the batches
/// the curriculum allows at round t (0-based). Only GAL layers and masked rows move.
LocalResult local_round(DeviceState& device, const GalPayload& global, std::size_t t,
                        const ExperimentConfig& cfg);

// One SGD epoch over the listed batches; gradients are summed over each batch.
double train_batches(LoraNetwork& net, const Dataset& train,
                     const std::vector<std::vector<std::size_t>>& batches,
                     std::span<const std::size_t> which, double lr, const NeuronMask* mask,
                     std::size_t* samples_seen = nullptr);

struct WeightedUpdate {
  double n_k = 0.0;
  GalPayload params;
};

/// Server GAL params <- sum_k (n_k / m) P_k over the participants, m = sum of their n_k.
void fedavg_gal(ServerState& server, std::span<const WeightedUpdate> updates);

double accuracy(const LoraNetwork& net, const Dataset& data, std::size_t* correct = nullptr);

struct Evaluation {
  double weighted_test_acc = 0.0;
  double server_view_acc = 0.0;
};

Evaluation evaluate(const ServerState& server, const std::vector<DeviceState>& devices);

struct RunResult {
  RunResult(ServerState server_, std::vector<DeviceState> devices_)
      : server(std::move(server_)), devices(std::move(devices_)) {}

  ServerState server;
  std::vector<DeviceState> devices;
  std::vector<RoundReport> reports;
  Evaluation init_eval;
  std::string initial_frozen_digest;
};

// Called after init (round 0) and after every aggregation.
using RoundObserver = std::function<void(std::size_t round, const ServerState&, const std::vector<DeviceState>&)>;

/// Full protocol: data, init phase, then cfg.rounds tuning rounds.
RunResult run(const ExperimentConfig& cfg, const RoundObserver& observer = {});

}  // namespace fibec
