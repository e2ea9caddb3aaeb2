#pragma once

// Adam training of registration models and per-pair instance optimization.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icreg/data.hpp"
#include "icreg/metrics.hpp"
#include "icreg/nets.hpp"
#include "icreg/params.hpp"

namespace icreg::training {

using ad::Tensor;

/// Config file schema version accepted by TrainConfig::from_json.
inline constexpr int kConfigVersion = 1;

struct TrainConfig {
    nlohmann::json model;    // descriptor for nets::build_model
    nlohmann::json dataset;  // directory path string, or {"generator", "count", "size", "seed"}
    double lambda = 5.0;
    double sigma = 5.0;  // LNCC window, pixels
    double learning_rate = 1e-4;
    std::size_t batch = 8;
    std::size_t iterations = 100;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    std::size_t log_every = 50;
    std::size_t eval_pairs = 4;

    /// Throws std::invalid_argument on schema or range errors.
    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;
};

/// Resolves the dataset entry of a config (loads or generates it).
data::Dataset resolve_dataset(const nlohmann::json& spec);

struct LossResult {
    Tensor value;
    double similarity = 0.0;   // -lncc
    double regularizer = 0.0;  // sum of bending energies, before lambda
    nets::ModelOutput output;
};

/// -lncc(A o T, B, sigma) + lambda * sum_svf_steps bending_energy(v).
LossResult loss(const nets::RegistrationModel& model, const ParamBinding& params, const Tensor& a, const Tensor& b,
                double lambda, double sigma);

using GradMap = std::map<std::string, std::vector<double>>;

/// Standard Adam with bias correction. Every parameter of the store must have
/// a gradient of matching size; throws std::invalid_argument otherwise.
void adam_step(ParamStore& store, const GradMap& grads, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

struct BatchStep {
    double similarity = 0.0, regularizer = 0.0, loss = 0.0;  // means over the batch
    GradMap grads;                                          // mean over the batch
};

/// Builds one tape per pair and averages gradients.
BatchStep batch_gradients(const nets::RegistrationModel& model, const ParamStore& store,
                          const std::vector<std::pair<const data::Image*, const data::Image*>>& pairs,
                          double lambda, double sigma);

/// A training run stopped at `iteration`.
class TrainingFailed : public std::runtime_error {
  public:
    TrainingFailed(std::size_t iteration, const std::string& what)
        : std::runtime_error("iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
    std::size_t iteration() const { return iteration_; }

  private:
    std::size_t iteration_;
};

/// Raised when the training loss stops being finite.
class NonFiniteLoss : public TrainingFailed {
  public:
    explicit NonFiniteLoss(std::size_t iteration) : TrainingFailed(iteration, "non-finite loss") {}
};

/// Evaluation of a model on a set of pairs (swap composition, Jacobian, overlap).
metrics::MetricsReport evaluate_pairs(const nets::RegistrationModel& model, const ParamStore& store,
                                      const data::Dataset& dataset,
                                      const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double lambda,
                                      double sigma);

struct IterationRecord {
    double similarity = 0.0, regularizer = 0.0, loss = 0.0;
};

struct TrainResult {
    ParamStore store;
    std::vector<IterationRecord> history;  // one entry per iteration
    std::vector<std::pair<std::size_t, metrics::MetricsReport>> logs;
};

/// Runs the full loop on an already resolved dataset. When out_dir is set,
/// writes model.json, config.json, metrics.csv and ckpt_*.icckpt into it.
/// Throws NonFiniteLoss on divergence and TrainingFailed when a step raises.
TrainResult train(const TrainConfig& cfg, const data::Dataset& dataset,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::string& run_id = "run");

/// Convenience overload resolving cfg.dataset.
TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Pairs used for periodic evaluation, drawn from a sampler independent of training.
std::vector<std::pair<std::size_t, std::size_t>> eval_pairs(std::size_t count, std::size_t n, std::uint64_t seed);

struct InstanceResult {
    lie::Transform transform;
    ParamStore store;
    double loss_before = 0.0;
    double loss_after = 0.0;
};

/// Continues Adam (fresh moments) on the single pair (A, B).
InstanceResult instance_optimize(const ParamStore& trained, const nets::RegistrationModel& model, const Tensor& a,
                                 const Tensor& b, std::size_t steps = 50, double lr = 1e-4, double lambda = 5.0,
                                 double sigma = 5.0);

}  // namespace icreg::training
