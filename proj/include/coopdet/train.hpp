#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coopdet/evaluation.hpp"
#include "coopdet/model.hpp"

namespace coopdet {

struct TrainConfig {
    int epochs = 20;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double epsilon = 1e-10;
    int batch_size = 2;
    std::vector<int> milestones{10, 50};
    double gamma = 0.1;
    std::uint64_t seed = 0;

    bool augment = true;
    bool aug_flip = true;
    double aug_rotation = kPi / 4.0;
    double aug_scale_min = 0.95;
    double aug_scale_max = 1.05;

    double val_fraction = 0.0;  // tail share of the dataset held out for validation

    void validate() const;
};

// eta0 * gamma^(milestones passed); an epoch passes milestone m when
// epoch >= m.
double multistep_lr(int epoch, const TrainConfig& config);

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;
};

AdamState init_adam_state(const std::vector<std::pair<std::string, Tensor*>>& params);

// Bias-corrected Adam with decoupled weight decay; deterministic given
// identical inputs.
void adam_step(std::vector<std::pair<std::string, Tensor*>>& params,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               const TrainConfig& config);

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    LossBreakdown mean_loss;
    std::optional<EvalReport> val;
};

struct TrainHistory {
    std::vector<EpochLog> epochs;
    std::vector<double> first_losses;  // per-step totals of the first epoch
};

// Full loop: shuffle, augment, forward, loss, backward, Adam, scheduler.
// A non-finite loss aborts with a diagnostic naming the offending term.
TrainHistory train_toy(Model& model, const std::vector<Scene>& dataset, const TrainConfig& config,
                       const EvalConfig& eval_config);

void save_checkpoint(const std::string& path, const Model& model, const AdamState& state, int epoch);

struct LoadedCheckpoint {
    Model model;
    AdamState state;
    int epoch = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

std::uint64_t config_fingerprint(const ModelConfig& cfg);

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

// Umbrella config file: {"model": {...}, "train": {...}, "eval": {...},
// "scene": {...}, "n_scenes": N}; every section optional.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    SceneConfig scene;
    std::int64_t n_scenes = 10;
};

RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace coopdet
