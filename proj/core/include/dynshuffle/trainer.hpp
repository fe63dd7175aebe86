#pragma once

#include "dynshuffle/data.hpp"
#include "dynshuffle/models.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dynshuffle {

enum class LrSchedule { linear, step };

std::string to_string(LrSchedule s);
LrSchedule parse_lr_schedule(const std::string& s);

struct TrainConfig {
    float lr0 = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    float clip_norm = 1.0f;
    float lambda = 0.5f;
    std::size_t warmup_epochs = 5;     // λ ramp
    std::size_t lr_warmup_epochs = 0;  // LR ramp, off at desk scale
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    LrSchedule schedule = LrSchedule::linear;
    // Report the regularizer without adding it to the loss.
    bool orth_reg = true;
    bool augment = true;
    bool shuffle_data = true;
    bool prefetch = true;
    std::uint64_t seed = 1;

    void validate() const;
    std::map<std::string, std::string> entries() const;
    static TrainConfig from_entries(const std::map<std::string, std::string>& kv);
};

// ce + λ·Σ regs. Throws ConfigError for negative λ.
Tensor total_loss(const Tensor& ce, const std::vector<Tensor>& regs, float lambda_eff);

struct OptState {
    std::vector<std::vector<float>> velocity;
    std::size_t step = 0;
};

// g' = g + wd·w (decay-flagged parameters only); v ← m·v + g'; w ← w − lr·v.
void sgd_step(std::span<const NamedParam> params, OptState& state, float lr, float momentum, float weight_decay);
// Rescales all gradients jointly to norm max_norm when above it; returns the
// factor applied (1 when unchanged).
double clip_global_norm(std::span<const NamedParam> params, double max_norm);
double global_grad_norm(std::span<const NamedParam> params);

float lr_schedule(std::size_t step, std::size_t total_steps, float lr0, LrSchedule kind, std::size_t warmup_steps = 0);
float lambda_warmup(std::size_t epoch, std::size_t warmup_epochs, float lambda);

struct EpochStats {
    double ce = 0.0;
    double reg = 0.0;
    double accuracy = 0.0;
    std::vector<double> step_ce;
    std::vector<double> step_reg;
    double lr_last = 0.0;
};

struct EvalStats {
    double top1 = 0.0;
    double top5 = 0.0;
    double ce = 0.0;
    std::size_t count = 0;
};

struct MetricsRow {
    std::size_t epoch = 0;
    double lr = 0, lambda_eff = 0, train_ce = 0, train_reg = 0, train_acc = 0, test_top1 = 0, test_top5 = 0;
    double wall_seconds = 0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,lr,lambda_eff,train_ce,train_reg,train_acc,test_acc_top1,test_acc_top5,wall_seconds";
std::string format_metrics_row(const MetricsRow& row);

class Trainer {
public:
    Trainer(Model& model, TrainConfig cfg);

    EpochStats train_epoch(const RawDataset& data, const Normalization& norm, std::size_t epoch);
    const TrainConfig& config() const { return cfg_; }
    OptState& opt_state() { return opt_; }

private:
    Model& model_;
    TrainConfig cfg_;
    OptState opt_;
};

// BN in eval mode; dynamic shuffles always binarized.
EvalStats evaluate(Model& model, const RawDataset& data, const Normalization& norm, std::size_t batch_size = 256);

struct RunResult {
    std::vector<MetricsRow> rows;
    double best_top1 = 0.0;
};

// Trains for cfg.epochs, appending one row per epoch to <out>/metrics.csv and
// writing final.ckpt and best.ckpt (with manifests) into out.
RunResult run_training(Model& model, const TrainConfig& cfg, const RawDataset& train, const RawDataset& test,
                       const Normalization& norm, const std::filesystem::path& out,
                       const std::function<void(const MetricsRow&)>& on_epoch = {});

}  // namespace dynshuffle
