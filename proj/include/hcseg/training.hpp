#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hcseg/dataset.hpp"
#include "hcseg/losses.hpp"
#include "hcseg/metrics.hpp"
#include "hcseg/model.hpp"
#include "json.hpp"

namespace hcseg {

struct OptimizerConfig {
    double lr = 2e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One AdamW update with bias correction; t is the 1-based step count.
// p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::size_t t, double lr, double weight_decay, double beta1, double beta2, double eps);

class AdamW {
public:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };

    explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update to every parameter using its current gradient.
    // Parameters flagged decay = false skip weight decay.
    void step(ParameterSet& params, double lr);

    std::size_t steps() const { return steps_; }
    const OptimizerConfig& config() const { return cfg_; }
    std::map<std::string, Moments>& state() { return state_; }
    const std::map<std::string, Moments>& state() const { return state_; }
    void set_steps(std::size_t n) { steps_ = n; }

private:
    OptimizerConfig cfg_;
    std::size_t steps_ = 0;
    std::map<std::string, Moments> state_;
};

struct LossBreakdown {
    Tensor total;
    double mask_ce = 0.0;
    double dice = 0.0;
    double cls = 0.0;
    double reg = 0.0;
    double pixel = 0.0;
    std::optional<MatchResult> match;
};

// Mask-query: λ_ce·BCE + λ_dice·dice over matched pairs on the full-resolution
// decoded masks, plus λ_cls·CE and λ_reg·Σ|s|. Per-pixel: λ_pixel·CE on the
// decoded class probabilities plus λ_reg·Σ|s|.
LossBreakdown total_loss(const ModelOutput& out, const LabelMap& semantic, const LabelMap& instance,
                         std::span<const Tensor> scales, const LossWeights& weights);

// Scales all gradients so their global l2 norm is at most max_norm; returns
// the norm before scaling.
double clip_grad_norm(ParameterSet& params, double max_norm);

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 4;
    std::size_t log_every = 50;
    std::size_t eval_every = 0; // 0 = only at the end
    double decay_at = 0.9;      // fraction of steps after which lr is multiplied by decay_factor
    double decay_factor = 0.1;
    std::size_t warmup_steps = 0; // linear lr ramp from lr/warmup_steps to lr
    double grad_clip = 0.0;       // global gradient-norm limit, 0 = off
    bool hflip = true;          // random horizontal flips
    std::uint64_t seed = 0;
    LossWeights loss;
    OptimizerConfig optimizer;

    double lr_at(std::size_t step) const;
};

struct LevelReport {
    int level = 0;
    double ue = 0.0;          // min-side variant
    double ue_leak_all = 0.0;
    double entropy = 0.0;     // mean row entropy, nats
};

struct EvalReport {
    std::size_t images = 0;
    MiouResult semantic;
    std::optional<PqResult> panoptic;
    // same metrics with hardened assignments in the decoder
    MiouResult semantic_hard;
    std::optional<PqResult> panoptic_hard;
    std::vector<LevelReport> levels; // fine → coarse
};

// Undersegmentation errors are measured against the instance maps (background
// is one segment).
EvalReport evaluate(const Model& model, std::span<const Sample> samples);
nlohmann::ordered_json to_json(const EvalReport& report, const std::vector<std::string>& class_names = {});

struct TrainResult {
    std::vector<double> losses; // one per optimizer step
    std::vector<nlohmann::ordered_json> log;
};

// Optional sink receives each JSON log record as it is produced.
using LogSink = std::function<void(const nlohmann::ordered_json&)>;

TrainResult train(Model& model, AdamW& optimizer, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainConfig& cfg, const LogSink& sink = {});

// Checkpoint: JSON with named parameter tensors, optimizer moments and a hash
// of the serialized config.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW& optimizer,
                     const nlohmann::ordered_json& config);
struct Checkpoint {
    nlohmann::ordered_json config;
    std::uint64_t config_hash = 0;
};
// Restores parameters (and moments when optimizer != nullptr). Shapes and
// names must match the model exactly.
Checkpoint load_checkpoint(const std::filesystem::path& path, Model& model, AdamW* optimizer);
// Reads only the embedded config.
nlohmann::ordered_json read_checkpoint_config(const std::filesystem::path& path);

Sample hflip(const Sample& sample);

} // namespace hcseg
