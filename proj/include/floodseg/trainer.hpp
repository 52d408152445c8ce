#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "floodseg/data.hpp"
#include "floodseg/metrics.hpp"
#include "floodseg/model.hpp"
#include "floodseg/tensor.hpp"

namespace floodseg {

struct TrainConfig {
    std::int64_t epochs = 50;
    std::int64_t max_steps = 0;  // optional cap on optimizer steps; 0 = epochs only
    std::int64_t batch_size = 4;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double w_bce = 1.0;
    double w_iou = 1.0;
    // Aux-head loss weights by fusion scale; the head nearest the output
    // resolution carries the most weight.
    std::array<double, 3> deep_supervision{0.2, 0.3, 0.5};
    std::int64_t eval_every = 50;
    std::string checkpoint_path;
    std::uint64_t seed = 0;
    double threshold = 0.5;

    void validate() const;
};

struct TrainState {
    std::int64_t step = 0;
    std::vector<Tensor> params;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    double best_miou = -1.0;
    std::mt19937_64 rng;
};

TrainState init_state(const Model& model, const TrainConfig& cfg);

struct HistoryEntry {
    std::int64_t step = 0;
    double loss = 0.0;
    double miou = 0.0;
    double pa = 0.0;
};

struct FitResult {
    TrainState state;
    std::vector<HistoryEntry> history;
};

/// Composite segmentation loss: w_bce*BCE + w_iou*softIoU on the main logits,
/// plus the same form per aux head (bilinearly upsampled to full resolution)
/// scaled by its deep-supervision weight.
Tensor segmentation_loss(const Tensor& logits, std::span<const Tensor> aux_logits,
                         const BinaryMask& truth, const TrainConfig& cfg);

/// Bias-corrected Adam update over state.params; increments the step counter.
void adam_step(TrainState& state, const std::vector<std::vector<double>>& grads,
               const TrainConfig& cfg);

/// Runs metrics for an arbitrary predictor; lets tests swap in oracle stubs.
FloodReport evaluate_with(const std::function<BinaryMask(const Sample&)>& predict,
                          std::span<const Sample> test);

/// forward -> sigmoid -> binarize -> metrics over the test samples. Pure:
/// parameters are untouched.
FloodReport evaluate(const Model& model, std::span<const Sample> test, double threshold = 0.5);

/// Epoch loop over the shuffled train split with periodic evaluation; saves a
/// checkpoint whenever test mIoU improves (with a final fallback save if no
/// evaluation ever ran and a path is set).
FitResult fit(Model& model, std::span<const Sample> train, std::span<const Sample> test,
              const TrainConfig& cfg);

/// Same, continuing from a previous state (step numbers keep increasing).
FitResult fit(Model& model, std::span<const Sample> train, std::span<const Sample> test,
              const TrainConfig& cfg, TrainState state);

/// Loads both splits from the manifest at the model's input size.
FitResult fit(Model& model, const DatasetManifest& manifest, const TrainConfig& cfg);

void write_history(std::ostream& out, std::span<const HistoryEntry> history);
void write_history_file(const std::string& path, std::span<const HistoryEntry> history);

}  // namespace floodseg
