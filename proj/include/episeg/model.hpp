#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "episeg/image.hpp"
#include "episeg/sampler.hpp"

namespace episeg {

struct OptimizerConfig {
    double beta1 = 0.99;
    double beta2 = 0.99;
    double learning_rate = 0.0005;
    double epsilon_hat = 1e-8;
    int plateau_patience = 5;  // 5 for the IHC profile, 10 for H&E
    double lr_halving_factor = 0.5;

    void validate() const;
};

struct AdamState {
    std::vector<double> m, v;
    long t = 0;
};

// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; bias-corrected with the
// incremented step count; theta <- theta - lr * m^ / (sqrt(v^) + eps).
void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state,
               const OptimizerConfig& cfg, double lr);
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      AdamState& state, const OptimizerConfig& cfg) {
    adam_step(params, grads, state, cfg, cfg.learning_rate);
}

// Halves the rate after `patience` consecutive epochs without strict
// improvement; the counter resets on improvement and after each halving.
class PlateauScheduler {
public:
    PlateauScheduler(double lr0, int patience, double factor = 0.5);
    double observe(double val_loss);  // returns the rate in effect afterwards
    double lr() const { return lr_; }

private:
    double lr_;
    int patience_;
    double factor_;
    double best_ = std::numeric_limits<double>::infinity();
    int stale_ = 0;
};

// Pure trace of the rule over a loss history: lr in effect after each epoch.
std::vector<double> plateau_schedule(const std::vector<double>& losses,
                                     const OptimizerConfig& cfg);

// L = (1/N) sum_x w(x) (-log softmax(logits(x))[label(x)]);
// gradient = (1/N) w (softmax - onehot). logits: 2-channel raster.
struct LossResult {
    double value = 0;
    ImageD grad_logits;
};
LossResult weighted_ce_loss(const ImageD& logits, const ImageU8& labels, const ImageF& weights);

// Fixed two-level U-Net used to exercise the training machinery at desk
// scale: [conv3x3(F)+ReLU]x2 -> maxpool2 -> [conv3x3(2F)+ReLU]x2 ->
// nearest x2 -> concat skip -> [conv3x3(F)+ReLU]x2 -> conv1x1(2 logits).
// All convolutions zero-padded "same"; input intensities scaled to [0,1].
class MiniSegmenter {
public:
    explicit MiniSegmenter(int base_filters = 8, uint64_t init_seed = 7);

    int base_filters() const { return f_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    size_t param_count() const { return params_.size(); }

    struct BlockInfo {
        std::string name;
        size_t offset;
        size_t size;
    };
    const std::vector<BlockInfo>& blocks() const { return blocks_; }

    void save(const std::string& path) const;  // json header + float32 blob
    static MiniSegmenter load(const std::string& path);

private:
    int f_;
    std::vector<double> params_;
    std::vector<BlockInfo> blocks_;
    friend struct MiniNetOps;
};

struct MiniForward {
    ImageD logits;
    std::shared_ptr<struct MiniActivations> acts;
};

// Input spatial dims must be even (one pooling level).
MiniForward mini_forward(const MiniSegmenter& net, const ImageU8& image);
std::vector<double> mini_backward(const MiniSegmenter& net, const MiniForward& fwd,
                                  const ImageD& loss_grad_logits);

// Per-pixel argmax over the two logits; ties map to class 0.
ImageU8 predict_mask(const MiniSegmenter& net, const ImageU8& image);

// Topology/parameter calculator for the paper-scale architectures. Filter
// width doubles per level, capped at eight times the base width; blocks are
// conv3x3 pairs with a residual 1x1 projection where channels change; the
// decoder upsamples (no parameters) and concatenates the skip.
struct UNetLevelInfo {
    int depth = 0;
    int spatial = 0;
    int filters = 0;
    long long encoder_params = 0;
    long long decoder_params = 0;
};
struct UNetTopology {
    int levels = 0;
    int base_filters = 0;
    int input_size = 0;
    std::vector<UNetLevelInfo> per_level;
    long long total_params = 0;
};
UNetTopology unet_topology(int levels, int base_filters, int input_size);

struct TrainConfig {
    OptimizerConfig opt;
    int epochs = 10;
    int steps_per_epoch = 50;
    uint64_t seed = 1;
};

struct EpochLog {
    int epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0;  // rate in effect during this epoch
};

using PatchSource = std::function<PatchBatch()>;

struct TrainResult {
    std::vector<EpochLog> log;
};

// sample -> forward -> weighted CE -> backward -> adam, batch size 1;
// validation at the end of each epoch feeds the plateau scheduler.
TrainResult train(MiniSegmenter& net, const PatchSource& train_stream,
                  const std::vector<PatchBatch>& val_set, const TrainConfig& cfg);

// epoch,train_loss,val_loss,lr
void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path);

}  // namespace episeg
