#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dseg/encoder.hpp"
#include "dseg/tensor.hpp"
#include "dseg/textbank.hpp"

namespace dseg {

enum class SettingKind { Transductive, AnnotationFree };

// Transductive: pixel annotations exist for the seen classes only.
// AnnotationFree: no annotations at all; every label is model-generated.
struct Setting {
    SettingKind kind = SettingKind::Transductive;
    std::vector<int> seen;  // used only by Transductive

    void validate(int num_classes) const;  // ConfigError
    bool is_seen(int cls) const;
};

struct TrainConfig {
    int guided_iters = 60;  // first phase, labels from the frozen zero-shot model
    int self_iters = 540;   // second phase, labels from the model itself
    double lr = 0.03;  // normalization makes updates tangent: large steps only
                       // inflate feature norms, which stalls direction learning
    double momentum = 0.9;
    int batch_size = 2;
    std::uint64_t seed = 0;
    Setting setting;
    double tau = 0.07;            // temperature of the target's cosine logits
    double share_floor = 0.2;     // halt when a share falls below floor x start
    int drift_interval = 25;      // self-phase iterations between drift checks
    double participation_bar = 0.01;  // classes below this start share are exempt
    double share_ema = 0.5;       // smoothing of the probe share estimate
    int probe_count = 8;          // images held out for probing and snapshots
    int probe_interval = 25;      // iterations between snapshot evaluations

    // The paper trains the first tenth of the budget with guided labels.
    static TrainConfig with_total(int total_iters);
    void validate(int num_classes) const;  // ConfigError
};

// Trainable conv stack ending in bank.dim channels, classified by the frozen
// text rows through temperature-scaled cosine similarity. Only the backbone
// and, when present, the background row ever receive gradient.
struct TargetModel {
    ToyBackbone backbone;
    ClassifierBank bank;
    double tau = 0.07;
};

// He-initialized conv stack 3 -> channels... -> bank dim: a same-padding 3x3
// first, then 1x1 layers only.
TargetModel make_target_model(const std::vector<int>& hidden_channels,
                              const ClassifierBank& bank, double tau,
                              std::uint64_t seed);

void save_target_model(const TargetModel& model, const std::string& path);
TargetModel load_target_model(const std::string& path);

// Per-pixel cosine logits of the target net at image resolution. The per-pixel
// norm is smoothed (sqrt(|f|^2 + 1e-18)), so untrained nets never throw.
Tensor4 target_logits(const TargetModel& model, const Tensor4& images);
Segmentation segment_target(const TargetModel& model, const Tensor4& image);

// The frozen zero-shot predictor driving guided learning.
struct FrozenPredictor {
    ToyBackbone backbone;
    DenseHead head;
    double tau = 0.07;
};

LabelMap predict_labels(const FrozenPredictor& teacher, const ClassifierBank& bank,
                        const Tensor4& images);

// Pseudo-label composition. Transductive keeps ground truth wherever it names
// a seen class and fills everything else (unseen or ignored) from the dense
// prediction; AnnotationFree passes the dense prediction through.
LabelMap compose_pseudo_labels(const LabelMap* gt, const LabelMap& dense_pred,
                               const Setting& setting);

enum class Phase { Guided, SelfTrain, Halted };
std::string phase_name(Phase phase);

struct LogRow {
    int iter = 0;
    Phase phase = Phase::Guided;
    double loss = 0.0;
    bool probed = false;       // probe columns valid only when true
    double probe_miou = 0.0;
    std::vector<double> shares;  // per-class predicted-pixel share on the probe
};

struct TrainState {
    int iter = 0;
    Phase phase = Phase::Guided;
    TargetModel model;
    std::vector<Tensor4> vel_weight;          // per backbone layer
    std::vector<std::vector<double>> vel_bias;
    std::vector<double> vel_background;       // background row, when trainable
    std::vector<double> start_share;          // shares at self-training start
    std::vector<double> share_now;            // EMA of probe shares
    TargetModel best_model;
    double best_metric = -1.0;
    int best_iter = -1;
    std::vector<LogRow> log;
};

TrainState make_train_state(const TargetModel& model);

// One optimization step against the given composed labels; returns the loss.
// Text rows other than the background stay bit-identical.
double train_step(TrainState& state, const Tensor4& images, const LabelMap& labels,
                  const TrainConfig& cfg);

// Guided phase: labels must already be composed from the frozen predictor.
double guided_step(TrainState& state, const Tensor4& images, const LabelMap& labels,
                   const TrainConfig& cfg);

// Self phase: labels are the model's own argmax (recomputed, no gradient),
// still overridden by seen-class ground truth in the Transductive setting.
double self_step(TrainState& state, const Tensor4& images, const LabelMap* gt,
                 const TrainConfig& cfg);

// The model's own argmax labels at image resolution.
LabelMap self_labels(const TargetModel& model, const Tensor4& images);

// Per-class fraction of predicted pixels over a set of probe images.
std::vector<double> predicted_shares(const TargetModel& model,
                                     const std::vector<Tensor4>& probe);

// True when any guarded class collapsed below share_floor x its start share.
bool drift_halt(const std::vector<double>& start, const std::vector<double>& now,
                double share_floor, double participation_bar);

struct TrainResult {
    TargetModel model;          // best snapshot by probe metric
    std::vector<LogRow> log;
    Phase final_phase = Phase::Guided;
    bool halted = false;
    double guided_best = 0.0;   // best probe metric seen during the guided phase
    double final_best = 0.0;    // best probe metric over the whole run
    std::vector<std::string> warnings;
};

// Full training loop: guided phase, then self-training with the drift guard.
// gts must align with images; in the AnnotationFree setting their content is
// never read by the training path (only by external evaluation).
TrainResult run(const TrainConfig& cfg, const std::vector<Tensor4>& images,
                const std::vector<LabelMap>& gts, const FrozenPredictor& teacher,
                const ClassifierBank& bank);

// CSV log: iter, phase, loss, probe_miou, share_<c>...; probe columns are
// blank on iterations without a probe evaluation.
void write_train_log_csv(const std::vector<LogRow>& log, int num_classes,
                         const std::string& path);

}  // namespace dseg
