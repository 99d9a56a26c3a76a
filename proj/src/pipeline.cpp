#include "dseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "dseg/error.hpp"
#include "dseg/metrics.hpp"
#include "dseg/ops.hpp"
#include "dseg/rng.hpp"
#include "dseg/serialize.hpp"

namespace dseg {

namespace {

// Smoothing added under the square root of the per-pixel feature norm, so an
// untrained net with a (near) zero feature vector still trains instead of
// throwing. Negligible against any feature norm above 1e-6.
constexpr double kNormSmoothing = 1e-18;

struct ForwardCache {
    std::vector<Tensor4> inputs;   // input to each conv layer
    std::vector<Tensor4> pre_act;  // conv output before the ReLU
    Tensor4 feats;                 // last conv output, no activation
    Tensor4 unit_feats;            // per-pixel features scaled by inv_norm
    Tensor4 inv_norm;              // (n, 1, h, w)
    Tensor4 logits;                // (n, K, h, w)
};

void check_model(const TargetModel& model) {
    if (model.backbone.layers.empty())
        throw ConfigError("target model: backbone has no layers");
    if (model.backbone.out_channels() != model.bank.dim())
        throw ConfigError("target model: backbone output channels must equal the bank dim");
    if (!(model.tau > 0)) throw ConfigError("target model: tau must be positive");
    if (model.bank.rows() < 2) throw ConfigError("target model: need at least two classes");
}

ForwardCache target_forward(const TargetModel& model, const Tensor4& images) {
    check_model(model);
    ForwardCache cache;
    Tensor4 act = images;
    const std::size_t layer_count = model.backbone.layers.size();
    for (std::size_t i = 0; i < layer_count; ++i) {
        cache.inputs.push_back(act);
        Tensor4 pre = conv2d(act, model.backbone.layers[i]);
        if (i + 1 < layer_count) act = relu(pre);
        cache.pre_act.push_back(std::move(pre));
    }
    cache.feats = cache.pre_act.back();

    const Tensor4& f = cache.feats;
    cache.unit_feats = Tensor4(f.n, f.c, f.h, f.w);
    cache.inv_norm = Tensor4(f.n, 1, f.h, f.w);
    const std::int64_t pixels = static_cast<std::int64_t>(f.n) * f.h * f.w;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < pixels; ++p) {
        const int in = static_cast<int>(p / (f.h * f.w));
        const int iy = static_cast<int>((p / f.w) % f.h);
        const int ix = static_cast<int>(p % f.w);
        double sq = 0.0;
        for (int c = 0; c < f.c; ++c) {
            const double v = f.at(in, c, iy, ix);
            sq += v * v;
        }
        const double inv = 1.0 / std::sqrt(sq + kNormSmoothing);
        cache.inv_norm.at(in, 0, iy, ix) = inv;
        for (int c = 0; c < f.c; ++c)
            cache.unit_feats.at(in, c, iy, ix) = f.at(in, c, iy, ix) * inv;
    }

    const Matrix& rows = model.bank.embeddings;
    cache.logits = Tensor4(f.n, rows.rows, f.h, f.w);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < pixels; ++p) {
        const int in = static_cast<int>(p / (f.h * f.w));
        const int iy = static_cast<int>((p / f.w) % f.h);
        const int ix = static_cast<int>(p % f.w);
        for (int k = 0; k < rows.rows; ++k) {
            double dot = 0.0;
            for (int c = 0; c < f.c; ++c)
                dot += rows.at(k, c) * cache.unit_feats.at(in, c, iy, ix);
            cache.logits.at(in, k, iy, ix) = dot / model.tau;
        }
    }
    return cache;
}

std::string target_meta_json(const TargetModel& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (const ConvParams& conv : model.backbone.layers)
        layers.push_back(nlohmann::json{{"stride", conv.stride},
                                        {"dilation", conv.dilation},
                                        {"padding", conv.padding}});
    nlohmann::json meta;
    meta["layers"] = layers;
    meta["tau"] = model.tau;
    meta["names"] = model.bank.names;
    meta["has_background"] = model.bank.has_background;
    return meta.dump();
}

}  // namespace

void Setting::validate(int num_classes) const {
    if (kind == SettingKind::AnnotationFree) {
        if (!seen.empty())
            throw ConfigError("setting: the annotation-free setting takes no seen set");
        return;
    }
    if (seen.empty()) throw ConfigError("setting: transductive seen set is empty");
    std::set<int> unique;
    for (int cls : seen) {
        if (cls < 0 || cls >= num_classes)
            throw ConfigError("setting: seen class " + std::to_string(cls) + " out of range");
        if (!unique.insert(cls).second)
            throw ConfigError("setting: seen class " + std::to_string(cls) + " repeated");
    }
    if (static_cast<int>(unique.size()) >= num_classes)
        throw ConfigError("setting: seen classes must be a strict subset, something must stay unseen");
}

bool Setting::is_seen(int cls) const {
    return std::find(seen.begin(), seen.end(), cls) != seen.end();
}

TrainConfig TrainConfig::with_total(int total_iters) {
    TrainConfig cfg;
    cfg.guided_iters = std::max(1, total_iters / 10);
    cfg.self_iters = std::max(0, total_iters - cfg.guided_iters);
    return cfg;
}

void TrainConfig::validate(int num_classes) const {
    if (guided_iters < 1) throw ConfigError("config: guided_iters must be >= 1");
    if (self_iters < 0) throw ConfigError("config: self_iters must be >= 0");
    if (!(lr > 0)) throw ConfigError("config: lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("config: momentum must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (!(tau > 0)) throw ConfigError("config: tau must be positive");
    if (!(share_floor > 0) || share_floor >= 1)
        throw ConfigError("config: share_floor must lie in (0,1)");
    if (drift_interval < 1) throw ConfigError("config: drift_interval must be >= 1");
    if (participation_bar < 0 || participation_bar >= 1)
        throw ConfigError("config: participation_bar must lie in [0,1)");
    if (!(share_ema > 0) || share_ema > 1)
        throw ConfigError("config: share_ema must lie in (0,1]");
    if (probe_count < 1) throw ConfigError("config: probe_count must be >= 1");
    if (probe_interval < 1) throw ConfigError("config: probe_interval must be >= 1");
    setting.validate(num_classes);
}

TargetModel make_target_model(const std::vector<int>& hidden_channels,
                              const ClassifierBank& bank, double tau,
                              std::uint64_t seed) {
    if (bank.rows() < 2) throw ConfigError("target model: need at least two classes");
    for (int c : hidden_channels)
        if (c < 1) throw ConfigError("target model: channel counts must be positive");
    TargetModel model;
    model.bank = bank;
    model.tau = tau;

    // The first hidden layer is a same-padding 3x3 that averages away local
    // color jitter; every later layer is 1x1, which keeps the stack cheap at
    // full resolution and easy to optimize against frozen classifier rows.
    std::vector<int> widths = {3};
    widths.insert(widths.end(), hidden_channels.begin(), hidden_channels.end());
    widths.push_back(bank.dim());
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const int k = i == 0 ? 3 : 1;
        ConvParams conv;
        conv.weight = Tensor4(widths[i + 1], widths[i], k, k);
        conv.bias.assign(widths[i + 1], 0.0);
        conv.padding = i == 0 ? 1 : 0;
        Rng rng(hash_combine(hash_combine(seed, std::string_view("target")),
                             static_cast<std::uint64_t>(i)));
        const double stddev = std::sqrt(2.0 / (widths[i] * k * k));
        for (double& v : conv.weight.data) v = stddev * rng.normal();
        model.backbone.layers.push_back(std::move(conv));
    }
    check_model(model);
    return model;
}

void save_target_model(const TargetModel& model, const std::string& path) {
    check_model(model);
    Container box;
    box.kind = "target";
    box.meta_json = target_meta_json(model);
    for (std::size_t i = 0; i < model.backbone.layers.size(); ++i) {
        const ConvParams& conv = model.backbone.layers[i];
        const std::string stem = "backbone." + std::to_string(i);
        NamedTensor w{stem + ".weight",
                      {static_cast<std::uint64_t>(conv.weight.n),
                       static_cast<std::uint64_t>(conv.weight.c),
                       static_cast<std::uint64_t>(conv.weight.h),
                       static_cast<std::uint64_t>(conv.weight.w)},
                      conv.weight.data};
        box.tensors.push_back(std::move(w));
        box.tensors.push_back(NamedTensor{stem + ".bias", {conv.bias.size()}, conv.bias});
    }
    box.tensors.push_back(
        NamedTensor{"bank.embeddings",
                    {static_cast<std::uint64_t>(model.bank.embeddings.rows),
                     static_cast<std::uint64_t>(model.bank.embeddings.cols)},
                    model.bank.embeddings.a});
    write_container(box, path);
}

TargetModel load_target_model(const std::string& path) {
    Container box = read_container(path);
    if (box.kind != "target")
        throw DataError("'" + path + "': expected a target-model container, found kind '" +
                        box.kind + "'");
    nlohmann::json meta = nlohmann::json::parse(box.meta_json, nullptr, false);
    if (meta.is_discarded() || !meta.is_object())
        throw DataError("'" + path + "': malformed metadata object");

    TargetModel model;
    auto tensor = [&](const std::string& name) -> const NamedTensor& {
        for (const NamedTensor& t : box.tensors)
            if (t.name == name) return t;
        throw DataError("'" + path + "': missing tensor '" + name + "'");
    };
    try {
        model.tau = meta.at("tau").get<double>();
        model.bank.names = meta.at("names").get<std::vector<std::string>>();
        model.bank.has_background = meta.at("has_background").get<bool>();
        const nlohmann::json& layers = meta.at("layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            ConvParams conv;
            conv.stride = layers[i].at("stride").get<int>();
            conv.dilation = layers[i].at("dilation").get<int>();
            conv.padding = layers[i].at("padding").get<int>();
            const std::string stem = "backbone." + std::to_string(i);
            const NamedTensor& w = tensor(stem + ".weight");
            if (w.dims.size() != 4)
                throw DataError("'" + path + "': conv weight '" + w.name + "' is not 4-axis");
            conv.weight = Tensor4(static_cast<int>(w.dims[0]), static_cast<int>(w.dims[1]),
                                  static_cast<int>(w.dims[2]), static_cast<int>(w.dims[3]));
            conv.weight.data = w.values;
            conv.bias = tensor(stem + ".bias").values;
            conv.validate();
            model.backbone.layers.push_back(std::move(conv));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path + "': bad target-model metadata (" + std::string(e.what()) +
                        ")");
    }
    const NamedTensor& emb = tensor("bank.embeddings");
    if (emb.dims.size() != 2)
        throw DataError("'" + path + "': bank embeddings are not a matrix");
    model.bank.embeddings = Matrix(static_cast<int>(emb.dims[0]), static_cast<int>(emb.dims[1]));
    model.bank.embeddings.a = emb.values;
    const int expected =
        static_cast<int>(model.bank.names.size()) + (model.bank.has_background ? 1 : 0);
    if (model.bank.embeddings.rows != expected)
        throw DataError("'" + path + "': bank rows do not match its class names");
    check_model(model);
    return model;
}

Tensor4 target_logits(const TargetModel& model, const Tensor4& images) {
    return target_forward(model, images).logits;
}

Segmentation segment_target(const TargetModel& model, const Tensor4& image) {
    return argmax_labels(target_logits(model, image));
}

LabelMap predict_labels(const FrozenPredictor& teacher, const ClassifierBank& bank,
                        const Tensor4& images) {
    return segment(images, teacher.backbone, teacher.head, bank, teacher.tau, images.h,
                   images.w)
        .labels;
}

LabelMap compose_pseudo_labels(const LabelMap* gt, const LabelMap& dense_pred,
                               const Setting& setting) {
    if (setting.kind == SettingKind::AnnotationFree) return dense_pred;
    if (gt == nullptr)
        throw ArgumentError("compose: the transductive setting needs ground truth");
    if (gt->n != dense_pred.n || gt->h != dense_pred.h || gt->w != dense_pred.w)
        throw DataError("compose: ground truth and prediction sizes differ");

    bool seen_lut[256] = {};
    for (int cls : setting.seen) seen_lut[cls] = true;

    LabelMap out = dense_pred;
    for (std::size_t i = 0; i < out.ids.size(); ++i)
        if (seen_lut[gt->ids[i]]) out.ids[i] = gt->ids[i];
    return out;
}

std::string phase_name(Phase phase) {
    switch (phase) {
        case Phase::Guided: return "guided";
        case Phase::SelfTrain: return "self";
        case Phase::Halted: return "halted";
    }
    return "unknown";
}

TrainState make_train_state(const TargetModel& model) {
    check_model(model);
    TrainState state;
    state.model = model;
    for (const ConvParams& conv : model.backbone.layers) {
        state.vel_weight.emplace_back(conv.weight.n, conv.weight.c, conv.weight.h,
                                      conv.weight.w);
        state.vel_bias.emplace_back(conv.bias.size(), 0.0);
    }
    if (model.bank.has_background)
        state.vel_background.assign(model.bank.dim(), 0.0);
    return state;
}

double train_step(TrainState& state, const Tensor4& images, const LabelMap& labels,
                  const TrainConfig& cfg) {
    TargetModel& model = state.model;
    ForwardCache cache = target_forward(model, images);
    CrossEntropyResult ce = cross_entropy(cache.logits, labels);

    const Tensor4& g = ce.logit_grad;
    const Tensor4& f = cache.feats;
    const Matrix& rows = model.bank.embeddings;
    const int bg_row = model.bank.has_background ? rows.rows - 1 : -1;

    // Pull the logit gradient back through the classifier rows and the
    // per-pixel normalization.
    Tensor4 dfeat(f.n, f.c, f.h, f.w);
    std::vector<double> dbg(bg_row >= 0 ? rows.cols : 0, 0.0);
    const std::int64_t pixels = static_cast<std::int64_t>(f.n) * f.h * f.w;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < pixels; ++p) {
        const int in = static_cast<int>(p / (f.h * f.w));
        const int iy = static_cast<int>((p / f.w) % f.h);
        const int ix = static_cast<int>(p % f.w);
        double dot = 0.0;
        for (int c = 0; c < f.c; ++c) {
            double dunit = 0.0;
            for (int k = 0; k < rows.rows; ++k)
                dunit += rows.at(k, c) * g.at(in, k, iy, ix);
            dunit /= model.tau;
            dfeat.at(in, c, iy, ix) = dunit;  // d loss / d unit_feats, for now
            dot += dunit * cache.unit_feats.at(in, c, iy, ix);
        }
        const double inv = cache.inv_norm.at(in, 0, iy, ix);
        for (int c = 0; c < f.c; ++c)
            dfeat.at(in, c, iy, ix) =
                inv * (dfeat.at(in, c, iy, ix) - dot * cache.unit_feats.at(in, c, iy, ix));
    }
    if (bg_row >= 0) {  // serial accumulation keeps the sum order fixed
        for (int in = 0; in < f.n; ++in)
            for (int iy = 0; iy < f.h; ++iy)
                for (int ix = 0; ix < f.w; ++ix) {
                    const double gb = g.at(in, bg_row, iy, ix) / model.tau;
                    for (int c = 0; c < f.c; ++c)
                        dbg[c] += gb * cache.unit_feats.at(in, c, iy, ix);
                }
    }

    // Conv stack backward, last layer first.
    Tensor4 grad = dfeat;
    std::vector<Conv2dGrads> layer_grads(model.backbone.layers.size());
    for (int i = static_cast<int>(model.backbone.layers.size()) - 1; i >= 0; --i) {
        layer_grads[i] = backward_conv2d(cache.inputs[i], model.backbone.layers[i], grad);
        if (i > 0) grad = relu_backward(cache.pre_act[i - 1], layer_grads[i].input);
    }

    for (std::size_t i = 0; i < model.backbone.layers.size(); ++i) {
        sgd_update(model.backbone.layers[i].weight, layer_grads[i].weight, cfg.lr,
                   cfg.momentum, state.vel_weight[i]);
        sgd_update(model.backbone.layers[i].bias, layer_grads[i].bias, cfg.lr, cfg.momentum,
                   state.vel_bias[i]);
    }
    if (bg_row >= 0) {
        std::vector<double> row(rows.cols);
        for (int c = 0; c < rows.cols; ++c) row[c] = rows.at(bg_row, c);
        sgd_update(row, dbg, cfg.lr, cfg.momentum, state.vel_background);
        for (int c = 0; c < rows.cols; ++c)
            state.model.bank.embeddings.at(bg_row, c) = row[c];
    }

    ++state.iter;
    LogRow row;
    row.iter = state.iter;
    row.phase = state.phase;
    row.loss = ce.loss;
    state.log.push_back(std::move(row));
    return ce.loss;
}

double guided_step(TrainState& state, const Tensor4& images, const LabelMap& labels,
                   const TrainConfig& cfg) {
    if (state.phase != Phase::Guided)
        throw ConfigError("guided_step: training is not in the guided phase");
    return train_step(state, images, labels, cfg);
}

LabelMap self_labels(const TargetModel& model, const Tensor4& images) {
    return argmax_labels(target_logits(model, images)).labels;
}

double self_step(TrainState& state, const Tensor4& images, const LabelMap* gt,
                 const TrainConfig& cfg) {
    if (state.phase != Phase::SelfTrain)
        throw ConfigError("self_step: training is not in the self-training phase");
    // The model's own argmax, used as constant labels: no gradient flows
    // through label generation.
    LabelMap own = self_labels(state.model, images);
    LabelMap composed = compose_pseudo_labels(gt, own, cfg.setting);
    return train_step(state, images, composed, cfg);
}

std::vector<double> predicted_shares(const TargetModel& model,
                                     const std::vector<Tensor4>& probe) {
    if (probe.empty()) throw ArgumentError("shares: probe set is empty");
    std::vector<std::uint64_t> counts(model.bank.rows(), 0);
    std::uint64_t total = 0;
    for (const Tensor4& image : probe) {
        LabelMap labels = self_labels(model, image);
        for (std::uint8_t id : labels.ids) ++counts[id];
        total += labels.ids.size();
    }
    std::vector<double> shares(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i)
        shares[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    return shares;
}

bool drift_halt(const std::vector<double>& start, const std::vector<double>& now,
                double share_floor, double participation_bar) {
    if (start.size() != now.size())
        throw ArgumentError("drift: share vectors differ in length");
    for (std::size_t c = 0; c < start.size(); ++c)
        if (start[c] > participation_bar && now[c] < share_floor * start[c]) return true;
    return false;
}

namespace {

Tensor4 stack_batch(const std::vector<Tensor4>& images, const std::vector<int>& idx) {
    const Tensor4& first = images[idx[0]];
    Tensor4 out(static_cast<int>(idx.size()), first.c, first.h, first.w);
    for (std::size_t j = 0; j < idx.size(); ++j)
        std::copy(images[idx[j]].data.begin(), images[idx[j]].data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(j * first.size()));
    return out;
}

LabelMap stack_labels(const std::vector<LabelMap>& labels, const std::vector<int>& idx) {
    const LabelMap& first = labels[idx[0]];
    LabelMap out(static_cast<int>(idx.size()), first.h, first.w);
    for (std::size_t j = 0; j < idx.size(); ++j)
        std::copy(labels[idx[j]].ids.begin(), labels[idx[j]].ids.end(),
                  out.ids.begin() + static_cast<std::ptrdiff_t>(j * first.size()));
    return out;
}

// Deterministic epoch shuffle: a fresh permutation per epoch, derived from the
// run seed, independent of everything else that consumes randomness.
std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch) {
    std::vector<int> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(hash_combine(hash_combine(seed, std::string_view("order")),
                         static_cast<std::uint64_t>(epoch)));
    for (int i = count - 1; i > 0; --i)
        std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    return order;
}

}  // namespace

TrainResult run(const TrainConfig& cfg, const std::vector<Tensor4>& images,
                const std::vector<LabelMap>& gts, const FrozenPredictor& teacher,
                const ClassifierBank& bank) {
    const int num_classes = static_cast<int>(bank.names.size());
    cfg.validate(num_classes);
    if (images.empty()) throw ConfigError("run: dataset is empty");
    if (images.size() != gts.size())
        throw ConfigError("run: images and label maps differ in count");
    if (static_cast<int>(images.size()) <= cfg.probe_count)
        throw ConfigError("run: dataset too small for the probe split of " +
                          std::to_string(cfg.probe_count));
    for (const Tensor4& img : images)
        if (!img.same_dims(images.front()))
            throw ConfigError("run: images must share one size");

    const bool transductive = cfg.setting.kind == SettingKind::Transductive;
    TrainResult result;
    if (!transductive && cfg.self_iters > 0)
        result.warnings.push_back(
            "self-training without annotations is prone to model drift; the drift guard is "
            "armed but consider self_iters=0");

    // Probe images come off the front; the rest trains.
    std::vector<Tensor4> probe_images(images.begin(), images.begin() + cfg.probe_count);
    std::vector<LabelMap> probe_gts(gts.begin(), gts.begin() + cfg.probe_count);
    std::vector<Tensor4> train_images(images.begin() + cfg.probe_count, images.end());
    std::vector<LabelMap> train_gts(gts.begin() + cfg.probe_count, gts.end());
    const int train_count = static_cast<int>(train_images.size());

    // The frozen predictor runs once per image; its outputs are constants.
    std::vector<LabelMap> teacher_train(train_count);
    for (int i = 0; i < train_count; ++i)
        teacher_train[i] = predict_labels(teacher, bank, train_images[i]);
    std::vector<LabelMap> teacher_probe(probe_images.size());
    for (std::size_t i = 0; i < probe_images.size(); ++i)
        teacher_probe[i] = predict_labels(teacher, bank, probe_images[i]);

    std::vector<LabelMap> guided_labels(train_count);
    for (int i = 0; i < train_count; ++i)
        guided_labels[i] = compose_pseudo_labels(transductive ? &train_gts[i] : nullptr,
                                                 teacher_train[i], cfg.setting);

    TargetModel model = make_target_model({16, 32}, bank, cfg.tau,
                                          hash_combine(cfg.seed, std::string_view("init")));
    TrainState state = make_train_state(model);

    // Transductive probing scores seen-class mIoU against ground truth; the
    // annotation-free setting scores against the frozen predictor's labels.
    const std::vector<int> all_ids = [&] {
        std::vector<int> ids(num_classes);
        std::iota(ids.begin(), ids.end(), 0);
        return ids;
    }();
    auto probe_metric = [&]() -> double {
        ConfusionMatrix cm(num_classes);
        for (std::size_t i = 0; i < probe_images.size(); ++i) {
            LabelMap pred = self_labels(state.model, probe_images[i]);
            accumulate(cm, pred, transductive ? probe_gts[i] : teacher_probe[i]);
        }
        try {
            return miou(cm, transductive ? cfg.setting.seen : all_ids);
        } catch (const UndefinedMetricError&) {
            return 0.0;  // probe shows none of the scored classes yet
        }
    };
    auto probe_and_snapshot = [&]() {
        const double metric = probe_metric();
        LogRow& row = state.log.back();
        row.probed = true;
        row.probe_miou = metric;
        row.shares = predicted_shares(state.model, probe_images);
        if (metric > state.best_metric) {
            state.best_metric = metric;
            state.best_model = state.model;
            state.best_iter = state.iter;
        }
        return metric;
    };

    int cursor = 0, epoch = 0;
    std::vector<int> order = epoch_order(train_count, cfg.seed, epoch);
    auto next_batch = [&]() {
        std::vector<int> idx;
        for (int j = 0; j < cfg.batch_size; ++j) {
            if (cursor == train_count) {
                cursor = 0;
                order = epoch_order(train_count, cfg.seed, ++epoch);
            }
            idx.push_back(order[cursor++]);
        }
        return idx;
    };

    for (int it = 0; it < cfg.guided_iters; ++it) {
        const std::vector<int> idx = next_batch();
        Tensor4 batch = stack_batch(train_images, idx);
        LabelMap labels = stack_labels(guided_labels, idx);
        guided_step(state, batch, labels, cfg);
        if ((it + 1) % cfg.probe_interval == 0 || it + 1 == cfg.guided_iters)
            probe_and_snapshot();
    }
    result.guided_best = state.best_metric;

    if (cfg.self_iters > 0) {
        state.phase = Phase::SelfTrain;
        state.start_share = predicted_shares(state.model, probe_images);
        state.share_now = state.start_share;

        for (int it = 0; it < cfg.self_iters; ++it) {
            const std::vector<int> idx = next_batch();
            Tensor4 batch = stack_batch(train_images, idx);
            LabelMap gtb;
            const LabelMap* gt_ptr = nullptr;
            if (transductive) {
                gtb = stack_labels(train_gts, idx);
                gt_ptr = &gtb;
            }
            self_step(state, batch, gt_ptr, cfg);
            const bool last = it + 1 == cfg.self_iters;
            if ((it + 1) % cfg.probe_interval == 0 || last) probe_and_snapshot();
            if ((it + 1) % cfg.drift_interval == 0 || last) {
                const std::vector<double> current =
                    predicted_shares(state.model, probe_images);
                for (std::size_t c = 0; c < current.size(); ++c)
                    state.share_now[c] = (1.0 - cfg.share_ema) * state.share_now[c] +
                                         cfg.share_ema * current[c];
                if (drift_halt(state.start_share, state.share_now, cfg.share_floor,
                               cfg.participation_bar)) {
                    state.phase = Phase::Halted;
                    result.halted = true;
                    break;
                }
            }
        }
    }

    result.final_phase = state.phase;
    result.final_best = state.best_metric;
    result.log = std::move(state.log);
    result.model = state.best_metric >= 0 ? state.best_model : state.model;
    return result;
}

void write_train_log_csv(const std::vector<LogRow>& log, int num_classes,
                         const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("train log: cannot open '" + path + "' for writing");
    out << "iter,phase,loss,probe_miou";
    for (int c = 0; c < num_classes; ++c) out << ",share_" << c;
    out << "\n";
    char buf[64];
    for (const LogRow& row : log) {
        std::snprintf(buf, sizeof(buf), "%.17g", row.loss);
        out << row.iter << "," << phase_name(row.phase) << "," << buf;
        if (row.probed) {
            std::snprintf(buf, sizeof(buf), "%.17g", row.probe_miou);
            out << "," << buf;
            for (int c = 0; c < num_classes; ++c) {
                const double share =
                    c < static_cast<int>(row.shares.size()) ? row.shares[c] : 0.0;
                std::snprintf(buf, sizeof(buf), "%.17g", share);
                out << "," << buf;
            }
        } else {
            for (int c = 0; c <= num_classes; ++c) out << ",";
        }
        out << "\n";
    }
    if (!out.flush()) throw DataError("train log: failed writing '" + path + "'");
}

}  // namespace dseg
