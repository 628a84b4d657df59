#pragma once

// Training loops for the segmenter and the classifier, the stratified split
// they share, and the four-variant experiment.
//
// Training metrics are accumulated over the minibatches of each epoch as the
// weights move; validation metrics use the weights at the end of the epoch.

#include "cxrb/models.hpp"
#include "cxrb/optim.hpp"
#include "cxrb/variants.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cxrb {

struct Hyper {
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    double lr = 0.01;
    double momentum = 0.9;
    /// Joint gradient-norm clip per step; 0 disables.
    double clip_norm = 1.0;
    double val_fraction = 0.2;
    std::uint64_t seed = 1;
    std::size_t image_size = 64;
    /// Stop after the first epoch whose validation accuracy (Dice for the
    /// segmenter) reaches this; 0 always runs every epoch.
    double stop_at_val_acc = 0.0;

    void validate() const
    {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
        if (image_size == 0) throw ConfigError("image_size must be positive");
        if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be non-negative");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainingCurve {
    std::vector<EpochRecord> records;
    std::vector<double> epoch_seconds;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }

    /// Mean of `field` over the last `tail` epochs.
    double tail_mean(double EpochRecord::*field, std::size_t tail) const
    {
        if (tail == 0 || tail > records.size())
            throw UsageError("tail of " + std::to_string(tail) + " epochs on a curve of " + std::to_string(records.size()));
        double s = 0.0;
        for (std::size_t i = records.size() - tail; i < records.size(); ++i) s += records[i].*field;
        return s / static_cast<double>(tail);
    }
};

/// Mean over the last `tail` epochs of train_acc - val_acc.
inline double overtraining_gap(const TrainingCurve& curve, std::size_t tail)
{
    return curve.tail_mean(&EpochRecord::train_acc, tail) - curve.tail_mean(&EpochRecord::val_acc, tail);
}

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Stratified split. The validation set holds round(n * val_fraction)
/// samples; each class contributes floor(n_c * val_fraction) plus at most one
/// more, assigned by largest remainder. Index lists come back sorted.
inline Split split(const std::vector<int>& labels, double val_fraction, std::uint64_t seed)
{
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
    const std::size_t n = labels.size();
    const auto total = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction + 0.5));
    if (total == 0 || total >= n)
        throw ConfigError("splitting " + std::to_string(n) + " samples at " + std::to_string(val_fraction)
                          + " leaves an empty part");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);

    struct Quota {
        int label;
        std::size_t take;
        double remainder;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (const auto& [label, members] : by_class) {
        const double exact = static_cast<double>(members.size()) * val_fraction;
        const auto base = static_cast<std::size_t>(std::floor(exact));
        quotas.push_back({label, base, exact - static_cast<double>(base)});
        assigned += base;
    }
    std::vector<std::size_t> order(quotas.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return quotas[a].remainder > quotas[b].remainder; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++quotas[order[i % order.size()]].take;

    Rng rng(seed);
    Split s;
    for (const auto& q : quotas) {
        auto members = by_class[q.label];
        rng.shuffle(members);
        s.val.insert(s.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(q.take));
        s.train.insert(s.train.end(), members.begin() + static_cast<std::ptrdiff_t>(q.take), members.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

namespace detail {

template <class T>
Tensor<T> gather_images(const std::vector<const Image*>& images, std::span<const std::size_t> idx, std::size_t side)
{
    std::vector<const Image*> picked;
    picked.reserve(idx.size());
    for (auto i : idx) picked.push_back(images[i]);
    return stack_images<T>(picked, side);
}

inline double epoch_seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Per-sample Dice of thresholded predictions against {0,1} targets, summed.
template <class T>
double dice_sum(std::span<const T> pred, std::span<const T> target, std::size_t samples)
{
    const std::size_t plane = pred.size() / samples;
    double total = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        std::size_t inter = 0, na = 0, nb = 0;
        for (std::size_t i = s * plane; i < (s + 1) * plane; ++i) {
            const bool a = pred[i] >= T(0.5), b = target[i] >= T(0.5);
            inter += a && b;
            na += a;
            nb += b;
        }
        total += na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
    }
    return total;
}

/// Shared epoch loop. `make_target(idx)` builds the target tensor for a batch;
/// `score(pred, target, count)` returns the summed per-sample metric.
template <class T>
TrainingCurve fit(Model<T>& model, const std::vector<const Image*>& images, const Split& parts, const Hyper& hyper,
                  const std::function<Tensor<T>(std::span<const std::size_t>)>& make_target,
                  const std::function<double(const Tensor<T>&, const Tensor<T>&, std::size_t)>& score,
                  const std::function<void(const EpochRecord&)>& on_epoch)
{
    const auto side = model.input_size();
    auto params = model.parameter_tensors();
    Sgd<T> opt(hyper.lr, hyper.momentum, hyper.clip_norm);
    Rng order_rng(hyper.seed ^ 0x5851f42d4c957f2dULL);
    std::vector<std::size_t> order = parts.train;
    TrainingCurve curve;

    auto evaluate = [&](std::span<const std::size_t> idx, double& loss_sum, double& metric_sum) {
        for (std::size_t lo = 0; lo < idx.size(); lo += hyper.batch_size) {
            const auto batch = idx.subspan(lo, std::min(hyper.batch_size, idx.size() - lo));
            const auto pred = model.forward(nullptr, gather_images<T>(images, batch, side));
            const auto target = make_target(batch);
            loss_sum += static_cast<double>(bce_loss<T>(nullptr, pred, target).item()) * batch.size();
            metric_sum += score(pred, target, batch.size());
        }
    };

    for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        order_rng.shuffle(order);
        double loss_sum = 0.0, metric_sum = 0.0;
        for (std::size_t lo = 0; lo < order.size(); lo += hyper.batch_size) {
            const auto batch = std::span<const std::size_t>(order).subspan(lo, std::min(hyper.batch_size, order.size() - lo));
            Graph<T> graph;
            const auto pred = model.forward(&graph, gather_images<T>(images, batch, side));
            const auto target = make_target(batch);
            const auto loss = bce_loss(&graph, pred, target);
            graph.backward(loss);
            opt.step(params);
            loss_sum += static_cast<double>(loss.item()) * batch.size();
            metric_sum += score(pred, target, batch.size());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.train_acc = metric_sum / static_cast<double>(order.size());
        double vloss = 0.0, vmetric = 0.0;
        evaluate(parts.val, vloss, vmetric);
        rec.val_loss = vloss / static_cast<double>(parts.val.size());
        rec.val_acc = vmetric / static_cast<double>(parts.val.size());
        curve.records.push_back(rec);
        curve.epoch_seconds.push_back(epoch_seconds_since(t0));
        if (on_epoch) on_epoch(rec);
        if (hyper.stop_at_val_acc > 0.0 && rec.val_acc >= hyper.stop_at_val_acc) break;
    }
    return curve;
}

inline void require_batch_fits(const Hyper& hyper, const Split& parts)
{
    if (hyper.batch_size > parts.train.size())
        throw ConfigError("batch_size " + std::to_string(hyper.batch_size) + " exceeds the "
                          + std::to_string(parts.train.size()) + "-sample training split");
}

} // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

template <class T = float>
struct TrainedModel {
    Model<T> model;
    TrainingCurve curve;
    Split split;
    /// Epoch whose weights were returned (0 when none was trained).
    std::size_t best_epoch = 0;
};

struct SegmentationPair {
    const Image* image;
    const Mask* mask;
};

/// Per-pixel BCE on (image, truth mask) pairs. The curve's accuracy columns
/// hold mean Dice at threshold 0.5; the returned weights are those of the
/// epoch with the highest validation Dice.
template <class T = float>
TrainedModel<T> train_segmenter(const std::vector<SegmentationPair>& pairs, const Hyper& hyper,
                                SegmenterConfig cfg = {}, std::optional<Split> parts = {},
                                const EpochCallback& on_epoch = {})
{
    hyper.validate();
    if (pairs.empty()) throw UsageError("train_segmenter needs at least one pair");
    cfg.input_size = hyper.image_size;
    auto model = build_segmenter<T>(cfg, hyper.seed);
    if (!parts) parts = split(std::vector<int>(pairs.size(), 0), hyper.val_fraction, hyper.seed);
    TrainedModel<T> out{model, {}, *parts, 0};
    if (hyper.epochs == 0) return out;
    detail::require_batch_fits(hyper, *parts);

    std::vector<const Image*> images;
    for (const auto& p : pairs) {
        require_same_shape(*p.image, *p.mask, "segmentation pair");
        images.push_back(p.image);
    }
    const auto side = cfg.input_size;
    auto make_target = [&](std::span<const std::size_t> idx) {
        Tensor<T> t(Shape{idx.size(), 1, side, side});
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t p = 0; p < side * side; ++p) t[i * side * side + p] = pairs[idx[i]].mask->pixels[p] ? T(1) : T(0);
        return t;
    };
    auto score = [](const Tensor<T>& pred, const Tensor<T>& target, std::size_t n) {
        return detail::dice_sum<T>(pred.data(), target.data(), n);
    };
    double best = -1.0;
    auto track = [&](const EpochRecord& rec) {
        if (rec.val_acc > best) {
            best = rec.val_acc;
            out.model = model.clone();
            out.best_epoch = rec.epoch;
        }
        if (on_epoch) on_epoch(rec);
    };
    out.curve = detail::fit<T>(model, images, *parts, hyper, make_target, score, track);
    return out;
}

/// BCE on the nodule probability; accuracy counts (p >= 0.5) == label.
/// Returns the weights after the last epoch.
template <class T = float>
TrainedModel<T> train_classifier(const std::vector<const Image*>& images, const std::vector<int>& labels,
                                 const Hyper& hyper, ClassifierConfig cfg = {}, std::optional<Split> parts = {},
                                 const EpochCallback& on_epoch = {})
{
    hyper.validate();
    if (images.size() != labels.size()) throw UsageError("images and labels differ in length");
    if (images.empty()) throw UsageError("train_classifier needs at least one sample");
    cfg.input_size = hyper.image_size;
    if (!parts) parts = split(labels, hyper.val_fraction, hyper.seed);
    bool seen[2] = {false, false};
    for (auto i : parts->train) {
        if (labels[i] != 0 && labels[i] != 1) throw ConfigError("classifier labels must be 0 or 1");
        seen[labels[i]] = true;
    }
    if (!seen[0] || !seen[1]) throw ConfigError("training split holds a single class");
    auto model = build_classifier<T>(cfg, hyper.seed);
    TrainedModel<T> out{model, {}, *parts, 0};
    if (hyper.epochs == 0) return out;
    detail::require_batch_fits(hyper, *parts);

    auto make_target = [&](std::span<const std::size_t> idx) {
        Tensor<T> t(Shape{idx.size(), 1});
        for (std::size_t i = 0; i < idx.size(); ++i) t[i] = static_cast<T>(labels[idx[i]]);
        return t;
    };
    auto score = [](const Tensor<T>& pred, const Tensor<T>& target, std::size_t n) {
        double correct = 0.0;
        for (std::size_t i = 0; i < n; ++i) correct += (pred[i] >= T(0.5)) == (target[i] >= T(0.5));
        return correct;
    };
    out.curve = detail::fit<T>(model, images, *parts, hyper, make_target, score, on_epoch);
    out.model = model;
    out.best_epoch = hyper.epochs;
    return out;
}

// ---------------------------------------------------------------------------
// Four-variant experiment

struct Subject {
    std::string id;
    Image bones;
    Image nobones;
    int label = 0;
    /// Ground-truth lung mask, when known.
    std::optional<Mask> truth;
};

inline constexpr std::array<const char*, 4> kVariantKeys = {"#01", "#02", "#03", "#04"};

struct VariantResult {
    TrainingCurve curve;
    double final_val_acc = 0.0;
    double final_train_acc = 0.0;
    double gap = 0.0;
};

struct ExperimentReport {
    Hyper hyper;
    std::size_t tail = 10;
    std::size_t subjects = 0;
    std::size_t train_size = 0;
    std::size_t val_size = 0;
    /// Validation accuracy of always predicting the training majority class.
    double majority_baseline = 0.0;
    std::map<std::string, VariantResult> variants;
    /// Mean Dice of mask01 / mask02 against truth, over subjects with truth.
    std::optional<double> mask01_dice;
    std::optional<double> mask02_dice;
    std::vector<double> per_subject_dice01;
    std::vector<double> per_subject_dice02;
    Split split;
};

/// Builds the four variants for every subject, then trains one classifier per
/// variant from the same seed on the same train/validation partition.
template <class T = float>
ExperimentReport run_experiment(const std::vector<Subject>& subjects, const Model<T>& segmenter, const Hyper& hyper,
                                ClassifierConfig cfg = {}, double threshold = kDefaultMaskThreshold,
                                std::size_t tail = 10,
                                const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {},
                                std::vector<VariantSet>* variants_out = nullptr)
{
    hyper.validate();
    if (subjects.empty()) throw UsageError("run_experiment needs subjects");
    std::vector<const Image*> bones, nobones;
    std::vector<int> labels;
    for (const auto& s : subjects) {
        bones.push_back(&s.bones);
        nobones.push_back(&s.nobones);
        labels.push_back(s.label);
    }
    auto sets = build_variants(bones, nobones, segmenter, threshold);

    ExperimentReport rep;
    rep.hyper = hyper;
    rep.tail = tail;
    rep.subjects = subjects.size();
    rep.split = split(labels, hyper.val_fraction, hyper.seed);
    rep.train_size = rep.split.train.size();
    rep.val_size = rep.split.val.size();
    std::size_t train_pos = 0, val_pos = 0;
    for (auto i : rep.split.train) train_pos += labels[i] == 1;
    for (auto i : rep.split.val) val_pos += labels[i] == 1;
    const bool majority_positive = 2 * train_pos >= rep.train_size;
    rep.majority_baseline = static_cast<double>(majority_positive ? val_pos : rep.val_size - val_pos)
                            / static_cast<double>(rep.val_size);

    double d1 = 0.0, d2 = 0.0;
    std::size_t with_truth = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        if (!subjects[i].truth) continue;
        rep.per_subject_dice01.push_back(dice(sets[i].mask01, *subjects[i].truth));
        rep.per_subject_dice02.push_back(dice(sets[i].mask02, *subjects[i].truth));
        d1 += rep.per_subject_dice01.back();
        d2 += rep.per_subject_dice02.back();
        ++with_truth;
    }
    if (with_truth) {
        rep.mask01_dice = d1 / static_cast<double>(with_truth);
        rep.mask02_dice = d2 / static_cast<double>(with_truth);
    }

    for (std::size_t k = 1; k <= 4; ++k) {
        std::vector<const Image*> images;
        for (const auto& v : sets) images.push_back(&v.variant(k));
        EpochCallback cb;
        if (on_epoch) cb = [&](const EpochRecord& r) { on_epoch(k, r); };
        auto trained = train_classifier<T>(images, labels, hyper, cfg, rep.split, cb);
        VariantResult vr;
        vr.curve = std::move(trained.curve);
        if (vr.curve.size() >= tail && tail > 0) {
            vr.final_val_acc = vr.curve.tail_mean(&EpochRecord::val_acc, tail);
            vr.final_train_acc = vr.curve.tail_mean(&EpochRecord::train_acc, tail);
            vr.gap = overtraining_gap(vr.curve, tail);
        }
        rep.variants[kVariantKeys[k - 1]] = std::move(vr);
    }
    if (variants_out) *variants_out = std::move(sets);
    return rep;
}

} // namespace cxrb
