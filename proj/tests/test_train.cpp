#include "cxrb/phantom.hpp"
#include "cxrb/train.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using cxrb::EpochRecord;
using cxrb::Hyper;
using cxrb::Image;

namespace {

std::vector<int> labels_with(std::size_t pos, std::size_t neg)
{
    std::vector<int> l(pos, 1);
    l.insert(l.end(), neg, 0);
    return l;
}

std::size_t count_label(const std::vector<int>& labels, const std::vector<std::size_t>& idx, int label)
{
    return static_cast<std::size_t>(std::count_if(idx.begin(), idx.end(), [&](auto i) { return labels[i] == label; }));
}

cxrb::TrainingCurve curve_of(std::vector<std::pair<double, double>> acc)
{
    cxrb::TrainingCurve c;
    for (std::size_t i = 0; i < acc.size(); ++i) c.records.push_back({i + 1, acc[i].first, acc[i].second, 0.0, 0.0});
    return c;
}

cxrb::PhantomConfig small_phantoms()
{
    cxrb::PhantomConfig cfg;
    cfg.size = 32;
    cfg.nodule_radius_min = 1.5;
    cfg.nodule_radius_max = 2.5;
    cfg.nodule_contrast_min = 0.3;
    cfg.nodule_contrast_max = 0.5;
    return cfg;
}

Hyper small_hyper(std::size_t epochs)
{
    Hyper h;
    h.epochs = epochs;
    h.image_size = 32;
    h.seed = 3;
    return h;
}

} // namespace

TEST(Split, EightyTwentyAndDisjoint)
{
    auto labels = labels_with(50, 50);
    auto s = cxrb::split(labels, 0.2, 1);
    EXPECT_EQ(s.val.size(), 20u);
    EXPECT_EQ(s.train.size(), 80u);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    EXPECT_EQ(all.size(), 100u);
    EXPECT_EQ(count_label(labels, s.val, 1), 10u);
    EXPECT_TRUE(std::is_sorted(s.val.begin(), s.val.end()));
}

TEST(Split, StratifiedWithinOne)
{
    auto labels = labels_with(62, 38);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto s = cxrb::split(labels, 0.2, seed);
        const auto pos = count_label(labels, s.val, 1);
        EXPECT_TRUE(pos == 12 || pos == 13) << pos;
        EXPECT_EQ(s.val.size(), 20u);
    }
}

TEST(Split, DeterministicPerSeed)
{
    auto labels = labels_with(30, 70);
    EXPECT_EQ(cxrb::split(labels, 0.3, 5).val, cxrb::split(labels, 0.3, 5).val);
    EXPECT_NE(cxrb::split(labels, 0.3, 5).val, cxrb::split(labels, 0.3, 6).val);
}

TEST(Split, DegenerateIsConfigError)
{
    EXPECT_THROW(cxrb::split(labels_with(1, 1), 0.2, 0), cxrb::ConfigError);
    EXPECT_THROW(cxrb::split(labels_with(5, 5), 0.0, 0), cxrb::ConfigError);
    EXPECT_THROW(cxrb::split(labels_with(5, 5), 1.0, 0), cxrb::ConfigError);
}

TEST(Curve, GapArithmetic)
{
    auto c = curve_of({{0.5, 0.5}, {0.9, 0.6}, {1.0, 0.7}});
    EXPECT_NEAR(cxrb::overtraining_gap(c, 2), (0.9 + 1.0) / 2 - (0.6 + 0.7) / 2, 1e-12);
    EXPECT_NEAR(cxrb::overtraining_gap(c, 3), 0.2, 1e-12);
    EXPECT_NEAR(c.tail_mean(&EpochRecord::val_acc, 1), 0.7, 1e-12);
    EXPECT_THROW(cxrb::overtraining_gap(c, 4), cxrb::UsageError);
    EXPECT_THROW(cxrb::overtraining_gap(c, 0), cxrb::UsageError);
}

TEST(Hyper, ValidatesRanges)
{
    Hyper h;
    EXPECT_NO_THROW(h.validate());
    h.batch_size = 0;
    EXPECT_THROW(h.validate(), cxrb::ConfigError);
    h = {};
    h.momentum = 1.0;
    EXPECT_THROW(h.validate(), cxrb::ConfigError);
    h = {};
    h.lr = 0.0;
    EXPECT_THROW(h.validate(), cxrb::ConfigError);
}

TEST(TrainClassifier, SingleClassIsConfigError)
{
    std::vector<Image> imgs(10, Image(32, 32));
    std::vector<const Image*> ptrs;
    for (const auto& im : imgs) ptrs.push_back(&im);
    EXPECT_THROW(cxrb::train_classifier(ptrs, std::vector<int>(10, 1), small_hyper(1)), cxrb::ConfigError);
    // Both classes present overall but only one in the training part.
    std::vector<int> labels(10, 0);
    labels[0] = labels[1] = 1;
    cxrb::Split s{{2, 3, 4, 5, 6, 7, 8, 9}, {0, 1}};
    EXPECT_THROW(cxrb::train_classifier(ptrs, labels, small_hyper(1), {}, s), cxrb::ConfigError);
}

TEST(TrainClassifier, ZeroEpochsReturnsEmptyCurve)
{
    auto data = cxrb::generate_dataset(small_phantoms(), 20, 1);
    std::vector<const Image*> ptrs;
    std::vector<int> labels;
    for (const auto& s : data) {
        ptrs.push_back(&s.image_nobones);
        labels.push_back(s.label);
    }
    auto t = cxrb::train_classifier(ptrs, labels, small_hyper(0));
    EXPECT_TRUE(t.curve.empty());
    EXPECT_EQ(t.best_epoch, 0u);
}

TEST(TrainClassifier, SameSeedSameCurve)
{
    auto data = cxrb::generate_dataset(small_phantoms(), 40, 2);
    std::vector<const Image*> ptrs;
    std::vector<int> labels;
    for (const auto& s : data) {
        ptrs.push_back(&s.image_nobones);
        labels.push_back(s.label);
    }
    auto a = cxrb::train_classifier(ptrs, labels, small_hyper(2));
    auto b = cxrb::train_classifier(ptrs, labels, small_hyper(2));
    ASSERT_EQ(a.curve.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a.curve.records[i].train_loss, b.curve.records[i].train_loss);
        EXPECT_EQ(a.curve.records[i].val_acc, b.curve.records[i].val_acc);
    }
    for (const auto& r : a.curve.records) {
        EXPECT_GE(r.train_acc, 0.0);
        EXPECT_LE(r.train_acc, 1.0);
        EXPECT_GT(r.val_loss, 0.0);
    }
}

TEST(TrainSegmenter, OverfitsEightPairs)
{
    auto cfg = small_phantoms();
    std::vector<cxrb::PhantomSample> data;
    for (std::uint64_t i = 0; i < 10; ++i) data.push_back(cxrb::generate_phantom(cfg, i, false));
    std::vector<cxrb::SegmentationPair> pairs;
    for (const auto& s : data) pairs.push_back({&s.image_bones, &s.lung_mask});
    auto h = small_hyper(150);
    h.batch_size = 4;
    cxrb::Split parts{{0, 1, 2, 3, 4, 5, 6, 7}, {8, 9}};
    auto t = cxrb::train_segmenter(pairs, h, {32, 2, 8}, parts);
    ASSERT_EQ(t.curve.size(), 150u);
    EXPECT_GE(t.curve.records.back().train_acc, 0.9);
    EXPECT_LT(t.curve.records.back().train_loss, t.curve.records.front().train_loss);
    // Returned weights come from the best validation epoch.
    double best = 0.0;
    for (const auto& r : t.curve.records) best = std::max(best, r.val_acc);
    EXPECT_EQ(t.curve.records[t.best_epoch - 1].val_acc, best);
    double d = 0.0;
    for (std::size_t i : parts.val)
        d += cxrb::dice(cxrb::binarize_mask(cxrb::predict_mask(t.model, data[i].image_bones), 0.5, 0), data[i].lung_mask);
    EXPECT_NEAR(d / 2.0, best, 1e-6);
}

TEST(TrainSegmenter, ZeroEpochsReturnsEmptyCurve)
{
    auto s = cxrb::generate_phantom(small_phantoms(), 0, false);
    std::vector<cxrb::SegmentationPair> pairs(5, {&s.image_bones, &s.lung_mask});
    auto t = cxrb::train_segmenter(pairs, small_hyper(0), {32, 2, 4});
    EXPECT_TRUE(t.curve.empty());
}

TEST(Experiment, ReportsFourCurvesOnOneSplit)
{
    auto data = cxrb::generate_dataset(small_phantoms(), 30, 4);
    std::vector<cxrb::Subject> subjects;
    for (std::size_t i = 0; i < data.size(); ++i)
        subjects.push_back({std::to_string(i), data[i].image_bones, data[i].image_nobones, data[i].label,
                            data[i].lung_mask});
    auto seg = cxrb::build_segmenter<float>({32, 2, 4}, 1);
    std::vector<cxrb::VariantSet> sets;
    auto rep = cxrb::run_experiment(subjects, seg, small_hyper(2), {}, 0.5, 2, {}, &sets);
    ASSERT_EQ(rep.variants.size(), 4u);
    for (const char* k : cxrb::kVariantKeys) {
        ASSERT_TRUE(rep.variants.count(k));
        EXPECT_EQ(rep.variants[k].curve.size(), 2u);
    }
    EXPECT_EQ(rep.train_size + rep.val_size, 30u);
    EXPECT_EQ(rep.val_size, 6u);
    EXPECT_EQ(sets.size(), 30u);
    ASSERT_TRUE(rep.mask01_dice && rep.mask02_dice);
    EXPECT_EQ(rep.per_subject_dice01.size(), 30u);
    EXPECT_GE(rep.majority_baseline, 0.5);
    EXPECT_LE(rep.majority_baseline, 1.0);
    const auto& g = rep.variants["#01"];
    EXPECT_NEAR(g.gap, g.final_train_acc - g.final_val_acc, 1e-12);
}
