#include "cxrb/models.hpp"
#include "cxrb/optim.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using cxrb::ClassifierConfig;
using cxrb::Graph;
using cxrb::Model;
using cxrb::SegmenterConfig;
using cxrb::Shape;
using cxrb::Tensor;

namespace {

Tensor<float> random_batch(std::size_t n, std::size_t side, std::uint64_t seed)
{
    cxrb::Rng rng(seed);
    Tensor<float> t(Shape{n, 1, side, side});
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
    return t;
}

std::vector<float> values(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

/// Same architecture in double, with the float model's weights.
Model<double> widen(const Model<float>& m)
{
    auto wide = m.is_segmenter() ? cxrb::build_segmenter<double>(std::get<SegmenterConfig>(m.config()), 0)
                                 : cxrb::build_classifier<double>(std::get<ClassifierConfig>(m.config()), 0);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
        auto dst = wide.parameters()[i].tensor;
        const auto& src = m.parameters()[i].tensor;
        for (std::size_t j = 0; j < src.numel(); ++j) dst[j] = src[j];
    }
    return wide;
}

Tensor<double> widen(const Tensor<float>& t)
{
    Tensor<double> out(t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) out[i] = t[i];
    return out;
}

} // namespace

// --- segmenter --------------------------------------------------------------

TEST(Segmenter, OutputShapeAndRange)
{
    auto m = cxrb::build_segmenter<float>({64, 3, 8}, 1);
    auto y = m.forward(nullptr, random_batch(2, 64, 2));
    ASSERT_EQ(y.shape(), (Shape{2, 1, 64, 64}));
    for (float v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Segmenter, SameSeedSameParameters)
{
    auto a = cxrb::build_segmenter<float>({64, 3, 8}, 5);
    auto b = cxrb::build_segmenter<float>({64, 3, 8}, 5);
    auto c = cxrb::build_segmenter<float>({64, 3, 8}, 6);
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        EXPECT_EQ(values(a.parameters()[i].tensor), values(b.parameters()[i].tensor));
        differs = differs || values(a.parameters()[i].tensor) != values(c.parameters()[i].tensor);
    }
    EXPECT_TRUE(differs);
}

TEST(Segmenter, ParameterCountMatchesHandCount)
{
    // 3x3 conv: out*(in*9 + 1). Channels 8/16/32 down, 64 at the bottom,
    // decoder inputs are upsampled + skip channels, then a 1x1 head.
    auto conv = [](std::size_t in, std::size_t out) { return out * (in * 9 + 1); };
    const std::size_t expected = conv(1, 8) + conv(8, 8)        // enc0
                                 + conv(8, 16) + conv(16, 16)   // enc1
                                 + conv(16, 32) + conv(32, 32)  // enc2
                                 + conv(32, 64) + conv(64, 64)  // bottleneck
                                 + conv(64 + 32, 32) + conv(32, 32) // dec2
                                 + conv(32 + 16, 16) + conv(16, 16) // dec1
                                 + conv(16 + 8, 8) + conv(8, 8)     // dec0
                                 + (8 + 1);                         // head
    EXPECT_EQ(expected, 121969u);
    EXPECT_EQ(cxrb::build_segmenter<float>({64, 3, 8}, 0).parameter_count(), expected);
}

TEST(Segmenter, RejectsInvalidConfig)
{
    EXPECT_THROW(cxrb::build_segmenter<float>({60, 3, 8}, 0), cxrb::ConfigError);
    EXPECT_THROW(cxrb::build_segmenter<float>({64, 0, 8}, 0), cxrb::ConfigError);
    EXPECT_THROW(cxrb::build_segmenter<float>({64, 3, 0}, 0), cxrb::ConfigError);
}

TEST(Segmenter, ZeroImageGivesConstantMask)
{
    // Fresh biases are zero, so the whole mask is constant.
    auto fresh = cxrb::build_segmenter<float>({32, 2, 4}, 3);
    auto y = fresh.forward(nullptr, Tensor<float>(Shape{1, 1, 32, 32}));
    // GEMM blocking can differ in the last bits between pixel positions.
    for (float v : y.data()) EXPECT_NEAR(v, y[0], 1e-5f * std::abs(y[0]));

    // With non-zero biases, zero padding perturbs a border band: 1 px per
    // 3x3 conv at each resolution. For depth 1 that band is 8 px wide.
    auto m = cxrb::build_segmenter<float>({64, 1, 4}, 3);
    cxrb::Rng rng(4);
    for (const auto& p : m.parameters())
        if (p.name.ends_with(".bias"))
            for (auto& v : Tensor<float>(p.tensor).data()) v = static_cast<float>(rng.uniform(0.1, 0.5));
    auto z = m.forward(nullptr, Tensor<float>(Shape{1, 1, 64, 64}));
    const float centre = z[32 * 64 + 32];
    bool border_differs = false;
    for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t c = 0; c < 64; ++c) {
            const bool interior = r >= 8 && r < 56 && c >= 8 && c < 56;
            if (interior)
                EXPECT_NEAR(z[r * 64 + c], centre, 1e-5f * centre) << r << "," << c;
            else
                border_differs = border_differs || std::abs(z[r * 64 + c] - centre) > 1e-2f * centre;
        }
    EXPECT_TRUE(border_differs);
}

// --- classifier -------------------------------------------------------------

TEST(Classifier, OutputShapeAndRange)
{
    auto m = cxrb::build_classifier<float>({}, 1);
    auto y = m.forward(nullptr, random_batch(4, 64, 3));
    ASSERT_EQ(y.shape(), (Shape{4, 1}));
    for (float v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Classifier, GraphHasSevenConvolutions)
{
    auto m = cxrb::build_classifier<float>({}, 1);
    Graph<float> g;
    m.forward(&g, random_batch(2, 64, 3));
    EXPECT_EQ(g.count("conv2d"), 7u);
    EXPECT_EQ(g.count("dense"), 1u);
    EXPECT_EQ(g.count("maxpool2d"), 4u);
}

TEST(Classifier, SameSeedSameOutputs)
{
    const auto x = random_batch(3, 64, 9);
    auto a = cxrb::build_classifier<float>({}, 11).forward(nullptr, x);
    auto b = cxrb::build_classifier<float>({}, 11).forward(nullptr, x);
    EXPECT_EQ(values(a), values(b));
}

TEST(Classifier, InferenceIsRepeatable)
{
    auto m = cxrb::build_classifier<float>({}, 2);
    const auto x = random_batch(2, 64, 4);
    EXPECT_EQ(values(m.forward(nullptr, x)), values(m.forward(nullptr, x)));
}

TEST(Classifier, RejectsWrongLayerCountAndGeometry)
{
    ClassifierConfig six;
    six.channel_plan = {8, 8, 16, 16, 32, 32};
    EXPECT_THROW(cxrb::build_classifier<float>(six, 0), cxrb::ConfigError);
    ClassifierConfig odd;
    odd.input_size = 24;  // 24 -> 12 -> 6 -> 3 -> cannot pool again
    EXPECT_THROW(cxrb::build_classifier<float>(odd, 0), cxrb::ConfigError);
}

TEST(Classifier, RejectsWrongInputShape)
{
    auto m = cxrb::build_classifier<float>({}, 0);
    EXPECT_THROW(m.forward(nullptr, random_batch(1, 32, 0)), cxrb::ShapeError);
    EXPECT_THROW(m.forward(nullptr, Tensor<float>(Shape{1, 2, 64, 64})), cxrb::ShapeError);
}

TEST(Classifier, ParameterGradientsMatchFiniteDifferences)
{
    ClassifierConfig cfg;
    cfg.input_size = 16;
    auto m = cxrb::build_classifier<float>(cfg, 21);
    const auto x = random_batch(2, 16, 22);
    Tensor<float> target(Shape{2, 1}, std::vector<float>{1.0f, 0.0f});
    auto params = m.parameter_tensors();

    cxrb::Rng rng(23);
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    for (int i = 0; i < 256; ++i) {
        const auto t = rng.below(params.size());
        picks.emplace_back(t, rng.below(params[t].numel()));
    }
    auto objective = [&](Graph<float>* g) { return cxrb::bce_loss(g, m.forward(g, x), target); };
    auto evaluate = [&] {
        auto wide = widen(m);
        return cxrb::bce_loss<double>(nullptr, wide.forward(nullptr, widen(x)), widen(target)).item();
    };
    auto r = gradcheck::check<float>(objective, evaluate, params, 1e-4, picks, 64);
    EXPECT_EQ(r.checked, 64u);
    EXPECT_LE(r.max_rel_error, 1e-2);
}

TEST(Classifier, InputGradientMatchesFiniteDifferences)
{
    ClassifierConfig cfg;
    cfg.input_size = 32;
    auto m = cxrb::build_classifier<float>(cfg, 31);
    auto x = random_batch(1, 32, 32);
    x.requires_grad(true);
    Tensor<float> target(Shape{1, 1}, 1.0f);
    cxrb::Rng rng(33);
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    for (int i = 0; i < 64; ++i) picks.emplace_back(0, rng.below(x.numel()));
    auto wide = widen(m);
    auto objective = [&](Graph<float>* g) { return cxrb::bce_loss(g, m.forward(g, x), target); };
    auto evaluate = [&] { return cxrb::bce_loss<double>(nullptr, wide.forward(nullptr, widen(x)), widen(target)).item(); };
    auto r = gradcheck::check<float>(objective, evaluate, {x}, 1e-4, picks, 16);
    EXPECT_EQ(r.checked, 16u);
    EXPECT_LE(r.max_rel_error, 1e-2);
}

// --- checkpoints ------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitIdentical)
{
    for (auto m : {cxrb::build_classifier<float>({}, 4), cxrb::build_segmenter<float>({32, 2, 4}, 4)}) {
        std::stringstream buf;
        cxrb::save_checkpoint(m, buf);
        EXPECT_EQ(buf.str().substr(0, 8), "CXRB0001");
        auto back = cxrb::load_checkpoint<float>(buf);
        EXPECT_EQ(back.config(), m.config());
        ASSERT_EQ(back.parameters().size(), m.parameters().size());
        for (std::size_t i = 0; i < m.parameters().size(); ++i) {
            EXPECT_EQ(back.parameters()[i].name, m.parameters()[i].name);
            EXPECT_EQ(values(back.parameters()[i].tensor), values(m.parameters()[i].tensor));
        }
        const auto x = random_batch(2, m.input_size(), 8);
        EXPECT_EQ(values(back.forward(nullptr, x)), values(m.forward(nullptr, x)));
    }
}

TEST(Checkpoint, RejectsCorruptFiles)
{
    std::stringstream buf;
    cxrb::save_checkpoint(cxrb::build_classifier<float>({}, 4), buf);
    const std::string good = buf.str();

    std::stringstream bad_magic("CXRB0002" + good.substr(8));
    EXPECT_THROW(cxrb::load_checkpoint<float>(bad_magic), cxrb::FormatError);
    std::stringstream truncated(good.substr(0, good.size() - 3));
    EXPECT_THROW(cxrb::load_checkpoint<float>(truncated), cxrb::FormatError);
    std::stringstream short_header(good.substr(0, 12));
    EXPECT_THROW(cxrb::load_checkpoint<float>(short_header), cxrb::FormatError);
}

// --- capacity ---------------------------------------------------------------

TEST(Capacity, ClassifierMemorisesSixteenSamples)
{
    ClassifierConfig cfg;
    cfg.input_size = 32;
    auto m = cxrb::build_classifier<float>(cfg, 41);
    const auto x = random_batch(16, 32, 42);
    cxrb::Rng rng(43);
    Tensor<float> y(Shape{16, 1});
    std::vector<float> labels(16);
    for (std::size_t i = 0; i < 16; ++i) labels[i] = static_cast<float>(i % 2);
    rng.shuffle(labels);
    std::copy(labels.begin(), labels.end(), y.data().begin());
    auto params = m.parameter_tensors();
    cxrb::Sgd<float> opt(0.01, 0.9);
    double acc = 0.0;
    for (int step = 0; step < 500 && acc < 0.95; ++step) {
        Graph<float> g;
        auto p = m.forward(&g, x);
        g.backward(cxrb::bce_loss(&g, p, y));
        opt.step(params);
        std::size_t correct = 0;
        auto q = m.forward(nullptr, x);
        for (std::size_t i = 0; i < 16; ++i) correct += (q[i] >= 0.5f) == (y[i] >= 0.5f);
        acc = correct / 16.0;
    }
    EXPECT_GE(acc, 0.95);
}

TEST(Capacity, SegmenterFitsSixteenMasks)
{
    // Each image holds a bright disc; the target is the disc.
    const std::size_t side = 32, n = 16;
    cxrb::Rng rng(51);
    Tensor<float> x(Shape{n, 1, side, side}), y(Shape{n, 1, side, side});
    for (std::size_t s = 0; s < n; ++s) {
        const double cr = rng.uniform(8, 24), cc = rng.uniform(8, 24), rad = rng.uniform(4, 7);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const bool in = std::hypot(r - cr, c - cc) <= rad;
                const auto i = (s * side + r) * side + c;
                y[i] = in ? 1.0f : 0.0f;
                x[i] = static_cast<float>((in ? 0.7 : 0.3) + 0.05 * rng.normal());
            }
    }
    auto m = cxrb::build_segmenter<float>({side, 2, 8}, 52);
    auto params = m.parameter_tensors();
    cxrb::Sgd<float> opt(0.01, 0.9, 1.0);
    double mean_dice = 0.0;
    for (int step = 0; step < 500 && mean_dice < 0.95; ++step) {
        Graph<float> g;
        g.backward(cxrb::bce_loss(&g, m.forward(&g, x), y));
        opt.step(params);
        if (step % 10 != 9) continue;
        auto p = m.forward(nullptr, x);
        mean_dice = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            std::size_t inter = 0, a = 0, b = 0;
            for (std::size_t i = s * side * side; i < (s + 1) * side * side; ++i) {
                inter += p[i] >= 0.5f && y[i] > 0.5f;
                a += p[i] >= 0.5f;
                b += y[i] > 0.5f;
            }
            mean_dice += 2.0 * inter / static_cast<double>(a + b) / n;
        }
    }
    EXPECT_GE(mean_dice, 0.95);
}
