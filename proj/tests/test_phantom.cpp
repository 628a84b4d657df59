#include "cxrb/phantom.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using cxrb::PhantomConfig;

namespace {

std::vector<std::uint8_t> bytes(const cxrb::Mask& m) { return m.pixels; }

} // namespace

TEST(Phantom, SameSeedIsBitIdentical)
{
    PhantomConfig cfg;
    auto a = cxrb::generate_phantom(cfg, 17, true);
    auto b = cxrb::generate_phantom(cfg, 17, true);
    EXPECT_EQ(a.image_bones, b.image_bones);
    EXPECT_EQ(a.image_nobones, b.image_nobones);
    EXPECT_EQ(a.lung_mask, b.lung_mask);
    ASSERT_TRUE(a.nodule && b.nodule);
    EXPECT_EQ(a.nodule->row, b.nodule->row);
    EXPECT_EQ(a.nodule->radius, b.nodule->radius);
    EXPECT_NE(cxrb::generate_phantom(cfg, 18, true).image_bones, a.image_bones);
}

TEST(Phantom, NoBoneContrastMeansIdenticalPair)
{
    PhantomConfig cfg;
    cfg.rib_contrast = 0.0;
    cfg.clavicle_contrast = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto s = cxrb::generate_phantom(cfg, seed, seed % 2 == 0);
        EXPECT_EQ(s.image_bones, s.image_nobones);
    }
}

TEST(Phantom, PairDiffersOnlyInsideBoneRegion)
{
    PhantomConfig cfg;
    double residue = 0.0;
    std::size_t bone_pixels = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto s = cxrb::generate_phantom(cfg, seed, seed % 3 == 0);
        for (std::size_t i = 0; i < s.image_bones.size(); ++i) {
            const double d = std::abs(s.image_bones.pixels[i] - s.image_nobones.pixels[i]);
            if (s.bone_region.pixels[i]) {
                residue += d;
                ++bone_pixels;
            } else {
                EXPECT_LE(d, 1e-6);
            }
        }
    }
    ASSERT_GT(bone_pixels, 0u);
    EXPECT_GT(residue / static_cast<double>(bone_pixels), 0.0);
}

TEST(Phantom, PixelsStayInUnitInterval)
{
    PhantomConfig cfg;
    cfg.noise_sigma = 0.2;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto s = cxrb::generate_phantom(cfg, seed, true);
        for (const auto* img : {&s.image_bones, &s.image_nobones})
            for (float v : img->pixels) {
                EXPECT_GE(v, 0.0f);
                EXPECT_LE(v, 1.0f);
            }
    }
}

TEST(Phantom, LungMaskHasTwoComponents)
{
    PhantomConfig cfg;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto s = cxrb::generate_phantom(cfg, seed, false);
        EXPECT_EQ(oracle::component_sizes(bytes(s.lung_mask), s.lung_mask.rows, s.lung_mask.cols).size(), 2u)
            << "seed " << seed;
    }
}

TEST(Phantom, NoduleDiscLiesInsideLungs)
{
    PhantomConfig cfg;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto s = cxrb::generate_phantom(cfg, seed, true);
        ASSERT_TRUE(s.nodule);
        EXPECT_EQ(s.label, 1);
        const auto& m = *s.nodule;
        EXPECT_GE(m.radius, cfg.nodule_radius_min);
        EXPECT_LE(m.radius, cfg.nodule_radius_max);
        EXPECT_GT(m.contrast, 0.0);
        EXPECT_LE(m.contrast, 1.0);
        EXPECT_EQ(s.lung_mask.at(m.row, m.col), 1);
        const long reach = static_cast<long>(std::ceil(m.radius));
        for (long dr = -reach; dr <= reach; ++dr)
            for (long dc = -reach; dc <= reach; ++dc) {
                if (static_cast<double>(dr * dr + dc * dc) > m.radius * m.radius) continue;
                const long r = static_cast<long>(m.row) + dr, c = static_cast<long>(m.col) + dc;
                ASSERT_TRUE(r >= 0 && c >= 0 && r < 64 && c < 64);
                EXPECT_EQ(s.lung_mask.at(r, c), 1) << "seed " << seed;
            }
    }
}

TEST(Phantom, NegativeHasNoNodule)
{
    auto s = cxrb::generate_phantom(PhantomConfig{}, 3, false);
    EXPECT_FALSE(s.nodule);
    EXPECT_EQ(s.label, 0);
}

TEST(Phantom, RejectsImpossibleGeometry)
{
    PhantomConfig cfg;
    cfg.nodule_radius_min = 9.0;
    cfg.nodule_radius_max = 12.0;
    EXPECT_THROW(cxrb::generate_phantom(cfg, 0, true), cxrb::ConfigError);
    PhantomConfig frac;
    frac.nodule_fraction = 1.5;
    EXPECT_THROW(cxrb::generate_dataset(frac, 4, 0), cxrb::ConfigError);
}

TEST(Dataset, JsrtSizedSplit)
{
    PhantomConfig cfg;
    cfg.size = 32;
    cfg.nodule_radius_min = 1.0;
    cfg.nodule_radius_max = 2.0;
    auto d = cxrb::generate_dataset(cfg, 247, 1);
    std::size_t pos = 0;
    for (const auto& s : d) pos += s.label;
    EXPECT_EQ(pos, 154u);
    EXPECT_EQ(d.size() - pos, 93u);
}

TEST(Dataset, ZeroFractionAllNegative)
{
    PhantomConfig cfg;
    cfg.nodule_fraction = 0.0;
    for (const auto& s : cxrb::generate_dataset(cfg, 10, 2)) EXPECT_EQ(s.label, 0);
}

TEST(Dataset, ExactHalfOfThousand)
{
    EXPECT_EQ(cxrb::positive_count(1000, 0.5), 500u);
    PhantomConfig cfg;
    cfg.size = 16;
    cfg.nodule_fraction = 0.5;
    cfg.nodule_radius_min = 1.0;
    cfg.nodule_radius_max = 1.2;
    std::size_t pos = 0;
    for (const auto& s : cxrb::generate_dataset(cfg, 1000, 3)) pos += s.label;
    EXPECT_EQ(pos, 500u);
}

TEST(Dataset, SampleSeedsAreSeedPlusIndex)
{
    PhantomConfig cfg;
    auto d = cxrb::generate_dataset(cfg, 6, 40);
    for (std::size_t i = 0; i < d.size(); ++i)
        EXPECT_EQ(d[i].image_bones, cxrb::generate_phantom(cfg, 40 + i, d[i].label == 1).image_bones);
}

TEST(Dice, CountingCases)
{
    cxrb::Mask a(4, 6), b(4, 6);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 6; ++c) {
            a.at(r, c) = c < 3;
            b.at(r, c) = 1;
        }
    EXPECT_DOUBLE_EQ(cxrb::dice(a, a), 1.0);
    EXPECT_DOUBLE_EQ(cxrb::dice(a, b), 2.0 / 3.0);
    cxrb::Mask right(4, 6);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 3; c < 6; ++c) right.at(r, c) = 1;
    EXPECT_DOUBLE_EQ(cxrb::dice(a, right), 0.0);
    EXPECT_DOUBLE_EQ(cxrb::dice(cxrb::Mask(3, 3), cxrb::Mask(3, 3)), 1.0);
    EXPECT_THROW(cxrb::dice(a, cxrb::Mask(4, 5)), cxrb::ShapeError);
}

TEST(Dice, MatchesOracleOnRandomMasks)
{
    cxrb::Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        cxrb::Mask a(9, 11), b(9, 11);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a.pixels[i] = rng.uniform() < 0.4;
            b.pixels[i] = rng.uniform() < 0.6;
        }
        EXPECT_DOUBLE_EQ(cxrb::dice(a, b), oracle::dice(a.pixels, b.pixels));
    }
}
