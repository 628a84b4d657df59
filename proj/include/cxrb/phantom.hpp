#pragma once

// Synthetic chest phantoms: a thorax with two lung fields, an optional small
// nodule, and a bone layer (ribs and clavicles) that exists only in the
// "with bones" image of each pair.

#include "cxrb/image.hpp"
#include "cxrb/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

namespace cxrb {

struct PhantomConfig {
    std::size_t size = 64;
    double nodule_fraction = 154.0 / 247.0;
    double nodule_radius_min = 2.0;
    double nodule_radius_max = 4.0;
    double nodule_contrast_min = 0.10;
    double nodule_contrast_max = 0.20;
    std::size_t rib_count = 6;
    double rib_contrast = 0.10;
    double clavicle_contrast = 0.22;
    /// Soft-tissue brightness at the top of the thorax; it rises by 0.12 towards the bottom.
    double tissue_level = 0.10;
    /// Added to the thorax inside the lung fields; negative makes them darker.
    double lung_offset = -0.08;
    /// Rib-end blobs outside the lung fields, drawn with the nodule radius and
    /// contrast ranges; each sample gets a uniform count in [0, max].
    std::size_t rib_end_max = 30;
    /// Largest gap in pixels between a rib-end blob and the nearest lung pixel.
    std::size_t rib_end_margin = 3;
    double noise_sigma = 0.02;
    /// Lung pose jitter: centre shift and axis scale as fractions of the image, rotation in radians.
    double lung_shift_jitter = 0.03;
    double lung_scale_jitter = 0.08;
    double lung_angle_jitter = 0.12;

    void validate() const
    {
        if (size < 16) throw ConfigError("phantom size must be at least 16 pixels");
        if (!(nodule_fraction >= 0.0 && nodule_fraction <= 1.0))
            throw ConfigError("nodule_fraction must lie in [0, 1]");
        if (!(nodule_radius_min > 0.0 && nodule_radius_min <= nodule_radius_max))
            throw ConfigError("nodule radius range must be positive and ordered");
        if (!(nodule_contrast_min > 0.0 && nodule_contrast_min <= nodule_contrast_max && nodule_contrast_max <= 1.0))
            throw ConfigError("nodule contrast range must lie in (0, 1] and be ordered");
        if (rib_contrast < 0.0 || clavicle_contrast < 0.0 || noise_sigma < 0.0)
            throw ConfigError("contrasts and noise must be non-negative");
        if (lung_shift_jitter < 0.0 || lung_scale_jitter < 0.0 || lung_scale_jitter >= 0.5 || lung_angle_jitter < 0.0)
            throw ConfigError("lung jitter out of range");
        // The nodule disc must fit inside the smallest possible lung.
        const double minor = kLungSemiAxes[0] * (1.0 - lung_scale_jitter) * static_cast<double>(size);
        if (nodule_radius_max + 1.0 >= minor)
            throw ConfigError("nodule radius " + std::to_string(nodule_radius_max) + " px does not fit the lung minor "
                              + "semi-axis of " + std::to_string(minor) + " px");
    }

    /// Nominal lung ellipse semi-axes (x, y) as fractions of the image side.
    static constexpr double kLungSemiAxes[2] = {0.15, 0.27};
};

struct NoduleMeta {
    std::size_t row = 0;
    std::size_t col = 0;
    double radius = 0.0;
    double contrast = 0.0;
};

struct PhantomSample {
    Image image_bones;
    Image image_nobones;
    Mask lung_mask;
    /// Pixels where the bone layer is non-zero.
    Mask bone_region;
    std::optional<NoduleMeta> nodule;
    int label = 0;
};

namespace detail {

struct Ellipse {
    double cx, cy, ax, ay, angle;

    bool contains(double x, double y) const
    {
        const double c = std::cos(angle), s = std::sin(angle);
        const double dx = x - cx, dy = y - cy;
        const double u = (c * dx + s * dy) / ax, v = (-s * dx + c * dy) / ay;
        return u * u + v * v <= 1.0;
    }
};

/// Smooth bump: 1 at distance 0, 0 at |d| >= half_width.
inline double band_profile(double d, double half_width)
{
    const double t = std::abs(d) / half_width;
    return t >= 1.0 ? 0.0 : 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

inline double segment_distance(double px, double py, double x0, double y0, double x1, double y1)
{
    const double vx = x1 - x0, vy = y1 - y0;
    const double t = std::clamp(((px - x0) * vx + (py - y0) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    return std::hypot(px - (x0 + t * vx), py - (y0 + t * vy));
}

} // namespace detail

/// One phantom, fully determined by (cfg, seed). `with_nodule` forces the
/// label; generate_dataset uses it to hit the class balance exactly.
inline PhantomSample generate_phantom(const PhantomConfig& cfg, std::uint64_t seed, bool with_nodule)
{
    cfg.validate();
    Rng rng(seed);
    const std::size_t n = cfg.size;
    const double side = static_cast<double>(n);
    auto pixel_xy = [&](std::size_t r, std::size_t c) {
        return std::pair{(static_cast<double>(c) + 0.5) / side, (static_cast<double>(r) + 0.5) / side};
    };

    // (1) thorax with a vertical gradient on a dark surround.
    const detail::Ellipse thorax{0.5, 0.52, 0.45, 0.46, 0.0};
    Image base(n, n);
    Mask in_thorax(n, n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            const auto [x, y] = pixel_xy(r, c);
            const bool inside = thorax.contains(x, y);
            in_thorax.at(r, c) = inside;
            base.at(r, c) = static_cast<float>(inside ? cfg.tissue_level + 0.12 * y : 0.05);
        }

    // (2) two jittered lung ellipses.
    PhantomSample s;
    s.lung_mask = Mask(n, n);
    for (int side_sign : {-1, 1}) {
        const double jx = rng.uniform(-1.0, 1.0) * cfg.lung_shift_jitter;
        const double jy = rng.uniform(-1.0, 1.0) * cfg.lung_shift_jitter;
        const double sx = 1.0 + rng.uniform(-1.0, 1.0) * cfg.lung_scale_jitter;
        const double sy = 1.0 + rng.uniform(-1.0, 1.0) * cfg.lung_scale_jitter;
        const double tilt = rng.uniform(-1.0, 1.0) * cfg.lung_angle_jitter;
        const detail::Ellipse lung{0.5 + side_sign * 0.21 + jx, 0.46 + jy, PhantomConfig::kLungSemiAxes[0] * sx,
                                   PhantomConfig::kLungSemiAxes[1] * sy, side_sign * 0.08 + tilt};
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c) {
                const auto [x, y] = pixel_xy(r, c);
                if (lung.contains(x, y)) {
                    s.lung_mask.at(r, c) = 1;
                    base.at(r, c) += static_cast<float>(cfg.lung_offset - 0.06 * (y - lung.cy) / lung.ay);
                }
            }
    }

    // (3) nodule, drawn from the positions whose full disc lies inside the lungs.
    if (with_nodule) {
        const double radius = rng.uniform(cfg.nodule_radius_min, cfg.nodule_radius_max);
        const double contrast = rng.uniform(cfg.nodule_contrast_min, cfg.nodule_contrast_max);
        const auto reach = static_cast<std::ptrdiff_t>(std::ceil(radius));
        auto disc_inside = [&](std::ptrdiff_t r0, std::ptrdiff_t c0) {
            for (std::ptrdiff_t dr = -reach; dr <= reach; ++dr)
                for (std::ptrdiff_t dc = -reach; dc <= reach; ++dc) {
                    if (static_cast<double>(dr * dr + dc * dc) > radius * radius) continue;
                    const auto r = r0 + dr, c = c0 + dc;
                    if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(n) || c >= static_cast<std::ptrdiff_t>(n)
                        || !s.lung_mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)))
                        return false;
                }
            return true;
        };
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < s.lung_mask.size(); ++i)
            if (s.lung_mask.pixels[i]
                && disc_inside(static_cast<std::ptrdiff_t>(i / n), static_cast<std::ptrdiff_t>(i % n)))
                candidates.push_back(i);
        if (candidates.empty()) throw ConfigError("no lung position can hold a nodule of radius " + std::to_string(radius));
        const auto pick = candidates[rng.below(candidates.size())];
        NoduleMeta m{pick / n, pick % n, radius, contrast};
        const double sigma = radius / 2.0;
        for (std::ptrdiff_t dr = -reach; dr <= reach; ++dr)
            for (std::ptrdiff_t dc = -reach; dc <= reach; ++dc) {
                const double d2 = static_cast<double>(dr * dr + dc * dc);
                if (d2 > radius * radius) continue;
                base.at(m.row + dr, m.col + dc) += static_cast<float>(contrast * std::exp(-d2 / (2 * sigma * sigma)));
            }
        s.nodule = m;
    }
    s.label = with_nodule ? 1 : 0;

    for (auto& v : base.pixels) v += static_cast<float>(cfg.noise_sigma * rng.normal());

    // (4) bone layer: arched rib bands with a random vertical phase, clavicles near the apices.
    Image bones(n, n);
    Mask on_rib(n, n);
    const double phase = rng.uniform();
    const double spacing = 0.62 / static_cast<double>(cfg.rib_count);
    const double rib_half_width = 0.022;
    const double arch = 0.05 + rng.uniform(-0.01, 0.01);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            if (!in_thorax.at(r, c)) continue;
            const auto [x, y] = pixel_xy(r, c);
            const double lateral = std::abs(x - 0.5);
            if (lateral < 0.04) continue;
            const double t = std::clamp((lateral - 0.04) / 0.41, 0.0, 1.0);
            double v = 0.0;
            for (std::size_t k = 0; k < cfg.rib_count; ++k) {
                const double centre = 0.16 + (static_cast<double>(k) + phase) * spacing
                                      - arch * std::sin(std::numbers::pi * t) + 0.06 * t;
                v = std::max(v, detail::band_profile(y - centre, rib_half_width));
            }
            on_rib.at(r, c) = v >= 0.5;
            double value = cfg.rib_contrast * v;
            for (int side_sign : {-1, 1}) {
                const double d = detail::segment_distance(x, y, 0.5 + side_sign * 0.05, 0.13, 0.5 + side_sign * 0.36,
                                                          0.09);
                value = std::max(value, cfg.clavicle_contrast * detail::band_profile(d, 0.02));
            }
            bones.at(r, c) = static_cast<float>(value);
        }

    // Rib ends: nodule-sized blobs on the ribs, wholly outside the lung fields.
    const auto ends = static_cast<std::size_t>(rng.below(cfg.rib_end_max + 1));
    if (ends > 0 && cfg.rib_contrast > 0.0) {
        for (std::size_t k = 0; k < ends; ++k) {
            const double radius = rng.uniform(cfg.nodule_radius_min, cfg.nodule_radius_max);
            const double contrast = rng.uniform(cfg.nodule_contrast_min, cfg.nodule_contrast_max);
            const auto reach = static_cast<std::ptrdiff_t>(std::ceil(radius));
            auto clear_of_lungs = [&](std::size_t r, std::size_t c) {
                for (std::ptrdiff_t dr = -reach; dr <= reach; ++dr)
                    for (std::ptrdiff_t dc = -reach; dc <= reach; ++dc) {
                        const auto rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(c) + dc;
                        if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(n) || cc >= static_cast<std::ptrdiff_t>(n)
                            || !in_thorax.at(rr, cc) || s.lung_mask.at(rr, cc))
                            return false;
                    }
                return true;
            };
            // Within a few pixels of a lung border, where rib ends meet the lung fields.
            const auto near = reach + static_cast<std::ptrdiff_t>(cfg.rib_end_margin);
            auto near_lungs = [&](std::size_t r, std::size_t c) {
                for (std::ptrdiff_t dr = -near; dr <= near; ++dr)
                    for (std::ptrdiff_t dc = -near; dc <= near; ++dc) {
                        const auto rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(c) + dc;
                        if (rr >= 0 && cc >= 0 && rr < static_cast<std::ptrdiff_t>(n) && cc < static_cast<std::ptrdiff_t>(n)
                            && s.lung_mask.at(rr, cc))
                            return true;
                    }
                return false;
            };
            std::vector<std::size_t> sites;
            for (std::size_t i = 0; i < on_rib.size(); ++i)
                if (on_rib.pixels[i] && clear_of_lungs(i / n, i % n) && near_lungs(i / n, i % n)) sites.push_back(i);
            if (sites.empty()) break;
            const auto at = sites[rng.below(sites.size())];
            const double sigma = radius / 2.0;
            for (std::ptrdiff_t dr = -reach; dr <= reach; ++dr)
                for (std::ptrdiff_t dc = -reach; dc <= reach; ++dc) {
                    const double d2 = static_cast<double>(dr * dr + dc * dc);
                    if (d2 > radius * radius) continue;
                    bones.at(at / n + dr, at % n + dc) += static_cast<float>(contrast * std::exp(-d2 / (2 * sigma * sigma)));
                }
        }
    }

    s.image_nobones = base;
    s.image_bones = base;
    s.bone_region = Mask(n, n);
    for (std::size_t i = 0; i < base.size(); ++i) {
        s.bone_region.pixels[i] = bones.pixels[i] > 0.0f;
        s.image_bones.pixels[i] += bones.pixels[i];
    }
    for (auto* img : {&s.image_nobones, &s.image_bones})
        for (auto& v : img->pixels) v = std::clamp(v, 0.0f, 1.0f);
    return s;
}

/// Number of positives in a dataset of n samples: round-half-up of n * fraction.
inline std::size_t positive_count(std::size_t n, double fraction)
{
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 0.5));
}

/// Exactly positive_count(n, fraction) samples carry nodules. Sample i uses
/// seed + i; which indices are positive is a seeded permutation.
inline std::vector<PhantomSample> generate_dataset(const PhantomConfig& cfg, std::size_t n, std::uint64_t seed)
{
    if (n == 0) throw UsageError("dataset size must be positive");
    cfg.validate();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    rng.shuffle(order);
    std::vector<bool> positive(n, false);
    const auto npos = positive_count(n, cfg.nodule_fraction);
    for (std::size_t i = 0; i < npos; ++i) positive[order[i]] = true;
    std::vector<PhantomSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_phantom(cfg, seed + i, positive[i]));
    return out;
}

} // namespace cxrb
