#pragma once

// Mask prediction, binarization and region-of-interest cutting, and the four
// dataset variants built from one bones / bone-free image pair:
//   v01 raw, v02 bone-free, v03 = v01 * mask01, v04 = v02 * mask02.

#include "cxrb/image.hpp"
#include "cxrb/models.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <string>
#include <vector>

namespace cxrb {

inline constexpr double kDefaultMaskThreshold = 0.5;
inline constexpr std::size_t kDefaultKeepComponents = 2;

namespace detail {

template <class T>
Tensor<T> stack_images(const std::vector<const Image*>& images, std::size_t side)
{
    Tensor<T> batch(Shape{images.size(), 1, side, side});
    auto out = batch.data();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->rows != side || images[i]->cols != side)
            throw ShapeError("image of " + std::to_string(images[i]->rows) + "x" + std::to_string(images[i]->cols)
                             + " does not match model input " + std::to_string(side));
        std::copy(images[i]->pixels.begin(), images[i]->pixels.end(), out.begin() + i * side * side);
    }
    return batch;
}

} // namespace detail

/// Per-pixel lung probabilities for each image, batched `batch` at a time.
template <class T>
std::vector<Image> predict_masks(const Model<T>& segmenter, const std::vector<const Image*>& images,
                                 std::size_t batch = 16)
{
    if (!segmenter.is_segmenter()) throw UsageError("predict_mask needs a segmenter model");
    const auto side = segmenter.input_size();
    std::vector<Image> out;
    out.reserve(images.size());
    for (std::size_t lo = 0; lo < images.size(); lo += batch) {
        const std::vector<const Image*> part(images.begin() + lo, images.begin() + std::min(images.size(), lo + batch));
        const auto prob = segmenter.forward(nullptr, detail::stack_images<T>(part, side));
        for (std::size_t i = 0; i < part.size(); ++i) {
            Image m(side, side);
            for (std::size_t p = 0; p < m.size(); ++p) m.pixels[p] = static_cast<float>(prob[i * side * side + p]);
            out.push_back(std::move(m));
        }
    }
    return out;
}

template <class T>
Image predict_mask(const Model<T>& segmenter, const Image& image)
{
    return std::move(predict_masks(segmenter, {&image}).front());
}

/// Sizes and labels of the 4-connected foreground components, labels 1-based, 0 = background.
struct Components {
    std::vector<std::size_t> labels;
    std::vector<std::size_t> sizes;
};

inline Components label_components(const Mask& mask)
{
    Components out{std::vector<std::size_t>(mask.size(), 0), {}};
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask.pixels[start] || out.labels[start]) continue;
        const std::size_t id = out.sizes.size() + 1;
        std::size_t count = 0;
        stack.assign(1, start);
        out.labels[start] = id;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++count;
            const std::size_t r = p / mask.cols, c = p % mask.cols;
            auto visit = [&](std::size_t q) {
                if (mask.pixels[q] && !out.labels[q]) {
                    out.labels[q] = id;
                    stack.push_back(q);
                }
            };
            if (r > 0) visit(p - mask.cols);
            if (r + 1 < mask.rows) visit(p + mask.cols);
            if (c > 0) visit(p - 1);
            if (c + 1 < mask.cols) visit(p + 1);
        }
        out.sizes.push_back(count);
    }
    return out;
}

/// prob >= threshold is foreground; with keep_components > 0 only that many of
/// the largest 4-connected components survive (ties go to the earlier one in
/// row-major order).
inline Mask binarize_mask(const Image& prob, double threshold = kDefaultMaskThreshold,
                          std::size_t keep_components = kDefaultKeepComponents)
{
    if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("mask threshold must lie in (0, 1)");
    Mask m(prob.rows, prob.cols);
    for (std::size_t i = 0; i < prob.size(); ++i) m.pixels[i] = prob.pixels[i] >= threshold;
    if (keep_components == 0) return m;
    const auto comp = label_components(m);
    if (comp.sizes.size() <= keep_components) return m;
    std::vector<std::size_t> order(comp.sizes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return comp.sizes[a] > comp.sizes[b]; });
    std::vector<std::uint8_t> keep(comp.sizes.size() + 1, 0);
    for (std::size_t i = 0; i < keep_components; ++i) keep[order[i] + 1] = 1;
    for (std::size_t i = 0; i < m.size(); ++i) m.pixels[i] = keep[comp.labels[i]];
    return m;
}

/// Pixels outside the mask become exactly 0.
inline Image apply_mask(const Image& image, const Mask& mask)
{
    require_same_shape(image, mask, "apply_mask");
    Image out(image.rows, image.cols);
    for (std::size_t i = 0; i < image.size(); ++i) out.pixels[i] = mask.pixels[i] ? image.pixels[i] : 0.0f;
    return out;
}

struct VariantSet {
    Image v01, v02, v03, v04;
    Mask mask01, mask02;

    const Image& variant(std::size_t k) const
    {
        switch (k) {
        case 1: return v01;
        case 2: return v02;
        case 3: return v03;
        case 4: return v04;
        }
        throw UsageError("variant index must be 1..4");
    }
};

inline VariantSet assemble_variants(Image bones, Image nobones, Mask mask01, Mask mask02)
{
    require_same_shape(bones, nobones, "variant pair");
    VariantSet v;
    v.v03 = apply_mask(bones, mask01);
    v.v04 = apply_mask(nobones, mask02);
    v.v01 = std::move(bones);
    v.v02 = std::move(nobones);
    v.mask01 = std::move(mask01);
    v.mask02 = std::move(mask02);
    return v;
}

/// Each source image gets its own predicted mask.
template <class T>
VariantSet build_variants(const Image& bones, const Image& nobones, const Model<T>& segmenter,
                          double threshold = kDefaultMaskThreshold, std::size_t keep_components = kDefaultKeepComponents)
{
    require_same_shape(bones, nobones, "variant pair");
    auto probs = predict_masks(segmenter, {&bones, &nobones});
    return assemble_variants(bones, nobones, binarize_mask(probs[0], threshold, keep_components),
                             binarize_mask(probs[1], threshold, keep_components));
}

/// Batched build_variants over many pairs.
template <class T>
std::vector<VariantSet> build_variants(const std::vector<const Image*>& bones, const std::vector<const Image*>& nobones,
                                       const Model<T>& segmenter, double threshold = kDefaultMaskThreshold,
                                       std::size_t keep_components = kDefaultKeepComponents)
{
    if (bones.size() != nobones.size()) throw UsageError("bones and bone-free lists differ in length");
    std::vector<const Image*> all(bones);
    all.insert(all.end(), nobones.begin(), nobones.end());
    auto probs = predict_masks(segmenter, all);
    std::vector<VariantSet> out;
    out.reserve(bones.size());
    for (std::size_t i = 0; i < bones.size(); ++i)
        out.push_back(assemble_variants(*bones[i], *nobones[i], binarize_mask(probs[i], threshold, keep_components),
                                        binarize_mask(probs[bones.size() + i], threshold, keep_components)));
    return out;
}

} // namespace cxrb
