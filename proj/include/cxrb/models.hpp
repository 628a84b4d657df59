#pragma once

// The two networks: a UNet-style lung segmenter and a 7-conv-layer nodule
// classifier, plus the checkpoint format they are saved in.
//
// Checkpoint layout (all integers little-endian):
//   bytes 0..7   magic "CXRB0001"
//   bytes 8..15  u64 length L of the JSON manifest
//   next L bytes manifest: {"kind", "config", "parameters": [{"name","shape"}...]}
//   then every parameter in manifest order as raw f32 values

#include "cxrb/ops.hpp"
#include "cxrb/rng.hpp"
#include "cxrb/tensor.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cxrb {

struct SegmenterConfig {
    std::size_t input_size = 64;
    std::size_t depth = 3;
    std::size_t base_channels = 8;

    void validate() const
    {
        if (depth < 1) throw ConfigError("segmenter depth must be >= 1");
        if (base_channels < 1) throw ConfigError("segmenter base_channels must be >= 1");
        if (input_size == 0 || input_size % (std::size_t{1} << depth) != 0)
            throw ConfigError("segmenter input_size " + std::to_string(input_size) + " not divisible by 2^"
                              + std::to_string(depth));
    }

    bool operator==(const SegmenterConfig&) const = default;
};

struct ClassifierConfig {
    std::size_t input_size = 64;
    std::vector<std::size_t> channel_plan{8, 8, 16, 16, 32, 32, 64};
    /// 1-based indices of conv layers followed by a 2x max-pool.
    std::vector<std::size_t> pool_after{2, 4, 6, 7};

    static constexpr std::size_t kConvLayers = 7;

    void validate() const
    {
        if (channel_plan.size() != kConvLayers)
            throw ConfigError("classifier channel_plan must list exactly 7 conv layers, got "
                              + std::to_string(channel_plan.size()));
        for (auto c : channel_plan)
            if (c == 0) throw ConfigError("classifier channel counts must be positive");
        std::size_t side = input_size;
        for (std::size_t layer = 1; layer <= kConvLayers; ++layer) {
            const auto pools = std::count(pool_after.begin(), pool_after.end(), layer);
            if (pools > 1) throw ConfigError("classifier pool_after lists layer " + std::to_string(layer) + " twice");
            if (pools == 1) {
                if (side % 2 != 0 || side < 2)
                    throw ConfigError("classifier input_size " + std::to_string(input_size)
                                      + " does not survive the configured pooling");
                side /= 2;
            }
        }
        for (auto p : pool_after)
            if (p < 1 || p > kConvLayers) throw ConfigError("classifier pool_after index out of range");
        if (side < 1) throw ConfigError("classifier input_size too small");
    }

    /// Spatial side length after all pools.
    std::size_t final_side() const { return input_size >> pool_after.size(); }

    bool operator==(const ClassifierConfig&) const = default;
};

using ModelConfig = std::variant<SegmenterConfig, ClassifierConfig>;

template <class T = float>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <class T = float>
class Model {
public:
    Model(ModelConfig config, std::vector<NamedTensor<T>> params)
        : config_(std::move(config)), params_(std::move(params))
    {
    }

    const ModelConfig& config() const { return config_; }
    bool is_segmenter() const { return std::holds_alternative<SegmenterConfig>(config_); }
    std::string_view kind() const { return is_segmenter() ? "segmenter" : "classifier"; }

    std::size_t input_size() const
    {
        return std::visit([](const auto& c) { return c.input_size; }, config_);
    }

    const std::vector<NamedTensor<T>>& parameters() const { return params_; }

    /// Handles to every parameter tensor, in declaration order (for the optimizer).
    std::vector<Tensor<T>> parameter_tensors() const
    {
        std::vector<Tensor<T>> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.tensor);
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    const Tensor<T>& param(std::string_view name) const
    {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw UsageError("model has no parameter named " + std::string(name));
    }

    /// Deep copy: parameters are cloned and marked differentiable.
    Model clone() const
    {
        std::vector<NamedTensor<T>> copy;
        for (const auto& p : params_) {
            auto t = p.tensor.clone();
            t.requires_grad(true);
            copy.push_back({p.name, std::move(t)});
        }
        return Model(config_, std::move(copy));
    }

    /// Records into `graph` when it is non-null; pure inference otherwise.
    Tensor<T> forward(Graph<T>* graph, const Tensor<T>& batch) const;

private:
    ModelConfig config_;
    std::vector<NamedTensor<T>> params_;
};

namespace detail {

template <class T>
class ParamBuilder {
public:
    explicit ParamBuilder(std::uint64_t seed) : rng_(seed) {}

    /// He-uniform for layers feeding a relu, Xavier-uniform for the sigmoid head.
    void conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool sigmoid_head = false)
    {
        const double fan_in = static_cast<double>(in * k * k);
        const double fan_out = static_cast<double>(out * k * k);
        const double limit = sigmoid_head ? std::sqrt(6.0 / (fan_in + fan_out)) : std::sqrt(6.0 / fan_in);
        add(name + ".weight", Shape{out, in, k, k}, limit);
        add(name + ".bias", Shape{out}, 0.0);
    }

    void dense(const std::string& name, std::size_t in, std::size_t out)
    {
        add(name + ".weight", Shape{in, out}, std::sqrt(6.0 / static_cast<double>(in + out)));
        add(name + ".bias", Shape{out}, 0.0);
    }

    std::vector<NamedTensor<T>> take() { return std::move(params_); }

private:
    void add(std::string name, Shape shape, double limit)
    {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(rng_.uniform(-limit, limit));
        t.requires_grad(true);
        params_.push_back({std::move(name), std::move(t)});
    }

    Rng rng_;
    std::vector<NamedTensor<T>> params_;
};

inline std::size_t level_channels(const SegmenterConfig& cfg, std::size_t level)
{
    return cfg.base_channels << level;
}

template <class T>
Tensor<T> conv_relu(Graph<T>* g, const Model<T>& m, const std::string& name, const Tensor<T>& x)
{
    return relu(g, conv2d(g, x, m.param(name + ".weight"), m.param(name + ".bias"), 1, 1));
}

template <class T>
Tensor<T> segmenter_forward(Graph<T>* g, const Model<T>& m, const SegmenterConfig& cfg, Tensor<T> x)
{
    std::vector<Tensor<T>> skips;
    for (std::size_t level = 0; level < cfg.depth; ++level) {
        const auto prefix = "enc" + std::to_string(level);
        x = conv_relu(g, m, prefix + ".conv1", x);
        x = conv_relu(g, m, prefix + ".conv2", x);
        skips.push_back(x);
        x = maxpool2d(g, x, 2);
    }
    x = conv_relu(g, m, "bottleneck.conv1", x);
    x = conv_relu(g, m, "bottleneck.conv2", x);
    for (std::size_t level = cfg.depth; level-- > 0;) {
        const auto prefix = "dec" + std::to_string(level);
        x = concat_channels(g, upsample2x(g, x), skips[level]);
        x = conv_relu(g, m, prefix + ".conv1", x);
        x = conv_relu(g, m, prefix + ".conv2", x);
    }
    return sigmoid(g, conv2d(g, x, m.param("head.weight"), m.param("head.bias"), 1, 0));
}

template <class T>
Tensor<T> classifier_forward(Graph<T>* g, const Model<T>& m, const ClassifierConfig& cfg, Tensor<T> x)
{
    for (std::size_t layer = 1; layer <= ClassifierConfig::kConvLayers; ++layer) {
        x = conv_relu(g, m, "conv" + std::to_string(layer), x);
        if (std::find(cfg.pool_after.begin(), cfg.pool_after.end(), layer) != cfg.pool_after.end())
            x = maxpool2d(g, x, 2);
    }
    return sigmoid(g, dense(g, flatten(g, x), m.param("head.weight"), m.param("head.bias")));
}

} // namespace detail

template <class T>
Tensor<T> Model<T>::forward(Graph<T>* graph, const Tensor<T>& batch) const
{
    const auto n = input_size();
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != n || batch.dim(3) != n)
        throw ShapeError(std::string(kind()) + " expects [N,1," + std::to_string(n) + "," + std::to_string(n)
                         + "], got " + to_string(batch.shape()));
    if (const auto* seg = std::get_if<SegmenterConfig>(&config_))
        return detail::segmenter_forward(graph, *this, *seg, batch);
    return detail::classifier_forward(graph, *this, std::get<ClassifierConfig>(config_), batch);
}

template <class T>
Tensor<T> forward(const Model<T>& model, Graph<T>* graph, const Tensor<T>& batch)
{
    return model.forward(graph, batch);
}

/// Encoder of `depth` levels (two 3x3 conv+relu, then 2x max-pool), bottleneck,
/// mirrored decoder (upsample, concat skip, two 3x3 conv+relu), 1x1 conv + sigmoid.
template <class T = float>
Model<T> build_segmenter(const SegmenterConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    detail::ParamBuilder<T> b(seed);
    std::size_t in = 1;
    for (std::size_t level = 0; level < cfg.depth; ++level) {
        const auto ch = detail::level_channels(cfg, level);
        const auto prefix = "enc" + std::to_string(level);
        b.conv(prefix + ".conv1", ch, in, 3);
        b.conv(prefix + ".conv2", ch, ch, 3);
        in = ch;
    }
    const auto bottom = detail::level_channels(cfg, cfg.depth);
    b.conv("bottleneck.conv1", bottom, in, 3);
    b.conv("bottleneck.conv2", bottom, bottom, 3);
    in = bottom;
    for (std::size_t level = cfg.depth; level-- > 0;) {
        const auto ch = detail::level_channels(cfg, level);
        const auto prefix = "dec" + std::to_string(level);
        b.conv(prefix + ".conv1", ch, in + ch, 3);
        b.conv(prefix + ".conv2", ch, ch, 3);
        in = ch;
    }
    b.conv("head", 1, in, 1, true);
    return Model<T>(cfg, b.take());
}

/// Seven 3x3 conv+relu layers (pooling per config), flatten, dense to one
/// unit, sigmoid: one nodule probability per sample, shape [N, 1].
template <class T = float>
Model<T> build_classifier(const ClassifierConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    detail::ParamBuilder<T> b(seed);
    std::size_t in = 1;
    for (std::size_t layer = 1; layer <= ClassifierConfig::kConvLayers; ++layer) {
        const auto out = cfg.channel_plan[layer - 1];
        b.conv("conv" + std::to_string(layer), out, in, 3);
        in = out;
    }
    const auto side = cfg.final_side();
    b.dense("head", in * side * side, 1);
    return Model<T>(cfg, b.take());
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const ModelConfig& config)
{
    if (const auto* s = std::get_if<SegmenterConfig>(&config))
        return {{"input_size", s->input_size}, {"depth", s->depth}, {"base_channels", s->base_channels}};
    const auto& c = std::get<ClassifierConfig>(config);
    return {{"input_size", c.input_size}, {"channel_plan", c.channel_plan}, {"pool_after", c.pool_after}};
}

inline constexpr std::string_view kCheckpointMagic = "CXRB0001";

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v)
{
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(bytes, 8);
}

inline std::uint64_t read_u64_le(std::istream& is)
{
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw FormatError("checkpoint truncated in header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

} // namespace detail

template <class T>
void save_checkpoint(const Model<T>& model, std::ostream& os)
{
    nlohmann::json manifest{{"kind", model.kind()}, {"config", to_json(model.config())}};
    auto& list = manifest["parameters"] = nlohmann::json::array();
    for (const auto& p : model.parameters()) list.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    const std::string text = manifest.dump();
    os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
    detail::write_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : model.parameters()) {
        for (T v : p.tensor.data()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                                   static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
            os.write(bytes, 4);
        }
    }
    if (!os) throw FormatError("failed writing checkpoint");
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    save_checkpoint(model, os);
}

template <class T = float>
Model<T> load_checkpoint(std::istream& is)
{
    char magic[8];
    if (!is.read(magic, 8) || std::string_view(magic, 8) != kCheckpointMagic)
        throw FormatError("not a CXRB0001 checkpoint");
    const auto length = detail::read_u64_le(is);
    if (length > (std::uint64_t{1} << 30)) throw FormatError("checkpoint manifest length is implausible");
    std::string text(length, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(length))) throw FormatError("checkpoint truncated in manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    try {
        const auto kind = manifest.at("kind").get<std::string>();
        const auto& cfg = manifest.at("config");
        Model<T> skeleton = [&] {
            if (kind == "segmenter") {
                SegmenterConfig c{cfg.at("input_size").get<std::size_t>(), cfg.at("depth").get<std::size_t>(),
                                  cfg.at("base_channels").get<std::size_t>()};
                return build_segmenter<T>(c, 0);
            }
            if (kind == "classifier") {
                ClassifierConfig c{cfg.at("input_size").get<std::size_t>(),
                                   cfg.at("channel_plan").get<std::vector<std::size_t>>(),
                                   cfg.at("pool_after").get<std::vector<std::size_t>>()};
                return build_classifier<T>(c, 0);
            }
            throw FormatError("checkpoint has unknown model kind '" + kind + "'");
        }();
        const auto& list = manifest.at("parameters");
        if (list.size() != skeleton.parameters().size())
            throw FormatError("checkpoint parameter count does not match its config");
        for (std::size_t i = 0; i < list.size(); ++i) {
            const auto& expected = skeleton.parameters()[i];
            if (list[i].at("name").get<std::string>() != expected.name
                || list[i].at("shape").get<Shape>() != expected.tensor.shape())
                throw FormatError("checkpoint parameter " + std::to_string(i) + " does not match its config");
        }
        for (const auto& p : skeleton.parameters()) {
            auto tensor = p.tensor;
            for (auto& v : tensor.data()) {
                unsigned char b[4];
                if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated in " + p.name);
                const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
                v = static_cast<T>(std::bit_cast<float>(bits));
            }
        }
        return skeleton;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
}

template <class T = float>
Model<T> load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    return load_checkpoint<T>(is);
}

} // namespace cxrb
