#pragma once

// Wall-clock timing of one classifier training step (forward, backward,
// optimizer update) over a grid of image sizes, batch sizes and worker counts.

#include "cxrb/models.hpp"
#include "cxrb/optim.hpp"
#include "cxrb/parallel.hpp"

#include "json.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace cxrb {

struct BenchConfig {
    std::vector<std::size_t> image_sizes{256, 512, 1024};
    std::vector<std::size_t> batch_sizes{1, 2, 4, 8};
    std::vector<std::size_t> workers{1};
    std::size_t runs = 5;
    std::size_t warmup = 2;
    std::uint64_t seed = 1;
    /// Refuse configurations whose estimated footprint exceeds this; 0 means
    /// 80% of physical memory.
    std::size_t memory_limit_bytes = 0;
    ClassifierConfig model{};

    void validate() const
    {
        if (image_sizes.empty() || batch_sizes.empty() || workers.empty())
            throw ConfigError("benchmark grid needs at least one size, batch and worker count");
        if (runs < 3) throw ConfigError("benchmark needs at least 3 timed runs");
        for (auto b : batch_sizes)
            if (b == 0) throw ConfigError("batch sizes must be positive");
        for (auto w : workers)
            if (w == 0) throw ConfigError("worker counts must be positive");
    }
};

struct BenchPoint {
    std::size_t image_size = 0;
    std::size_t batch_size = 0;
    std::size_t workers = 1;
    double median_seconds = 0.0;
    std::size_t runs = 0;
    std::size_t warmup = 0;
    std::vector<double> samples;
    /// FNV-1a over the loss and the updated parameters after one step from the
    /// initial weights; equal across worker counts when the math is.
    std::uint64_t fingerprint = 0;
};

inline double median(std::vector<double> v)
{
    if (v.empty()) throw UsageError("median of an empty list");
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::size_t physical_memory_bytes()
{
    const long pages = ::sysconf(_SC_PHYS_PAGES);
    const long page = ::sysconf(_SC_PAGE_SIZE);
    return pages > 0 && page > 0 ? static_cast<std::size_t>(pages) * static_cast<std::size_t>(page) : 0;
}

/// Upper estimate of the bytes held during one step: every activation on the
/// tape (conv output, ReLU output, pool output) plus an equally sized gradient.
inline std::size_t estimate_step_bytes(const ClassifierConfig& cfg, std::size_t batch)
{
    std::size_t floats = batch * cfg.input_size * cfg.input_size;
    std::size_t side = cfg.input_size;
    for (std::size_t layer = 1; layer <= ClassifierConfig::kConvLayers; ++layer) {
        floats += 2 * batch * cfg.channel_plan[layer - 1] * side * side;
        if (std::find(cfg.pool_after.begin(), cfg.pool_after.end(), layer) != cfg.pool_after.end()) {
            side /= 2;
            floats += batch * cfg.channel_plan[layer - 1] * side * side;
        }
    }
    return 2 * floats * sizeof(float);
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

/// Times `runs` steps after `warmup` untimed ones with exactly `workers`
/// workers. Every step starts from the same initial weights and random batch.
inline BenchPoint time_step(const BenchConfig& bench, std::size_t image_size, std::size_t batch_size,
                            std::size_t workers)
{
    if (workers == 0) throw UsageError("workers must be >= 1");
    ClassifierConfig cfg = bench.model;
    cfg.input_size = image_size;
    cfg.validate();
    const auto need = estimate_step_bytes(cfg, batch_size);
    const auto limit = bench.memory_limit_bytes ? bench.memory_limit_bytes : physical_memory_bytes() / 10 * 8;
    if (limit && need > limit)
        throw ResourceError("image " + std::to_string(image_size) + "x" + std::to_string(image_size) + ", batch "
                            + std::to_string(batch_size) + " needs about " + std::to_string(need >> 20)
                            + " MiB, limit is " + std::to_string(limit >> 20) + " MiB");

    const auto initial = build_classifier<float>(cfg, bench.seed);
    Rng rng(bench.seed + 1);
    Tensor<float> x(Shape{batch_size, 1, image_size, image_size});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
    Tensor<float> y(Shape{batch_size, 1});
    for (std::size_t i = 0; i < batch_size; ++i) y[i] = static_cast<float>(i % 2);

    ScopedWorkers pin(workers);
    BenchPoint pt{image_size, batch_size, workers, 0.0, bench.runs, bench.warmup, {}, 0};
    for (std::size_t run = 0; run < bench.warmup + bench.runs; ++run) {
        auto model = initial.clone();
        auto params = model.parameter_tensors();
        Sgd<float> opt(0.01, 0.9);
        const auto t0 = std::chrono::steady_clock::now();
        Graph<float> graph;
        const auto loss = bce_loss(&graph, model.forward(&graph, x), y);
        graph.backward(loss);
        opt.step(params);
        const auto t1 = std::chrono::steady_clock::now();
        if (run >= bench.warmup) pt.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
        if (run == 0) {
            std::uint64_t h = 0xcbf29ce484222325ULL;
            const float l = loss.item();
            h = detail::fnv1a(h, &l, sizeof l);
            for (const auto& p : params) h = detail::fnv1a(h, p.data().data(), p.numel() * sizeof(float));
            pt.fingerprint = h;
        }
    }
    pt.median_seconds = median(pt.samples);
    return pt;
}

/// Every point of the grid, worker counts innermost.
inline std::vector<BenchPoint> run_bench(const BenchConfig& bench,
                                         const std::function<void(const BenchPoint&)>& on_point = {})
{
    bench.validate();
    std::vector<BenchPoint> out;
    for (auto size : bench.image_sizes)
        for (auto batch : bench.batch_sizes)
            for (auto w : bench.workers) {
                out.push_back(time_step(bench, size, batch, w));
                if (on_point) on_point(out.back());
            }
    return out;
}

struct SpeedupRow {
    std::size_t image_size = 0;
    std::size_t batch_size = 0;
    std::size_t workers = 1;
    double speedup = 1.0;
};

struct SpeedupTable {
    std::vector<SpeedupRow> rows;

    std::optional<double> at(std::size_t size, std::size_t batch, std::size_t workers) const
    {
        for (const auto& r : rows)
            if (r.image_size == size && r.batch_size == batch && r.workers == workers) return r.speedup;
        return std::nullopt;
    }
};

/// speedup = median(workers = 1) / median(workers = k) per (size, batch) cell.
inline SpeedupTable speedup_report(const std::vector<BenchPoint>& points)
{
    std::map<std::pair<std::size_t, std::size_t>, double> reference;
    for (const auto& p : points)
        if (p.workers == 1) reference[{p.image_size, p.batch_size}] = p.median_seconds;
    SpeedupTable t;
    for (const auto& p : points) {
        const auto it = reference.find({p.image_size, p.batch_size});
        if (it == reference.end())
            throw UsageError("no workers=1 reference for image " + std::to_string(p.image_size) + ", batch "
                             + std::to_string(p.batch_size));
        t.rows.push_back({p.image_size, p.batch_size, p.workers, p.workers == 1 ? 1.0 : it->second / p.median_seconds});
    }
    return t;
}

/// Published maxima, shown next to measured numbers for orientation only.
inline std::vector<std::string> speedup_context_lines()
{
    return {"reference: multi-CPU max speedup 3.0x at 1024x1024, batch 8",
            "reference: GPU max speedup 9.5x at 1024x1024, batch 8 (GPU mode not implemented)"};
}

/// Speedup at the largest image size should not fall below that at the
/// smallest, per (batch, workers). Violations are warnings.
inline std::vector<std::string> monotone_trend_warnings(const SpeedupTable& table)
{
    std::vector<std::string> warnings;
    std::map<std::pair<std::size_t, std::size_t>, std::pair<SpeedupRow, SpeedupRow>> span;
    for (const auto& r : table.rows) {
        if (r.workers == 1) continue;
        const std::pair key{r.batch_size, r.workers};
        auto it = span.find(key);
        if (it == span.end()) {
            span.emplace(key, std::pair{r, r});
            continue;
        }
        if (r.image_size < it->second.first.image_size) it->second.first = r;
        if (r.image_size > it->second.second.image_size) it->second.second = r;
    }
    for (const auto& [key, lohi] : span) {
        const auto& [lo, hi] = lohi;
        if (lo.image_size != hi.image_size && hi.speedup < lo.speedup)
            warnings.push_back("WARN batch " + std::to_string(key.first) + ", workers " + std::to_string(key.second)
                               + ": speedup " + std::to_string(hi.speedup) + " at " + std::to_string(hi.image_size)
                               + " below " + std::to_string(lo.speedup) + " at " + std::to_string(lo.image_size));
    }
    return warnings;
}

inline void write_bench_times_csv(const std::vector<BenchPoint>& points, const std::filesystem::path& path)
{
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    os << "image_size,batch_size,workers,median_seconds\n";
    os.precision(9);
    for (const auto& p : points)
        os << p.image_size << ',' << p.batch_size << ',' << p.workers << ',' << p.median_seconds << '\n';
}

inline void write_speedup_csv(const SpeedupTable& table, const std::filesystem::path& path)
{
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    os << "image_size,batch_size,workers,speedup\n";
    os.precision(6);
    for (const auto& r : table.rows)
        os << r.image_size << ',' << r.batch_size << ',' << r.workers << ',' << r.speedup << '\n';
}

inline nlohmann::json bench_environment()
{
    using clock = std::chrono::steady_clock;
    return {{"hardware_concurrency", std::thread::hardware_concurrency()},
            {"online_cpus", ::sysconf(_SC_NPROCESSORS_ONLN)},
            {"physical_memory_bytes", physical_memory_bytes()},
            {"clock", "std::chrono::steady_clock"},
            {"clock_is_steady", clock::is_steady},
            {"clock_period_ns", 1e9 * static_cast<double>(clock::period::num) / static_cast<double>(clock::period::den)},
            {"compiler", __VERSION__}};
}

} // namespace cxrb
