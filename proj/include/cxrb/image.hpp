#pragma once

// Grayscale images and binary masks, plus the file formats they travel in:
// binary PGM (P5, 8 or 16 bit) and headerless raw dumps.

#include "cxrb/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace cxrb {

/// Row-major 2D grid.
template <class V>
struct Grid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<V> pixels;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, V fill = V{}) : rows(r), cols(c), pixels(r * c, fill) {}

    std::size_t size() const { return pixels.size(); }
    V& at(std::size_t r, std::size_t c) { return pixels[r * cols + c]; }
    const V& at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
    bool same_shape(const auto& other) const { return rows == other.rows && cols == other.cols; }

    bool operator==(const Grid&) const = default;
};

/// Intensities, nominally in [0, 1].
using Image = Grid<float>;
/// Values in {0, 1}.
using Mask = Grid<std::uint8_t>;

inline void require_same_shape(const auto& a, const auto& b, const char* what)
{
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs "
                         + std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

/// 2|a∩b| / (|a|+|b|), with dice of two empty masks defined as 1.
inline double dice(const Mask& a, const Mask& b)
{
    require_same_shape(a, b, "dice");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a.pixels[i] != 0, y = b.pixels[i] != 0;
        inter += x && y;
        na += x;
        nb += y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline Image invert(const Image& image)
{
    Image out = image;
    for (auto& v : out.pixels) v = 1.0f - v;
    return out;
}

/// Area-average downsampling when shrinking by an integer factor, bilinear otherwise.
inline Image resize(const Image& image, std::size_t rows, std::size_t cols)
{
    if (rows == 0 || cols == 0) throw ShapeError("resize to an empty image");
    if (image.rows == rows && image.cols == cols) return image;
    Image out(rows, cols);
    if (image.rows % rows == 0 && image.cols % cols == 0) {
        const std::size_t fy = image.rows / rows, fx = image.cols / cols;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < fy; ++i)
                    for (std::size_t j = 0; j < fx; ++j) s += image.at(r * fy + i, c * fx + j);
                out.at(r, c) = static_cast<float>(s / static_cast<double>(fy * fx));
            }
        return out;
    }
    const double sy = static_cast<double>(image.rows) / rows, sx = static_cast<double>(image.cols) / cols;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, image.rows - 1.0);
            const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, image.cols - 1.0);
            const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
            const auto y1 = std::min(y0 + 1, image.rows - 1), x1 = std::min(x0 + 1, image.cols - 1);
            const double wy = y - y0, wx = x - x0;
            out.at(r, c) = static_cast<float>((1 - wy) * ((1 - wx) * image.at(y0, x0) + wx * image.at(y0, x1))
                                              + wy * ((1 - wx) * image.at(y1, x0) + wx * image.at(y1, x1)));
        }
    return out;
}

// ---------------------------------------------------------------------------
// PGM

namespace detail {

inline std::vector<unsigned char> read_all(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Parses one whitespace-delimited header integer, skipping '#' comments.
inline std::size_t pgm_header_int(const std::vector<unsigned char>& bytes, std::size_t& pos)
{
    for (;;) {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    std::size_t value = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
        value = value * 10 + (bytes[pos++] - '0');
        if (++digits > 9) throw FormatError("PGM header number too long");
    }
    if (digits == 0) throw FormatError("malformed PGM header");
    return value;
}

} // namespace detail

/// Reads a binary P5 PGM; 16-bit samples are big-endian. Values are divided by maxval.
inline Image read_pgm(const std::filesystem::path& path)
{
    const auto bytes = detail::read_all(path);
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError(path.string() + ": not a P5 PGM");
    std::size_t pos = 2;
    const auto cols = detail::pgm_header_int(bytes, pos);
    const auto rows = detail::pgm_header_int(bytes, pos);
    const auto maxval = detail::pgm_header_int(bytes, pos);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(path.string() + ": malformed PGM header");
    ++pos;
    if (cols == 0 || rows == 0 || maxval == 0 || maxval > 65535)
        throw FormatError(path.string() + ": invalid PGM dimensions or maxval");
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    const std::size_t expected = rows * cols * bpp;
    if (bytes.size() - pos < expected)
        throw FormatError(path.string() + ": expected " + std::to_string(expected) + " pixel bytes, found "
                          + std::to_string(bytes.size() - pos));
    Image img(rows, cols);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const std::size_t v = bpp == 1 ? bytes[pos + i] : (std::size_t{bytes[pos + 2 * i]} << 8) | bytes[pos + 2 * i + 1];
        img.pixels[i] = static_cast<float>(static_cast<double>(std::min(v, maxval)) / static_cast<double>(maxval));
    }
    return img;
}

/// Writes a P5 PGM, quantizing [0,1] to 0..maxval (maxval 255 or 65535).
inline void write_pgm(const Image& image, const std::filesystem::path& path, std::size_t maxval = 65535)
{
    if (maxval != 255 && maxval != 65535) throw UsageError("PGM maxval must be 255 or 65535");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os << "P5\n" << image.cols << ' ' << image.rows << '\n' << maxval << '\n';
    std::vector<unsigned char> out;
    out.reserve(image.size() * (maxval > 255 ? 2 : 1));
    for (float v : image.pixels) {
        const auto q = static_cast<std::uint32_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * maxval));
        if (maxval > 255) out.push_back(static_cast<unsigned char>(q >> 8));
        out.push_back(static_cast<unsigned char>(q & 0xff));
    }
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw FormatError("failed writing " + path.string());
}

/// Masks are stored as 8-bit PGM with values {0, 255}.
inline void write_mask_pgm(const Mask& mask, const std::filesystem::path& path)
{
    Image img(mask.rows, mask.cols);
    for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask.pixels[i] ? 1.0f : 0.0f;
    write_pgm(img, path, 255);
}

inline Mask read_mask_pgm(const std::filesystem::path& path)
{
    const auto img = read_pgm(path);
    Mask m(img.rows, img.cols);
    for (std::size_t i = 0; i < img.size(); ++i) m.pixels[i] = img.pixels[i] >= 0.5f;
    return m;
}

// ---------------------------------------------------------------------------
// Headerless raw

enum class ByteOrder { big, little };

struct RawLoaderConfig {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t bytes_per_pixel = 2;
    ByteOrder byte_order = ByteOrder::big;
    std::size_t max_value = 4095;
    bool invert = false;

    std::size_t expected_bytes() const { return width * height * bytes_per_pixel; }

    void validate() const
    {
        if (width == 0 || height == 0) throw ConfigError("raw loader needs positive width and height");
        if (bytes_per_pixel != 1 && bytes_per_pixel != 2) throw ConfigError("raw bytes_per_pixel must be 1 or 2");
        if (max_value == 0) throw ConfigError("raw max_value must be positive");
    }
};

inline Image read_raw(const std::filesystem::path& path, const RawLoaderConfig& cfg)
{
    cfg.validate();
    const auto bytes = detail::read_all(path);
    if (bytes.size() != cfg.expected_bytes())
        throw FormatError(path.string() + ": expected " + std::to_string(cfg.expected_bytes()) + " bytes, got "
                          + std::to_string(bytes.size()));
    Image img(cfg.height, cfg.width);
    for (std::size_t i = 0; i < img.size(); ++i) {
        std::size_t v = bytes[i * cfg.bytes_per_pixel];
        if (cfg.bytes_per_pixel == 2) {
            const std::size_t second = bytes[i * 2 + 1];
            v = cfg.byte_order == ByteOrder::big ? (v << 8) | second : (second << 8) | v;
        }
        const double x = std::min(static_cast<double>(v) / static_cast<double>(cfg.max_value), 1.0);
        img.pixels[i] = static_cast<float>(cfg.invert ? 1.0 - x : x);
    }
    return img;
}

enum class ImageFormat { pgm, raw };

inline Image load_image(const std::filesystem::path& path, ImageFormat format, const RawLoaderConfig& raw = {})
{
    return format == ImageFormat::pgm ? read_pgm(path) : read_raw(path, raw);
}

// ---------------------------------------------------------------------------
// Paired directories

struct ImagePair {
    std::string id;
    std::filesystem::path bones;
    std::filesystem::path nobones;
};

struct PairingResult {
    std::vector<ImagePair> pairs;
    /// Files present in only one of the two directories.
    std::vector<std::filesystem::path> unpaired;
};

/// Pairs regular files of the two directories by identical stem, in lexicographic order.
inline PairingResult pair_datasets(const std::filesystem::path& dir_bones, const std::filesystem::path& dir_nobones)
{
    namespace fs = std::filesystem;
    for (const auto& d : {dir_bones, dir_nobones})
        if (!fs::is_directory(d)) throw UsageError(d.string() + " is not a directory");
    auto index = [](const fs::path& dir) {
        std::map<std::string, fs::path> m;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file()) m.emplace(e.path().stem().string(), e.path());
        return m;
    };
    const auto a = index(dir_bones), b = index(dir_nobones);
    PairingResult r;
    for (const auto& [stem, path] : a) {
        if (auto it = b.find(stem); it != b.end())
            r.pairs.push_back({stem, path, it->second});
        else
            r.unpaired.push_back(path);
    }
    for (const auto& [stem, path] : b)
        if (!a.contains(stem)) r.unpaired.push_back(path);
    std::sort(r.unpaired.begin(), r.unpaired.end());
    if (r.pairs.empty()) throw UsageError("no file stems in common between " + dir_bones.string() + " and "
                                          + dir_nobones.string());
    return r;
}

} // namespace cxrb
