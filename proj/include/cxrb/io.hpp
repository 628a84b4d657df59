#pragma once

// On-disk artifacts: phantom exports with JSON sidecars, variant sets,
// training curves as CSV, experiment reports and the SVG curve overlay.

#include "cxrb/phantom.hpp"
#include "cxrb/train.hpp"
#include "cxrb/variants.hpp"

#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace cxrb {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path.string());
    os << text;
}

inline std::string read_text(const fs::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline nlohmann::json read_json(const fs::path& path)
{
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Zero-padded sample id, e.g. phantom_0007.
inline std::string phantom_id(std::size_t index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "phantom_%04zu", index);
    return buf;
}

// ---------------------------------------------------------------------------
// Phantom datasets: <id>_bones.pgm, <id>_nobones.pgm, <id>_mask.pgm, <id>.json

inline nlohmann::json sidecar_json(const PhantomSample& s, const std::string& id, std::uint64_t seed)
{
    nlohmann::json j{{"id", id}, {"label", s.label}, {"seed", seed}, {"size", s.image_bones.rows}};
    if (s.nodule)
        j["nodule"] = {{"row", s.nodule->row},
                       {"col", s.nodule->col},
                       {"radius", s.nodule->radius},
                       {"contrast", s.nodule->contrast}};
    else
        j["nodule"] = nullptr;
    return j;
}

/// Writes the three images and the sidecar; returns the written paths.
inline std::vector<fs::path> export_phantom(const PhantomSample& s, const fs::path& dir, const std::string& id,
                                            std::uint64_t seed)
{
    fs::create_directories(dir);
    std::vector<fs::path> out{dir / (id + "_bones.pgm"), dir / (id + "_nobones.pgm"), dir / (id + "_mask.pgm"),
                              dir / (id + ".json")};
    write_pgm(s.image_bones, out[0]);
    write_pgm(s.image_nobones, out[1]);
    write_mask_pgm(s.lung_mask, out[2]);
    write_json(out[3], sidecar_json(s, id, seed));
    return out;
}

/// Reads every sidecar in `dir` (sorted by id) with its images and mask.
inline std::vector<Subject> load_phantom_dir(const fs::path& dir, std::vector<fs::path>* inputs = nullptr)
{
    if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
    std::vector<fs::path> sidecars;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json" && fs::exists(dir / (e.path().stem().string() + "_bones.pgm")))
            sidecars.push_back(e.path());
    std::sort(sidecars.begin(), sidecars.end());
    if (sidecars.empty()) throw UsageError("no phantom sidecars in " + dir.string());
    std::vector<Subject> out;
    for (const auto& p : sidecars) {
        const auto j = read_json(p);
        const auto id = p.stem().string();
        Subject s;
        s.id = id;
        try {
            s.label = j.at("label").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(p.string() + ": " + e.what());
        }
        const auto bones = dir / (id + "_bones.pgm"), nobones = dir / (id + "_nobones.pgm"),
                   mask = dir / (id + "_mask.pgm");
        s.bones = read_pgm(bones);
        s.nobones = read_pgm(nobones);
        if (fs::exists(mask)) s.truth = read_mask_pgm(mask);
        if (inputs) inputs->insert(inputs->end(), {p, bones, nobones});
        if (inputs && s.truth) inputs->push_back(mask);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Variant sets

inline std::vector<fs::path> export_variants(const VariantSet& v, const fs::path& dir, const std::string& id)
{
    fs::create_directories(dir);
    std::vector<fs::path> out;
    for (std::size_t k = 1; k <= 4; ++k) {
        out.push_back(dir / (id + "_v0" + std::to_string(k) + ".pgm"));
        write_pgm(v.variant(k), out.back());
    }
    out.push_back(dir / (id + "_mask01.pgm"));
    write_mask_pgm(v.mask01, out.back());
    out.push_back(dir / (id + "_mask02.pgm"));
    write_mask_pgm(v.mask02, out.back());
    return out;
}

/// Dataset manifest: ids, labels and per-mask Dice against truth when known.
inline nlohmann::json variants_manifest(const std::vector<Subject>& subjects, const std::vector<VariantSet>& sets)
{
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        nlohmann::json j{{"id", subjects[i].id}, {"label", subjects[i].label}};
        if (subjects[i].truth) {
            j["dice_mask01"] = dice(sets[i].mask01, *subjects[i].truth);
            j["dice_mask02"] = dice(sets[i].mask02, *subjects[i].truth);
        }
        items.push_back(j);
    }
    return {{"samples", items}, {"count", subjects.size()}};
}

/// Loads `<id>_vNN.pgm` for every id with a sidecar-style label list.
inline std::vector<Image> load_variant_images(const fs::path& dir, const std::vector<std::string>& ids, std::size_t k,
                                              std::vector<fs::path>* inputs = nullptr)
{
    std::vector<Image> out;
    for (const auto& id : ids) {
        const auto p = dir / (id + "_v0" + std::to_string(k) + ".pgm");
        out.push_back(read_pgm(p));
        if (inputs) inputs->push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Curves and reports

inline constexpr const char* kCurveHeader = "epoch,train_acc,val_acc,train_loss,val_loss";

inline void write_curve_csv(const TrainingCurve& curve, const fs::path& path)
{
    std::ostringstream os;
    os << kCurveHeader << '\n';
    os.precision(10);
    for (const auto& r : curve.records)
        os << r.epoch << ',' << r.train_acc << ',' << r.val_acc << ',' << r.train_loss << ',' << r.val_loss << '\n';
    write_text(path, os.str());
}

inline TrainingCurve read_curve_csv(const fs::path& path)
{
    std::istringstream is(read_text(path));
    std::string line;
    if (!std::getline(is, line) || line != kCurveHeader)
        throw FormatError(path.string() + ": expected header " + kCurveHeader);
    TrainingCurve c;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        EpochRecord r;
        char extra = 0;
        if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf%c", &r.epoch, &r.train_acc, &r.val_acc, &r.train_loss,
                        &r.val_loss, &extra)
            != 5)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
        c.records.push_back(r);
    }
    return c;
}

inline std::string curve_file_name(std::size_t k) { return "curve_v0" + std::to_string(k) + ".csv"; }

inline nlohmann::json hyper_json(const Hyper& h)
{
    return {{"epochs", h.epochs},       {"batch_size", h.batch_size},     {"lr", h.lr},
            {"momentum", h.momentum},   {"clip_norm", h.clip_norm},       {"val_fraction", h.val_fraction},
            {"seed", h.seed},           {"image_size", h.image_size},     {"stop_at_val_acc", h.stop_at_val_acc}};
}

inline nlohmann::json report_json(const ExperimentReport& rep)
{
    nlohmann::json variants = nlohmann::json::object();
    for (const auto& [key, v] : rep.variants)
        variants[key] = {{"final_val_acc", v.final_val_acc},
                         {"final_train_acc", v.final_train_acc},
                         {"overtraining_gap", v.gap},
                         {"epochs", v.curve.size()}};
    nlohmann::json j{{"hyper", hyper_json(rep.hyper)},
                     {"tail", rep.tail},
                     {"subjects", rep.subjects},
                     {"train_size", rep.train_size},
                     {"val_size", rep.val_size},
                     {"majority_baseline", rep.majority_baseline},
                     {"variants", variants}};
    if (rep.mask01_dice) j["mask01_dice"] = *rep.mask01_dice;
    if (rep.mask02_dice) j["mask02_dice"] = *rep.mask02_dice;
    return j;
}

// ---------------------------------------------------------------------------
// SVG overlay: accuracy and loss panels, solid validation, dashed training.

inline std::string render_curves_svg(const std::map<std::string, TrainingCurve>& curves, const std::string& title = {})
{
    static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    const double W = 900, H = 380, pad = 50, gap = 60;
    const double pw = (W - 2 * pad - gap) / 2, ph = H - 2 * pad;
    std::size_t epochs = 1;
    double max_loss = 1e-9;
    for (const auto& [_, c] : curves)
        for (const auto& r : c.records) {
            epochs = std::max(epochs, r.epoch);
            max_loss = std::max({max_loss, r.train_loss, r.val_loss});
        }
    std::ostringstream os;
    os.precision(5);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!title.empty()) os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\">" << title << "</text>\n";
    for (int panel = 0; panel < 2; ++panel) {
        const double x0 = pad + panel * (pw + gap), y0 = pad;
        const double ymax = panel == 0 ? 1.0 : max_loss;
        os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << pw << "\" height=\"" << ph
           << "\" fill=\"none\" stroke=\"black\"/>\n";
        os << "<text x=\"" << x0 + pw / 2 << "\" y=\"" << y0 + ph + 30 << "\" text-anchor=\"middle\">epoch</text>\n";
        os << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\">" << (panel == 0 ? "accuracy" : "loss") << " (0 to "
           << ymax << ")</text>\n";
        std::size_t ci = 0;
        for (const auto& [name, c] : curves) {
            const char* colour = colours[ci++ % 6];
            for (int val = 0; val < 2; ++val) {
                os << "<polyline fill=\"none\" stroke=\"" << colour << "\"" << (val ? "" : " stroke-dasharray=\"4 3\"")
                   << " points=\"";
                for (const auto& r : c.records) {
                    const double v = panel == 0 ? (val ? r.val_acc : r.train_acc) : (val ? r.val_loss : r.train_loss);
                    os << x0 + pw * static_cast<double>(r.epoch) / static_cast<double>(epochs) << ','
                       << y0 + ph * (1.0 - std::clamp(v / ymax, 0.0, 1.0)) << ' ';
                }
                os << "\"/>\n";
            }
            if (panel == 1)
                os << "<text x=\"" << x0 + pw + 5 << "\" y=\"" << y0 + 14 * ci << "\" fill=\"" << colour << "\">"
                   << name << "</text>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace cxrb
