// cxrb: phantom generation, lung segmentation, variant building, classifier
// training, the four-variant experiment, benchmarking and curve rendering.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
// resource error.

#include "cxrb/bench.hpp"
#include "cxrb/io.hpp"
#include "cxrb/manifest.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct HyperFlags {
    cxrb::Hyper h;

    void attach(CLI::App* cmd, std::size_t default_epochs)
    {
        h.epochs = default_epochs;
        cmd->add_option("--epochs", h.epochs, "Training epochs")->capture_default_str();
        cmd->add_option("--batch", h.batch_size, "Batch size")->capture_default_str();
        cmd->add_option("--lr", h.lr, "SGD learning rate")->capture_default_str();
        cmd->add_option("--momentum", h.momentum, "SGD momentum")->capture_default_str();
        cmd->add_option("--clip", h.clip_norm, "Gradient-norm clip, 0 disables")->capture_default_str();
        cmd->add_option("--val-fraction", h.val_fraction, "Validation fraction")->capture_default_str();
        cmd->add_option("--seed", h.seed, "Seed")->capture_default_str();
    }
};

struct PhantomFlags {
    cxrb::PhantomConfig cfg;

    void attach(CLI::App* cmd)
    {
        cmd->add_option("--size", cfg.size, "Image side in pixels")->capture_default_str();
        cmd->add_option("--fraction", cfg.nodule_fraction, "Fraction of samples with a nodule")->capture_default_str();
        cmd->add_option("--radius-min", cfg.nodule_radius_min, "Smallest nodule radius (px)")->capture_default_str();
        cmd->add_option("--radius-max", cfg.nodule_radius_max, "Largest nodule radius (px)")->capture_default_str();
        cmd->add_option("--contrast-min", cfg.nodule_contrast_min, "Lowest nodule contrast")->capture_default_str();
        cmd->add_option("--contrast-max", cfg.nodule_contrast_max, "Highest nodule contrast")->capture_default_str();
        cmd->add_option("--rib-contrast", cfg.rib_contrast, "Rib shadow contrast")->capture_default_str();
        cmd->add_option("--clavicle-contrast", cfg.clavicle_contrast, "Clavicle shadow contrast")->capture_default_str();
        cmd->add_option("--rib-ends", cfg.rib_end_max, "Most rib-end blobs per image")->capture_default_str();
        cmd->add_option("--rib-end-margin", cfg.rib_end_margin, "Largest gap (px) from a rib end to the lungs")
            ->capture_default_str();
        cmd->add_option("--tissue-level", cfg.tissue_level, "Soft-tissue brightness")->capture_default_str();
        cmd->add_option("--lung-offset", cfg.lung_offset, "Lung brightness relative to the thorax")->capture_default_str();
        cmd->add_option("--noise", cfg.noise_sigma, "Gaussian noise sigma")->capture_default_str();
    }

    json to_json() const
    {
        return {{"size", cfg.size},
                {"fraction", cfg.nodule_fraction},
                {"radius_min", cfg.nodule_radius_min},
                {"radius_max", cfg.nodule_radius_max},
                {"contrast_min", cfg.nodule_contrast_min},
                {"contrast_max", cfg.nodule_contrast_max},
                {"rib_contrast", cfg.rib_contrast},
                {"clavicle_contrast", cfg.clavicle_contrast},
                {"rib_ends", cfg.rib_end_max},
                {"rib_end_margin", cfg.rib_end_margin},
                {"tissue_level", cfg.tissue_level},
                {"lung_offset", cfg.lung_offset},
                {"noise", cfg.noise_sigma}};
    }
};

std::vector<std::size_t> parse_list(const std::string& text, const char* what)
{
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size() || v == 0)
            throw cxrb::UsageError(std::string(what) + ": expected positive integers, got '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw cxrb::UsageError(std::string(what) + " is empty");
    return out;
}

/// Flattens a JSON config object into "--key value" arguments placed before the
/// real ones, so that flags on the command line win.
std::vector<std::string> config_args(const fs::path& path)
{
    const auto j = cxrb::read_json(path);
    if (!j.is_object()) throw cxrb::FormatError(path.string() + ": config must be a JSON object");
    std::vector<std::string> out;
    for (const auto& [key, value] : j.items()) {
        out.push_back("--" + key);
        if (value.is_array()) {
            std::string joined;
            for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
            out.push_back(joined);
        } else if (value.is_string()) {
            out.push_back(value.get<std::string>());
        } else {
            out.push_back(value.dump());
        }
    }
    return out;
}

std::size_t env_workers()
{
    const char* v = std::getenv("CXRB_WORKERS");
    if (!v || !*v) return 1;
    return parse_list(v, "CXRB_WORKERS").at(0);
}

void progress(const std::string& tag, const cxrb::EpochRecord& r, std::size_t every)
{
    if (r.epoch % every != 0 && r.epoch != 1) return;
    std::fprintf(stderr, "%s epoch %zu train_acc %.3f val_acc %.3f train_loss %.4f val_loss %.4f\n", tag.c_str(),
                 r.epoch, r.train_acc, r.val_acc, r.train_loss, r.val_loss);
}

cxrb::Model<float> train_lung_segmenter(const std::vector<cxrb::Subject>& subjects, std::size_t count,
                                        const cxrb::Hyper& h, const cxrb::SegmenterConfig& cfg, cxrb::TrainingCurve* curve)
{
    std::vector<cxrb::SegmentationPair> pairs;
    for (std::size_t i = 0; i < subjects.size() && pairs.size() < count; ++i)
        if (subjects[i].truth) pairs.push_back({&subjects[i].bones, &*subjects[i].truth});
    if (pairs.size() < 2) throw cxrb::UsageError("segmenter training needs at least 2 subjects with truth masks");
    auto t = cxrb::train_segmenter<float>(pairs, h, cfg, {}, [](const cxrb::EpochRecord& r) { progress("seg", r, 10); });
    std::fprintf(stderr, "seg best epoch %zu, val dice %.4f\n", t.best_epoch,
                 t.best_epoch ? t.curve.records[t.best_epoch - 1].val_acc : 0.0);
    if (curve) *curve = t.curve;
    return t.model;
}

std::size_t image_side(const std::vector<cxrb::Subject>& subjects)
{
    const auto side = subjects.front().bones.rows;
    for (const auto& s : subjects)
        if (s.bones.rows != side || s.bones.cols != side || !s.bones.same_shape(s.nobones))
            throw cxrb::ShapeError("subject " + s.id + " is not " + std::to_string(side) + "x" + std::to_string(side));
    return side;
}

std::vector<cxrb::Subject> phantom_subjects(const cxrb::PhantomConfig& cfg, std::size_t n, std::uint64_t seed)
{
    auto data = cxrb::generate_dataset(cfg, n, seed);
    std::vector<cxrb::Subject> out;
    for (std::size_t i = 0; i < data.size(); ++i)
        out.push_back({cxrb::phantom_id(i), std::move(data[i].image_bones), std::move(data[i].image_nobones),
                       data[i].label, std::move(data[i].lung_mask)});
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Bone-shadow and lung-segmentation preprocessing study on chest X-ray phantoms", "cxrb"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_path;
    std::size_t workers = 0;
    app.add_option("--config", config_path, "JSON file of option values; command-line flags win");

    auto add_workers = [&](CLI::App* cmd) {
        cmd->add_option("--workers", workers, "Worker threads (default: CXRB_WORKERS or 1)");
    };

    // phantom
    auto* phantom = app.add_subcommand("phantom", "Generate a phantom dataset");
    PhantomFlags ph;
    ph.attach(phantom);
    std::size_t n = 247;
    std::uint64_t seed = 1;
    std::string out;
    phantom->add_option("--n", n, "Number of samples")->capture_default_str();
    phantom->add_option("--seed", seed, "Dataset seed")->capture_default_str();
    phantom->add_option("--out", out, "Output directory")->required();

    // train-seg
    auto* train_seg = app.add_subcommand("train-seg", "Train the lung segmenter on a phantom directory");
    HyperFlags seg_hyper;
    seg_hyper.attach(train_seg, 300);
    cxrb::SegmenterConfig seg_cfg;
    std::string data_dir;
    std::size_t seg_count = 48;
    train_seg->add_option("--data", data_dir, "Phantom directory")->required();
    train_seg->add_option("--count", seg_count, "Subjects used (train + validation)")->capture_default_str();
    train_seg->add_option("--depth", seg_cfg.depth, "UNet depth")->capture_default_str();
    train_seg->add_option("--base", seg_cfg.base_channels, "UNet base channels")->capture_default_str();
    train_seg->add_option("--stop-dice", seg_hyper.h.stop_at_val_acc, "Stop once validation Dice reaches this, 0 never")
        ->capture_default_str();
    train_seg->add_option("--out", out, "Output directory")->required();
    add_workers(train_seg);

    // segment
    auto* segment = app.add_subcommand("segment", "Predict binary lung masks for PGM images");
    std::string model_path;
    std::vector<std::string> inputs;
    double threshold = cxrb::kDefaultMaskThreshold;
    std::size_t keep = cxrb::kDefaultKeepComponents;
    segment->add_option("--model", model_path, "Segmenter checkpoint")->required();
    segment->add_option("--input", inputs, "PGM files or directories")->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    segment->add_option("--threshold", threshold, "Probability threshold")->capture_default_str();
    segment->add_option("--keep", keep, "Largest components kept, 0 keeps all")->capture_default_str();
    segment->add_option("--out", out, "Output directory")->required();
    add_workers(segment);

    // variants
    auto* variants = app.add_subcommand("variants", "Build the four dataset variants");
    variants->add_option("--data", data_dir, "Phantom directory")->required();
    variants->add_option("--model", model_path, "Segmenter checkpoint")->required();
    variants->add_option("--threshold", threshold, "Probability threshold")->capture_default_str();
    variants->add_option("--keep", keep, "Largest components kept, 0 keeps all")->capture_default_str();
    variants->add_option("--out", out, "Output directory")->required();
    add_workers(variants);

    // train-cls
    auto* train_cls = app.add_subcommand("train-cls", "Train the nodule classifier on one variant");
    HyperFlags cls_hyper;
    cls_hyper.attach(train_cls, 100);
    std::size_t variant = 1;
    train_cls->add_option("--data", data_dir, "Variant directory written by 'variants'")->required();
    train_cls->add_option("--variant", variant, "Variant 1..4")->check(CLI::Range(1, 4))->capture_default_str();
    train_cls->add_option("--out", out, "Output directory")->required();
    add_workers(train_cls);

    // experiment
    auto* experiment = app.add_subcommand("experiment", "Run the four-variant experiment");
    HyperFlags exp_hyper;
    exp_hyper.attach(experiment, 100);
    PhantomFlags exp_ph;
    exp_ph.attach(experiment);
    std::size_t exp_n = 400, tail = 10, seg_epochs = 150;
    std::string segmenter_path;
    experiment->add_option("--n", exp_n, "Phantoms to generate")->capture_default_str();
    experiment->add_option("--data", data_dir, "Use this phantom directory instead of generating");
    experiment->add_option("--segmenter", segmenter_path, "Use this segmenter checkpoint instead of training one");
    experiment->add_option("--seg-epochs", seg_epochs, "Segmenter epochs")->capture_default_str();
    experiment->add_option("--seg-count", seg_count, "Subjects used to train the segmenter")->capture_default_str();
    double seg_stop = 0.0;
    experiment->add_option("--seg-stop-dice", seg_stop, "Stop segmenter training once validation Dice reaches this")
        ->capture_default_str();
    experiment->add_option("--tail", tail, "Trailing epochs averaged in the report")->capture_default_str();
    experiment->add_option("--threshold", threshold, "Mask threshold")->capture_default_str();
    experiment->add_option("--out", out, "Output directory")->required();
    add_workers(experiment);

    // bench
    auto* bench = app.add_subcommand("bench", "Time classifier training steps over a size/batch/worker grid");
    std::string sizes = "256,512,1024", batches = "1,2,4,8", bench_workers = "1";
    cxrb::BenchConfig bench_cfg;
    bench->add_option("--sizes", sizes, "Image sizes")->capture_default_str();
    bench->add_option("--batches", batches, "Batch sizes")->capture_default_str();
    bench->add_option("--workers", bench_workers, "Worker counts; 1 is added as the reference")->capture_default_str();
    bench->add_option("--runs", bench_cfg.runs, "Timed runs per point")->capture_default_str();
    bench->add_option("--warmup", bench_cfg.warmup, "Untimed runs per point")->capture_default_str();
    bench->add_option("--seed", bench_cfg.seed, "Seed")->capture_default_str();
    bench->add_option("--out", out, "Output directory")->required();

    // report
    auto* report = app.add_subcommand("report", "Render curve CSV files as an SVG overlay");
    std::vector<std::string> curve_files;
    std::string title;
    report->add_option("--curves", curve_files, "Curve CSV files or directories")->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    report->add_option("--title", title, "Plot title");
    report->add_option("--out", out, "Output SVG path")->required();

    // A JSON config is spliced in as flags right after the subcommand name.
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        for (std::size_t i = 0; i < args.size(); ++i) {
            std::string path;
            if (args[i] == "--config" && i + 1 < args.size()) {
                path = args[i + 1];
                args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
            } else if (args[i].rfind("--config=", 0) == 0) {
                path = args[i].substr(9);
                args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            } else {
                continue;
            }
            config_path = path;
            auto extra = config_args(path);
            auto sub = std::find_if(args.begin(), args.end(), [&](const std::string& a) { return app.get_subcommand_no_throw(a) != nullptr; });
            if (sub == args.end()) throw cxrb::UsageError("--config needs a subcommand");
            args.insert(sub + 1, extra.begin(), extra.end());
            break;
        }
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 1;
    } catch (const cxrb::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const cxrb::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }

    try {
        cxrb::set_workers(workers ? workers : env_workers());
        const fs::path out_dir = out;
        auto begin = [&](const char* command) {
            cxrb::RunManifest m(command);
            if (!config_path.empty()) m.add_input(config_path);
            return m;
        };

        if (*phantom) {
            ph.cfg.validate();
            auto m = begin("phantom");
            m.set_config({{"n", n}, {"phantom", ph.to_json()}});
            m.add_seed("dataset", seed);
            auto data = cxrb::generate_dataset(ph.cfg, n, seed);
            std::size_t positives = 0;
            for (std::size_t i = 0; i < data.size(); ++i) {
                m.add_outputs(cxrb::export_phantom(data[i], out_dir, cxrb::phantom_id(i), seed + i));
                positives += data[i].label;
            }
            m.write(out_dir);
            std::cout << "wrote " << n << " phantoms (" << positives << " with nodules) to " << out_dir.string() << '\n';
        } else if (*train_seg) {
            auto m = begin("train-seg");
            std::vector<fs::path> read;
            auto subjects = cxrb::load_phantom_dir(data_dir, &read);
            seg_hyper.h.image_size = image_side(subjects);
            seg_cfg.input_size = seg_hyper.h.image_size;
            m.set_config({{"data", data_dir}, {"count", seg_count}, {"hyper", cxrb::hyper_json(seg_hyper.h)},
                          {"depth", seg_cfg.depth}, {"base", seg_cfg.base_channels}});
            m.add_seed("train", seg_hyper.h.seed);
            for (const auto& p : read) m.add_input(p);
            cxrb::TrainingCurve curve;
            auto model = train_lung_segmenter(subjects, seg_count, seg_hyper.h, seg_cfg, &curve);
            fs::create_directories(out_dir);
            cxrb::save_checkpoint(model, out_dir / "segmenter.ckpt");
            cxrb::write_curve_csv(curve, out_dir / "curve_seg.csv");
            m.add_outputs(std::vector<fs::path>{out_dir / "segmenter.ckpt", out_dir / "curve_seg.csv"});
            m.write(out_dir);
        } else if (*segment) {
            auto m = begin("segment");
            m.set_config({{"model", model_path}, {"input", inputs}, {"threshold", threshold}, {"keep", keep}});
            const auto model = cxrb::load_checkpoint<float>(fs::path(model_path));
            m.add_input(model_path);
            std::vector<fs::path> files;
            for (const auto& in : inputs) {
                if (fs::is_directory(in)) {
                    std::vector<fs::path> found;
                    for (const auto& e : fs::directory_iterator(in))
                        if (e.path().extension() == ".pgm") found.push_back(e.path());
                    std::sort(found.begin(), found.end());
                    files.insert(files.end(), found.begin(), found.end());
                } else {
                    files.emplace_back(in);
                }
            }
            if (files.empty()) throw cxrb::UsageError("no PGM inputs");
            fs::create_directories(out_dir);
            for (const auto& f : files) {
                auto img = cxrb::read_pgm(f);
                m.add_input(f);
                if (img.rows != model.input_size() || img.cols != model.input_size())
                    img = cxrb::resize(img, model.input_size(), model.input_size());
                const auto mask = cxrb::binarize_mask(cxrb::predict_mask(model, img), threshold, keep);
                const auto path = out_dir / (f.stem().string() + "_mask.pgm");
                cxrb::write_mask_pgm(mask, path);
                m.add_output(path);
            }
            m.write(out_dir);
        } else if (*variants) {
            auto m = begin("variants");
            m.set_config({{"data", data_dir}, {"model", model_path}, {"threshold", threshold}, {"keep", keep}});
            std::vector<fs::path> read;
            auto subjects = cxrb::load_phantom_dir(data_dir, &read);
            const auto model = cxrb::load_checkpoint<float>(fs::path(model_path));
            m.add_input(model_path);
            for (const auto& p : read) m.add_input(p);
            std::vector<const cxrb::Image*> b, nb;
            for (const auto& s : subjects) {
                b.push_back(&s.bones);
                nb.push_back(&s.nobones);
            }
            const auto sets = cxrb::build_variants(b, nb, model, threshold, keep);
            for (std::size_t i = 0; i < sets.size(); ++i) m.add_outputs(cxrb::export_variants(sets[i], out_dir, subjects[i].id));
            auto manifest = cxrb::variants_manifest(subjects, sets);
            cxrb::write_json(out_dir / "variants.json", manifest);
            m.add_output(out_dir / "variants.json");
            m.write(out_dir);
        } else if (*train_cls) {
            auto m = begin("train-cls");
            const auto listing = cxrb::read_json(fs::path(data_dir) / "variants.json");
            std::vector<std::string> ids;
            std::vector<int> labels;
            for (const auto& s : listing.at("samples")) {
                ids.push_back(s.at("id").get<std::string>());
                labels.push_back(s.at("label").get<int>());
            }
            std::vector<fs::path> read{fs::path(data_dir) / "variants.json"};
            const auto images = cxrb::load_variant_images(data_dir, ids, variant, &read);
            std::vector<const cxrb::Image*> ptrs;
            for (const auto& im : images) ptrs.push_back(&im);
            cls_hyper.h.image_size = images.front().rows;
            m.set_config({{"data", data_dir}, {"variant", variant}, {"hyper", cxrb::hyper_json(cls_hyper.h)}});
            m.add_seed("train", cls_hyper.h.seed);
            for (const auto& p : read) m.add_input(p);
            auto t = cxrb::train_classifier<float>(ptrs, labels, cls_hyper.h, {}, {},
                                                   [&](const cxrb::EpochRecord& r) { progress("cls", r, 10); });
            fs::create_directories(out_dir);
            cxrb::save_checkpoint(t.model, out_dir / "classifier.ckpt");
            cxrb::write_curve_csv(t.curve, out_dir / cxrb::curve_file_name(variant));
            m.add_outputs(std::vector<fs::path>{out_dir / "classifier.ckpt", out_dir / cxrb::curve_file_name(variant)});
            m.write(out_dir);
        } else if (*experiment) {
            auto m = begin("experiment");
            std::vector<fs::path> read;
            std::vector<cxrb::Subject> subjects;
            if (!data_dir.empty()) {
                subjects = cxrb::load_phantom_dir(data_dir, &read);
            } else {
                exp_ph.cfg.validate();
                subjects = phantom_subjects(exp_ph.cfg, exp_n, exp_hyper.h.seed);
            }
            exp_hyper.h.image_size = image_side(subjects);
            m.set_config({{"n", subjects.size()}, {"data", data_dir}, {"phantom", exp_ph.to_json()},
                          {"hyper", cxrb::hyper_json(exp_hyper.h)}, {"segmenter", segmenter_path},
                          {"seg_epochs", seg_epochs}, {"seg_count", seg_count}, {"seg_stop_dice", seg_stop}, {"tail", tail},
                          {"threshold", threshold}});
            m.add_seed("experiment", exp_hyper.h.seed);
            for (const auto& p : read) m.add_input(p);
            fs::create_directories(out_dir);

            cxrb::Model<float> seg = [&] {
                if (!segmenter_path.empty()) {
                    m.add_input(segmenter_path);
                    return cxrb::load_checkpoint<float>(fs::path(segmenter_path));
                }
                cxrb::Hyper sh = exp_hyper.h;
                sh.epochs = seg_epochs;
                sh.stop_at_val_acc = seg_stop;
                cxrb::SegmenterConfig sc;
                sc.input_size = sh.image_size;
                cxrb::TrainingCurve curve;
                auto model = train_lung_segmenter(subjects, seg_count, sh, sc, &curve);
                cxrb::save_checkpoint(model, out_dir / "segmenter.ckpt");
                cxrb::write_curve_csv(curve, out_dir / "curve_seg.csv");
                m.add_outputs(std::vector<fs::path>{out_dir / "segmenter.ckpt", out_dir / "curve_seg.csv"});
                return model;
            }();

            auto rep = cxrb::run_experiment<float>(
                subjects, seg, exp_hyper.h, {}, threshold, tail,
                [](std::size_t k, const cxrb::EpochRecord& r) { progress("#0" + std::to_string(k), r, 10); });
            std::map<std::string, cxrb::TrainingCurve> curves;
            for (std::size_t k = 1; k <= 4; ++k) {
                const auto& v = rep.variants.at(cxrb::kVariantKeys[k - 1]);
                cxrb::write_curve_csv(v.curve, out_dir / cxrb::curve_file_name(k));
                m.add_output(out_dir / cxrb::curve_file_name(k));
                curves[cxrb::kVariantKeys[k - 1]] = v.curve;
            }
            cxrb::write_json(out_dir / "report.json", cxrb::report_json(rep));
            cxrb::write_text(out_dir / "curves.svg", cxrb::render_curves_svg(curves, "four dataset variants"));
            m.add_outputs(std::vector<fs::path>{out_dir / "report.json", out_dir / "curves.svg"});
            m.write(out_dir);
            std::cout << "majority baseline " << rep.majority_baseline << '\n';
            for (const auto& [k, v] : rep.variants)
                std::cout << k << " final val_acc " << v.final_val_acc << " train_acc " << v.final_train_acc << " gap "
                          << v.gap << '\n';
        } else if (*bench) {
            bench_cfg.image_sizes = parse_list(sizes, "--sizes");
            bench_cfg.batch_sizes = parse_list(batches, "--batches");
            bench_cfg.workers = parse_list(bench_workers, "--workers");
            if (std::find(bench_cfg.workers.begin(), bench_cfg.workers.end(), 1u) == bench_cfg.workers.end())
                bench_cfg.workers.insert(bench_cfg.workers.begin(), 1);
            bench_cfg.validate();
            auto m = begin("bench");
            m.set_config({{"sizes", bench_cfg.image_sizes}, {"batches", bench_cfg.batch_sizes},
                          {"workers", bench_cfg.workers}, {"runs", bench_cfg.runs}, {"warmup", bench_cfg.warmup}});
            m.add_seed("bench", bench_cfg.seed);
            const auto points = cxrb::run_bench(bench_cfg, [](const cxrb::BenchPoint& p) {
                std::fprintf(stderr, "size %zu batch %zu workers %zu median %.6f s\n", p.image_size, p.batch_size,
                             p.workers, p.median_seconds);
            });
            const auto table = cxrb::speedup_report(points);
            fs::create_directories(out_dir);
            cxrb::write_bench_times_csv(points, out_dir / "bench_times.csv");
            cxrb::write_speedup_csv(table, out_dir / "bench_speedup.csv");
            cxrb::write_json(out_dir / "bench_env.json", cxrb::bench_environment());
            m.add_outputs(std::vector<fs::path>{out_dir / "bench_times.csv", out_dir / "bench_speedup.csv",
                                                out_dir / "bench_env.json"});
            m.write(out_dir);
            for (const auto& r : table.rows)
                std::cout << "speedup size " << r.image_size << " batch " << r.batch_size << " workers " << r.workers
                          << ": " << r.speedup << '\n';
            for (const auto& line : cxrb::speedup_context_lines()) std::cout << line << '\n';
            for (const auto& w : cxrb::monotone_trend_warnings(table)) std::cout << w << '\n';
        } else if (*report) {
            auto m = begin("report");
            std::map<std::string, cxrb::TrainingCurve> curves;
            for (const auto& c : curve_files) {
                std::vector<fs::path> files;
                if (fs::is_directory(c)) {
                    for (const auto& e : fs::directory_iterator(c))
                        if (e.path().extension() == ".csv" && e.path().stem().string().rfind("curve_", 0) == 0)
                            files.push_back(e.path());
                    std::sort(files.begin(), files.end());
                } else {
                    files.emplace_back(c);
                }
                for (const auto& f : files) {
                    curves[f.stem().string()] = cxrb::read_curve_csv(f);
                    m.add_input(f);
                }
            }
            if (curves.empty()) throw cxrb::UsageError("no curve files found");
            m.set_config({{"curves", curve_files}, {"title", title}});
            const fs::path svg = out;
            cxrb::write_text(svg, cxrb::render_curves_svg(curves, title));
            m.add_output(svg);
            m.write(svg.has_parent_path() ? svg.parent_path() : fs::path("."));
        }
    } catch (const cxrb::UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const cxrb::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
