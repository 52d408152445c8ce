// Command-line front end: dataset synthesis and splitting, training,
// evaluation, single-image inference, and flood-capacity reporting.

#include <CLI11.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "floodseg/data.hpp"
#include "floodseg/errors.hpp"
#include "floodseg/image.hpp"
#include "floodseg/metrics.hpp"
#include "floodseg/model.hpp"
#include "floodseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace floodseg;

namespace {

// Exit taxonomy: 1 usage, 2 missing file, 3 decode failure, 4 checkpoint or
// config mismatch.
constexpr int kExitUsage = 1;
constexpr int kExitMissingFile = 2;
constexpr int kExitDecode = 3;
constexpr int kExitMismatch = 4;

struct ModelFlags {
    std::int64_t height = 32, width = 32, patch = 8, depth = 2, heads = 4, embed_dim = 32;
    std::vector<std::int64_t> cnn_channels{32, 16, 8};
    std::vector<std::int64_t> fusion_channels{32, 16, 8};

    void attach(CLI::App& cmd) {
        cmd.add_option("--height", height, "Model input height");
        cmd.add_option("--width", width, "Model input width");
        cmd.add_option("--patch", patch, "Patch size in pixels");
        cmd.add_option("--depth", depth, "Encoder layers");
        cmd.add_option("--heads", heads, "Attention heads");
        cmd.add_option("--embed-dim", embed_dim, "Token width");
        cmd.add_option("--cnn-channels", cnn_channels, "CNN branch widths (v0,v1,v2)")
            ->expected(3);
        cmd.add_option("--fusion-channels", fusion_channels, "Fusion widths (f0,f1,f2)")
            ->expected(3);
    }

    ModelConfig build(std::uint64_t seed) const {
        ModelConfig config;
        config.height = height;
        config.width = width;
        config.patch = patch;
        config.depth = depth;
        config.heads = heads;
        config.embed_dim = embed_dim;
        config.cnn_channels = {cnn_channels[0], cnn_channels[1], cnn_channels[2]};
        config.fusion_channels = {fusion_channels[0], fusion_channels[1], fusion_channels[2]};
        config.seed = seed;
        config.validate();
        return config;
    }
};

Tensor image_tensor_from_png(const std::string& path, std::int64_t target_h, std::int64_t target_w) {
    ImageU8 image = read_png(path);
    if (image.channels == 1) {
        ImageU8 rgb(image.height, image.width, 3);
        for (std::int64_t y = 0; y < image.height; ++y)
            for (std::int64_t x = 0; x < image.width; ++x)
                for (std::int64_t c = 0; c < 3; ++c) rgb.at(y, x, c) = image.at(y, x, 0);
        image = std::move(rgb);
    }
    image = resize_bilinear(image, target_h, target_w);
    Tensor out = Tensor::zeros({3, target_h, target_w});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < target_h; ++y)
            for (std::int64_t x = 0; x < target_w; ++x)
                out.data()[(c * target_h + y) * target_w + x] =
                    static_cast<double>(image.at(y, x, c)) / 255.0;
    return out;
}

std::string format_id(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05lld", static_cast<long long>(index));
    return buf;
}

std::string trim(const std::string& text) {
    const auto begin = text.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = text.find_last_not_of(" \t\r");
    return text.substr(begin, end - begin + 1);
}

// Flat key=value config lines ('#' comments) become CLI tokens. They are
// injected ahead of the user's flags, so with a take-last policy explicit
// flags win over the file and the file wins over built-in defaults.
std::vector<std::string> config_tokens(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidParam("config line is not key=value: '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw InvalidParam("config line with empty key: '" + line + "'");
        if (key == "config") throw InvalidParam("config files cannot nest");
        tokens.push_back("--" + key);
        std::istringstream items(value);
        std::string item;
        while (std::getline(items, item, ',')) tokens.push_back(trim(item));
    }
    return tokens;
}

// argv with any --config file expanded in place after the subcommand name.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        }
    }
    if (config_path.empty() || args.empty()) return args;
    const std::vector<std::string> extra = config_tokens(config_path);
    std::vector<std::string> merged;
    merged.push_back(args[0]);  // subcommand name stays first
    merged.insert(merged.end(), extra.begin(), extra.end());
    merged.insert(merged.end(), args.begin() + 1, args.end());
    return merged;
}

int run_synth(const std::string& out_dir, std::int64_t count, std::uint64_t seed,
              std::int64_t height, std::int64_t width, std::int64_t min_blobs,
              std::int64_t max_blobs, std::string manifest_path) {
    if (count <= 0) throw InvalidParam("--count must be positive");
    if (min_blobs < 0 || max_blobs < min_blobs) throw InvalidParam("bad blob range");
    fs::create_directories(out_dir);
    if (manifest_path.empty()) manifest_path = (fs::path(out_dir) / "manifest.tsv").string();

    std::mt19937_64 master(seed);
    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.ratio = 0.0;
    for (std::int64_t i = 0; i < count; ++i) {
        const std::uint64_t scene_seed = master();
        const std::int64_t blobs =
            min_blobs + static_cast<std::int64_t>(
                            master() % static_cast<std::uint64_t>(max_blobs - min_blobs + 1));
        const std::string id = format_id(i);
        const Sample sample = synthesize_scene(scene_seed, height, width, blobs, id);
        const std::string image_path = (fs::path(out_dir) / (id + "_img.png")).string();
        const std::string mask_path = (fs::path(out_dir) / (id + "_mask.png")).string();
        write_sample_pngs(sample, image_path, mask_path);
        manifest.entries.push_back({id, image_path, mask_path, Split::train});
    }
    write_manifest_file(manifest_path, manifest);
    std::cout << "wrote " << count << " scenes to " << out_dir << " (manifest " << manifest_path
              << ")\n";
    return 0;
}

int run_split(const std::string& in_path, const std::string& out_path, double ratio,
              std::uint64_t seed) {
    const DatasetManifest input = read_manifest_file(in_path);
    std::vector<PairedPaths> items;
    items.reserve(input.entries.size());
    for (const ManifestEntry& e : input.entries) items.push_back({e.id, e.image_path, e.mask_path});
    const DatasetManifest result = make_split(items, ratio, seed);
    write_manifest_file(out_path, result);
    std::cout << "split " << items.size() << " entries: " << result.count(Split::train)
              << " train / " << result.count(Split::test) << " test\n";
    return 0;
}

int run_train(const std::string& manifest_path, const std::string& checkpoint_path,
              const std::string& resume_path, const std::string& history_path,
              const ModelFlags& flags, TrainConfig cfg, std::int64_t steps, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.checkpoint_path = checkpoint_path;
    if (steps > 0) {
        cfg.max_steps = steps;
        cfg.epochs = steps;  // upper bound; every epoch takes at least one step
    }
    cfg.validate();

    const DatasetManifest manifest = read_manifest_file(manifest_path);
    Model model = resume_path.empty() ? Model(flags.build(seed)) : load_checkpoint(resume_path);
    const FitResult result = fit(model, manifest, cfg);
    if (!history_path.empty()) write_history_file(history_path, result.history);

    std::cout << "trained " << result.state.step << " steps";
    if (!result.history.empty()) {
        const HistoryEntry& last = result.history.back();
        std::cout << "; final loss " << last.loss << ", test mIoU " << last.miou << ", PA "
                  << last.pa;
    }
    std::cout << "; checkpoint " << checkpoint_path << "\n";
    return 0;
}

int run_eval(const std::string& manifest_path, const std::string& checkpoint_path,
             const std::string& report_path, double threshold, const std::string& which) {
    const DatasetManifest manifest = read_manifest_file(manifest_path);
    const Model model = load_checkpoint(checkpoint_path);
    const Split split = split_from_string(which);
    const std::vector<Sample> samples =
        load_split(manifest, split, model.config().height, model.config().width);
    if (samples.empty()) throw EmptySplit("manifest has no " + which + " entries");
    const FloodReport report = evaluate(model, samples, threshold);
    write_report_file(report_path, report);
    std::cout << "evaluated " << samples.size() << " images: mIoU " << report.aggregate.miou_mean
              << " (σ " << report.aggregate.miou_std << "), PA " << report.aggregate.pa_mean
              << " (σ " << report.aggregate.pa_std << ")\n";
    return 0;
}

int run_infer(const std::string& checkpoint_path, const std::string& image_path,
              const std::string& out_mask_path, double threshold) {
    const Model model = load_checkpoint(checkpoint_path);
    const ImageU8 original = read_png(image_path);
    const Tensor input =
        image_tensor_from_png(image_path, model.config().height, model.config().width);
    const ForwardResult result = model.forward(input);
    const BinaryMask model_mask = binarize(sigmoid(result.logits), threshold);

    // Bring the prediction back to the source resolution before writing.
    ImageU8 mask_u8(model_mask.height, model_mask.width, 1);
    for (std::int64_t y = 0; y < model_mask.height; ++y)
        for (std::int64_t x = 0; x < model_mask.width; ++x)
            mask_u8.at(y, x, 0) = model_mask.at(y, x) ? 255 : 0;
    mask_u8 = resize_nearest(mask_u8, original.height, original.width);
    write_png(out_mask_path, mask_u8);

    BinaryMask final_mask(original.height, original.width);
    for (std::int64_t y = 0; y < original.height; ++y)
        for (std::int64_t x = 0; x < original.width; ++x)
            final_mask.at(y, x) = mask_u8.at(y, x, 0) >= 128 ? 1 : 0;
    std::printf("FC=%.4f\n", flood_capacity(final_mask));
    return 0;
}

int run_fc(const std::vector<std::string>& mask_paths) {
    for (const std::string& path : mask_paths) {
        const ImageU8 mask = read_png(path);
        BinaryMask binary(mask.height, mask.width);
        for (std::int64_t y = 0; y < mask.height; ++y)
            for (std::int64_t x = 0; x < mask.width; ++x)
                binary.at(y, x) = mask.at(y, x, 0) >= 128 ? 1 : 0;
        std::printf("%s\t%.4f\n", path.c_str(), flood_capacity(binary));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flood-water segmentation: dual-branch ViT/CNN model, training harness, and "
                 "flood-capacity metrics"};
    app.require_subcommand(1);

    const auto add_config_option = [](CLI::App* cmd, std::string& slot) {
        cmd->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        cmd->add_option("--config", slot,
                        "Flat key=value config file; '#' starts a comment, explicit flags win");
    };
    std::array<std::string, 6> config_paths;

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic land/water dataset");
    add_config_option(synth, config_paths[0]);
    std::string synth_dir;
    std::int64_t synth_count = 16;
    std::uint64_t synth_seed = 0;
    std::int64_t synth_h = 32, synth_w = 32, synth_min_blobs = 1, synth_max_blobs = 3;
    std::string synth_manifest;
    synth->add_option("--out-dir", synth_dir, "Output directory")->required();
    synth->add_option("--count", synth_count, "Number of scenes");
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--height", synth_h, "Scene height");
    synth->add_option("--width", synth_w, "Scene width");
    synth->add_option("--min-blobs", synth_min_blobs, "Minimum water regions per scene");
    synth->add_option("--max-blobs", synth_max_blobs, "Maximum water regions per scene");
    synth->add_option("--manifest", synth_manifest, "Manifest path (default <out-dir>/manifest.tsv)");

    // split
    auto* split = app.add_subcommand("split", "Assign train/test splits to a manifest");
    add_config_option(split, config_paths[1]);
    std::string split_in, split_out;
    double split_ratio = 0.1;
    std::uint64_t split_seed = 0;
    split->add_option("--manifest", split_in, "Input manifest")->required();
    split->add_option("--out", split_out, "Output manifest")->required();
    split->add_option("--ratio", split_ratio, "Test fraction in (0,1)");
    split->add_option("--seed", split_seed, "Shuffle seed");

    // train
    auto* train = app.add_subcommand("train", "Train a model on a manifest");
    add_config_option(train, config_paths[2]);
    std::string train_manifest, train_checkpoint, train_resume, train_history;
    ModelFlags train_model;
    TrainConfig train_cfg;
    std::int64_t train_steps = 0;
    std::uint64_t train_seed = 0;
    train->add_option("--manifest", train_manifest, "Dataset manifest")->required();
    train->add_option("--checkpoint", train_checkpoint, "Checkpoint output path")->required();
    train->add_option("--resume", train_resume, "Checkpoint to continue from");
    train->add_option("--history", train_history, "History file path");
    train->add_option("--steps", train_steps, "Stop after this many optimizer steps");
    train->add_option("--epochs", train_cfg.epochs, "Epoch count");
    train->add_option("--batch-size", train_cfg.batch_size, "Batch size");
    train->add_option("--lr", train_cfg.learning_rate, "Adam learning rate");
    train->add_option("--eval-every", train_cfg.eval_every, "Steps between evaluations");
    train->add_option("--threshold", train_cfg.threshold, "Binarization threshold");
    train->add_option("--seed", train_seed, "Training and init seed");
    train_model.attach(*train);

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    add_config_option(eval, config_paths[3]);
    std::string eval_manifest, eval_checkpoint, eval_report, eval_split = "test";
    double eval_threshold = 0.5;
    eval->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
    eval->add_option("--checkpoint", eval_checkpoint, "Model checkpoint")->required();
    eval->add_option("--out-report", eval_report, "Report output path")->required();
    eval->add_option("--threshold", eval_threshold, "Binarization threshold");
    eval->add_option("--split", eval_split, "Which split to evaluate (train|test)")
        ->check(CLI::IsMember({"train", "test"}));

    // infer
    auto* infer = app.add_subcommand("infer", "Segment one image and report its flood capacity");
    add_config_option(infer, config_paths[4]);
    std::string infer_checkpoint, infer_image, infer_mask;
    double infer_threshold = 0.5;
    infer->add_option("--checkpoint", infer_checkpoint, "Model checkpoint")->required();
    infer->add_option("--image", infer_image, "Input image (PNG)")->required();
    infer->add_option("--out-mask", infer_mask, "Predicted mask output (PNG)")->required();
    infer->add_option("--threshold", infer_threshold, "Binarization threshold");

    // fc
    auto* fc = app.add_subcommand("fc", "Flood capacity of mask files");
    add_config_option(fc, config_paths[5]);
    std::vector<std::string> fc_masks;
    fc->add_option("--mask", fc_masks, "Mask PNG paths")->required()->expected(-1);

    std::vector<std::string> args;
    try {
        args = expand_config(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingFile;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    std::vector<const char*> argv2;
    argv2.push_back(argv[0]);
    for (const std::string& a : args) argv2.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv2.size()), argv2.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (synth->parsed()) {
            return run_synth(synth_dir, synth_count, synth_seed, synth_h, synth_w, synth_min_blobs,
                             synth_max_blobs, synth_manifest);
        }
        if (split->parsed()) return run_split(split_in, split_out, split_ratio, split_seed);
        if (train->parsed()) {
            return run_train(train_manifest, train_checkpoint, train_resume, train_history,
                             train_model, train_cfg, train_steps, train_seed);
        }
        if (eval->parsed()) {
            return run_eval(eval_manifest, eval_checkpoint, eval_report, eval_threshold, eval_split);
        }
        if (infer->parsed()) return run_infer(infer_checkpoint, infer_image, infer_mask, infer_threshold);
        if (fc->parsed()) return run_fc(fc_masks);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingFile;
    } catch (const DecodeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDecode;
    } catch (const CheckpointMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMismatch;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
