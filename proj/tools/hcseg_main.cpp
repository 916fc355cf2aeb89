#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "hcseg/config.hpp"
#include "hcseg/netpbm.hpp"
#include "selftest.hpp"

using namespace hcseg;
using nlohmann::ordered_json;

namespace {

enum class Verbosity { quiet, info, debug };

Verbosity verbosity() {
    const char* v = std::getenv("HCSEG_LOG_LEVEL");
    if (!v) return Verbosity::info;
    const std::string s = v;
    if (s == "quiet" || s == "0") return Verbosity::quiet;
    if (s == "debug" || s == "2") return Verbosity::debug;
    if (s == "info" || s == "1") return Verbosity::info;
    throw ContractError("HCSEG_LOG_LEVEL must be quiet, info or debug, got '" + s + "'");
}

void log_info(const std::string& msg) {
    if (verbosity() != Verbosity::quiet) std::cerr << "hcseg: " << msg << "\n";
}

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string levels = "all";
    std::string head;
    std::string checkpoint;
    std::string image;
    std::string gt;
    std::optional<std::size_t> steps;
    std::size_t index = 0;
};

void write_json(const std::filesystem::path& path, const ordered_json& j) {
    const std::string text = j.dump(2) + "\n";
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ordered_json timing(std::chrono::steady_clock::time_point start) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return {{"finished_utc", stamp},
            {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
}

// Defaults, then the checkpoint's embedded config, then --config, then flags.
RunConfig resolve_config(const Options& o, bool use_checkpoint) {
    RunConfig cfg = default_run_config();
    if (use_checkpoint && !o.checkpoint.empty()) {
        cfg = run_config_from_json(read_checkpoint_config(o.checkpoint), cfg);
    }
    if (!o.config.empty()) {
        const auto bytes = read_file(o.config);
        ordered_json j;
        try {
            j = ordered_json::parse(bytes.begin(), bytes.end());
        } catch (const ordered_json::parse_error& e) {
            throw ParseError(o.config + ": invalid JSON: " + e.what(), e.byte);
        }
        cfg = run_config_from_json(j, cfg);
    }
    if (o.seed) cfg.apply_seed(*o.seed);
    if (!o.head.empty()) cfg.model.head = parse_head(o.head);
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (o.steps) cfg.train.steps = *o.steps;
    cfg.validate();
    return cfg;
}

struct Data {
    std::vector<Sample> train, val;
    std::vector<std::string> class_names;
};

Data load_data(const RunConfig& cfg, bool need_train) {
    Data d;
    if (!cfg.manifest.empty()) {
        const DatasetManifest m = load_manifest(cfg.manifest);
        if (need_train) d.train = load_samples(m, "train");
        d.val = load_samples(m, "val");
        d.class_names = m.class_names;
    } else {
        if (need_train) d.train = synthesize(cfg.data, 0, cfg.data.count);
        d.val = synthesize(cfg.data, cfg.data.count, cfg.data.val_count);
        d.class_names = synthetic_class_names();
    }
    if (d.class_names.size() != cfg.model.num_classes) {
        throw ContractError("dataset has " + std::to_string(d.class_names.size()) + " classes but model.num_classes is " +
                            std::to_string(cfg.model.num_classes));
    }
    return d;
}

std::filesystem::path prepare_out(const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output dir '" + cfg.out_dir.string() + "': " + ec.message());
    save_run_config(cfg, cfg.out_dir / "config.json");
    return cfg.out_dir;
}

Model load_model(const RunConfig& cfg, const Options& o) {
    if (o.checkpoint.empty()) throw ContractError("--checkpoint is required");
    Model model(cfg.model);
    load_checkpoint(o.checkpoint, model, nullptr);
    return model;
}

int cmd_train(const Options& o) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig cfg = resolve_config(o, false);
    const auto out = prepare_out(cfg);
    const Data data = load_data(cfg, true);
    if (data.train.empty() && cfg.train.steps > 0) throw ContractError("training set is empty");
    Model model(cfg.model);
    AdamW opt(cfg.train.optimizer);
    std::ofstream log(out / "train_log.jsonl");
    if (!log) throw IoError("cannot write '" + (out / "train_log.jsonl").string() + "'");
    const Verbosity v = verbosity();
    const TrainResult r = train(model, opt, data.train, data.val, cfg.train, [&](const ordered_json& rec) {
        log << rec.dump() << "\n";
        if (v == Verbosity::debug) std::cerr << rec.dump() << "\n";
        else if (v == Verbosity::info && rec["kind"] == "train")
            std::cerr << "hcseg: step " << rec["step"] << " loss " << rec["loss"] << "\n";
        else if (v == Verbosity::info && rec["kind"] == "eval")
            std::cerr << "hcseg: eval step " << rec["step"] << " mIoU " << rec["metrics"]["mean_iou"] << "\n";
    });
    save_checkpoint(out / "checkpoint.json", model, opt, to_json(cfg));
    ordered_json report;
    report["steps"] = cfg.train.steps;
    report["losses"] = r.losses;
    report["final_eval"] = data.val.empty() ? ordered_json() : to_json(evaluate(model, data.val), data.class_names);
    report["timing"] = timing(start);
    write_json(out / "train_report.json", report);
    log_info("wrote " + (out / "checkpoint.json").string());
    return 0;
}

int cmd_eval(const Options& o) {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig cfg = resolve_config(o, true);
    const Model model = load_model(cfg, o);
    const auto out = prepare_out(cfg);
    const Data data = load_data(cfg, false);
    if (data.val.empty()) throw ContractError("validation set is empty");
    ordered_json report = to_json(evaluate(model, data.val), data.class_names);
    report["head"] = to_string(cfg.model.head);
    report["checkpoint"] = o.checkpoint;
    report["timing"] = timing(start);
    write_json(out / "eval.json", report);
    std::cout << report.dump(2) << "\n";
    return 0;
}

// The sample to run on: --image (with optional --gt instance map) or a validation item.
Sample pick_sample(const RunConfig& cfg, const Options& o, bool need_gt) {
    if (!o.image.empty()) {
        Sample s;
        s.rgb = load_rgb(o.image);
        s.image = image_to_tensor(s.rgb);
        if (!o.gt.empty()) {
            s.instance = load_labels(o.gt);
            if (s.instance.height != s.rgb.height || s.instance.width != s.rgb.width) {
                throw DimensionError("--gt map size differs from --image");
            }
        } else if (need_gt) {
            throw ContractError("--gt <instance.pgm> is required with --image for leakage overlays");
        }
        return s;
    }
    const Data data = load_data(cfg, false);
    if (o.index >= data.val.size()) {
        throw ContractError("--index " + std::to_string(o.index) + " is out of range for " +
                            std::to_string(data.val.size()) + " validation items");
    }
    return data.val[o.index];
}

int cmd_infer(const Options& o) {
    const RunConfig cfg = resolve_config(o, true);
    const Model model = load_model(cfg, o);
    const auto out = prepare_out(cfg);
    const Sample s = pick_sample(cfg, o, false);
    const Prediction p = predict(model.forward(s.image), cfg.model.num_classes);
    // instance ids are shifted by one so that void (-1) is stored as 0
    LabelMap inst = p.instance;
    for (auto& v : inst.labels) v += 1;
    save_labels(p.semantic, out / "semantic.pgm");
    save_labels(inst, out / "instance.pgm");
    std::vector<std::size_t> hist(cfg.model.num_classes + 1, 0);
    for (auto v : p.semantic.labels) ++hist[std::size_t(v)];
    ordered_json report{{"head", to_string(cfg.model.head)},
                        {"height", p.semantic.height},
                        {"width", p.semantic.width},
                        {"semantic", "semantic.pgm"},
                        {"instance", "instance.pgm"},
                        {"instance_offset", 1},
                        {"class_pixels", hist}};
    write_json(out / "infer.json", report);
    std::cout << report.dump(2) << "\n";
    return 0;
}

std::vector<std::size_t> parse_levels(const std::string& text, std::size_t available) {
    std::vector<std::size_t> out;
    if (text == "all") {
        for (std::size_t i = 1; i <= available; ++i) out.push_back(i);
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size() || item.empty() || v < 1 || v > available) {
            throw ContractError("--levels: '" + item + "' is not a level in 1.." + std::to_string(available));
        }
        out.push_back(v);
    }
    if (out.empty()) throw ContractError("--levels: empty list");
    return out;
}

int cmd_visualize(const Options& o) {
    const RunConfig cfg = resolve_config(o, true);
    const Model model = load_model(cfg, o);
    const std::size_t available = cfg.model.backbone.hierarchical_level;
    const auto levels = parse_levels(o.levels, available);
    const auto out = prepare_out(cfg);
    const Sample s = pick_sample(cfg, o, true);
    const ModelOutput fwd = model.forward(s.image);
    const std::vector<LabelMap> parts = cluster_partitions(fwd);
    ordered_json files = ordered_json::array();
    for (std::size_t l : levels) {
        const LabelMap& part = parts[l - 1];
        const UeResult ue = undersegmentation_error(part, s.instance);
        const std::string b = "boundary_level" + std::to_string(l) + ".ppm";
        const std::string k = "leakage_level" + std::to_string(l) + ".ppm";
        save_rgb(make_overlay(s.rgb, boundary_map(part), {}), out / b);
        save_rgb(make_overlay(s.rgb, {}, ue.leak_mask), out / k);
        files.push_back({{"level", l}, {"boundary", b}, {"leakage", k}, {"ue", ue.error}});
    }
    const Prediction p = predict(fwd, cfg.model.num_classes);
    save_rgb(colorize(p.semantic), out / "prediction.ppm");
    ordered_json report{{"levels", files}, {"prediction", "prediction.ppm"}};
    write_json(out / "visualize.json", report);
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_selftest(const Options& o) {
    const auto checks = run_selftest();
    bool ok = true;
    ordered_json report = ordered_json::array();
    for (const auto& c : checks) {
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : ": " + c.detail) << "\n";
        report.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
        ok = ok && c.pass;
    }
    if (!o.out.empty()) {
        std::filesystem::create_directories(o.out);
        write_json(std::filesystem::path(o.out) / "selftest.json", report);
    }
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical clustering segmentation"};
    app.require_subcommand(1);
    Options o;
    const auto common = [&o](CLI::App* sub, bool model_flags) {
        sub->add_option("--config", o.config, "JSON run config")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "Run seed");
        sub->add_option("--out", o.out, "Output directory");
        if (model_flags) {
            sub->add_option("--head", o.head, "mask-query or per-pixel")
                ->check(CLI::IsMember({"mask-query", "per-pixel"}));
            sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
        }
    };
    auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint and metrics log");
    common(tr, true);
    tr->add_option("--steps", o.steps, "Override train.steps");
    auto* ev = app.add_subcommand("eval", "Report mIoU, PQ and per-level UE for a checkpoint");
    common(ev, true);
    auto* in = app.add_subcommand("infer", "Predict label and instance maps for one image");
    common(in, true);
    auto* vi = app.add_subcommand("visualize", "Write per-level boundary and leakage overlays");
    common(vi, true);
    vi->add_option("--levels", o.levels, "Comma-separated levels or 'all'");
    for (auto* sub : {in, vi}) {
        sub->add_option("--image", o.image, "Input PPM image")->check(CLI::ExistingFile);
        sub->add_option("--index", o.index, "Validation item used when --image is absent");
    }
    vi->add_option("--gt", o.gt, "Ground-truth instance PGM for --image")->check(CLI::ExistingFile);
    auto* st = app.add_subcommand("selftest", "Run the oracle and invariant checks");
    st->add_option("--out", o.out, "Directory for selftest.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        verbosity();
        if (tr->parsed()) return cmd_train(o);
        if (ev->parsed()) return cmd_eval(o);
        if (in->parsed()) return cmd_infer(o);
        if (vi->parsed()) return cmd_visualize(o);
        return cmd_selftest(o);
    } catch (const std::exception& e) {
        std::cerr << "hcseg: error: " << e.what() << "\n";
        return 1;
    }
}
