#include "hcseg/config.hpp"

#include <set>

#include "hcseg/netpbm.hpp"

namespace hcseg {

using nlohmann::ordered_json;

namespace {

std::string downsample_name(DownsampleKind k) { return k == DownsampleKind::avg_pool2 ? "avg_pool2" : "strided_conv3"; }

DownsampleKind parse_downsample(const std::string& s) {
    if (s == "avg_pool2") return DownsampleKind::avg_pool2;
    if (s == "strided_conv3") return DownsampleKind::strided_conv3;
    throw ContractError("config: unknown downsample '" + s + "'");
}

std::string layout_name(AssignmentLayout l) { return l == AssignmentLayout::dense ? "dense" : "windowed"; }

AssignmentLayout parse_layout(const std::string& s) {
    if (s == "dense") return AssignmentLayout::dense;
    if (s == "windowed") return AssignmentLayout::windowed;
    throw ContractError("config: unknown layout '" + s + "'");
}

// Reads j[key] into out when present; rejects keys outside `allowed`.
class Reader {
public:
    Reader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ContractError("config: '" + path_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ContractError("config: bad value for '" + path_ + "." + key + "': " + e.what());
        }
    }

    const ordered_json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [key, _] : j_.items()) {
            if (!seen_.contains(key)) throw ContractError("config: unknown key '" + path_ + "." + key + "'");
        }
    }

private:
    const ordered_json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    train.seed = s;
}

void RunConfig::validate() const {
    model.validate();
    train.loss.validate();
    if (train.batch_size == 0) throw ContractError("config: train.batch_size must be positive");
    if (!(train.optimizer.lr > 0.0)) throw ContractError("config: train.optimizer.lr must be positive");
    if (train.optimizer.weight_decay < 0.0) throw ContractError("config: train.optimizer.weight_decay must be >= 0");
    if (!(train.grad_clip >= 0.0)) throw ContractError("config: train.grad_clip must be non-negative");
    if (!(train.decay_at >= 0.0 && train.decay_at <= 1.0)) throw ContractError("config: train.decay_at must be in [0, 1]");
    if (!manifest.empty() && !std::filesystem::exists(manifest)) {
        throw ContractError("config: manifest '" + manifest.string() + "' does not exist");
    }
    if (manifest.empty()) {
        if (data.height % model.backbone.total_stride() != 0 || data.width % model.backbone.total_stride() != 0) {
            throw ContractError("config: image size must be a multiple of the backbone stride " +
                                std::to_string(model.backbone.total_stride()));
        }
        if (data.min_shapes > data.max_shapes || data.min_size > data.max_size) {
            throw ContractError("config: data shape/size ranges are inverted");
        }
    }
}

RunConfig default_run_config() {
    RunConfig c;
    c.model.backbone.stem_stride = 2;
    c.model.backbone.num_stages = 2;
    c.model.backbone.channels = {16, 24, 32};
    c.model.backbone.hierarchical_level = 2;
    c.model.backbone.clustering_channels = 16;
    c.model.head = HeadKind::per_pixel;
    c.model.num_classes = kSyntheticClasses;
    c.model.decoder.num_classes = kSyntheticClasses;
    c.data.count = 500;
    c.data.val_count = 100;
    c.data.seed = 1;
    return c;
}

ordered_json to_json(const RunConfig& c) {
    const BackboneConfig& b = c.model.backbone;
    const QueryDecoderConfig& d = c.model.decoder;
    const TrainConfig& t = c.train;
    ordered_json j;
    j["schema_version"] = RunConfig::kSchemaVersion;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir.string();
    j["manifest"] = c.manifest.string();
    j["model"] = {
        {"head", to_string(c.model.head)},
        {"num_classes", c.model.num_classes},
        {"seed", c.model.seed},
        {"backbone",
         {{"in_channels", b.in_channels},
          {"coord_channels", b.coord_channels},
          {"stem_stride", b.stem_stride},
          {"num_stages", b.num_stages},
          {"channels", b.channels},
          {"blocks_per_stage", b.blocks_per_stage},
          {"neck_blocks", b.neck_blocks},
          {"hierarchical_level", b.hierarchical_level},
          {"downsample", downsample_name(b.downsample)},
          {"clustering_channels", b.clustering_channels},
          {"scale_init", b.scale_init},
          {"layout", layout_name(b.layout)},
          {"activation", b.activation}}},
        {"decoder",
         {{"num_queries", d.num_queries},
          {"query_dim", d.query_dim},
          {"num_layers", d.num_layers},
          {"num_heads", d.num_heads},
          {"ffn_dim", d.ffn_dim}}},
    };
    j["train"] = {
        {"steps", t.steps},
        {"batch_size", t.batch_size},
        {"log_every", t.log_every},
        {"eval_every", t.eval_every},
        {"decay_at", t.decay_at},
        {"decay_factor", t.decay_factor},
        {"warmup_steps", t.warmup_steps},
        {"grad_clip", t.grad_clip},
        {"hflip", t.hflip},
        {"seed", t.seed},
        {"loss",
         {{"ce", t.loss.ce},
          {"dice", t.loss.dice},
          {"cls", t.loss.cls},
          {"reg", t.loss.reg},
          {"no_object", t.loss.no_object},
          {"pixel", t.loss.pixel}}},
        {"optimizer",
         {{"lr", t.optimizer.lr},
          {"weight_decay", t.optimizer.weight_decay},
          {"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"eps", t.optimizer.eps}}},
    };
    j["data"] = {
        {"height", c.data.height},       {"width", c.data.width},       {"min_shapes", c.data.min_shapes},
        {"max_shapes", c.data.max_shapes}, {"min_size", c.data.min_size}, {"max_size", c.data.max_size},
        {"allow_overlap", c.data.allow_overlap}, {"noise", c.data.noise}, {"seed", c.data.seed},
        {"count", c.data.count},         {"val_count", c.data.val_count},
    };
    return j;
}

RunConfig run_config_from_json(const ordered_json& j, const RunConfig& base) {
    RunConfig c = base;
    Reader top(j, "$");
    int version = RunConfig::kSchemaVersion;
    top.get("schema_version", version);
    if (version != RunConfig::kSchemaVersion) {
        throw ContractError("config: unsupported schema_version " + std::to_string(version));
    }
    top.get("seed", c.seed);
    std::string s;
    s = c.out_dir.string();
    top.get("out_dir", s);
    c.out_dir = s;
    s = c.manifest.string();
    top.get("manifest", s);
    c.manifest = s;

    if (const ordered_json* m = top.child("model")) {
        Reader r(*m, "model");
        s = to_string(c.model.head);
        r.get("head", s);
        c.model.head = parse_head(s);
        r.get("num_classes", c.model.num_classes);
        r.get("seed", c.model.seed);
        if (const ordered_json* bj = r.child("backbone")) {
            BackboneConfig& b = c.model.backbone;
            Reader rb(*bj, "model.backbone");
            rb.get("in_channels", b.in_channels);
            rb.get("coord_channels", b.coord_channels);
            rb.get("stem_stride", b.stem_stride);
            rb.get("num_stages", b.num_stages);
            rb.get("channels", b.channels);
            rb.get("blocks_per_stage", b.blocks_per_stage);
            rb.get("neck_blocks", b.neck_blocks);
            rb.get("hierarchical_level", b.hierarchical_level);
            s = downsample_name(b.downsample);
            rb.get("downsample", s);
            b.downsample = parse_downsample(s);
            rb.get("clustering_channels", b.clustering_channels);
            rb.get("scale_init", b.scale_init);
            s = layout_name(b.layout);
            rb.get("layout", s);
            b.layout = parse_layout(s);
            rb.get("activation", b.activation);
            rb.finish();
        }
        if (const ordered_json* dj = r.child("decoder")) {
            QueryDecoderConfig& d = c.model.decoder;
            Reader rd(*dj, "model.decoder");
            rd.get("num_queries", d.num_queries);
            rd.get("query_dim", d.query_dim);
            rd.get("num_layers", d.num_layers);
            rd.get("num_heads", d.num_heads);
            rd.get("ffn_dim", d.ffn_dim);
            rd.finish();
        }
        r.finish();
    }
    c.model.decoder.num_classes = c.model.num_classes;

    if (const ordered_json* tj = top.child("train")) {
        TrainConfig& t = c.train;
        Reader r(*tj, "train");
        r.get("steps", t.steps);
        r.get("batch_size", t.batch_size);
        r.get("log_every", t.log_every);
        r.get("eval_every", t.eval_every);
        r.get("decay_at", t.decay_at);
        r.get("decay_factor", t.decay_factor);
        r.get("warmup_steps", t.warmup_steps);
        r.get("grad_clip", t.grad_clip);
        r.get("hflip", t.hflip);
        r.get("seed", t.seed);
        if (const ordered_json* lj = r.child("loss")) {
            Reader rl(*lj, "train.loss");
            rl.get("ce", t.loss.ce);
            rl.get("dice", t.loss.dice);
            rl.get("cls", t.loss.cls);
            rl.get("reg", t.loss.reg);
            rl.get("no_object", t.loss.no_object);
            rl.get("pixel", t.loss.pixel);
            rl.finish();
        }
        if (const ordered_json* oj = r.child("optimizer")) {
            Reader ro(*oj, "train.optimizer");
            ro.get("lr", t.optimizer.lr);
            ro.get("weight_decay", t.optimizer.weight_decay);
            ro.get("beta1", t.optimizer.beta1);
            ro.get("beta2", t.optimizer.beta2);
            ro.get("eps", t.optimizer.eps);
            ro.finish();
        }
        r.finish();
    }
    if (const ordered_json* dj = top.child("data")) {
        SyntheticSpec& d = c.data;
        Reader r(*dj, "data");
        r.get("height", d.height);
        r.get("width", d.width);
        r.get("min_shapes", d.min_shapes);
        r.get("max_shapes", d.max_shapes);
        r.get("min_size", d.min_size);
        r.get("max_size", d.max_size);
        r.get("allow_overlap", d.allow_overlap);
        r.get("noise", d.noise);
        r.get("seed", d.seed);
        r.get("count", d.count);
        r.get("val_count", d.val_count);
        r.finish();
    }
    top.finish();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    ordered_json j;
    try {
        j = ordered_json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config " + path.string() + ": " + e.what(), e.byte);
    }
    return run_config_from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
    const std::string text = to_json(cfg).dump(2) + "\n";
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

} // namespace hcseg
