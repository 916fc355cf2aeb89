#include "hcseg/backbone.hpp"

#include <cmath>

namespace hcseg {

namespace {

ConvParams make_conv(ParameterSet& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    const double fan_in = static_cast<double>(cin * k * k);
    ConvParams p;
    p.weight = store.create(name + ".weight", {cout, cin, k, k}, Init::normal, std::sqrt(2.0 / fan_in));
    p.bias = store.create(name + ".bias", {cout}, Init::zeros, 0.0, false);
    return p;
}

Tensor activate(const Tensor& x, const std::string& kind) {
    if (kind == "silu") return silu(x);
    if (kind == "sigmoid") return sigmoid(x);
    throw ContractError("unknown activation '" + kind + "'");
}

Tensor flatten_spatial(const Tensor& x) { return reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}); }

Tensor with_coordinates(const Tensor& image) {
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::vector<double> data(image.data().begin(), image.data().end());
    data.reserve((c + 2) * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) data.push_back(w > 1 ? 2.0 * x / double(w - 1) - 1.0 : 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) data.push_back(h > 1 ? 2.0 * y / double(h - 1) - 1.0 : 0.0);
    return Tensor::from({c + 2, h, w}, std::move(data));
}

} // namespace

std::size_t BackboneConfig::stem_halvings() const {
    std::size_t n = 0;
    for (std::size_t s = stem_stride; s > 1; s /= 2) ++n;
    return n;
}

void BackboneConfig::validate() const {
    if (stem_stride == 0 || (stem_stride & (stem_stride - 1)) != 0) {
        throw ContractError("backbone: stem_stride must be a power of two");
    }
    if (channels.size() != num_stages + 1) {
        throw ContractError("backbone: channels needs num_stages + 1 = " + std::to_string(num_stages + 1) +
                            " entries, got " + std::to_string(channels.size()));
    }
    if (hierarchical_level > num_stages) {
        throw ContractError("backbone: hierarchical_level " + std::to_string(hierarchical_level) +
                            " exceeds the " + std::to_string(num_stages) + " post-stem downsampling layers");
    }
    if (clustering_channels == 0) throw ContractError("backbone: clustering_channels must be positive");
    if (activation != "silu" && activation != "sigmoid") {
        throw ContractError("backbone: unknown activation '" + activation + "'");
    }
}

BackboneParams make_backbone_params(ParameterSet& store, const BackboneConfig& cfg) {
    cfg.validate();
    BackboneParams p;
    const std::size_t in = cfg.in_channels + (cfg.coord_channels ? 2 : 0);
    const std::size_t halvings = cfg.stem_halvings();
    if (halvings == 0) {
        p.stem.push_back(make_conv(store, "backbone.stem.0", in, cfg.channels[0], 3));
    } else {
        for (std::size_t i = 0; i < halvings; ++i) {
            p.stem.push_back(make_conv(store, "backbone.stem." + std::to_string(i), i == 0 ? in : cfg.channels[0],
                                       cfg.channels[0], 3));
        }
    }
    std::size_t c = cfg.channels[0];
    p.blocks.resize(cfg.num_stages);
    p.downsample.resize(cfg.num_stages);
    p.clustering.resize(cfg.num_stages);
    p.hooked.assign(cfg.num_stages, false);
    for (std::size_t s = 0; s < cfg.num_stages; ++s) {
        const std::string stage = "backbone.stage" + std::to_string(s);
        const std::size_t out = cfg.channels[s + 1];
        std::size_t block_in = c;
        for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
            // avg_pool2 keeps widths, so the first block of a stage widens instead
            const std::size_t block_out = cfg.downsample == DownsampleKind::avg_pool2 ? out : block_in;
            p.blocks[s].push_back(make_conv(store, stage + ".block" + std::to_string(b), block_in, block_out, 3));
            block_in = block_out;
        }
        const std::size_t pre_channels = block_in;
        std::size_t post_channels = pre_channels;
        if (cfg.downsample == DownsampleKind::strided_conv3) {
            p.downsample[s] = make_conv(store, stage + ".down", pre_channels, out, 3);
            post_channels = out;
        }
        if (s + cfg.hierarchical_level >= cfg.num_stages) {
            p.hooked[s] = true;
            p.clustering[s] = make_clustering_params(store, "cluster.stage" + std::to_string(s), pre_channels,
                                                     post_channels, cfg.clustering_channels, cfg.scale_init);
        }
        c = post_channels;
    }
    for (std::size_t i = 0; i < cfg.neck_blocks; ++i) {
        p.neck.push_back(make_conv(store, "backbone.neck" + (i ? std::to_string(i) : std::string()), c, c, 3));
    }
    return p;
}

std::vector<AssignmentMatrix> FeaturePyramid::assignments() const {
    std::vector<AssignmentMatrix> out;
    out.reserve(levels.size());
    for (const auto& l : levels) out.push_back(l.assignment);
    return out;
}

FeaturePyramid forward_with_hooks(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg) {
    if (image.rank() != 3 || image.dim(0) != cfg.in_channels) {
        throw DimensionError("forward_with_hooks: expected [" + std::to_string(cfg.in_channels) + "×H×W] image, got " +
                             shape_str(image.shape()));
    }
    const std::size_t stride = cfg.total_stride();
    if (image.dim(1) % stride != 0 || image.dim(2) % stride != 0) {
        throw DimensionError("forward_with_hooks: image " + std::to_string(image.dim(1)) + "x" +
                             std::to_string(image.dim(2)) + " is not divisible by the total stride " +
                             std::to_string(stride));
    }
    Tensor x = cfg.coord_channels ? with_coordinates(image) : image;
    const std::size_t halvings = cfg.stem_halvings();
    for (const auto& conv : params.stem) {
        x = activate(conv2d(x, conv.weight, conv.bias, halvings == 0 ? 1 : 2, 1), cfg.activation);
    }
    int level = static_cast<int>(halvings);

    FeaturePyramid pyr;
    for (std::size_t s = 0; s < cfg.num_stages; ++s) {
        for (const auto& conv : params.blocks[s]) x = activate(conv2d(x, conv.weight, conv.bias, 1, 1), cfg.activation);
        const Tensor pre = x;
        if (cfg.downsample == DownsampleKind::strided_conv3) {
            x = activate(strided_downsample(x, cfg.downsample, params.downsample[s].weight, params.downsample[s].bias),
                         cfg.activation);
        } else {
            x = strided_downsample(x, cfg.downsample);
        }
        if (params.hooked[s]) {
            HookLevel hook;
            hook.level = level;
            hook.fine = {pre.dim(1), pre.dim(2)};
            hook.coarse = {x.dim(1), x.dim(2)};
            hook.f_pre = flatten_spatial(pre);
            hook.f_post = flatten_spatial(x);
            const auto& cp = params.clustering[s];
            auto [q, k] = project_features(hook.f_pre, hook.f_post, cp);
            hook.assignment = cfg.layout == AssignmentLayout::windowed
                                  ? compute_assignment_local(q, k, cp.scale, hook.fine, hook.coarse, level)
                                  : compute_assignment_dense(q, k, cp.scale, hook.fine, hook.coarse, level);
            pyr.levels.push_back(std::move(hook));
        }
        ++level;
    }
    for (const auto& conv : params.neck) x = add(x, activate(conv2d(x, conv.weight, conv.bias, 1, 1), cfg.activation));
    pyr.final_grid = {x.dim(1), x.dim(2)};
    pyr.final_level = level;
    pyr.final_features = flatten_spatial(x);
    return pyr;
}

std::size_t count_parameters(const ParameterSet& params) { return params.count_scalars(); }

} // namespace hcseg
