#include "hcseg/heads.hpp"

#include <cmath>

namespace hcseg {

namespace {

ProjectionParams make_linear(ParameterSet& store, const std::string& name, std::size_t in, std::size_t out) {
    ProjectionParams p;
    p.weight = store.create(name + ".weight", {out, in}, Init::normal, 1.0 / std::sqrt(double(in)));
    p.bias = store.create(name + ".bias", {out}, Init::zeros, 0.0, false);
    return p;
}

LayerNormParams make_ln(ParameterSet& store, const std::string& name, std::size_t c) {
    return {store.create(name + ".gain", {c}, Init::ones, 0.0, false),
            store.create(name + ".bias", {c}, Init::zeros, 0.0, false)};
}

Tensor linear(const ProjectionParams& p, const Tensor& x) { return add_channel_bias(matmul(p.weight, x), p.bias); }

} // namespace

QueryDecoderParams make_query_decoder_params(ParameterSet& store, const QueryDecoderConfig& cfg,
                                             std::size_t feature_channels) {
    if (cfg.num_heads == 0 || cfg.query_dim % cfg.num_heads != 0) {
        throw ContractError("query decoder: query_dim must be a positive multiple of num_heads");
    }
    if (cfg.num_queries == 0 || cfg.num_classes == 0) throw ContractError("query decoder: empty query or class set");
    const std::size_t d = cfg.query_dim, dh = d / cfg.num_heads;
    QueryDecoderParams p;
    p.queries = store.create("decoder.queries", {d, cfg.num_queries}, Init::normal, 1.0);
    p.feature_ln = make_ln(store, "decoder.feature_ln", feature_channels);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::string name = "decoder.layer" + std::to_string(l);
        DecoderLayerParams layer;
        layer.ln_attn = make_ln(store, name + ".ln_attn", d);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            const std::string head = name + ".head" + std::to_string(h);
            layer.wq.push_back(store.create(head + ".wq", {dh, d}, Init::normal, 1.0 / std::sqrt(double(d))));
            layer.wk.push_back(store.create(head + ".wk", {dh, feature_channels}, Init::normal,
                                            1.0 / std::sqrt(double(feature_channels))));
            layer.wv.push_back(store.create(head + ".wv", {dh, feature_channels}, Init::normal,
                                            1.0 / std::sqrt(double(feature_channels))));
            layer.wo.push_back(store.create(head + ".wo", {d, dh}, Init::normal, 1.0 / std::sqrt(double(d))));
        }
        layer.ln_ffn = make_ln(store, name + ".ln_ffn", d);
        layer.ffn_in = make_linear(store, name + ".ffn_in", d, cfg.ffn_dim);
        layer.ffn_out = make_linear(store, name + ".ffn_out", cfg.ffn_dim, d);
        p.layers.push_back(std::move(layer));
    }
    p.mask_embed = make_linear(store, "decoder.mask_embed", d, d);
    p.feature_proj = make_linear(store, "decoder.feature_proj", feature_channels, d);
    p.class_head = make_linear(store, "decoder.class_head", d, cfg.num_classes + 1);
    return p;
}

QueryDecoderOutput query_decoder_forward(const Tensor& features, const QueryDecoderParams& params) {
    if (features.rank() != 2 || features.dim(0) != params.feature_ln.gain.numel()) {
        throw DimensionError("query_decoder_forward: features must be [C×N] with C matching the decoder");
    }
    Tensor q = params.queries;
    const Tensor f = layer_norm(features, params.feature_ln.gain, params.feature_ln.bias);
    for (const auto& layer : params.layers) {
        const Tensor qn = layer_norm(q, layer.ln_attn.gain, layer.ln_attn.bias);
        for (std::size_t h = 0; h < layer.wq.size(); ++h) {
            const Tensor qh = matmul(layer.wq[h], qn);            // [dh × N_m]
            const Tensor kh = matmul(layer.wk[h], f);             // [dh × N]
            const Tensor vh = matmul(layer.wv[h], f);             // [dh × N]
            const double temperature = std::sqrt(static_cast<double>(qh.dim(0)));
            const Tensor attn = softmax_rows(matmul_tn(qh, kh), temperature); // [N_m × N]
            const Tensor ctx = matmul_nt(vh, attn);               // [dh × N_m]
            q = add(q, matmul(layer.wo[h], ctx));
        }
        const Tensor qf = layer_norm(q, layer.ln_ffn.gain, layer.ln_ffn.bias);
        q = add(q, linear(layer.ffn_out, silu(linear(layer.ffn_in, qf))));
    }
    QueryDecoderOutput out;
    out.mask_embeds = linear(params.mask_embed, q);
    out.class_probs = softmax_rows(transpose(linear(params.class_head, q)), 1.0);
    return out;
}

Tensor feature_embeddings(const Tensor& features, const QueryDecoderParams& params) {
    return linear(params.feature_proj, features);
}

MaskStack mask_logits(const Tensor& feature_embeds, const Tensor& mask_embeds, GridShape grid, int level) {
    if (feature_embeds.rank() != 2 || mask_embeds.rank() != 2 || feature_embeds.dim(0) != mask_embeds.dim(0)) {
        throw DimensionError("mask_logits: embedding dimensions differ: " + shape_str(feature_embeds.shape()) +
                             " vs " + shape_str(mask_embeds.shape()));
    }
    if (grid.size() != feature_embeds.dim(1)) throw DimensionError("mask_logits: grid size differs from pixel count");
    MaskStack m;
    m.level = level;
    m.grid = grid;
    m.semantics = MaskSemantics::mask_probabilities;
    m.values = sigmoid(matmul_tn(feature_embeds, mask_embeds));
    return m;
}

MaskStack per_pixel_logits(const Tensor& features, const Tensor& w, GridShape grid, int level) {
    if (features.rank() != 2 || w.rank() != 2 || features.dim(0) != w.dim(0)) {
        throw DimensionError("per_pixel_logits: features [C×N] and w [C×K] must share C");
    }
    if (grid.size() != features.dim(1)) throw DimensionError("per_pixel_logits: grid size differs from pixel count");
    MaskStack m;
    m.level = level;
    m.grid = grid;
    m.semantics = MaskSemantics::class_probabilities;
    m.values = softmax_rows(matmul_tn(features, w), 1.0);
    return m;
}

PanopticPrediction postprocess_panoptic(const Tensor& class_probs, const MaskStack& decoded, GridShape image,
                                        std::int32_t void_label) {
    if (decoded.semantics != MaskSemantics::mask_probabilities) {
        throw ContractError("postprocess_panoptic: decoded stack must hold mask probabilities");
    }
    const std::size_t nm = class_probs.dim(0), kp1 = class_probs.dim(1);
    if (decoded.masks() != nm) throw DimensionError("postprocess_panoptic: query count differs between P and M");
    if (decoded.pixels() != image.size()) throw DimensionError("postprocess_panoptic: decoded stack is not full size");
    const std::size_t no_object = kp1 - 1;

    std::vector<std::size_t> cls(nm);
    std::vector<double> conf(nm);
    for (std::size_t i = 0; i < nm; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < kp1; ++c)
            if (class_probs[i * kp1 + c] > class_probs[i * kp1 + best]) best = c;
        cls[i] = best;
        conf[i] = class_probs[i * kp1 + best];
    }
    PanopticPrediction out{LabelMap(image.height, image.width, void_label), LabelMap(image.height, image.width, -1)};
    const auto m = decoded.values.data();
    for (std::size_t j = 0; j < image.size(); ++j) {
        std::size_t winner = nm;
        double best = 0.0;
        for (std::size_t i = 0; i < nm; ++i) {
            if (cls[i] == no_object) continue;
            const double score = conf[i] * m[j * nm + i];
            if (winner == nm || score > best) {
                winner = i;
                best = score;
            }
        }
        if (winner == nm) continue;
        out.labels.labels[j] = static_cast<std::int32_t>(cls[winner]);
        out.instances.labels[j] = static_cast<std::int32_t>(winner);
    }
    return out;
}

LabelMap argmax_labels(const MaskStack& probs) {
    const std::size_t n = probs.pixels(), k = probs.masks();
    LabelMap out(probs.grid.height, probs.grid.width);
    if (out.size() != n) throw DimensionError("argmax_labels: grid size differs from pixel count");
    const auto v = probs.values.data();
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (v[j * k + c] > v[j * k + best]) best = c;
        out.labels[j] = static_cast<std::int32_t>(best);
    }
    return out;
}

} // namespace hcseg
