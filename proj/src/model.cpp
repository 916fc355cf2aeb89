#include "hcseg/model.hpp"

#include <cmath>

#include "hcseg/metrics.hpp"

namespace hcseg {

std::string to_string(HeadKind head) { return head == HeadKind::mask_query ? "mask-query" : "per-pixel"; }

HeadKind parse_head(const std::string& text) {
    if (text == "mask-query") return HeadKind::mask_query;
    if (text == "per-pixel") return HeadKind::per_pixel;
    throw ContractError("unknown head '" + text + "' (expected mask-query or per-pixel)");
}

void ModelConfig::validate() const {
    backbone.validate();
    if (num_classes < 2) throw ContractError("num_classes must be at least 2");
    if (head == HeadKind::mask_query) {
        if (decoder.num_queries == 0) throw ContractError("num_queries must be positive");
        if (decoder.num_classes != num_classes) throw ContractError("decoder.num_classes differs from num_classes");
        if (decoder.num_heads == 0 || decoder.query_dim % decoder.num_heads != 0) {
            throw ContractError("query_dim must be divisible by num_heads");
        }
    }
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)), params_(cfg_.seed) {
    cfg_.validate();
    backbone_ = make_backbone_params(params_, cfg_.backbone);
    const std::size_t c = cfg_.backbone.channels.back();
    if (cfg_.head == HeadKind::mask_query) {
        decoder_ = make_query_decoder_params(params_, cfg_.decoder, c);
    } else {
        classifier_ = params_.create("head.classifier", {c, cfg_.num_classes}, Init::normal, 1.0 / std::sqrt(double(c)));
    }
}

std::vector<Tensor> Model::scales() const {
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < backbone_.clustering.size(); ++s) {
        if (backbone_.hooked[s]) out.push_back(backbone_.clustering[s].scale);
    }
    return out;
}

ModelOutput Model::forward(const Tensor& image, bool hard) const {
    if (image.rank() != 3) throw DimensionError("Model::forward: image must be [3×H×W]");
    ModelOutput out;
    out.image = {image.dim(1), image.dim(2)};
    out.pyramid = forward_with_hooks(image, backbone_, cfg_.backbone);
    const FeaturePyramid& pyr = out.pyramid;
    if (cfg_.head == HeadKind::mask_query) {
        QueryDecoderOutput q = query_decoder_forward(pyr.final_features, decoder_);
        out.class_probs = q.class_probs;
        out.coarse = mask_logits(feature_embeddings(pyr.final_features, decoder_), q.mask_embeds, pyr.final_grid,
                                 pyr.final_level);
    } else {
        out.coarse = per_pixel_logits(pyr.final_features, classifier_, pyr.final_grid, pyr.final_level);
    }
    const std::vector<AssignmentMatrix> chain = pyr.assignments();
    out.decoded = hard ? hard_decode(chain, out.coarse) : decode_full(chain, out.coarse);
    out.full = upsample_to_image(out.decoded, out.image);
    return out;
}

Prediction predict(const ModelOutput& out, std::size_t num_classes) {
    Prediction p;
    if (out.full.semantics == MaskSemantics::class_probabilities) {
        p.semantic = argmax_labels(out.full);
        p.instance = LabelMap(out.image.height, out.image.width, 0);
        return p;
    }
    PanopticPrediction pan =
        postprocess_panoptic(out.class_probs, out.full, out.image, static_cast<std::int32_t>(num_classes));
    p.semantic = std::move(pan.labels);
    p.instance = std::move(pan.instances);
    return p;
}

std::vector<LabelMap> cluster_partitions(const ModelOutput& out) {
    const std::vector<AssignmentMatrix> chain = out.pyramid.assignments();
    std::vector<LabelMap> result;
    if (chain.empty()) return result;
    const GridShape fine = chain.front().fine_shape;
    if (out.image.height % fine.height != 0 || out.image.width % fine.width != 0) {
        throw DimensionError("cluster_partitions: finest hooked grid does not divide the image");
    }
    const std::size_t fy = out.image.height / fine.height, fx = out.image.width / fine.width;
    for (std::size_t depth = 1; depth <= chain.size(); ++depth) {
        const std::vector<std::size_t> anc = hard_ancestors(std::span(chain).first(depth));
        LabelMap full(out.image.height, out.image.width);
        for (std::size_t y = 0; y < full.height; ++y)
            for (std::size_t x = 0; x < full.width; ++x)
                full(y, x) = static_cast<std::int32_t>(anc[(y / fy) * fine.width + x / fx]);
        result.push_back(compact_labels(full));
    }
    return result;
}

} // namespace hcseg
