#pragma once

#include "hcseg/clustering.hpp"
#include "hcseg/decoder.hpp"
#include "hcseg/image.hpp"
#include "hcseg/params.hpp"

namespace hcseg {

struct QueryDecoderConfig {
    std::size_t num_queries = 8;  // N_m
    std::size_t query_dim = 32;   // C_q, also the mask embedding width C_m
    std::size_t num_layers = 2;
    std::size_t num_heads = 1;
    std::size_t ffn_dim = 64;
    std::size_t num_classes = 4;  // K, the no-object class is appended
};

struct DecoderLayerParams {
    LayerNormParams ln_attn;
    std::vector<Tensor> wq, wk, wv, wo; // one per head
    LayerNormParams ln_ffn;
    ProjectionParams ffn_in;
    ProjectionParams ffn_out;
};

struct QueryDecoderParams {
    Tensor queries; // [C_q × N_m]
    LayerNormParams feature_ln;
    std::vector<DecoderLayerParams> layers;
    ProjectionParams mask_embed;   // C_q → C_m
    ProjectionParams feature_proj; // C_backbone → C_m
    ProjectionParams class_head;   // C_q → K + 1

    std::size_t num_classes() const { return class_head.weight.dim(0) - 1; }
    std::size_t num_queries() const { return queries.dim(1); }
};

QueryDecoderParams make_query_decoder_params(ParameterSet& store, const QueryDecoderConfig& cfg,
                                             std::size_t feature_channels);

struct QueryDecoderOutput {
    Tensor mask_embeds;  // [C_m × N_m]
    Tensor class_probs;  // [N_m × (K + 1)], rows on the simplex
};

// Pre-norm cross-attention stack: queries attend to the coarsest features,
// then a feed-forward block, both residual. features: [C × N].
QueryDecoderOutput query_decoder_forward(const Tensor& features, const QueryDecoderParams& params);

// E_feature = W·F + b
Tensor feature_embeddings(const Tensor& features, const QueryDecoderParams& params);

// sigmoid(E_featureᵀ · E_mask) as a coarsest-level mask stack.
MaskStack mask_logits(const Tensor& feature_embeds, const Tensor& mask_embeds, GridShape grid, int level);

// softmax_rows(fᵀ·w). The norm of w acts as the inverse softmax scale.
MaskStack per_pixel_logits(const Tensor& features, const Tensor& w, GridShape grid, int level);

struct PanopticPrediction {
    LabelMap labels;    // class per pixel; void_label where no query qualifies
    LabelMap instances; // winning query index, -1 for void
};

// Per pixel j: i* = argmax over {i : c_i ≠ ∅} of P[i, c_i]·M[j, i] with
// c_i = argmax_c P[i, c]; first index wins ties.
PanopticPrediction postprocess_panoptic(const Tensor& class_probs, const MaskStack& decoded, GridShape image,
                                        std::int32_t void_label);

// Per-pixel argmax of a class-probability stack.
LabelMap argmax_labels(const MaskStack& probs);

} // namespace hcseg
