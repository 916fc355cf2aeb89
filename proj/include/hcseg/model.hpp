#pragma once

#include <string>
#include <vector>

#include "hcseg/backbone.hpp"
#include "hcseg/decoder.hpp"
#include "hcseg/heads.hpp"
#include "hcseg/image.hpp"
#include "hcseg/params.hpp"

namespace hcseg {

enum class HeadKind { mask_query, per_pixel };

std::string to_string(HeadKind head);
HeadKind parse_head(const std::string& text);

struct ModelConfig {
    BackboneConfig backbone;
    HeadKind head = HeadKind::per_pixel;
    QueryDecoderConfig decoder; // mask-query head only
    std::size_t num_classes = 4;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ModelOutput {
    FeaturePyramid pyramid;
    MaskStack coarse;   // head output on the coarsest grid
    MaskStack decoded;  // after decode_full, finest hooked grid
    MaskStack full;     // nearest-upsampled to image resolution
    Tensor class_probs; // [N_m × (K + 1)], mask-query head only
    GridShape image;
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    // image: [3 × H × W]. With hard = true the assignments are hardened
    // before decoding.
    ModelOutput forward(const Tensor& image, bool hard = false) const;

    const ModelConfig& config() const { return cfg_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    // Clustering scales s^(i) of the hooked stages, fine → coarse.
    std::vector<Tensor> scales() const;

private:
    ModelConfig cfg_;
    ParameterSet params_;
    BackboneParams backbone_;
    QueryDecoderParams decoder_;
    Tensor classifier_; // [C × K], per-pixel head
};

struct Prediction {
    LabelMap semantic;
    LabelMap instance; // -1 = void; per-pixel head leaves it all 0
};

// Mask-query outputs go through panoptic post-processing with void label K.
Prediction predict(const ModelOutput& out, std::size_t num_classes);

// Hard cluster partitions at full resolution, one per hooked level (fine →
// coarse). Entry i labels each pixel with its ancestor prototype after the
// first i + 1 clustering layers, relabelled contiguously.
std::vector<LabelMap> cluster_partitions(const ModelOutput& out);

} // namespace hcseg
