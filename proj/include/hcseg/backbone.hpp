#pragma once

#include <string>
#include <vector>

#include "hcseg/clustering.hpp"
#include "hcseg/params.hpp"

namespace hcseg {

struct BackboneConfig {
    std::size_t in_channels = 3;
    // Append two normalized coordinate channels (x, y in [-1, 1]) to the input.
    bool coord_channels = true;
    std::size_t stem_stride = 2; // power of two, no clustering hook
    std::size_t num_stages = 4;
    // channels[0] is the stem width, channels[s + 1] the width after stage s.
    std::vector<std::size_t> channels = {16, 16, 24, 32, 32};
    std::size_t blocks_per_stage = 1;
    // Residual 3×3 convolutions x + act(conv(x)) on the final grid.
    std::size_t neck_blocks = 1;
    // Number of deepest downsampling layers with a clustering module.
    std::size_t hierarchical_level = 3;
    DownsampleKind downsample = DownsampleKind::avg_pool2;
    std::size_t clustering_channels = 32; // C_F
    double scale_init = 0.1;
    AssignmentLayout layout = AssignmentLayout::windowed;
    std::string activation = "silu";

    // log2(stem_stride)
    std::size_t stem_halvings() const;
    std::size_t total_stride() const { return stem_stride << num_stages; }
    // Throws ContractError when the config is inconsistent.
    void validate() const;
};

struct ConvParams {
    Tensor weight; // [Cout × Cin × k × k]
    Tensor bias;   // [Cout]
};

struct BackboneParams {
    std::vector<ConvParams> stem;
    std::vector<std::vector<ConvParams>> blocks; // per stage
    std::vector<ConvParams> downsample;          // undefined tensors for avg_pool2
    std::vector<ConvParams> neck;
    // Indexed by stage; only the deepest hierarchical_level stages are defined.
    std::vector<ClusteringModuleParams> clustering;
    std::vector<bool> hooked;
};

BackboneParams make_backbone_params(ParameterSet& store, const BackboneConfig& cfg);

struct HookLevel {
    int level = 0; // downsampling factor exponent of the fine grid
    GridShape fine;
    GridShape coarse;
    Tensor f_pre;  // [C × N]
    Tensor f_post; // [C' × N_d]
    AssignmentMatrix assignment;
};

struct FeaturePyramid {
    std::vector<HookLevel> levels; // fine → coarse
    Tensor final_features;         // [C × N] at the coarsest grid
    GridShape final_grid;
    int final_level = 0;

    std::vector<AssignmentMatrix> assignments() const;
};

FeaturePyramid forward_with_hooks(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg);

std::size_t count_parameters(const ParameterSet& params);

} // namespace hcseg
