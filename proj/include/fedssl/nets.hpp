#pragma once

#include <cstddef>
#include <vector>

#include "fedssl/param_set.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

// Desk-scale architectures. Models are plain ParamSets; the functions here
// look parameters up by their stable names, so the same code runs the main
// model, the momentum copy and the server's global copy.
namespace fedssl::nets {

// Two 3x3 stride-2 convolutions (relu) and global average pooling, followed
// by an optional 2-layer MLP projection head with L2-normalized output.
struct CnnConfig {
    std::size_t in_channels = 3;
    std::size_t conv1_channels = 16;
    std::size_t conv2_channels = 32;
    std::size_t head_hidden = 64;
    std::size_t head_out = 32;

    std::size_t feature_dim() const { return conv2_channels; }
};

// names: encoder.conv{1,2}.{weight,bias}; with head also head.fc{1,2}.{weight,bias}
ParamSet init_cnn(const CnnConfig& cfg, Rng& rng, bool with_head = true);
// x (B,C,H,W) -> pooled features (B, conv2_channels)
Tensor cnn_features(const ParamSet& params, const CnnConfig& cfg, const Tensor& x);
// features -> unit-norm projections (B, head_out)
Tensor projection_head(const ParamSet& params, const Tensor& features);
Tensor cnn_forward(const ParamSet& params, const CnnConfig& cfg, const Tensor& x, bool with_head);

struct VitConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 3;
    std::size_t patch = 8;
    std::size_t embed_dim = 32;
    std::size_t heads = 2;
    std::size_t depth = 2;
    std::size_t mlp_ratio = 4;
    std::size_t decoder_dim = 16;
    std::size_t decoder_heads = 2;
    std::size_t decoder_depth = 1;

    std::size_t num_patches() const { return (height / patch) * (width / patch); }
    std::size_t patch_dim() const { return patch * patch * channels; }
    // ShapeError on indivisible image size or head split.
    void validate() const;
};

// Encoder (encoder.*) and decoder (decoder.*) parameters of the masked
// autoencoder. encoder.cls_token is tagged local, everything else global.
ParamSet init_mae(const VitConfig& cfg, Rng& rng);

// (B,C,H,W) -> (B, N, P*P*C); patches in row-major grid order, each patch
// flattened as (row, col, channel).
Tensor patchify(const Tensor& images, std::size_t patch);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch);

using IndexLists = std::vector<std::vector<std::size_t>>;

// Encoder over a per-image subset of patches. `patches` is (B, V, P*P*C) and
// indices[b][v] names the grid position of patches[b][v]. Returns
// (B, V+1, D): the class token state first, then one state per patch.
// Indices must be strictly increasing and < N (IndexError otherwise).
Tensor vit_encode(const ParamSet& params, const VitConfig& cfg, const Tensor& patches,
                  const IndexLists& indices);
// As vit_encode, but indices only need to be distinct; rows keep the caller's
// order.
Tensor encode_tokens(const ParamSet& params, const VitConfig& cfg, const Tensor& patches,
                     const IndexLists& indices);
// Reference forward over all N patches in grid order (no index gathering).
Tensor vit_encode_full(const ParamSet& params, const VitConfig& cfg, const Tensor& patches);
// (B, T, D) -> (B, D), token 0
Tensor class_token_state(const Tensor& states);

// Decoder. `visible_states` is (B, V, D) encoder output without the class
// token (ignored when V == 0). Masked positions receive decoder.mask_token,
// every position receives its decoder positional embedding. Returns
// (B, N, P*P*C).
Tensor vit_decode(const ParamSet& params, const VitConfig& cfg, const Tensor& visible_states,
                  const IndexLists& indices, std::size_t batch);

// names: classifier.weight (in, classes), classifier.bias
ParamSet init_classifier(std::size_t in_dim, std::size_t num_classes, Rng& rng, bool zero_init);
Tensor classify(const ParamSet& params, const Tensor& features);

}  // namespace fedssl::nets
