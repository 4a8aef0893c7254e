#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "fedssl/data.hpp"
#include "fedssl/nets.hpp"
#include "fedssl/optim.hpp"
#include "fedssl/param_set.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

namespace fedssl::mae {

// visible and masked are sorted, disjoint, and cover 0..num_patches-1.
struct MaskPlan {
    std::size_t num_patches = 0;
    double ratio = 0.0;
    std::vector<std::size_t> visible;
    std::vector<std::size_t> masked;
};

// Uniform random subset of round(r*N) masked patches. ContractError unless
// 0 < r < 1 and N >= 2; DegenerateMaskError if round(r*N) is 0 or N.
MaskPlan make_mask(std::size_t num_patches, double ratio, Rng& rng);

enum class LossScope { full, masked };

// Called with the per-image index lists handed to the encoder.
using EncoderTrace = std::function<void(const nets::IndexLists&)>;

// Squared error between reconstructed and target patches (both (B,N,PPC)),
// averaged over every pixel (full) or over pixels of masked patches only
// (masked; DegenerateMaskError when nothing is masked).
Tensor reconstruction_loss(const Tensor& recon, const Tensor& target, const std::vector<MaskPlan>& plans,
                           LossScope scope);

// Encode the visible patches of each image, decode all N, compare with the
// original. One plan per image; every plan must have the same visible count.
Tensor mae_loss(const ParamSet& params, const nets::VitConfig& cfg, const Tensor& images,
                const std::vector<MaskPlan>& plans, LossScope scope, const EncoderTrace* trace = nullptr);

struct MaeConfig {
    nets::VitConfig vit;
    double mask_ratio = 0.75;
    LossScope scope = LossScope::full;
    std::size_t batch = 16;
    data::AugmentConfig augment = data::AugmentConfig::mae();
};

struct EpochRngs {
    Rng* sampling;  // batch order
    Rng* augment;
    Rng* masks;
};

// E passes over `train` (indices into shard.samples), fresh masks per image
// per pass, one optimizer step per batch. Returns the per-batch losses.
std::vector<double> mae_local_epoch(ParamSet& params, Optimizer& opt, const MaeConfig& cfg,
                                    const data::ClientShard& shard, const std::vector<std::size_t>& train,
                                    std::size_t epochs, EpochRngs rngs, const EncoderTrace* trace = nullptr);

}  // namespace fedssl::mae
