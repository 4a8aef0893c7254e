#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

// Synthetic stand-in for the multi-site dermatology data: five texture
// classes rendered under three chromatic groups, split over ten clients.
namespace fedssl::data {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

struct Sample {
    std::vector<double> pixels;  // (C,H,W) row-major, values in [0,1]
    std::uint32_t label = 0;
    Split split = Split::train;
};

struct ClientShard {
    std::uint32_t id = 0;
    std::uint32_t group = 0;  // 0 = A, 1 = B, 2 = C
    std::vector<Sample> samples;

    std::vector<std::size_t> indices(Split s) const;
};

struct SynthSpec {
    std::size_t num_classes = 5;
    std::size_t num_clients = 10;
    std::size_t samples_per_client = 100;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 3;
    double noise_sigma = 0.04;
    // amplitude of the class texture
    double texture_amplitude = 0.22;
    // relative per-channel tint separating class colours
    double class_tint = 0.07;
    // per-image brightness jitter, relative
    double brightness_jitter = 0.08;

    void validate() const;  // ConfigError
};

struct Partition {
    SynthSpec spec;
    std::uint64_t seed = 0;
    std::vector<ClientShard> clients;

    std::size_t image_numel() const { return spec.channels * spec.height * spec.width; }
};

// Client -> chromatic group. With ten clients: 0-6 A, 7-8 B, 9 C.
std::vector<std::uint32_t> client_groups(std::size_t num_clients);

// Pure function of (spec, seed). Labels are balanced within +-1 per client;
// each client is split 60/20/20 into train/val/test.
Partition generate(const SynthSpec& spec, std::uint64_t seed);

// Stack samples into a (B,C,H,W) tensor.
Tensor stack(const ClientShard& shard, std::span<const std::size_t> idx, const SynthSpec& spec);
Tensor stack_pixels(const std::vector<std::vector<double>>& images, const SynthSpec& spec);

struct AugmentConfig {
    double crop_scale_min = 0.5;
    double crop_scale_max = 1.0;
    double flip_p = 0.5;
    double channel_jitter = 0.2;
    double rot90_p = 0.25;
    double noise_sigma = 0.02;

    // contrastive family: crop, flip, rotation, colour scaling, noise
    static AugmentConfig contrastive() { return {}; }
    // masked-autoencoder family: crop and flip only
    static AugmentConfig mae() { return {0.5, 1.0, 0.5, 0.0, 0.0, 0.0}; }
};

struct ImageGeom {
    std::size_t channels, height, width;
};

std::vector<double> hflip(std::span<const double> img, ImageGeom g);
// 90 degrees counter-clockwise; square images only
std::vector<double> rot90(std::span<const double> img, ImageGeom g);
// bilinear resample of the window [top, top+h) x [left, left+w) to full size
std::vector<double> resized_crop(std::span<const double> img, ImageGeom g, double top, double left, double h,
                                 double w);

std::vector<double> augment(std::span<const double> img, ImageGeom g, const AugmentConfig& cfg, Rng& rng);
// Two independent draws t, t' from the same family.
std::pair<std::vector<double>, std::vector<double>> augment_pair(std::span<const double> img, ImageGeom g,
                                                                 const AugmentConfig& cfg, Rng& rng);

struct LabelMask {
    double fraction = 1.0;
    // per client, indices into ClientShard::samples (train split only)
    std::vector<std::vector<std::size_t>> labeled;
    std::vector<std::string> warnings;
};

// Uniformly chosen fraction L of every client's train split, stratified by
// class (largest-remainder apportionment) unless some class would receive
// fewer than one label, in which case that client falls back to an
// unstratified draw and a warning is recorded.
LabelMask label_mask(const Partition& partition, double fraction, std::uint64_t seed);

// Client file:
//   magic "FSSLDATA" | u32 version (=1) | u32 client id | u32 group
//   | u64 count | u32 channels | u32 height | u32 width | u32 num_classes
//   | u32 labels[count] | u8 splits[count] | f64 pixels[count*C*H*W]
std::vector<std::uint8_t> encode_client(const ClientShard& shard, const SynthSpec& spec);
ClientShard decode_client(std::span<const std::uint8_t> bytes, SynthSpec* spec_out = nullptr);

}  // namespace fedssl::data
