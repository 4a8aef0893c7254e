#include "fedssl/mae.hpp"

#include <algorithm>
#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/ops.hpp"

namespace fedssl::mae {

MaskPlan make_mask(std::size_t n, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0) || n < 2) {
        throw ContractError("mask needs 0 < ratio < 1 and at least 2 patches");
    }
    const auto n_masked = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    if (n_masked == 0 || n_masked == n) {
        throw DegenerateMaskError("mask ratio " + std::to_string(ratio) + " over " + std::to_string(n) +
                                  " patches masks " + std::to_string(n_masked));
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    shuffle(perm, rng);
    MaskPlan plan;
    plan.num_patches = n;
    plan.ratio = ratio;
    plan.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_masked));
    plan.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_masked), perm.end());
    std::sort(plan.masked.begin(), plan.masked.end());
    std::sort(plan.visible.begin(), plan.visible.end());
    return plan;
}

Tensor reconstruction_loss(const Tensor& recon, const Tensor& target, const std::vector<MaskPlan>& plans,
                           LossScope scope) {
    if (recon.shape() != target.shape() || recon.rank() != 3) {
        throw ShapeError("reconstruction " + shape_str(recon.shape()) + " vs target " + shape_str(target.shape()));
    }
    if (scope == LossScope::full) return ops::mse(recon, target);

    const std::size_t b = recon.dim(0), n = recon.dim(1), d = recon.dim(2);
    if (plans.size() != b) throw ShapeError("one mask plan per image required");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t m : plans[i].masked) rows.push_back(i * n + m);
    }
    if (rows.empty()) throw DegenerateMaskError("masked-only loss with no masked patches");
    Tensor r = ops::gather_rows(ops::reshape(recon, {b * n, d}), rows);
    Tensor t = ops::gather_rows(ops::reshape(target, {b * n, d}), rows);
    return ops::mse(r, t);
}

Tensor mae_loss(const ParamSet& params, const nets::VitConfig& cfg, const Tensor& images,
                const std::vector<MaskPlan>& plans, LossScope scope, const EncoderTrace* trace) {
    Tensor target = nets::patchify(images, cfg.patch);
    const std::size_t b = target.dim(0), n = target.dim(1), d = target.dim(2);
    if (plans.size() != b) throw ShapeError("one mask plan per image required");
    const std::size_t v = plans.front().visible.size();
    nets::IndexLists idx(b);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < b; ++i) {
        if (plans[i].num_patches != n || plans[i].visible.size() != v) {
            throw ShapeError("mask plans must share patch and visible counts");
        }
        idx[i] = plans[i].visible;
        for (std::size_t p : plans[i].visible) rows.push_back(i * n + p);
    }
    Tensor visible = ops::reshape(ops::gather_rows(ops::reshape(target, {b * n, d}), rows), {b, v, d});
    if (trace && *trace) (*trace)(idx);
    Tensor states = nets::vit_encode(params, cfg, visible, idx);
    // drop the class token before decoding
    std::vector<std::size_t> token_rows;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 1; j <= v; ++j) token_rows.push_back(i * (v + 1) + j);
    }
    Tensor patch_states = ops::reshape(
        ops::gather_rows(ops::reshape(states, {b * (v + 1), cfg.embed_dim}), token_rows), {b, v, cfg.embed_dim});
    Tensor recon = nets::vit_decode(params, cfg, patch_states, idx, b);
    return reconstruction_loss(recon, target, plans, scope);
}

std::vector<double> mae_local_epoch(ParamSet& params, Optimizer& opt, const MaeConfig& cfg,
                                    const data::ClientShard& shard, const std::vector<std::size_t>& train,
                                    std::size_t epochs, EpochRngs rngs, const EncoderTrace* trace) {
    std::vector<double> losses;
    if (train.empty() || epochs == 0) return losses;
    const data::ImageGeom geom{cfg.vit.channels, cfg.vit.height, cfg.vit.width};
    const std::size_t per = geom.channels * geom.height * geom.width;
    const std::size_t n = cfg.vit.num_patches();
    std::vector<std::size_t> order = train;
    for (std::size_t e = 0; e < epochs; ++e) {
        shuffle(order, *rngs.sampling);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            std::vector<double> buf;
            buf.reserve((end - start) * per);
            std::vector<MaskPlan> plans;
            for (std::size_t i = start; i < end; ++i) {
                auto img = data::augment(shard.samples.at(order[i]).pixels, geom, cfg.augment, *rngs.augment);
                buf.insert(buf.end(), img.begin(), img.end());
                plans.push_back(make_mask(n, cfg.mask_ratio, *rngs.masks));
            }
            Tensor x({end - start, geom.channels, geom.height, geom.width}, std::move(buf));
            Tensor loss = mae_loss(params, cfg.vit, x, plans, cfg.scope, trace);
            params.zero_grad();
            loss.backward();
            opt.step(params);
            losses.push_back(loss.item());
        }
    }
    return losses;
}

}  // namespace fedssl::mae
