#include "fedssl/nets.hpp"

#include <cmath>
#include <string>

#include "fedssl/errors.hpp"
#include "fedssl/ops.hpp"

namespace fedssl::nets {

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_tensor(Shape shape, double std, Rng& rng) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng) * std;
    return Tensor(std::move(shape), std::move(v), true);
}

Tensor trunc_normal_tensor(Shape shape, Rng& rng) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = truncated_normal(rng, kInitStd);
    return Tensor(std::move(shape), std::move(v), true);
}

void add_linear(ParamSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    p.add(name + ".weight", trunc_normal_tensor({in, out}, rng));
    p.add(name + ".bias", Tensor::zeros({out}, true));
}

void add_norm(ParamSet& p, const std::string& name, std::size_t dim) {
    p.add(name + ".weight", Tensor::full({dim}, 1.0, true));
    p.add(name + ".bias", Tensor::zeros({dim}, true));
}

void add_block(ParamSet& p, const std::string& prefix, std::size_t dim, std::size_t mlp_ratio, Rng& rng) {
    add_norm(p, prefix + ".norm1", dim);
    add_linear(p, prefix + ".attn.qkv", dim, 3 * dim, rng);
    add_linear(p, prefix + ".attn.proj", dim, dim, rng);
    add_norm(p, prefix + ".norm2", dim);
    add_linear(p, prefix + ".mlp.fc1", dim, mlp_ratio * dim, rng);
    add_linear(p, prefix + ".mlp.fc2", mlp_ratio * dim, dim, rng);
}

Tensor lin(const ParamSet& p, const std::string& name, const Tensor& x) {
    return ops::linear(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

Tensor norm(const ParamSet& p, const std::string& name, const Tensor& x) {
    return ops::layer_norm(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

// Multi-head self-attention over x (B, T, D).
Tensor attention(const ParamSet& p, const std::string& prefix, const Tensor& x, std::size_t heads) {
    const std::size_t d = x.dim(2);
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor qkv = lin(p, prefix + ".qkv", x);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = ops::slice_last(qkv, h * dh, dh);
        Tensor k = ops::slice_last(qkv, d + h * dh, dh);
        Tensor v = ops::slice_last(qkv, 2 * d + h * dh, dh);
        Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt);
        outs.push_back(ops::matmul(ops::softmax(scores), v));
    }
    Tensor merged = heads == 1 ? outs[0] : ops::concat(outs, -1);
    return lin(p, prefix + ".proj", merged);
}

// Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x)).
Tensor block(const ParamSet& p, const std::string& prefix, const Tensor& x, std::size_t heads) {
    Tensor h = ops::add(x, attention(p, prefix + ".attn", norm(p, prefix + ".norm1", x), heads));
    Tensor m = lin(p, prefix + ".mlp.fc2", ops::gelu(lin(p, prefix + ".mlp.fc1", norm(p, prefix + ".norm2", h))));
    return ops::add(h, m);
}

void check_indices(const VitConfig& cfg, const IndexLists& indices, bool require_sorted) {
    const std::size_t n = cfg.num_patches();
    for (const auto& list : indices) {
        if (list.size() != indices.front().size()) {
            throw ShapeError("index lists must have equal length across the batch");
        }
        std::vector<bool> seen(n, false);
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (list[i] >= n) {
                throw IndexError("patch index " + std::to_string(list[i]) + " out of range [0," +
                                 std::to_string(n) + ")");
            }
            if (seen[list[i]]) throw IndexError("duplicate patch index " + std::to_string(list[i]));
            seen[list[i]] = true;
            if (require_sorted && i > 0 && list[i] <= list[i - 1]) {
                throw IndexError("patch indices must be strictly increasing");
            }
        }
    }
}

Tensor encoder_tail(const ParamSet& p, const VitConfig& cfg, Tensor tokens, std::size_t batch) {
    // class embedding plus its positional slot, replicated over the batch
    Tensor cls = ops::add(p.at("encoder.cls_token"), ops::gather_rows(p.at("encoder.pos_embed"), {0}));
    Tensor cls_b = ops::reshape(ops::gather_rows(cls, std::vector<std::size_t>(batch, 0)), {batch, 1, cfg.embed_dim});
    Tensor x = ops::concat({cls_b, tokens}, 1);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        x = block(p, "encoder.blocks." + std::to_string(i), x, cfg.heads);
    }
    return norm(p, "encoder.norm", x);
}

}  // namespace

ParamSet init_cnn(const CnnConfig& cfg, Rng& rng, bool with_head) {
    ParamSet p;
    auto conv = [&](const std::string& name, std::size_t in, std::size_t out) {
        double std = std::sqrt(2.0 / static_cast<double>(in * 9));
        p.add(name + ".weight", normal_tensor({out, in, 3, 3}, std, rng));
        p.add(name + ".bias", Tensor::zeros({out}, true));
    };
    conv("encoder.conv1", cfg.in_channels, cfg.conv1_channels);
    conv("encoder.conv2", cfg.conv1_channels, cfg.conv2_channels);
    if (with_head) {
        auto fc = [&](const std::string& name, std::size_t in, std::size_t out) {
            p.add(name + ".weight", normal_tensor({in, out}, std::sqrt(2.0 / static_cast<double>(in)), rng));
            p.add(name + ".bias", Tensor::zeros({out}, true));
        };
        fc("head.fc1", cfg.conv2_channels, cfg.head_hidden);
        fc("head.fc2", cfg.head_hidden, cfg.head_out);
    }
    return p;
}

Tensor cnn_features(const ParamSet& p, const CnnConfig& cfg, const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
        throw ShapeError("cnn input must be (B," + std::to_string(cfg.in_channels) + ",H,W), got " +
                         shape_str(x.shape()));
    }
    Tensor xn = ops::scale(ops::add_scalar(x, -0.5), 4.0);
    Tensor h = ops::relu(ops::conv2d(xn, p.at("encoder.conv1.weight"), p.at("encoder.conv1.bias"), 2, 1));
    h = ops::relu(ops::conv2d(h, p.at("encoder.conv2.weight"), p.at("encoder.conv2.bias"), 2, 1));
    const std::size_t b = h.dim(0), c = h.dim(1);
    return ops::mean(ops::reshape(h, {b, c, h.dim(2) * h.dim(3)}), -1);
}

Tensor projection_head(const ParamSet& p, const Tensor& features) {
    Tensor h = ops::relu(lin(p, "head.fc1", features));
    return ops::l2_normalize(lin(p, "head.fc2", h));
}

Tensor cnn_forward(const ParamSet& p, const CnnConfig& cfg, const Tensor& x, bool with_head) {
    Tensor f = cnn_features(p, cfg, x);
    return with_head ? projection_head(p, f) : f;
}

void VitConfig::validate() const {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
        throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by patch size " + std::to_string(patch));
    }
    if (heads == 0 || embed_dim % heads != 0) throw ShapeError("embed_dim not divisible by heads");
    if (decoder_heads == 0 || decoder_dim % decoder_heads != 0) {
        throw ShapeError("decoder_dim not divisible by decoder_heads");
    }
}

ParamSet init_mae(const VitConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t n = cfg.num_patches();
    ParamSet p;
    add_linear(p, "encoder.patch_embed", cfg.patch_dim(), cfg.embed_dim, rng);
    p.add("encoder.cls_token", trunc_normal_tensor({1, cfg.embed_dim}, rng), Knowledge::local);
    p.add("encoder.pos_embed", trunc_normal_tensor({n + 1, cfg.embed_dim}, rng));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        add_block(p, "encoder.blocks." + std::to_string(i), cfg.embed_dim, cfg.mlp_ratio, rng);
    }
    add_norm(p, "encoder.norm", cfg.embed_dim);

    add_linear(p, "decoder.embed", cfg.embed_dim, cfg.decoder_dim, rng);
    p.add("decoder.mask_token", trunc_normal_tensor({1, cfg.decoder_dim}, rng));
    p.add("decoder.pos_embed", trunc_normal_tensor({n, cfg.decoder_dim}, rng));
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
        add_block(p, "decoder.blocks." + std::to_string(i), cfg.decoder_dim, cfg.mlp_ratio, rng);
    }
    add_norm(p, "decoder.norm", cfg.decoder_dim);
    add_linear(p, "decoder.head", cfg.decoder_dim, cfg.patch_dim(), rng);
    return p;
}

Tensor patchify(const Tensor& images, std::size_t patch) {
    if (images.rank() != 4) throw ShapeError("patchify expects (B,C,H,W), got " + shape_str(images.shape()));
    const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw ShapeError("patchify: " + shape_str(images.shape()) + " not divisible by patch " +
                         std::to_string(patch));
    }
    const std::size_t gh = h / patch, gw = w / patch, n = gh * gw, pd = patch * patch * c;
    std::vector<double> out(b * n * pd);
    auto src = images.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                double* dst = out.data() + (bi * n + py * gw + px) * pd;
                for (std::size_t i = 0; i < patch; ++i) {
                    for (std::size_t j = 0; j < patch; ++j) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            dst[(i * patch + j) * c + ch] =
                                src[((bi * c + ch) * h + py * patch + i) * w + px * patch + j];
                        }
                    }
                }
            }
        }
    }
    return Tensor({b, n, pd}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::size_t c, std::size_t h, std::size_t w, std::size_t patch) {
    if (patches.rank() != 3 || patch == 0 || h % patch != 0 || w % patch != 0) {
        throw ShapeError("unpatchify: bad geometry for " + shape_str(patches.shape()));
    }
    const std::size_t gh = h / patch, gw = w / patch, n = gh * gw, pd = patch * patch * c;
    if (patches.dim(1) != n || patches.dim(2) != pd) {
        throw ShapeError("unpatchify: expected (B," + std::to_string(n) + "," + std::to_string(pd) + "), got " +
                         shape_str(patches.shape()));
    }
    const std::size_t b = patches.dim(0);
    std::vector<double> out(b * c * h * w);
    auto src = patches.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                const double* s = src.data() + (bi * n + py * gw + px) * pd;
                for (std::size_t i = 0; i < patch; ++i) {
                    for (std::size_t j = 0; j < patch; ++j) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            out[((bi * c + ch) * h + py * patch + i) * w + px * patch + j] = s[(i * patch + j) * c + ch];
                        }
                    }
                }
            }
        }
    }
    return Tensor({b, c, h, w}, std::move(out));
}

Tensor encode_tokens(const ParamSet& p, const VitConfig& cfg, const Tensor& patches, const IndexLists& indices) {
    cfg.validate();
    if (patches.rank() != 3 || patches.dim(2) != cfg.patch_dim() || patches.dim(0) != indices.size()) {
        throw ShapeError("encoder input " + shape_str(patches.shape()) + " does not match " +
                         std::to_string(indices.size()) + " index lists of patch dim " +
                         std::to_string(cfg.patch_dim()));
    }
    check_indices(cfg, indices, false);
    const std::size_t b = patches.dim(0), v = patches.dim(1);
    if (indices.front().size() != v) throw ShapeError("index count does not match patch count");
    std::vector<std::size_t> pos_rows;
    pos_rows.reserve(b * v);
    for (const auto& list : indices) {
        for (auto i : list) pos_rows.push_back(i + 1);  // row 0 belongs to the class token
    }
    Tensor x = lin(p, "encoder.patch_embed", patches);
    Tensor pos = ops::reshape(ops::gather_rows(p.at("encoder.pos_embed"), pos_rows), {b, v, cfg.embed_dim});
    return encoder_tail(p, cfg, ops::add(x, pos), b);
}

Tensor vit_encode(const ParamSet& p, const VitConfig& cfg, const Tensor& patches, const IndexLists& indices) {
    check_indices(cfg, indices, true);
    return encode_tokens(p, cfg, patches, indices);
}

Tensor vit_encode_full(const ParamSet& p, const VitConfig& cfg, const Tensor& patches) {
    cfg.validate();
    const std::size_t n = cfg.num_patches();
    if (patches.rank() != 3 || patches.dim(1) != n || patches.dim(2) != cfg.patch_dim()) {
        throw ShapeError("full encoder input must be (B," + std::to_string(n) + "," +
                         std::to_string(cfg.patch_dim()) + "), got " + shape_str(patches.shape()));
    }
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i + 1;
    Tensor x = lin(p, "encoder.patch_embed", patches);
    Tensor pos = ops::gather_rows(p.at("encoder.pos_embed"), rows);  // (N, D) broadcast over batch
    return encoder_tail(p, cfg, ops::add(x, pos), patches.dim(0));
}

Tensor class_token_state(const Tensor& states) {
    if (states.rank() != 3) throw ShapeError("class_token_state expects (B,T,D), got " + shape_str(states.shape()));
    const std::size_t b = states.dim(0), t = states.dim(1), d = states.dim(2);
    return ops::slice_last(ops::reshape(states, {b, t * d}), 0, d);
}

Tensor vit_decode(const ParamSet& p, const VitConfig& cfg, const Tensor& visible_states, const IndexLists& indices,
                  std::size_t batch) {
    cfg.validate();
    const std::size_t n = cfg.num_patches();
    const std::size_t dd = cfg.decoder_dim;
    if (indices.size() != batch) throw ShapeError("vit_decode: index lists do not match batch");
    check_indices(cfg, indices, false);
    const std::size_t v = indices.empty() ? 0 : indices.front().size();
    Tensor tokens;
    if (v == 0) {
        Tensor mask = ops::gather_rows(p.at("decoder.mask_token"), std::vector<std::size_t>(batch * n, 0));
        tokens = ops::reshape(mask, {batch, n, dd});
    } else {
        if (!visible_states.defined() || visible_states.rank() != 3 || visible_states.dim(0) != batch ||
            visible_states.dim(1) != v || visible_states.dim(2) != cfg.embed_dim) {
            throw ShapeError("vit_decode: visible states " +
                             (visible_states.defined() ? shape_str(visible_states.shape()) : std::string("<none>")) +
                             " do not match " + std::to_string(v) + " indices per image");
        }
        Tensor y = ops::reshape(lin(p, "decoder.embed", visible_states), {batch * v, dd});
        Tensor pool = ops::concat({y, p.at("decoder.mask_token")}, 0);  // last row: mask token
        std::vector<std::size_t> rows(batch * n, batch * v);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t s = 0; s < v; ++s) rows[b * n + indices[b][s]] = b * v + s;
        }
        tokens = ops::reshape(ops::gather_rows(pool, rows), {batch, n, dd});
    }
    Tensor x = ops::add(tokens, p.at("decoder.pos_embed"));
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
        x = block(p, "decoder.blocks." + std::to_string(i), x, cfg.decoder_heads);
    }
    return lin(p, "decoder.head", norm(p, "decoder.norm", x));
}

ParamSet init_classifier(std::size_t in_dim, std::size_t num_classes, Rng& rng, bool zero_init) {
    ParamSet p;
    p.add("classifier.weight", zero_init ? Tensor::zeros({in_dim, num_classes}, true)
                                         : trunc_normal_tensor({in_dim, num_classes}, rng));
    p.add("classifier.bias", Tensor::zeros({num_classes}, true));
    return p;
}

Tensor classify(const ParamSet& p, const Tensor& features) { return lin(p, "classifier", features); }

}  // namespace fedssl::nets
