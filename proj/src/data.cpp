#include "fedssl/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>

#include "fedssl/errors.hpp"
#include "fedssl/serialize.hpp"

namespace fedssl::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Mean skin-tone colour of each chromatic group (A light, B medium, C dark).
constexpr std::array<std::array<double, 3>, 3> kGroupColor = {{
    {0.80, 0.62, 0.55},
    {0.60, 0.42, 0.32},
    {0.36, 0.24, 0.18},
}};

// Unit tint directions, one per class, cycled when num_classes > 5.
constexpr std::array<std::array<double, 3>, 5> kTintDir = {{
    {1.0, 0.0, -1.0},
    {-1.0, 1.0, 0.0},
    {0.0, -1.0, 1.0},
    {1.0, 1.0, -1.0},
    {-1.0, -1.0, 1.0},
}};

// Texture value in roughly [-1, 1] at centred coordinates (u, v).
struct Texture {
    std::size_t kind;
    double cos_t, sin_t, phase, phase2, freq;
    double cx, cy;
    std::array<std::array<double, 3>, 6> spots;  // x, y, sign

    double at(double u, double v) const {
        double a = u * cos_t + v * sin_t;
        double b = -u * sin_t + v * cos_t;
        switch (kind) {
            case 0:
            case 1:
                return std::sin(kTwoPi * freq * a + phase);
            case 2:
                return 1.6 * std::sin(kTwoPi * freq * a + phase) * std::sin(kTwoPi * freq * b + phase2);
            case 3: {
                double r = std::hypot(u - cx, v - cy);
                return std::sin(kTwoPi * freq * r + phase);
            }
            default: {
                double s = 0.0;
                for (auto& sp : spots) {
                    double d2 = (u - sp[0]) * (u - sp[0]) + (v - sp[1]) * (v - sp[1]);
                    s += sp[2] * std::exp(-d2 / (2.0 * 0.07 * 0.07));
                }
                return std::clamp(s, -1.0, 1.0);
            }
        }
    }
};

Texture draw_texture(std::size_t label, Rng& rng) {
    static constexpr std::array<double, 5> kFreq = {2.0, 6.0, 3.0, 4.0, 0.0};
    Texture t{};
    t.kind = label % 5;
    double theta = uniform(rng, 0.0, std::numbers::pi);
    t.cos_t = std::cos(theta);
    t.sin_t = std::sin(theta);
    t.phase = uniform(rng, 0.0, kTwoPi);
    t.phase2 = uniform(rng, 0.0, kTwoPi);
    t.freq = kFreq[t.kind] * uniform(rng, 0.9, 1.1);
    t.cx = uniform(rng, -0.15, 0.15);
    t.cy = uniform(rng, -0.15, 0.15);
    for (std::size_t i = 0; i < t.spots.size(); ++i) {
        t.spots[i] = {uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4), i % 2 == 0 ? 1.0 : -1.0};
    }
    return t;
}

std::vector<double> render(const SynthSpec& spec, std::uint32_t group, std::size_t label, Rng& rng) {
    const std::size_t c = spec.channels, h = spec.height, w = spec.width;
    Texture tex = draw_texture(label, rng);
    const auto& dir = kTintDir[label % kTintDir.size()];
    double bright = 1.0 + uniform(rng, -spec.brightness_jitter, spec.brightness_jitter);
    std::vector<double> base(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double g = kGroupColor[group][ch % 3];
        base[ch] = g * (1.0 + spec.class_tint * dir[ch % 3]) * bright;
    }
    std::vector<double> img(c * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double u = (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 0.5;
            double v = (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 0.5;
            double s = spec.texture_amplitude * tex.at(u, v);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double val = base[ch] + s + spec.noise_sigma * normal(rng);
                img[(ch * h + y) * w + x] = std::clamp(val, 0.0, 1.0);
            }
        }
    }
    return img;
}

}  // namespace

std::vector<std::size_t> ClientShard::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == s) out.push_back(i);
    }
    return out;
}

void SynthSpec::validate() const {
    if (num_classes < 2) throw ConfigError("data.classes must be >= 2");
    if (num_clients < 1) throw ConfigError("data.clients must be >= 1");
    if (samples_per_client < num_classes) {
        throw ConfigError("data.samples_per_client (" + std::to_string(samples_per_client) +
                          ") must be >= num_classes (" + std::to_string(num_classes) + ")");
    }
    if (height == 0 || width == 0 || channels == 0) throw ConfigError("data image size must be positive");
    if (noise_sigma < 0.0) throw ConfigError("data.noise_sigma must be >= 0");
}

std::vector<std::uint32_t> client_groups(std::size_t num_clients) {
    // the last three clients stand in for the B, B, C sites when there are enough of them
    std::vector<std::uint32_t> g(num_clients, 0);
    if (num_clients >= 4) {
        g[num_clients - 3] = 1;
        g[num_clients - 2] = 1;
        g[num_clients - 1] = 2;
    }
    return g;
}

Partition generate(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    Partition part;
    part.spec = spec;
    part.seed = seed;
    auto groups = client_groups(spec.num_clients);
    const std::size_t n = spec.samples_per_client;
    for (std::size_t cid = 0; cid < spec.num_clients; ++cid) {
        Rng rng = derive_rng(seed, "data", cid);
        ClientShard shard;
        shard.id = static_cast<std::uint32_t>(cid);
        shard.group = groups[cid];
        std::vector<std::uint32_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(i % spec.num_classes);
        shuffle(labels, rng);
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        shuffle(order, rng);
        const std::size_t n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
        const std::size_t n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
        std::vector<Split> splits(n, Split::test);
        for (std::size_t r = 0; r < n; ++r) {
            splits[order[r]] = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
        }
        shard.samples.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            shard.samples.push_back({render(spec, shard.group, labels[i], rng), labels[i], splits[i]});
        }
        part.clients.push_back(std::move(shard));
    }
    return part;
}

Tensor stack(const ClientShard& shard, std::span<const std::size_t> idx, const SynthSpec& spec) {
    const std::size_t per = spec.channels * spec.height * spec.width;
    std::vector<double> buf(idx.size() * per);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& px = shard.samples.at(idx[i]).pixels;
        std::copy(px.begin(), px.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return Tensor({idx.size(), spec.channels, spec.height, spec.width}, std::move(buf));
}

Tensor stack_pixels(const std::vector<std::vector<double>>& images, const SynthSpec& spec) {
    const std::size_t per = spec.channels * spec.height * spec.width;
    std::vector<double> buf;
    buf.reserve(images.size() * per);
    for (const auto& img : images) {
        if (img.size() != per) throw ShapeError("image has " + std::to_string(img.size()) + " values, expected " + std::to_string(per));
        buf.insert(buf.end(), img.begin(), img.end());
    }
    return Tensor({images.size(), spec.channels, spec.height, spec.width}, std::move(buf));
}

std::vector<double> hflip(std::span<const double> img, ImageGeom g) {
    std::vector<double> out(img.size());
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t y = 0; y < g.height; ++y) {
            for (std::size_t x = 0; x < g.width; ++x) {
                out[(c * g.height + y) * g.width + x] = img[(c * g.height + y) * g.width + (g.width - 1 - x)];
            }
        }
    }
    return out;
}

std::vector<double> rot90(std::span<const double> img, ImageGeom g) {
    if (g.height != g.width) throw ShapeError("rot90 requires a square image");
    const std::size_t n = g.height;
    std::vector<double> out(img.size());
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) {
                out[(c * n + (n - 1 - x)) * n + y] = img[(c * n + y) * n + x];
            }
        }
    }
    return out;
}

std::vector<double> resized_crop(std::span<const double> img, ImageGeom g, double top, double left, double h,
                                 double w) {
    std::vector<double> out(img.size());
    const double sy = h / static_cast<double>(g.height);
    const double sx = w / static_cast<double>(g.width);
    const double ymax = static_cast<double>(g.height - 1);
    const double xmax = static_cast<double>(g.width - 1);
    for (std::size_t y = 0; y < g.height; ++y) {
        double fy = std::clamp(top + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, ymax);
        auto y0 = static_cast<std::size_t>(fy);
        std::size_t y1 = std::min(y0 + 1, g.height - 1);
        double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < g.width; ++x) {
            double fx = std::clamp(left + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, xmax);
            auto x0 = static_cast<std::size_t>(fx);
            std::size_t x1 = std::min(x0 + 1, g.width - 1);
            double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < g.channels; ++c) {
                const double* p = img.data() + c * g.height * g.width;
                double v = (1 - wy) * ((1 - wx) * p[y0 * g.width + x0] + wx * p[y0 * g.width + x1]) +
                           wy * ((1 - wx) * p[y1 * g.width + x0] + wx * p[y1 * g.width + x1]);
                out[(c * g.height + y) * g.width + x] = v;
            }
        }
    }
    return out;
}

std::vector<double> augment(std::span<const double> img, ImageGeom g, const AugmentConfig& cfg, Rng& rng) {
    const double H = static_cast<double>(g.height), W = static_cast<double>(g.width);
    double scale = uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
    double log_ratio = uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    double ratio = std::exp(log_ratio);
    double cw = std::min(W, std::sqrt(scale * ratio) * W);
    double ch = std::min(H, std::sqrt(scale / ratio) * H);
    double top = uniform(rng, 0.0, H - ch);
    double left = uniform(rng, 0.0, W - cw);
    std::vector<double> out = resized_crop(img, g, top, left, ch, cw);
    if (bernoulli(rng, cfg.flip_p)) out = hflip(out, g);
    if (cfg.rot90_p > 0.0 && g.height == g.width && bernoulli(rng, cfg.rot90_p)) out = rot90(out, g);
    if (cfg.channel_jitter > 0.0) {
        const std::size_t plane = g.height * g.width;
        for (std::size_t c = 0; c < g.channels; ++c) {
            double f = uniform(rng, 1.0 - cfg.channel_jitter, 1.0 + cfg.channel_jitter);
            for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] *= f;
        }
    }
    if (cfg.noise_sigma > 0.0) {
        for (auto& v : out) v += cfg.noise_sigma * normal(rng);
    }
    for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
    return out;
}

std::pair<std::vector<double>, std::vector<double>> augment_pair(std::span<const double> img, ImageGeom g,
                                                                 const AugmentConfig& cfg, Rng& rng) {
    auto a = augment(img, g, cfg, rng);
    auto b = augment(img, g, cfg, rng);
    return {std::move(a), std::move(b)};
}

LabelMask label_mask(const Partition& partition, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("label fraction must be in (0, 1]");
    LabelMask mask;
    mask.fraction = fraction;
    const std::size_t k = partition.spec.num_classes;
    for (const auto& shard : partition.clients) {
        Rng rng = derive_rng(seed, "label", shard.id);
        auto train = shard.indices(Split::train);
        const std::size_t n = train.size();
        std::vector<std::size_t> chosen;
        if (n > 0) {
            const std::size_t total =
                std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
            std::vector<std::vector<std::size_t>> by_class(k);
            for (auto i : train) by_class[shard.samples[i].label].push_back(i);
            bool stratify = true;
            for (auto& cls : by_class) {
                if (!cls.empty() && fraction * static_cast<double>(cls.size()) < 1.0) stratify = false;
            }
            if (stratify) {
                std::vector<std::size_t> quota(k);
                std::vector<std::pair<double, std::size_t>> rem;
                std::size_t assigned = 0;
                for (std::size_t c = 0; c < k; ++c) {
                    double exact = fraction * static_cast<double>(by_class[c].size());
                    quota[c] = static_cast<std::size_t>(std::floor(exact));
                    assigned += quota[c];
                    rem.emplace_back(exact - static_cast<double>(quota[c]), c);
                }
                std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
                for (std::size_t r = 0; assigned < total && r < rem.size(); ++r) {
                    if (quota[rem[r].second] < by_class[rem[r].second].size()) {
                        ++quota[rem[r].second];
                        ++assigned;
                    }
                }
                for (std::size_t c = 0; c < k; ++c) {
                    shuffle(by_class[c], rng);
                    chosen.insert(chosen.end(), by_class[c].begin(),
                                  by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
                }
            } else {
                mask.warnings.push_back("client " + std::to_string(shard.id) +
                                        ": a class has fewer than one label at this fraction; unstratified draw");
                shuffle(train, rng);
                chosen.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(total));
            }
            std::sort(chosen.begin(), chosen.end());
        }
        mask.labeled.push_back(std::move(chosen));
    }
    return mask;
}

namespace {
constexpr char kDataMagic[8] = {'F', 'S', 'S', 'L', 'D', 'A', 'T', 'A'};
}

std::vector<std::uint8_t> encode_client(const ClientShard& shard, const SynthSpec& spec) {
    io::ByteWriter w;
    w.raw(kDataMagic, 8);
    w.u32(1);
    w.u32(shard.id);
    w.u32(shard.group);
    w.u64(shard.samples.size());
    w.u32(static_cast<std::uint32_t>(spec.channels));
    w.u32(static_cast<std::uint32_t>(spec.height));
    w.u32(static_cast<std::uint32_t>(spec.width));
    w.u32(static_cast<std::uint32_t>(spec.num_classes));
    for (auto& s : shard.samples) w.u32(s.label);
    for (auto& s : shard.samples) w.u8(static_cast<std::uint8_t>(s.split));
    for (auto& s : shard.samples) {
        for (double v : s.pixels) w.f64(v);
    }
    return w.take();
}

ClientShard decode_client(std::span<const std::uint8_t> bytes, SynthSpec* spec_out) {
    io::ByteReader r(bytes);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kDataMagic, 8) != 0) throw FormatError("not a client data file (bad magic)");
    if (r.u32() != 1) throw FormatError("unsupported client data version");
    ClientShard shard;
    shard.id = r.u32();
    shard.group = r.u32();
    std::uint64_t count = r.u64();
    SynthSpec spec;
    spec.channels = r.u32();
    spec.height = r.u32();
    spec.width = r.u32();
    spec.num_classes = r.u32();
    const std::size_t per = spec.channels * spec.height * spec.width;
    if (count > r.remaining() / (5 + 8 * per)) throw FormatError("truncated client data");
    shard.samples.resize(count);
    for (auto& s : shard.samples) s.label = r.u32();
    for (auto& s : shard.samples) {
        std::uint8_t sp = r.u8();
        if (sp > 2) throw FormatError("bad split tag");
        s.split = static_cast<Split>(sp);
    }
    for (auto& s : shard.samples) {
        s.pixels.resize(per);
        for (auto& v : s.pixels) v = r.f64();
    }
    if (!r.done()) throw FormatError("trailing bytes in client data");
    if (spec_out) *spec_out = spec;
    return shard;
}

}  // namespace fedssl::data
