#include "fedssl/param_set.hpp"

#include <bit>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "fedssl/errors.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {

void ParamSet::add(std::string name, Tensor t, Knowledge tag) {
    if (contains(name)) throw ContractError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(t), tag});
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("unknown parameter: " + name);
    return entries_[it->second].tensor;
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("unknown parameter: " + name);
    return entries_[it->second].tensor;
}

Knowledge ParamSet::tag(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("unknown parameter: " + name);
    return entries_[it->second].tag;
}

void ParamSet::set_tag(const std::string& name, Knowledge tag) {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("unknown parameter: " + name);
    entries_[it->second].tag = tag;
}

std::vector<std::string> ParamSet::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (auto& e : entries_) out.push_back(e.name);
    return out;
}

std::size_t ParamSet::total_numel() const {
    std::size_t n = 0;
    for (auto& e : entries_) n += e.tensor.numel();
    return n;
}

ParamSet ParamSet::clone() const {
    ParamSet out;
    for (auto& e : entries_) out.add(e.name, e.tensor.clone(), e.tag);
    return out;
}

void ParamSet::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

void ParamSet::set_requires_grad(bool v) {
    for (auto& e : entries_) e.tensor.set_requires_grad(v);
}

void ParamSet::assign_from(const ParamSet& src, const std::vector<std::string>& names) {
    for (auto& n : names) {
        Tensor& dst = at(n);
        const Tensor& s = src.at(n);
        if (dst.shape() != s.shape()) {
            throw SchemaError("parameter " + n + ": shape " + shape_str(dst.shape()) + " vs " +
                              shape_str(s.shape()));
        }
        auto out = dst.mutable_data();
        std::copy(s.data().begin(), s.data().end(), out.begin());
    }
}

void ParamSet::assign_from(const ParamSet& src) { assign_from(src, names()); }

ParamSet ParamSet::subset_with_prefix(const std::string& prefix) const {
    ParamSet out;
    for (auto& e : entries_) {
        if (e.name.rfind(prefix, 0) == 0) out.add(e.name, e.tensor, e.tag);
    }
    return out;
}

void require_same_schema(const ParamSet& a, const ParamSet& b) {
    const auto& ea = a.entries();
    const auto& eb = b.entries();
    std::size_t n = std::min(ea.size(), eb.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (ea[i].name != eb[i].name) {
            throw SchemaError("parameter schema mismatch at position " + std::to_string(i) + ": " +
                              ea[i].name + " vs " + eb[i].name);
        }
        if (ea[i].tensor.shape() != eb[i].tensor.shape()) {
            throw SchemaError("parameter schema mismatch at " + ea[i].name + ": " +
                              shape_str(ea[i].tensor.shape()) + " vs " + shape_str(eb[i].tensor.shape()));
        }
    }
    if (ea.size() != eb.size()) {
        const auto& extra = ea.size() > eb.size() ? ea[n] : eb[n];
        throw SchemaError("parameter schema mismatch: " + extra.name + " present on one side only");
    }
}

namespace {

void hash_f64(Fnv1a& h, std::span<const double> values) {
    for (double v : values) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char le[8];
        for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(bits >> (8 * i));
        h.update(le, 8);
    }
}

}  // namespace

std::uint64_t digest(const ParamSet& params) {
    Fnv1a h;
    for (auto& e : params.entries()) {
        h.update(e.name);
        hash_f64(h, e.tensor.data());
    }
    return h.value();
}

std::uint64_t digest(const Tensor& t) {
    Fnv1a h;
    hash_f64(h, t.data());
    return h.value();
}

std::string hex_digest(std::uint64_t d) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << d;
    return os.str();
}

}  // namespace fedssl
