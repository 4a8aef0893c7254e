#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedssl/tensor.hpp"

namespace fedssl {

// Whether a parameter is synchronized through the server every round.
enum class Knowledge : std::uint8_t { global, local };

// Named, insertion-ordered collection of parameter tensors. Copying a
// ParamSet aliases the tensors; clone() is the deep copy.
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        Knowledge tag = Knowledge::global;
    };

    void add(std::string name, Tensor t, Knowledge tag = Knowledge::global);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    Knowledge tag(const std::string& name) const;
    void set_tag(const std::string& name, Knowledge tag);

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<std::string> names() const;
    std::size_t total_numel() const;

    ParamSet clone() const;
    void zero_grad();
    void set_requires_grad(bool v);
    // Overwrites values of `names` with the same-named tensors of `src`.
    // Shapes must agree.
    void assign_from(const ParamSet& src, const std::vector<std::string>& names);
    void assign_from(const ParamSet& src);
    // Entries whose name starts with `prefix`, aliased.
    ParamSet subset_with_prefix(const std::string& prefix) const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Same names in the same order with the same shapes; otherwise throws
// SchemaError naming the first differing parameter.
void require_same_schema(const ParamSet& a, const ParamSet& b);

// 64-bit FNV-1a over, for each entry in order, the UTF-8 name followed by the
// little-endian f64 payload.
std::uint64_t digest(const ParamSet& params);
std::uint64_t digest(const Tensor& t);
std::string hex_digest(std::uint64_t d);

}  // namespace fedssl
