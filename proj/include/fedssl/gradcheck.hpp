#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

// Central finite-difference checks of the backward rules.
namespace fedssl::gradcheck {

// One random instance: leaf inputs and a scalar-valued function of them.
struct Case {
    std::vector<Tensor> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> fn;
};

struct Entry {
    std::string name;
    std::function<Case(Rng&)> make;
    std::size_t instances = 10;
};

class Registry {
public:
    void add(std::string name, std::function<Case(Rng&)> make, std::size_t instances = 10);
    const std::vector<Entry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }

private:
    std::vector<Entry> entries_;
};

struct Options {
    double h = 1e-5;
    double tol = 1e-4;
    // coordinates probed per instance, drawn across all inputs
    std::size_t max_coords = 48;
    std::uint64_t seed = 0;
};

// ||g - n|| / max(||g||, ||n||) over the probed coordinates, where g is the
// analytic and n the numeric gradient. 0 when both vanish.
double case_error(const Case& c, const Options& opt, Rng& coord_rng);

struct EntryReport {
    std::string name;
    std::size_t instances = 0;
    std::size_t failed = 0;
    double worst_error = 0.0;
    std::string error;  // exception text, if an instance threw
    bool ok() const { return failed == 0 && error.empty(); }
};

struct Report {
    std::vector<EntryReport> entries;
    double seconds = 0.0;
    bool ok() const;
    std::vector<std::string> failures() const;
    std::string to_text() const;
};

// ContractError on an empty registry.
Report run(const Registry& registry, const Options& opt = {});

// Every op in ops::, the contrastive and reconstruction losses, and two
// composites (CNN encoder + contrastive loss, 16x16 masked autoencoder).
Registry default_registry();

}  // namespace fedssl::gradcheck
