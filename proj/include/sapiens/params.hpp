#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "sapiens/rng.hpp"
#include "sapiens/tape.hpp"

namespace sapiens {

// Named trainable tensors. Insertion order is stable and defines optimizer
// iteration order; values live outside any tape and are bound as leaves each
// step.
class ParamStore {
public:
    bool has(const std::string& name) const { return map_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = map_.find(name);
        check(it != map_.end(), "param store: no tensor named " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = map_.find(name);
        check(it != map_.end(), "param store: no tensor named " + name);
        return it->second;
    }

    Tensor& add(const std::string& name, Tensor t) {
        check(!has(name), "param store: duplicate tensor " + name);
        order_.push_back(name);
        return map_.emplace(name, std::move(t)).first->second;
    }

    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& name : order_) n += map_.at(name).numel();
        return n;
    }

    // Hex digest over names, shapes and raw little-endian payloads, in
    // insertion order.
    std::string fingerprint() const;

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

// Per-step mapping from parameter names to tape leaves. Each parameter is
// bound at most once per tape so gradient accumulation lands on one node.
class Binding {
public:
    Binding(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

    Var operator[](const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        Var v = tape_->leaf(store_->at(name));
        vars_.emplace(name, v);
        return v;
    }

    const std::map<std::string, Var>& bound() const { return vars_; }

    // Gradients present on the tape after backward, keyed by parameter name.
    std::map<std::string, Tensor> collect_grads() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, v] : vars_) {
            if (tape_->has_grad(v)) out.emplace(name, tape_->grad(v));
        }
        return out;
    }

    ParamStore& store() { return *store_; }

private:
    Tape* tape_;
    ParamStore* store_;
    std::map<std::string, Var> vars_;
};

uint64_t fnv1a(const std::string& s);

// Digest over the tensors whose name does not start with skip_prefix, in
// insertion order. Used to pin frozen parameter subsets.
std::string fingerprint_excluding(const ParamStore& store, const std::string& skip_prefix);

// Initializers fork the root RNG per tensor name, so values depend only on
// the seed and the name, not on creation order.
Tensor& init_normal(ParamStore& store, const std::string& name, std::vector<int> shape,
                    double stddev, const Rng& root);
Tensor& init_const(ParamStore& store, const std::string& name, std::vector<int> shape,
                   double value);

}  // namespace sapiens
