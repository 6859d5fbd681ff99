#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pfmda/tensor.hpp"

namespace pfmda {

/// Ordered, name-addressed collection of the leaf tensors owned by a model.
///
/// Trainable entries carry gradients; buffers (e.g. running statistics) do
/// not but are still checkpointed and compared.
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable = true;
    };

    Tensor add(const std::string& name, Tensor t, bool trainable = true) {
        if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
        if (!t.is_leaf()) throw ContractError("parameter " + name + " must be a leaf tensor");
        t.set_requires_grad(trainable);
        index_[name] = entries_.size();
        entries_.push_back({name, t, trainable});
        return t;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("no parameter named " + name);
        return entries_[it->second].tensor;
    }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.tensor);
        return out;
    }

    /// Scalar count of trainable values.
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_)
            if (e.trainable) e.tensor.zero_grad();
    }

    /// Copies values entry-by-entry from a store with identical names and shapes.
    void copy_values_from(const ParameterStore& other) {
        if (other.entries_.size() != entries_.size()) throw DimensionError("parameter stores differ in size");
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& src = other.entries_[i];
            auto& dst = entries_[i];
            if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape())
                throw DimensionError("parameter mismatch at " + dst.name);
            std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.tensor.data().begin());
        }
    }

    /// Flattened snapshot of every value, in entry order.
    std::vector<double> snapshot() const {
        std::vector<double> out;
        for (const auto& e : entries_) out.insert(out.end(), e.tensor.values().begin(), e.tensor.values().end());
        return out;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Normal init with stddev sqrt(gain / fan_in).
template <class Rng>
Tensor scaled_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(gain / static_cast<double>(fan_in)));
}

}  // namespace pfmda
