// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ada/error.hpp"
#include "ada/tensor.hpp"

namespace ada {

/// Which optimizer owns a trainable tensor in the alternating scheme:
/// `weights` covers experts, estimators, embeddings and layer norms;
/// `gating` covers the expert gates and the depth-selecting network.
enum class ParamSet { weights, gating };

struct ParamEntry {
    std::string name;
    Tensor tensor;
    ParamSet set;
};

/// Named inventory of every trainable tensor in a model. Each tensor belongs
/// to exactly one set; names double as checkpoint keys.
class ParamRegistry {
public:
    void add(std::string name, Tensor tensor, ParamSet set);

    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<Tensor> tensors(ParamSet set) const;
    std::vector<Tensor> all_tensors() const;
    const ParamEntry* find(const std::string& name) const;

    void zero_all_grads();

private:
    std::vector<ParamEntry> entries_;
};

inline void ParamRegistry::add(std::string name, Tensor tensor, ParamSet set) {
    for (const auto& e : entries_)
        if (e.name == name) throw Error("duplicate parameter name " + name);
    entries_.push_back(ParamEntry{std::move(name), std::move(tensor), set});
}

inline std::vector<Tensor> ParamRegistry::tensors(ParamSet set) const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
        if (e.set == set) out.push_back(e.tensor);
    return out;
}

inline std::vector<Tensor> ParamRegistry::all_tensors() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
}

inline const ParamEntry* ParamRegistry::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

inline void ParamRegistry::zero_all_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

}  // namespace ada
