// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ada/features.hpp"

namespace ada {

/// One planted interaction over a set of fields: the per-example term is
/// coefficient * sum over latent dims of the product (multiplicative) or sum
/// (additive) of the participating levels' latent vectors.
struct PlantedInteraction {
    enum class Kind { multiplicative, additive };
    std::vector<int> fields;
    Kind kind = Kind::multiplicative;
    double coefficient = 1.0;
};

/// Seeded generator spec. Everything downstream (latents, level draws, label
/// noise, labels) is a pure function of this struct.
struct SyntheticSpec {
    int fields = 6;
    int levels = 16;      // per field
    int latent_dim = 4;   // ground-truth vector length per (field, level)
    std::vector<PlantedInteraction> interactions;
    double label_noise = 0.25;  // stddev of the Gaussian added to the logit
    int examples = 30000;
    std::uint64_t seed = 1;
};

struct SyntheticDataset {
    RawDataset records;              // field cells are the level indices as strings
    std::vector<double> true_logits; // pre-noise logit per example
};

/// Uniform level draws, logit = sum of planted terms, label ~
/// Bernoulli(sigmoid(logit + noise)). Identical spec -> identical dataset.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

/// Schema matching the generated records: every field categorical.
FeatureSchema synthetic_schema(const SyntheticSpec& spec, std::size_t embedding_dim);

}  // namespace ada
