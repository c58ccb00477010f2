// SPDX-License-Identifier: Apache-2.0
#include "ada/synthetic.hpp"

#include <cmath>

#include "ada/error.hpp"
#include "ada/rng.hpp"

namespace ada {

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.fields < 1 || spec.levels < 1 || spec.latent_dim < 1 || spec.examples < 1)
        throw ConfigError("synthetic: fields, levels, latent_dim and examples must be >= 1");
    for (const auto& interaction : spec.interactions) {
        if (interaction.fields.size() < 2)
            throw ConfigError("synthetic: an interaction needs at least 2 fields");
        for (int f : interaction.fields)
            if (f < 0 || f >= spec.fields)
                throw ConfigError("synthetic: interaction field " + std::to_string(f) +
                                  " outside 0.." + std::to_string(spec.fields - 1));
    }

    Rng root(spec.seed);
    Rng latent_rng = root.fork("latents");
    Rng level_rng = root.fork("levels");
    Rng noise_rng = root.fork("noise");
    Rng label_rng = root.fork("labels");

    // latents[f][v][g]
    std::vector<std::vector<std::vector<double>>> latents(
        static_cast<std::size_t>(spec.fields),
        std::vector<std::vector<double>>(static_cast<std::size_t>(spec.levels),
                                         std::vector<double>(static_cast<std::size_t>(spec.latent_dim))));
    for (auto& field : latents)
        for (auto& level : field)
            for (double& g : level) g = latent_rng.normal();

    SyntheticDataset out;
    out.records.reserve(static_cast<std::size_t>(spec.examples));
    out.true_logits.reserve(static_cast<std::size_t>(spec.examples));

    for (int i = 0; i < spec.examples; ++i) {
        std::vector<int> levels(static_cast<std::size_t>(spec.fields));
        for (int f = 0; f < spec.fields; ++f)
            levels[static_cast<std::size_t>(f)] =
                static_cast<int>(level_rng.uniform_int(static_cast<std::uint64_t>(spec.levels)));

        double logit = 0.0;
        for (const auto& interaction : spec.interactions) {
            double term = 0.0;
            for (int g = 0; g < spec.latent_dim; ++g) {
                double cell = interaction.kind == PlantedInteraction::Kind::multiplicative
                                  ? 1.0
                                  : 0.0;
                for (int f : interaction.fields) {
                    const double z = latents[static_cast<std::size_t>(f)]
                                            [static_cast<std::size_t>(levels[static_cast<std::size_t>(f)])]
                                            [static_cast<std::size_t>(g)];
                    if (interaction.kind == PlantedInteraction::Kind::multiplicative)
                        cell *= z;
                    else
                        cell += z;
                }
                term += cell;
            }
            logit += interaction.coefficient * term;
        }
        out.true_logits.push_back(logit);

        const double noisy = logit + spec.label_noise * noise_rng.normal();
        const double p = 1.0 / (1.0 + std::exp(-noisy));
        RawRecord record;
        record.label = label_rng.uniform() < p ? 1 : 0;
        record.fields.reserve(static_cast<std::size_t>(spec.fields));
        for (int f = 0; f < spec.fields; ++f)
            record.fields.push_back(std::to_string(levels[static_cast<std::size_t>(f)]));
        out.records.push_back(std::move(record));
    }
    return out;
}

FeatureSchema synthetic_schema(const SyntheticSpec& spec, std::size_t embedding_dim) {
    FeatureSchema schema;
    schema.embedding_dim = embedding_dim;
    for (int f = 0; f < spec.fields; ++f)
        schema.fields.push_back(FieldSpec{"f" + std::to_string(f), FieldKind::categorical,
                                          ContinuousTransform::equal_freq});
    return schema;
}

}  // namespace ada
