// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "ada/features.hpp"
#include "ada/kv.hpp"
#include "ada/model.hpp"
#include "ada/synthetic.hpp"
#include "ada/training.hpp"

namespace ada {

struct DataConfig {
    enum class Kind { synthetic, delimited };
    Kind kind = Kind::synthetic;
    std::string path;        // delimited only
    char delimiter = '\t';
    std::string schema_path; // delimited only
    double split_train = 0.7;
    double split_val = 0.1;
    double split_test = 0.2;
    SyntheticSpec synthetic; // seed filled from the run seed
};

/// Everything a training run needs, resolved from one config file.
struct RunConfig {
    DataConfig data;
    FitOptions fit;
    std::size_t embedding_dim = 8;
    ModelConfig model;  // fields/embedding_dim finalized after the pipeline fit
    BiLevelConfig train;
    std::uint64_t seed = 7;
};

/// Parse and validate; rejects unknown keys by name.
RunConfig parse_run_config(const KeyValues& kv);
RunConfig load_run_config(const std::string& path);

/// Schema file: one field per line, "name kind [transform]", kind in
/// {categorical, continuous}, transform in {equal_freq, log_square}.
FeatureSchema parse_schema_file(const std::string& path, std::size_t embedding_dim);

/// "tab", "comma", "space", or a single literal character.
char parse_delimiter(const std::string& text);

}  // namespace ada
