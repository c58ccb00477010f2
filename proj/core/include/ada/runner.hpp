// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "ada/config.hpp"

namespace ada::cli {

// Exit codes, also documented in the README.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;   // bad config keys/values
inline constexpr int kExitData = 3;     // unreadable/malformed data or checkpoints
inline constexpr int kExitNumeric = 4;  // non-finite loss and friends
inline constexpr int kExitInternal = 5;

struct FitPipelineArgs {
    std::string data_path;
    std::string schema_path;
    std::string out_path;
    char delimiter = '\t';
    FitOptions options;
    std::size_t embedding_dim = 8;
};

struct TrainArgs {
    std::string config_path;
    std::string out_dir = "run";
    std::optional<std::uint64_t> seed;
    std::optional<int> max_steps;
    std::optional<std::string> data_path;
    std::optional<std::string> pipeline_path;  // reuse a fitted pipeline artifact
};

struct EvaluateArgs {
    std::string checkpoint_path;
    std::string data_path;
    std::string out_dir = ".";
    std::optional<std::string> pipeline_path;  // overrides the embedded pipeline
    char delimiter = '\t';
    bool force_full_depth = false;
    int k_override = -1;
};

struct InspectArgs {
    std::string checkpoint_path;
    std::string data_path;
    std::string out_dir = ".";
    std::optional<std::string> pipeline_path;
    char delimiter = '\t';
    int k_override = -1;
};

int run_fit_pipeline(const FitPipelineArgs& args, std::ostream& log);
int run_train(const TrainArgs& args, std::ostream& log);
int run_evaluate(const EvaluateArgs& args, std::ostream& log);
int run_inspect_routing(const InspectArgs& args, std::ostream& log);

/// Maps ada exceptions to the documented exit codes; returns kExitInternal
/// for anything unrecognized. Logs the message.
int guard(std::ostream& log, const std::function<int()>& body);

}  // namespace ada::cli
