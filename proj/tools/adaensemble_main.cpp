// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: fit-pipeline, train, evaluate, inspect-routing.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ada/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"AdaEnsemble: sparse mixture-of-experts CTR model with early exit"};
    app.require_subcommand(1);

    // fit-pipeline
    auto* fit = app.add_subcommand("fit-pipeline",
                                   "Fit bucketizers and vocabularies on a training file");
    ada::cli::FitPipelineArgs fit_args;
    std::string fit_delim = "tab";
    fit->add_option("--data", fit_args.data_path, "Delimited training data")->required();
    fit->add_option("--schema", fit_args.schema_path, "Schema file (name kind [transform])")
        ->required();
    fit->add_option("--out", fit_args.out_path, "Pipeline artifact path")->required();
    fit->add_option("--delimiter", fit_delim, "tab, comma, space, or a single character");
    fit->add_option("--bins", fit_args.options.bins, "Equal-frequency bin count");
    fit->add_option("--min-frequency", fit_args.options.min_frequency,
                    "Categorical level frequency threshold");
    fit->add_option("--embedding-dim", fit_args.embedding_dim, "Embedding dimension D");

    // train
    auto* train = app.add_subcommand("train", "Train a model from a config file");
    ada::cli::TrainArgs train_args;
    std::optional<std::uint64_t> seed;
    std::optional<int> max_steps;
    std::optional<std::string> data_override, pipeline_override;
    train->add_option("--config", train_args.config_path, "Run config file")->required();
    train->add_option("--out-dir", train_args.out_dir, "Run directory for artifacts");
    train->add_option("--seed", seed, "Override train.seed");
    train->add_option("--max-steps", max_steps, "Override train.max_steps");
    train->add_option("--data", data_override, "Override data.path");
    train->add_option("--pipeline", pipeline_override, "Reuse a fitted pipeline artifact");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a data file");
    ada::cli::EvaluateArgs eval_args;
    std::string eval_delim = "tab";
    eval->add_option("--checkpoint", eval_args.checkpoint_path, "Model checkpoint")->required();
    eval->add_option("--data", eval_args.data_path, "Delimited data file")->required();
    eval->add_option("--out-dir", eval_args.out_dir, "Report directory");
    eval->add_option("--pipeline", eval_args.pipeline_path,
                     "Pipeline artifact overriding the embedded one");
    eval->add_option("--delimiter", eval_delim, "tab, comma, space, or a single character");
    eval->add_flag("--force-full-depth", eval_args.force_full_depth,
                   "Send every example to depth L (controller ablation)");
    eval->add_option("--k", eval_args.k_override, "Override k_final for the expert gates");

    // inspect-routing
    auto* inspect =
        app.add_subcommand("inspect-routing", "Expert/depth routing report for a checkpoint");
    ada::cli::InspectArgs inspect_args;
    std::string inspect_delim = "tab";
    inspect->add_option("--checkpoint", inspect_args.checkpoint_path, "Model checkpoint")
        ->required();
    inspect->add_option("--data", inspect_args.data_path, "Delimited data file")->required();
    inspect->add_option("--out-dir", inspect_args.out_dir, "Report directory");
    inspect->add_option("--pipeline", inspect_args.pipeline_path,
                        "Pipeline artifact overriding the embedded one");
    inspect->add_option("--delimiter", inspect_delim, "tab, comma, space, or a single character");
    inspect->add_option("--k", inspect_args.k_override, "Override k_final for the expert gates");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);  // prints usage or the error
        return rc == 0 ? 0 : ada::cli::kExitConfig;
    }

    return ada::cli::guard(std::cerr, [&]() -> int {
        if (fit->parsed()) {
            fit_args.delimiter = ada::parse_delimiter(fit_delim);
            return ada::cli::run_fit_pipeline(fit_args, std::cout);
        }
        if (train->parsed()) {
            train_args.seed = seed;
            train_args.max_steps = max_steps;
            train_args.data_path = data_override;
            train_args.pipeline_path = pipeline_override;
            return ada::cli::run_train(train_args, std::cout);
        }
        if (eval->parsed()) {
            eval_args.delimiter = ada::parse_delimiter(eval_delim);
            return ada::cli::run_evaluate(eval_args, std::cout);
        }
        inspect_args.delimiter = ada::parse_delimiter(inspect_delim);
        return ada::cli::run_inspect_routing(inspect_args, std::cout);
    });
}
