// SPDX-License-Identifier: Apache-2.0
#include "ada/runner.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ada/error.hpp"

namespace ada::cli {

namespace {

namespace fs = std::filesystem;

std::string utc_now() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

std::uint64_t file_fingerprint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path + " for fingerprinting");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    const std::string bytes = buffer.str();
    return fnv1a64(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
}

std::uint64_t records_fingerprint(const RawDataset& records) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        h ^= 0x1f;
        h *= 0x100000001b3ULL;
    };
    for (const auto& r : records) {
        mix(std::to_string(r.label));
        for (const auto& f : r.fields) mix(f);
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw DataError("write failed for " + path);
}

struct Splits {
    RawDataset train, val, test;
};

Splits split_dataset(const RawDataset& records, const DataConfig& cfg, Rng& rng) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng = rng.fork("split");
    split_rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n = records.size();
    const std::size_t n_train = static_cast<std::size_t>(cfg.split_train * static_cast<double>(n));
    const std::size_t n_val = static_cast<std::size_t>(cfg.split_val * static_cast<double>(n));
    Splits s;
    for (std::size_t i = 0; i < n; ++i) {
        const RawRecord& r = records[order[i]];
        if (i < n_train)
            s.train.push_back(r);
        else if (i < n_train + n_val)
            s.val.push_back(r);
        else
            s.test.push_back(r);
    }
    if (s.train.empty() || s.val.empty() || s.test.empty())
        throw DataError("dataset too small for the requested split fractions");
    return s;
}

}  // namespace

int run_fit_pipeline(const FitPipelineArgs& args, std::ostream& log) {
    FeatureSchema schema = parse_schema_file(args.schema_path, args.embedding_dim);
    RawDataset records = read_delimited(args.data_path, args.delimiter, schema.field_count());
    if (records.empty()) throw DataError("no records in " + args.data_path);
    FeaturePipeline pipeline = FeaturePipeline::fit(records, schema, args.options);
    pipeline.save_file(args.out_path);
    const std::string summary = pipeline.summary(records);
    write_text_file(args.out_path + ".summary.txt", summary);
    log << "fitted pipeline over " << records.size() << " records, " << schema.field_count()
        << " fields\n"
        << summary;
    return kExitOk;
}

int run_train(const TrainArgs& args, std::ostream& log) {
    const std::string started = utc_now();
    const auto t0 = std::chrono::steady_clock::now();

    RunConfig cfg = load_run_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.max_steps) cfg.train.max_steps = *args.max_steps;
    if (args.data_path) cfg.data.path = *args.data_path;

    fs::create_directories(args.out_dir);
    const auto out = [&](const std::string& name) {
        return (fs::path(args.out_dir) / name).string();
    };

    Rng rng(cfg.seed);

    RawDataset records;
    std::uint64_t data_fp = 0;
    std::string data_kind;
    if (cfg.data.kind == DataConfig::Kind::synthetic) {
        cfg.data.synthetic.seed = rng.fork("data").root_seed();
        SyntheticDataset generated = generate_synthetic(cfg.data.synthetic);
        records = std::move(generated.records);
        data_fp = records_fingerprint(records);
        data_kind = "synthetic";
    } else {
        records = read_delimited(cfg.data.path, cfg.data.delimiter,
                                 parse_schema_file(cfg.data.schema_path, cfg.embedding_dim)
                                     .field_count());
        data_fp = file_fingerprint(cfg.data.path);
        data_kind = "delimited:" + cfg.data.path;
    }

    Splits splits = split_dataset(records, cfg.data, rng);
    write_delimited(out("train.tsv"), splits.train, '\t');
    write_delimited(out("val.tsv"), splits.val, '\t');
    write_delimited(out("test.tsv"), splits.test, '\t');

    FeaturePipeline pipeline = [&] {
        if (args.pipeline_path) return FeaturePipeline::load_file(*args.pipeline_path);
        FeatureSchema schema = cfg.data.kind == DataConfig::Kind::synthetic
                                   ? synthetic_schema(cfg.data.synthetic, cfg.embedding_dim)
                                   : parse_schema_file(cfg.data.schema_path, cfg.embedding_dim);
        return FeaturePipeline::fit(splits.train, schema, cfg.fit);
    }();
    pipeline.save_file(out("pipeline.bin"));

    EncodedDataset train_enc = pipeline.encode_all(splits.train);
    EncodedDataset val_enc = pipeline.encode_all(splits.val);

    AdaEnsembleModel model = AdaEnsembleModel::init(cfg.model, std::move(pipeline), rng);
    log << "training: " << train_enc.size() << " train / " << val_enc.size()
        << " val examples, L=" << model.config().layers << ", max_steps="
        << cfg.train.max_steps << "\n";

    TrainResult result = bilevel_train(model, train_enc, val_enc, cfg.train, rng);

    model.save(out("checkpoint.bin"));
    {
        std::ostringstream history;
        history << history_header() << "\n";
        for (const auto& row : result.history) history << history_row_line(row) << "\n";
        write_text_file(out("history.tsv"), history.str());
    }
    {
        // Verbatim copy of the input config plus the resolved model echo, so a
        // run directory alone is enough to reproduce the run.
        std::ifstream original(args.config_path);
        std::ostringstream original_bytes;
        original_bytes << original.rdbuf();
        write_text_file(out("config_used.cfg"), original_bytes.str());
    }
    write_text_file(out("config_echo.cfg"),
                    "# resolved from " + args.config_path + "\n" + model.config().to_echo() +
                        "train.seed = " + std::to_string(cfg.seed) + "\n");

    const auto t1 = std::chrono::steady_clock::now();
    KeyValues manifest;
    manifest.set("run.config_path", args.config_path);
    manifest.set("run.config_fingerprint", hex64(file_fingerprint(args.config_path)));
    manifest.set_int("run.seed", static_cast<long long>(cfg.seed));
    manifest.set("run.data", data_kind);
    manifest.set("run.data_fingerprint", hex64(data_fp));
    manifest.set("run.checkpoint", "checkpoint.bin");
    manifest.set("run.history", "history.tsv");
    manifest.set("run.pipeline", "pipeline.bin");
    manifest.set("run.splits", "train.tsv,val.tsv,test.tsv");
    manifest.set_int("run.steps", result.steps);
    manifest.set("run.early_stopped", result.early_stopped ? "true" : "false");
    manifest.set("run.started_utc", started);
    manifest.set("run.finished_utc", utc_now());
    manifest.set_int("run.duration_ms",
                     std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count());
    write_text_file(out("manifest.txt"), manifest.serialize());

    if (!result.history.empty())
        log << "done: " << result.steps << " steps, final train logloss "
            << result.history.back().logloss << "\n";
    return kExitOk;
}

namespace {

struct LoadedModel {
    AdaEnsembleModel model;
    EncodedDataset data;
};

LoadedModel load_for_inference(const std::string& checkpoint_path, const std::string& data_path,
                               const std::optional<std::string>& pipeline_path, char delimiter) {
    AdaEnsembleModel model = AdaEnsembleModel::load(checkpoint_path);
    const FeaturePipeline* pipeline = &model.pipeline();
    std::optional<FeaturePipeline> external;
    if (pipeline_path) {
        external = FeaturePipeline::load_file(*pipeline_path);
        if (external->schema().field_count() != model.pipeline().schema().field_count())
            throw DataError("pipeline override has " +
                            std::to_string(external->schema().field_count()) +
                            " fields, checkpoint expects " +
                            std::to_string(model.pipeline().schema().field_count()));
        // Level spaces must line up with the checkpoint's embedding tables,
        // not just the field count.
        if (external->rows_per_field() != model.pipeline().rows_per_field())
            throw DataError("pipeline override level counts do not match the checkpoint's "
                            "embedding tables");
        pipeline = &*external;
    }
    RawDataset records =
        read_delimited(data_path, delimiter, pipeline->schema().field_count());
    if (records.empty()) throw DataError("no records in " + data_path);
    EncodedDataset encoded = pipeline->encode_all(records);
    return LoadedModel{std::move(model), std::move(encoded)};
}

}  // namespace

int run_evaluate(const EvaluateArgs& args, std::ostream& log) {
    LoadedModel loaded = load_for_inference(args.checkpoint_path, args.data_path,
                                            args.pipeline_path, args.delimiter);
    EvalReport report =
        evaluate(loaded.model, loaded.data, args.force_full_depth, args.k_override);
    std::filesystem::create_directories(args.out_dir);
    const auto out = [&](const std::string& name) {
        return (std::filesystem::path(args.out_dir) / name).string();
    };
    write_text_file(out("eval_report.txt"), report.to_table());
    write_text_file(out("eval_report.kv"), report.to_key_values());
    log << report.to_table();
    return kExitOk;
}

int run_inspect_routing(const InspectArgs& args, std::ostream& log) {
    LoadedModel loaded = load_for_inference(args.checkpoint_path, args.data_path,
                                            args.pipeline_path, args.delimiter);
    RoutingReport report = inspect_routing(loaded.model, loaded.data, args.k_override);
    std::filesystem::create_directories(args.out_dir);
    const std::string path =
        (std::filesystem::path(args.out_dir) / "routing_report.txt").string();
    write_text_file(path, report.to_table());
    log << report.to_table();
    return kExitOk;
}

int guard(std::ostream& log, const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        log << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CheckpointError& e) {
        log << "checkpoint error: " << e.what() << "\n";
        return kExitData;
    } catch (const DataError& e) {
        log << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        log << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << "\n";
        return kExitInternal;
    }
}

}  // namespace ada::cli
