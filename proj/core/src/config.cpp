// SPDX-License-Identifier: Apache-2.0
#include "ada/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ada/error.hpp"

namespace ada {

namespace {

int parse_int_cell(const std::string& cell, const std::string& what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(cell, &used);
        if (used != cell.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(what + ": '" + cell + "' is not an integer");
    }
}

double parse_double_cell(const std::string& cell, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(what + ": '" + cell + "' is not a number");
    }
}

PlantedInteraction parse_interaction(const std::string& text) {
    // "0*1:mul:1.5" -> fields {0,1}, multiplicative, coefficient 1.5
    std::vector<std::string> parts;
    std::string cell;
    for (char c : text + ":") {
        if (c == ':') {
            parts.push_back(cell);
            cell.clear();
        } else {
            cell.push_back(c);
        }
    }
    if (parts.size() != 3)
        throw ConfigError("interaction '" + text + "': expected fields:kind:coefficient");
    PlantedInteraction p;
    std::string num;
    for (char c : parts[0] + "*") {
        if (c == '*') {
            if (num.empty()) throw ConfigError("interaction '" + text + "': empty field id");
            p.fields.push_back(parse_int_cell(num, "interaction '" + text + "'"));
            num.clear();
        } else {
            num.push_back(c);
        }
    }
    if (parts[1] == "mul")
        p.kind = PlantedInteraction::Kind::multiplicative;
    else if (parts[1] == "add")
        p.kind = PlantedInteraction::Kind::additive;
    else
        throw ConfigError("interaction '" + text + "': kind must be mul or add");
    p.coefficient = parse_double_cell(parts[2], "interaction '" + text + "'");
    return p;
}

std::vector<double> parse_loads(const KeyValues& kv, const std::string& key) {
    std::vector<double> loads;
    for (const auto& cell : kv.get_list(key))
        loads.push_back(parse_double_cell(cell, "config key '" + key + "'"));
    return loads;
}

}  // namespace

char parse_delimiter(const std::string& text) {
    if (text == "tab") return '\t';
    if (text == "comma") return ',';
    if (text == "space") return ' ';
    if (text.size() == 1) return text[0];
    throw ConfigError("delimiter '" + text + "' not recognized");
}

RunConfig parse_run_config(const KeyValues& kv) {
    RunConfig cfg;

    const std::string kind = kv.get_string("data.kind", "synthetic");
    if (kind == "synthetic")
        cfg.data.kind = DataConfig::Kind::synthetic;
    else if (kind == "delimited")
        cfg.data.kind = DataConfig::Kind::delimited;
    else
        throw ConfigError("data.kind must be synthetic or delimited, got '" + kind + "'");
    cfg.data.path = kv.get_string("data.path", "");
    cfg.data.delimiter = parse_delimiter(kv.get_string("data.delimiter", "tab"));
    cfg.data.schema_path = kv.get_string("data.schema", "");
    const auto split = kv.get_list("data.split");
    if (!split.empty()) {
        if (split.size() != 3) throw ConfigError("data.split needs three fractions");
        cfg.data.split_train = parse_double_cell(split[0], "data.split");
        cfg.data.split_val = parse_double_cell(split[1], "data.split");
        cfg.data.split_test = parse_double_cell(split[2], "data.split");
    }
    const double total = cfg.data.split_train + cfg.data.split_val + cfg.data.split_test;
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("data.split fractions must sum to 1");
    if (cfg.data.split_train <= 0.0 || cfg.data.split_val <= 0.0 || cfg.data.split_test <= 0.0)
        throw ConfigError("data.split fractions must all be positive");

    cfg.data.synthetic.fields = static_cast<int>(kv.get_int("data.fields", 6));
    cfg.data.synthetic.levels = static_cast<int>(kv.get_int("data.levels", 16));
    cfg.data.synthetic.latent_dim = static_cast<int>(kv.get_int("data.latent_dim", 4));
    cfg.data.synthetic.label_noise = kv.get_double("data.label_noise", 0.25);
    cfg.data.synthetic.examples = static_cast<int>(kv.get_int("data.examples", 30000));
    for (const auto& cell : kv.get_list("data.interactions"))
        cfg.data.synthetic.interactions.push_back(parse_interaction(cell));

    cfg.embedding_dim = static_cast<std::size_t>(kv.get_int("features.embedding_dim", 8));
    cfg.fit.bins = static_cast<int>(kv.get_int("features.bins", 64));
    cfg.fit.min_frequency = static_cast<int>(kv.get_int("features.min_frequency", 20));

    cfg.model.layers = static_cast<int>(kv.get_int("model.layers", 1));
    std::vector<ExpertKind> shared;
    for (const auto& name : kv.get_list("model.experts"))
        shared.push_back(expert_kind_from_name(name));
    if (shared.empty())
        shared = {ExpertKind::pin, ExpertKind::cross, ExpertKind::dense};
    for (int l = 0; l < cfg.model.layers; ++l) {
        const std::string key = "model.layer" + std::to_string(l) + "_experts";
        std::vector<ExpertKind> kinds;
        for (const auto& name : kv.get_list(key)) kinds.push_back(expert_kind_from_name(name));
        cfg.model.layer_experts.push_back(kinds.empty() ? shared : kinds);
    }
    cfg.model.embedding_dim = static_cast<int>(cfg.embedding_dim);
    cfg.model.dense_hidden = static_cast<int>(kv.get_int("model.dense_hidden", 0));
    cfg.model.conv_kernel = static_cast<int>(kv.get_int("model.conv_kernel", 3));
    cfg.model.conv_channels = static_cast<int>(kv.get_int("model.conv_channels", 0));
    cfg.model.attention_heads = static_cast<int>(kv.get_int("model.attention_heads", 2));
    cfg.model.k_final = static_cast<int>(kv.get_int("model.k_final", 1));
    cfg.model.anneal_steps = static_cast<int>(kv.get_int("model.anneal_steps", 0));
    cfg.model.gate.reduction_ratio = static_cast<int>(kv.get_int("model.reduction_ratio", 8));
    cfg.model.gate.hidden_dim = static_cast<int>(kv.get_int("model.gate_hidden", 32));
    cfg.model.gate.jitter_eps = kv.get_double("model.jitter_eps", 0.01);
    cfg.model.gate.tau_min = kv.get_double("model.tau_min", 0.05);
    cfg.model.norm_eps = kv.get_double("model.norm_eps", 1e-5);
    cfg.model.expert_target_loads = parse_loads(kv, "model.expert_target_loads");
    cfg.model.depth_target_loads = parse_loads(kv, "model.depth_target_loads");

    cfg.train.batch_size = static_cast<int>(kv.get_int("train.batch", 256));
    cfg.train.inner_steps = static_cast<int>(kv.get_int("train.inner_steps", 4));
    cfg.train.lr_weights = kv.get_double("train.lr_weights", 1e-3);
    cfg.train.lr_gating = kv.get_double("train.lr_gating", 1e-3);
    cfg.train.max_steps = static_cast<int>(kv.get_int("train.max_steps", 1000));
    cfg.train.eval_every = static_cast<int>(kv.get_int("train.eval_every", 100));
    cfg.train.patience = static_cast<int>(kv.get_int("train.patience", 10));
    cfg.train.lambda_expert = kv.get_double("train.lambda_expert", 0.01);
    cfg.train.lambda_depth = kv.get_double("train.lambda_depth", 0.01);
    cfg.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 7));

    kv.ensure_all_used("config");

    if (cfg.data.kind == DataConfig::Kind::delimited) {
        if (cfg.data.path.empty()) throw ConfigError("data.path required for delimited data");
        if (cfg.data.schema_path.empty())
            throw ConfigError("data.schema required for delimited data");
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(KeyValues::parse_file(path));
}

FeatureSchema parse_schema_file(const std::string& path, std::size_t embedding_dim) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema file " + path);
    FeatureSchema schema;
    schema.embedding_dim = embedding_dim;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string name, kind, transform;
        if (!(ls >> name)) continue;  // blank line
        if (name[0] == '#') continue;
        if (!(ls >> kind))
            throw DataError("schema line " + std::to_string(line_no) + ": missing kind");
        FieldSpec spec;
        spec.name = name;
        if (kind == "categorical")
            spec.kind = FieldKind::categorical;
        else if (kind == "continuous")
            spec.kind = FieldKind::continuous;
        else
            throw DataError("schema line " + std::to_string(line_no) + ": kind '" + kind +
                            "' must be categorical or continuous");
        if (ls >> transform) {
            if (transform == "equal_freq")
                spec.transform = ContinuousTransform::equal_freq;
            else if (transform == "log_square")
                spec.transform = ContinuousTransform::log_square;
            else
                throw DataError("schema line " + std::to_string(line_no) + ": transform '" +
                                transform + "' must be equal_freq or log_square");
        }
        schema.fields.push_back(std::move(spec));
    }
    schema.validate();
    return schema;
}

}  // namespace ada
