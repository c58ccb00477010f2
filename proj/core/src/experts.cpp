// SPDX-License-Identifier: Apache-2.0
#include "ada/experts.hpp"

#include <cmath>

#include "ada/error.hpp"

namespace ada {

std::string_view expert_kind_name(ExpertKind kind) {
    switch (kind) {
        case ExpertKind::dense: return "dense";
        case ExpertKind::conv: return "conv";
        case ExpertKind::attention: return "attention";
        case ExpertKind::pin: return "pin";
        case ExpertKind::cross: return "cross";
    }
    throw ConfigError("unknown expert kind");
}

ExpertKind expert_kind_from_name(std::string_view name) {
    if (name == "dense") return ExpertKind::dense;
    if (name == "conv") return ExpertKind::conv;
    if (name == "attention" || name == "mhsa") return ExpertKind::attention;
    if (name == "pin" || name == "polynomial") return ExpertKind::pin;
    if (name == "cross") return ExpertKind::cross;
    throw ConfigError("unknown expert kind '" + std::string(name) + "'");
}

int ExpertDims::dense_hidden_or_default() const {
    return dense_hidden > 0 ? dense_hidden : 4 * fields * embedding_dim;
}

int ExpertDims::conv_channels_or_default() const {
    return conv_channels > 0 ? conv_channels : embedding_dim;
}

std::int64_t expert_flops(ExpertKind kind, const ExpertDims& dims) {
    const std::int64_t f = dims.fields;
    const std::int64_t d = dims.embedding_dim;
    switch (kind) {
        case ExpertKind::dense: {
            const std::int64_t h = dims.dense_hidden_or_default();
            return 2 * (f * d * h) + 2 * (h * f * d);
        }
        case ExpertKind::conv: {
            const std::int64_t w = dims.conv_kernel;
            const std::int64_t c = dims.conv_channels_or_default();
            const std::int64_t pooled = (f + 1) / 2;
            return 2 * f * (w * d) * c + 2 * (pooled * c) * (f * d);
        }
        case ExpertKind::attention:
            return 8 * f * d * d + 4 * f * f * d;
        case ExpertKind::pin:
            return 2 * f * f * d + f * d;
        case ExpertKind::cross:
            return 2 * f * f * d + 2 * f * d;
    }
    throw ConfigError("unknown expert kind");
}

namespace {

void check_dims(const ExpertDims& dims) {
    if (dims.fields < 1 || dims.embedding_dim < 1)
        throw ConfigError("expert: fields and embedding_dim must be >= 1");
}

void check_map(const Tensor& x, const ExpertDims& dims, const char* who) {
    if (x.rank() != 2 || x.shape()[0] != static_cast<std::size_t>(dims.fields) ||
        x.shape()[1] != static_cast<std::size_t>(dims.embedding_dim))
        throw ShapeError(std::string(who) + ": expected feature map " +
                         std::to_string(dims.fields) + "x" + std::to_string(dims.embedding_dim) +
                         ", got " + x.shape_string());
}

/// Flatten, two dense layers (relu between, no biases), reshape back.
class DenseExpert final : public Expert {
public:
    DenseExpert(const ExpertDims& dims, Rng& rng) : dims_(dims) {
        check_dims(dims);
        const std::size_t fd = static_cast<std::size_t>(dims.fields) * dims.embedding_dim;
        const std::size_t h = static_cast<std::size_t>(dims.dense_hidden_or_default());
        w_hidden_ = Tensor::glorot({h, fd}, fd, h, rng);
        w_out_ = Tensor::glorot({fd, h}, h, fd, rng);
        flops_ = expert_flops(ExpertKind::dense, dims);
    }

    ExpertKind kind() const override { return ExpertKind::dense; }

    Tensor forward(Tape& tape, const Tensor& x, const Tensor&) const override {
        check_map(x, dims_, "dense expert");
        count_eval();
        Tensor h = relu(tape, matvec(tape, w_hidden_, flatten(tape, x)));
        Tensor out = matvec(tape, w_out_, h);
        return reshape(tape, out,
                       {static_cast<std::size_t>(dims_.fields),
                        static_cast<std::size_t>(dims_.embedding_dim)});
    }

    void register_params(ParamRegistry& r, const std::string& prefix) const override {
        r.add(prefix + ".w_hidden", w_hidden_, ParamSet::weights);
        r.add(prefix + ".w_out", w_out_, ParamSet::weights);
    }

private:
    ExpertDims dims_;
    Tensor w_hidden_, w_out_;
};

/// 1-D convolution over the field axis (channels = embedding dims), relu,
/// max-pool width 2 stride 2, dense projection back to F*D.
class ConvExpert final : public Expert {
public:
    ConvExpert(const ExpertDims& dims, Rng& rng) : dims_(dims) {
        check_dims(dims);
        if (dims.conv_kernel < 1) throw ConfigError("conv expert: kernel width must be >= 1");
        if (dims.fields < dims.conv_kernel)
            throw ConfigError("conv expert: kernel width " + std::to_string(dims.conv_kernel) +
                              " exceeds field count " + std::to_string(dims.fields));
        const std::size_t patch =
            static_cast<std::size_t>(dims.conv_kernel) * dims.embedding_dim;
        const std::size_t channels = static_cast<std::size_t>(dims.conv_channels_or_default());
        const std::size_t pooled = (static_cast<std::size_t>(dims.fields) + 1) / 2;
        const std::size_t fd = static_cast<std::size_t>(dims.fields) * dims.embedding_dim;
        kernel_ = Tensor::glorot({channels, patch}, patch, channels, rng);
        w_project_ = Tensor::glorot({fd, pooled * channels}, pooled * channels, fd, rng);
        flops_ = expert_flops(ExpertKind::conv, dims);
    }

    ExpertKind kind() const override { return ExpertKind::conv; }

    Tensor forward(Tape& tape, const Tensor& x, const Tensor&) const override {
        check_map(x, dims_, "conv expert");
        count_eval();
        Tensor patches = im2col_rows(tape, x, dims_.conv_kernel);        // F x (w*D)
        Tensor conv = matmul(tape, patches, transpose(tape, kernel_));   // F x C
        Tensor pooled = maxpool_rows(tape, relu(tape, conv), 2, 2);      // ceil(F/2) x C
        Tensor out = matvec(tape, w_project_, flatten(tape, pooled));
        return reshape(tape, out,
                       {static_cast<std::size_t>(dims_.fields),
                        static_cast<std::size_t>(dims_.embedding_dim)});
    }

    void register_params(ParamRegistry& r, const std::string& prefix) const override {
        r.add(prefix + ".kernel", kernel_, ParamSet::weights);
        r.add(prefix + ".w_project", w_project_, ParamSet::weights);
    }

private:
    ExpertDims dims_;
    Tensor kernel_, w_project_;
};

/// Scaled dot-product self-attention over the F field tokens, heads
/// concatenated, followed by an output projection. Residual and norm live in
/// the MoE layer, not here.
class AttentionExpert final : public Expert {
public:
    AttentionExpert(const ExpertDims& dims, Rng& rng) : dims_(dims) {
        check_dims(dims);
        if (dims.attention_heads < 1)
            throw ConfigError("attention expert: heads must be >= 1");
        if (dims.embedding_dim % dims.attention_heads != 0)
            throw ConfigError("attention expert: embedding_dim " +
                              std::to_string(dims.embedding_dim) + " not divisible by heads " +
                              std::to_string(dims.attention_heads));
        const std::size_t d = static_cast<std::size_t>(dims.embedding_dim);
        const std::size_t dh = d / static_cast<std::size_t>(dims.attention_heads);
        for (int h = 0; h < dims.attention_heads; ++h) {
            w_query_.push_back(Tensor::glorot({d, dh}, d, dh, rng));
            w_key_.push_back(Tensor::glorot({d, dh}, d, dh, rng));
            w_value_.push_back(Tensor::glorot({d, dh}, d, dh, rng));
        }
        w_out_ = Tensor::glorot({d, d}, d, d, rng);
        flops_ = expert_flops(ExpertKind::attention, dims);
    }

    ExpertKind kind() const override { return ExpertKind::attention; }

    Tensor forward(Tape& tape, const Tensor& x, const Tensor&) const override {
        check_map(x, dims_, "attention expert");
        count_eval();
        const std::size_t dh =
            static_cast<std::size_t>(dims_.embedding_dim) / dims_.attention_heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> heads;
        heads.reserve(w_query_.size());
        for (std::size_t h = 0; h < w_query_.size(); ++h) {
            Tensor q = matmul(tape, x, w_query_[h]);
            Tensor k = matmul(tape, x, w_key_[h]);
            Tensor v = matmul(tape, x, w_value_[h]);
            Tensor scores = scale(tape, matmul(tape, q, transpose(tape, k)), inv_sqrt);
            heads.push_back(matmul(tape, softmax_rows(tape, scores), v));
        }
        Tensor merged = concat_cols(tape, heads);
        return matmul(tape, merged, w_out_);
    }

    void register_params(ParamRegistry& r, const std::string& prefix) const override {
        for (std::size_t h = 0; h < w_query_.size(); ++h) {
            const std::string hp = prefix + ".head" + std::to_string(h);
            r.add(hp + ".w_query", w_query_[h], ParamSet::weights);
            r.add(hp + ".w_key", w_key_[h], ParamSet::weights);
            r.add(hp + ".w_value", w_value_[h], ParamSet::weights);
        }
        r.add(prefix + ".w_out", w_out_, ParamSet::weights);
    }

private:
    ExpertDims dims_;
    std::vector<Tensor> w_query_, w_key_, w_value_;
    Tensor w_out_;
};

/// x ∘ (W · x0): bounded-degree polynomial interaction against the raw map.
class PinExpert final : public Expert {
public:
    PinExpert(const ExpertDims& dims, Rng& rng) : dims_(dims) {
        check_dims(dims);
        const std::size_t f = static_cast<std::size_t>(dims.fields);
        w_ = Tensor::glorot({f, f}, f, f, rng);
        flops_ = expert_flops(ExpertKind::pin, dims);
    }

    ExpertKind kind() const override { return ExpertKind::pin; }

    Tensor forward(Tape& tape, const Tensor& x, const Tensor& x0) const override {
        check_map(x, dims_, "pin expert");
        check_map(x0, dims_, "pin expert (x0)");
        count_eval();
        return hadamard(tape, x, matmul(tape, w_, x0));
    }

    void register_params(ParamRegistry& r, const std::string& prefix) const override {
        r.add(prefix + ".w", w_, ParamSet::weights);
    }

private:
    ExpertDims dims_;
    Tensor w_;
};

/// x0 ∘ (W · x) + b: cross-network interaction with an explicit bias map.
class CrossExpert final : public Expert {
public:
    CrossExpert(const ExpertDims& dims, Rng& rng) : dims_(dims) {
        check_dims(dims);
        const std::size_t f = static_cast<std::size_t>(dims.fields);
        const std::size_t d = static_cast<std::size_t>(dims.embedding_dim);
        w_ = Tensor::glorot({f, f}, f, f, rng);
        bias_ = Tensor::zeros({f, d}, true);
        flops_ = expert_flops(ExpertKind::cross, dims);
    }

    ExpertKind kind() const override { return ExpertKind::cross; }

    Tensor forward(Tape& tape, const Tensor& x, const Tensor& x0) const override {
        check_map(x, dims_, "cross expert");
        check_map(x0, dims_, "cross expert (x0)");
        count_eval();
        return add(tape, hadamard(tape, x0, matmul(tape, w_, x)), bias_);
    }

    void register_params(ParamRegistry& r, const std::string& prefix) const override {
        r.add(prefix + ".w", w_, ParamSet::weights);
        r.add(prefix + ".bias", bias_, ParamSet::weights);
    }

private:
    ExpertDims dims_;
    Tensor w_, bias_;
};

}  // namespace

std::unique_ptr<Expert> make_expert(ExpertKind kind, const ExpertDims& dims, Rng& rng) {
    switch (kind) {
        case ExpertKind::dense: return std::make_unique<DenseExpert>(dims, rng);
        case ExpertKind::conv: return std::make_unique<ConvExpert>(dims, rng);
        case ExpertKind::attention: return std::make_unique<AttentionExpert>(dims, rng);
        case ExpertKind::pin: return std::make_unique<PinExpert>(dims, rng);
        case ExpertKind::cross: return std::make_unique<CrossExpert>(dims, rng);
    }
    throw ConfigError("unknown expert kind");
}

}  // namespace ada
