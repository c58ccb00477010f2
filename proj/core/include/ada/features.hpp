// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ada/tensor.hpp"

namespace ada {

enum class FieldKind { categorical, continuous };

/// What to do with a continuous field before it becomes a discrete level.
///  - equal_freq: quantile bins fitted on the training split.
///  - log_square: floor(ln(v^2)) with a sentinel level for v == 0, the
///    integer result treated like a categorical level.
enum class ContinuousTransform { equal_freq, log_square };

struct FieldSpec {
    std::string name;
    FieldKind kind = FieldKind::categorical;
    ContinuousTransform transform = ContinuousTransform::equal_freq;
};

struct FeatureSchema {
    std::vector<FieldSpec> fields;
    std::size_t embedding_dim = 8;

    std::size_t field_count() const { return fields.size(); }
    void validate() const;  // unique names, at least one field, D >= 1
};

/// floor(ln(v^2)) as an integer level. v == 0 maps to the sentinel (ln 0 is
/// undefined); the sentinel is a normal level string downstream.
int log_square_transform(double v);
constexpr int kLogSquareSentinel = std::numeric_limits<int>::min();

/// Equal-frequency bin edges fitted on a value sample. Boundaries are strictly
/// increasing midpoints between adjacent quantile cut values; duplicate cuts
/// caused by ties are merged, so the effective bin count may be lower than
/// requested.
class Bucketizer {
public:
    static Bucketizer fit(std::span<const double> values, int bins);

    /// Bucket index in [0, bucket_count()). Monotone in v.
    int bucket(double v) const;
    int bucket_count() const { return static_cast<int>(boundaries_.size()) + 1; }
    const std::vector<double>& boundaries() const { return boundaries_; }

    static Bucketizer from_boundaries(std::vector<double> boundaries);

private:
    std::vector<double> boundaries_;
};

/// Per-field map from raw level string to a contiguous index starting at 1.
/// Index 0 is reserved for out-of-vocabulary and infrequent levels. Levels are
/// ordered by frequency (descending), ties broken lexically, so a refit on the
/// same corpus reproduces the identical mapping.
class Vocabulary {
public:
    static Vocabulary fit(std::span<const std::string> levels, int min_frequency);

    /// 0 for unknown or below-threshold levels.
    int lookup(const std::string& level) const;
    /// Number of in-vocabulary levels (max index).
    int size() const { return static_cast<int>(ordered_.size()); }
    const std::vector<std::string>& ordered_levels() const { return ordered_; }
    int min_frequency() const { return min_frequency_; }

    static Vocabulary from_levels(std::vector<std::string> ordered, int min_frequency);

private:
    std::map<std::string, int> index_;
    std::vector<std::string> ordered_;  // ordered_[i] has index i+1
    int min_frequency_ = 1;
};

/// One raw example: binary label plus one string cell per field.
struct RawRecord {
    int label = 0;
    std::vector<std::string> fields;
};
using RawDataset = std::vector<RawRecord>;

/// One encoded example: label plus one embedding-row index per field.
struct EncodedRecord {
    int label = 0;
    std::vector<int> rows;
};
using EncodedDataset = std::vector<EncodedRecord>;

/// Header-less delimited reader: label (0/1), then exactly `fields` columns.
/// Throws DataError naming the offending line on malformed input.
RawDataset read_delimited(const std::string& path, char delimiter, std::size_t fields);
void write_delimited(const std::string& path, const RawDataset& records, char delimiter);

struct FitOptions {
    int bins = 64;
    int min_frequency = 20;
};

/// Fitted deterministic record -> index-vector transform. Immutable once
/// fitted; safe to share across threads.
class FeaturePipeline {
public:
    static FeaturePipeline fit(const RawDataset& records, FeatureSchema schema,
                               const FitOptions& options);

    EncodedRecord encode(const RawRecord& record) const;
    EncodedDataset encode_all(const RawDataset& records) const;

    /// Embedding rows needed per field (level count + 1 for the reserved 0).
    std::vector<std::size_t> rows_per_field() const;

    const FeatureSchema& schema() const { return schema_; }
    const FitOptions& options() const { return options_; }
    const std::vector<Vocabulary>& vocabularies() const { return vocabs_; }
    const std::vector<std::optional<Bucketizer>>& bucketizers() const { return buckets_; }

    void write(std::ostream& out) const;
    static FeaturePipeline read(std::istream& in);
    void save_file(const std::string& path) const;
    static FeaturePipeline load_file(const std::string& path);

    /// Per-field cardinalities and OOV rates against a dataset, for reports.
    std::string summary(const RawDataset& sample) const;

private:
    FeatureSchema schema_;
    FitOptions options_;
    std::vector<Vocabulary> vocabs_;                  // one per field (empty map for pure bins)
    std::vector<std::optional<Bucketizer>> buckets_;  // engaged for equal_freq continuous fields
};

/// Trainable per-field embedding matrices, each (rows_i x D) with row 0 the
/// out-of-vocabulary row.
struct EmbeddingTable {
    std::vector<Tensor> tables;
    std::size_t embedding_dim = 0;

    static EmbeddingTable init(std::span<const std::size_t> rows_per_field,
                               std::size_t embedding_dim, Rng& rng);

    /// Stack per-field looked-up rows into the F x D input feature map.
    Tensor embed(Tape& tape, const EncodedRecord& record) const;
};

}  // namespace ada
