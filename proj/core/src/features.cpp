// SPDX-License-Identifier: Apache-2.0
#include "ada/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "ada/error.hpp"

namespace ada {

void FeatureSchema::validate() const {
    if (fields.empty()) throw ConfigError("schema: at least one field required");
    if (embedding_dim == 0) throw ConfigError("schema: embedding_dim must be >= 1");
    std::set<std::string> seen;
    for (const auto& f : fields) {
        if (f.name.empty()) throw ConfigError("schema: empty field name");
        if (!seen.insert(f.name).second)
            throw ConfigError("schema: duplicate field name '" + f.name + "'");
    }
}

int log_square_transform(double v) {
    if (v == 0.0) return kLogSquareSentinel;
    return static_cast<int>(std::floor(std::log(v * v)));
}

Bucketizer Bucketizer::fit(std::span<const double> values, int bins) {
    if (values.empty()) throw DataError("bucketizer: cannot fit on empty input");
    if (bins < 2) throw ConfigError("bucketizer: bins must be >= 2");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    Bucketizer b;
    for (int cut = 1; cut < bins; ++cut) {
        const std::size_t pos = (n * static_cast<std::size_t>(cut)) / static_cast<std::size_t>(bins);
        if (pos == 0 || pos >= n) continue;
        const double lo = sorted[pos - 1];
        const double hi = sorted[pos];
        if (!(lo < hi)) continue;  // tie across the cut: merge into the neighbour bin
        const double boundary = lo + (hi - lo) / 2.0;
        if (!b.boundaries_.empty() && !(boundary > b.boundaries_.back())) continue;
        b.boundaries_.push_back(boundary);
    }
    return b;
}

int Bucketizer::bucket(double v) const {
    const auto it = std::upper_bound(boundaries_.begin(), boundaries_.end(), v);
    return static_cast<int>(it - boundaries_.begin());
}

Bucketizer Bucketizer::from_boundaries(std::vector<double> boundaries) {
    for (std::size_t i = 1; i < boundaries.size(); ++i)
        if (!(boundaries[i - 1] < boundaries[i]))
            throw DataError("bucketizer: boundaries must be strictly increasing");
    Bucketizer b;
    b.boundaries_ = std::move(boundaries);
    return b;
}

Vocabulary Vocabulary::fit(std::span<const std::string> levels, int min_frequency) {
    if (min_frequency < 1) throw ConfigError("vocabulary: min_frequency must be >= 1");
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& level : levels) ++counts[level];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [level, count] : counts)
        if (count >= static_cast<std::size_t>(min_frequency)) kept.emplace_back(level, count);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> ordered;
    ordered.reserve(kept.size());
    for (auto& [level, count] : kept) ordered.push_back(level);
    return from_levels(std::move(ordered), min_frequency);
}

int Vocabulary::lookup(const std::string& level) const {
    const auto it = index_.find(level);
    return it == index_.end() ? 0 : it->second;
}

Vocabulary Vocabulary::from_levels(std::vector<std::string> ordered, int min_frequency) {
    Vocabulary v;
    v.min_frequency_ = min_frequency;
    v.ordered_ = std::move(ordered);
    for (std::size_t i = 0; i < v.ordered_.size(); ++i)
        v.index_[v.ordered_[i]] = static_cast<int>(i) + 1;
    return v;
}

namespace {

double parse_double(const std::string& cell, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        const std::string where = line_no ? "line " + std::to_string(line_no) + ": " : "";
        throw DataError(where + "'" + cell + "' is not a number");
    }
}

std::vector<std::string> split_line(const std::string& line, char delimiter) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : line) {
        if (c == delimiter) {
            cells.push_back(std::move(cell));
            cell.clear();
        } else {
            cell.push_back(c);
        }
    }
    cells.push_back(std::move(cell));
    return cells;
}

}  // namespace

RawDataset read_delimited(const std::string& path, char delimiter, std::size_t fields) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open data file " + path);
    RawDataset records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto cells = split_line(line, delimiter);
        if (cells.size() != fields + 1)
            throw DataError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(fields + 1) + " columns, got " +
                            std::to_string(cells.size()));
        RawRecord r;
        if (cells[0] == "0")
            r.label = 0;
        else if (cells[0] == "1")
            r.label = 1;
        else
            throw DataError("line " + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                            cells[0] + "'");
        r.fields.assign(cells.begin() + 1, cells.end());
        records.push_back(std::move(r));
    }
    return records;
}

void write_delimited(const std::string& path, const RawDataset& records, char delimiter) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    for (const auto& r : records) {
        out << r.label;
        for (const auto& cell : r.fields) out << delimiter << cell;
        out << '\n';
    }
    if (!out) throw DataError("write failed for " + path);
}

FeaturePipeline FeaturePipeline::fit(const RawDataset& records, FeatureSchema schema,
                                     const FitOptions& options) {
    schema.validate();
    if (records.empty()) throw DataError("pipeline: cannot fit on an empty dataset");
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].fields.size() != schema.field_count())
            throw DataError("pipeline: record " + std::to_string(i + 1) + " has " +
                            std::to_string(records[i].fields.size()) + " fields, schema expects " +
                            std::to_string(schema.field_count()));

    FeaturePipeline p;
    p.schema_ = std::move(schema);
    p.options_ = options;
    const std::size_t field_count = p.schema_.field_count();
    p.vocabs_.resize(field_count);
    p.buckets_.resize(field_count);

    for (std::size_t f = 0; f < field_count; ++f) {
        const FieldSpec& spec = p.schema_.fields[f];
        if (spec.kind == FieldKind::continuous &&
            spec.transform == ContinuousTransform::equal_freq) {
            std::vector<double> values;
            values.reserve(records.size());
            for (std::size_t i = 0; i < records.size(); ++i)
                values.push_back(parse_double(records[i].fields[f], i + 1));
            p.buckets_[f] = Bucketizer::fit(values, options.bins);
        } else {
            std::vector<std::string> levels;
            levels.reserve(records.size());
            for (std::size_t i = 0; i < records.size(); ++i) {
                if (spec.kind == FieldKind::continuous) {
                    const int t = log_square_transform(parse_double(records[i].fields[f], i + 1));
                    levels.push_back(t == kLogSquareSentinel ? "zero" : std::to_string(t));
                } else {
                    levels.push_back(records[i].fields[f]);
                }
            }
            p.vocabs_[f] = Vocabulary::fit(levels, options.min_frequency);
        }
    }
    return p;
}

EncodedRecord FeaturePipeline::encode(const RawRecord& record) const {
    if (record.fields.size() != schema_.field_count())
        throw DataError("encode: record has " + std::to_string(record.fields.size()) +
                        " fields, pipeline expects " + std::to_string(schema_.field_count()));
    EncodedRecord out;
    out.label = record.label;
    out.rows.resize(schema_.field_count());
    for (std::size_t f = 0; f < schema_.field_count(); ++f) {
        const FieldSpec& spec = schema_.fields[f];
        if (spec.kind == FieldKind::continuous &&
            spec.transform == ContinuousTransform::equal_freq) {
            // Bucket index b occupies embedding row b + 1; row 0 stays reserved.
            out.rows[f] = buckets_[f]->bucket(parse_double(record.fields[f], 0)) + 1;
        } else if (spec.kind == FieldKind::continuous) {
            const int t = log_square_transform(parse_double(record.fields[f], 0));
            out.rows[f] = vocabs_[f].lookup(t == kLogSquareSentinel ? "zero" : std::to_string(t));
        } else {
            out.rows[f] = vocabs_[f].lookup(record.fields[f]);
        }
    }
    return out;
}

EncodedDataset FeaturePipeline::encode_all(const RawDataset& records) const {
    EncodedDataset out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(encode(r));
    return out;
}

std::vector<std::size_t> FeaturePipeline::rows_per_field() const {
    std::vector<std::size_t> rows(schema_.field_count());
    for (std::size_t f = 0; f < schema_.field_count(); ++f) {
        if (buckets_[f])
            rows[f] = static_cast<std::size_t>(buckets_[f]->bucket_count()) + 1;
        else
            rows[f] = static_cast<std::size_t>(vocabs_[f].size()) + 1;
    }
    return rows;
}

namespace {

constexpr char kPipelineMagic[4] = {'A', 'D', 'P', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw CheckpointError("pipeline: truncated file");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw CheckpointError("pipeline: truncated file");
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string get_string(std::istream& in) {
    const std::uint32_t n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw CheckpointError("pipeline: truncated string");
    return s;
}

}  // namespace

void FeaturePipeline::write(std::ostream& out) const {
    out.write(kPipelineMagic, 4);
    put_u32(out, 1);  // version
    put_u32(out, static_cast<std::uint32_t>(schema_.embedding_dim));
    put_u32(out, static_cast<std::uint32_t>(options_.bins));
    put_u32(out, static_cast<std::uint32_t>(options_.min_frequency));
    put_u32(out, static_cast<std::uint32_t>(schema_.field_count()));
    for (std::size_t f = 0; f < schema_.field_count(); ++f) {
        const FieldSpec& spec = schema_.fields[f];
        put_string(out, spec.name);
        put_u32(out, spec.kind == FieldKind::continuous ? 1 : 0);
        put_u32(out, spec.transform == ContinuousTransform::log_square ? 1 : 0);
        if (buckets_[f]) {
            put_u32(out, 1);
            put_u32(out, static_cast<std::uint32_t>(buckets_[f]->boundaries().size()));
            for (double b : buckets_[f]->boundaries()) put_f64(out, b);
        } else {
            put_u32(out, 0);
        }
        put_u32(out, static_cast<std::uint32_t>(vocabs_[f].size()));
        for (const auto& level : vocabs_[f].ordered_levels()) put_string(out, level);
    }
    if (!out) throw CheckpointError("pipeline: write failed");
}

FeaturePipeline FeaturePipeline::read(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kPipelineMagic, 4) != 0)
        throw CheckpointError("pipeline: bad magic, not a pipeline file");
    const std::uint32_t version = get_u32(in);
    if (version != 1)
        throw CheckpointError("pipeline: unsupported version " + std::to_string(version));
    FeaturePipeline p;
    p.schema_.embedding_dim = get_u32(in);
    p.options_.bins = static_cast<int>(get_u32(in));
    p.options_.min_frequency = static_cast<int>(get_u32(in));
    const std::uint32_t field_count = get_u32(in);
    p.vocabs_.resize(field_count);
    p.buckets_.resize(field_count);
    for (std::uint32_t f = 0; f < field_count; ++f) {
        FieldSpec spec;
        spec.name = get_string(in);
        spec.kind = get_u32(in) ? FieldKind::continuous : FieldKind::categorical;
        spec.transform =
            get_u32(in) ? ContinuousTransform::log_square : ContinuousTransform::equal_freq;
        p.schema_.fields.push_back(spec);
        if (get_u32(in)) {
            const std::uint32_t nb = get_u32(in);
            std::vector<double> boundaries(nb);
            for (auto& b : boundaries) b = get_f64(in);
            p.buckets_[f] = Bucketizer::from_boundaries(std::move(boundaries));
        }
        const std::uint32_t nv = get_u32(in);
        std::vector<std::string> ordered(nv);
        for (auto& level : ordered) level = get_string(in);
        p.vocabs_[f] = Vocabulary::from_levels(std::move(ordered), p.options_.min_frequency);
    }
    p.schema_.validate();
    return p;
}

void FeaturePipeline::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("pipeline: cannot open " + path + " for writing");
    write(out);
}

FeaturePipeline FeaturePipeline::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("pipeline: cannot open " + path);
    return read(in);
}

std::string FeaturePipeline::summary(const RawDataset& sample) const {
    std::vector<std::size_t> oov(schema_.field_count(), 0);
    for (const auto& r : sample) {
        EncodedRecord e = encode(r);
        for (std::size_t f = 0; f < oov.size(); ++f)
            if (e.rows[f] == 0) ++oov[f];
    }
    std::ostringstream os;
    os << "field\tkind\tlevels\toov_rate\n";
    for (std::size_t f = 0; f < schema_.field_count(); ++f) {
        const FieldSpec& spec = schema_.fields[f];
        const double rate = sample.empty() ? 0.0 : static_cast<double>(oov[f]) / sample.size();
        std::size_t levels = buckets_[f] ? static_cast<std::size_t>(buckets_[f]->bucket_count())
                                         : static_cast<std::size_t>(vocabs_[f].size());
        os << spec.name << '\t' << (spec.kind == FieldKind::continuous ? "continuous" : "categorical")
           << '\t' << levels << '\t' << rate << '\n';
    }
    return os.str();
}

EmbeddingTable EmbeddingTable::init(std::span<const std::size_t> rows_per_field,
                                    std::size_t embedding_dim, Rng& rng) {
    EmbeddingTable t;
    t.embedding_dim = embedding_dim;
    for (std::size_t rows : rows_per_field)
        t.tables.push_back(Tensor::glorot({rows, embedding_dim}, rows, embedding_dim, rng, true));
    return t;
}

Tensor EmbeddingTable::embed(Tape& tape, const EncodedRecord& record) const {
    if (record.rows.size() != tables.size())
        throw DataError("embed: record has " + std::to_string(record.rows.size()) +
                        " fields, table has " + std::to_string(tables.size()));
    std::vector<Tensor> rows;
    rows.reserve(tables.size());
    for (std::size_t f = 0; f < tables.size(); ++f) {
        const int idx = record.rows[f];
        if (idx < 0 || static_cast<std::size_t>(idx) >= tables[f].shape()[0])
            throw DomainError("embed: field " + std::to_string(f) + " index " +
                              std::to_string(idx) + " out of range for table " +
                              tables[f].shape_string());
        rows.push_back(lookup_row(tape, tables[f], static_cast<std::size_t>(idx)));
    }
    return stack_rows(tape, rows);
}

}  // namespace ada
