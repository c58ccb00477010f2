// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ada/tensor.hpp"

namespace ada {

/// One named tensor inside a store.
struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

/// Flat container mapping tensor names to dense 64-bit values.
///
/// Byte layout (all integers and doubles little-endian):
///
///   offset  size  field
///   0       4     magic "ADT1"
///   4       4     u32 format version (currently 1)
///   8       8     u64 entry count
///   then per entry, in stored order:
///           4     u32 name byte count
///           n     name bytes (UTF-8, no terminator)
///           4     u32 rank
///           8*r   u64 extents, row-major order
///           8*k   f64 values (k = product of extents), IEEE-754 binary64
///
/// Round trips are value-exact: doubles are written as raw bit patterns.
class TensorStore {
public:
    void put(std::string name, const Tensor& t);
    void put(NamedTensor entry);

    const std::vector<NamedTensor>& entries() const { return entries_; }
    const NamedTensor* find(const std::string& name) const;

    void write(std::ostream& out) const;
    static TensorStore read(std::istream& in);

    void save_file(const std::string& path) const;
    static TensorStore load_file(const std::string& path);

private:
    std::vector<NamedTensor> entries_;
};

}  // namespace ada
