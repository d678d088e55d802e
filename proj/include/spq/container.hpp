// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_CONTAINER_HPP
#define SPQ_CONTAINER_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "spq/matrix.hpp"

namespace spq {

class ContainerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Dtype { F64, F32, I8, I32 };

std::size_t dtype_size(Dtype d);
std::string_view dtype_name(Dtype d);
std::optional<Dtype> dtype_from_name(std::string_view s);

struct TensorEntry {
    Dtype dtype = Dtype::F32;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> data; // raw little-endian payload, row-major

    std::size_t element_count() const;
    bool operator==(const TensorEntry&) const = default;
};

// product(shape) * dtype size, overflow-checked
std::uint64_t tensor_bytes(Dtype dtype, std::span<const std::size_t> shape);

// Named tensors plus a string metadata map. Entries are kept sorted by name;
// serialization is canonical (lexicographic names, contiguous offsets), so
// equal containers always produce identical bytes.
class TensorContainer {
public:
    void add(std::string name, TensorEntry entry);
    void remove(const std::string& name);
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const TensorEntry& at(const std::string& name) const;

    const std::map<std::string, TensorEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::map<std::string, std::string>& metadata() { return metadata_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    std::uint64_t total_tensor_bytes() const;

    bool operator==(const TensorContainer&) const = default;

private:
    std::map<std::string, TensorEntry> entries_;
    std::map<std::string, std::string> metadata_;
};

TensorContainer read_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_container(const TensorContainer& container);

TensorContainer read_container_file(const std::string& path);
void write_container_file(const TensorContainer& container, const std::string& path);

// entry <-> matrix/vector conversions (F32 and F64 entries widen to double)

MatD entry_to_matrix(const TensorEntry& entry);
MatF entry_to_matrix_f32(const TensorEntry& entry);
std::vector<double> entry_to_vector(const TensorEntry& entry);
std::vector<std::int32_t> entry_to_indices(const TensorEntry& entry);
std::vector<std::int32_t> entry_to_i8_values(const TensorEntry& entry);

TensorEntry make_f32_entry(const MatD& m);
TensorEntry make_f32_entry(const MatF& m);
TensorEntry make_f32_entry(std::span<const double> v);
TensorEntry make_f64_entry(const MatD& m);
TensorEntry make_i8_entry(std::span<const std::int32_t> values, std::vector<std::size_t> shape);
TensorEntry make_i32_entry(std::span<const std::int32_t> values);

} // namespace spq

#endif // SPQ_CONTAINER_HPP
