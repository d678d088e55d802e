// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/container.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

namespace spq {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kMetadataKey = "__metadata__";

// nlohmann silently keeps the last value for duplicate object keys, so
// duplicates in the header are detected with a SAX pass before DOM parsing.
class TopLevelKeyChecker : public nlohmann::json_sax<ordered_json> {
public:
    bool null() override { return true; }
    bool boolean(bool) override { return true; }
    bool number_integer(number_integer_t) override { return true; }
    bool number_unsigned(number_unsigned_t) override { return true; }
    bool number_float(number_float_t, const string_t&) override { return true; }
    bool string(string_t&) override { return true; }
    bool binary(binary_t&) override { return true; }
    bool start_object(std::size_t) override {
        ++depth_;
        return true;
    }
    bool key(string_t& k) override {
        if (depth_ == 1 && !seen_.insert(k).second)
            throw ContainerError("duplicate name in header: " + k);
        return true;
    }
    bool end_object() override {
        --depth_;
        return true;
    }
    bool start_array(std::size_t) override { return true; }
    bool end_array() override { return true; }
    bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception& e) override {
        throw ContainerError(std::string("malformed header: ") + e.what());
    }

private:
    int depth_ = 0;
    std::set<std::string> seen_;
};

std::uint64_t read_u64le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | p[i];
    return v;
}

void append_u64le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void validate_entry(const std::string& name, const TensorEntry& entry) {
    if (name.empty())
        throw ContainerError("tensor name must be non-empty");
    if (name == kMetadataKey)
        throw ContainerError("tensor name '__metadata__' is reserved");
    const std::uint64_t expected = tensor_bytes(entry.dtype, entry.shape);
    if (expected != entry.data.size())
        throw ContainerError("payload size mismatch for tensor '" + name + "'");
}

} // namespace

std::size_t dtype_size(Dtype d) {
    switch (d) {
    case Dtype::F64: return 8;
    case Dtype::F32: return 4;
    case Dtype::I32: return 4;
    case Dtype::I8: return 1;
    }
    throw ContainerError("unknown dtype");
}

std::string_view dtype_name(Dtype d) {
    switch (d) {
    case Dtype::F64: return "F64";
    case Dtype::F32: return "F32";
    case Dtype::I32: return "I32";
    case Dtype::I8: return "I8";
    }
    throw ContainerError("unknown dtype");
}

std::optional<Dtype> dtype_from_name(std::string_view s) {
    if (s == "F64") return Dtype::F64;
    if (s == "F32") return Dtype::F32;
    if (s == "I32") return Dtype::I32;
    if (s == "I8") return Dtype::I8;
    return std::nullopt;
}

std::size_t TensorEntry::element_count() const {
    std::size_t n = 1;
    for (const std::size_t e : shape)
        n *= e;
    return n;
}

std::uint64_t tensor_bytes(Dtype dtype, std::span<const std::size_t> shape) {
    std::uint64_t n = 1;
    for (const std::size_t e : shape) {
        if (e == 0)
            throw ContainerError("shape extents must be positive");
        if (n > std::numeric_limits<std::uint64_t>::max() / e)
            throw std::overflow_error("extent overflow in tensor_bytes");
        n *= e;
    }
    const std::uint64_t sz = dtype_size(dtype);
    if (n > std::numeric_limits<std::uint64_t>::max() / sz)
        throw std::overflow_error("extent overflow in tensor_bytes");
    return n * sz;
}

void TensorContainer::add(std::string name, TensorEntry entry) {
    validate_entry(name, entry);
    if (entries_.count(name))
        throw ContainerError("duplicate tensor name: " + name);
    entries_.emplace(std::move(name), std::move(entry));
}

void TensorContainer::remove(const std::string& name) {
    if (entries_.erase(name) == 0)
        throw ContainerError("no such tensor: " + name);
}

const TensorEntry& TensorContainer::at(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end())
        throw ContainerError("no such tensor: " + name);
    return it->second;
}

std::uint64_t TensorContainer::total_tensor_bytes() const {
    std::uint64_t total = 0;
    for (const auto& [name, entry] : entries_)
        total += entry.data.size();
    return total;
}

TensorContainer read_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8)
        throw ContainerError("file too short for header length");
    const std::uint64_t header_len = read_u64le(bytes.data());
    if (header_len > bytes.size() - 8)
        throw ContainerError("header length exceeds file size");

    const std::string header(reinterpret_cast<const char*>(bytes.data() + 8),
                             static_cast<std::size_t>(header_len));
    const std::span<const std::uint8_t> payload = bytes.subspan(8 + header_len);

    {
        TopLevelKeyChecker checker;
        ordered_json::sax_parse(header, &checker);
    }
    ordered_json doc = ordered_json::parse(header, nullptr, false);
    if (doc.is_discarded() || !doc.is_object())
        throw ContainerError("malformed header: not a JSON object");

    TensorContainer container;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> regions;

    for (const auto& [name, value] : doc.items()) {
        if (name == kMetadataKey) {
            if (!value.is_object())
                throw ContainerError("__metadata__ must be an object");
            for (const auto& [k, v] : value.items()) {
                if (!v.is_string())
                    throw ContainerError("__metadata__ values must be strings");
                container.metadata()[k] = v.get<std::string>();
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets"))
            throw ContainerError("malformed entry for tensor '" + name + "'");

        const auto dtype = dtype_from_name(value["dtype"].is_string()
                                               ? value["dtype"].get<std::string>()
                                               : std::string());
        if (!dtype)
            throw ContainerError("unknown dtype for tensor '" + name + "'");

        TensorEntry entry;
        entry.dtype = *dtype;
        if (!value["shape"].is_array())
            throw ContainerError("shape must be an array for tensor '" + name + "'");
        for (const auto& e : value["shape"]) {
            if (!e.is_number_unsigned() || e.get<std::uint64_t>() == 0)
                throw ContainerError("shape extents must be positive for tensor '" + name + "'");
            entry.shape.push_back(e.get<std::size_t>());
        }

        const auto& off = value["data_offsets"];
        if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() ||
            !off[1].is_number_unsigned())
            throw ContainerError("malformed data_offsets for tensor '" + name + "'");
        const std::uint64_t begin = off[0].get<std::uint64_t>();
        const std::uint64_t end = off[1].get<std::uint64_t>();
        if (begin > end || end > payload.size())
            throw ContainerError("out-of-bounds payload for tensor '" + name + "'");
        if (end - begin != tensor_bytes(entry.dtype, entry.shape))
            throw ContainerError("payload size mismatch for tensor '" + name + "'");
        regions.emplace_back(begin, end);

        entry.data.assign(payload.begin() + begin, payload.begin() + end);
        container.add(name, std::move(entry));
    }

    std::sort(regions.begin(), regions.end());
    std::uint64_t cursor = 0;
    for (const auto& [begin, end] : regions) {
        if (begin < cursor)
            throw ContainerError("overlapping payload regions");
        if (begin > cursor)
            throw ContainerError("non-contiguous payload regions");
        cursor = end;
    }
    if (cursor != payload.size())
        throw ContainerError("payload has trailing bytes not covered by any tensor");

    return container;
}

std::vector<std::uint8_t> write_container(const TensorContainer& container) {
    ordered_json header = ordered_json::object();
    if (!container.metadata().empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : container.metadata())
            meta[k] = v;
        header[std::string(kMetadataKey)] = std::move(meta);
    }

    std::uint64_t offset = 0;
    for (const auto& [name, entry] : container.entries()) {
        validate_entry(name, entry);
        ordered_json j = ordered_json::object();
        j["dtype"] = std::string(dtype_name(entry.dtype));
        j["shape"] = entry.shape;
        j["data_offsets"] = {offset, offset + entry.data.size()};
        header[name] = std::move(j);
        offset += entry.data.size();
    }

    const std::string text = header.dump();
    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    append_u64le(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, entry] : container.entries())
        out.insert(out.end(), entry.data.begin(), entry.data.end());
    return out;
}

TensorContainer read_container_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ContainerError("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return read_container(bytes);
}

void write_container_file(const TensorContainer& container, const std::string& path) {
    const auto bytes = write_container(container);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw ContainerError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw ContainerError("write failed: " + path);
}

namespace {

template <typename T>
std::vector<T> decode(const TensorEntry& entry) {
    std::vector<T> values(entry.element_count());
    std::memcpy(values.data(), entry.data.data(), entry.data.size());
    return values;
}

std::pair<std::size_t, std::size_t> matrix_shape(const TensorEntry& entry) {
    if (entry.shape.size() != 2)
        throw ContainerError("tensor is not a matrix");
    return {entry.shape[0], entry.shape[1]};
}

} // namespace

MatD entry_to_matrix(const TensorEntry& entry) {
    const auto [rows, cols] = matrix_shape(entry);
    MatD m(rows, cols);
    if (entry.dtype == Dtype::F32) {
        const auto v = decode<float>(entry);
        std::copy(v.begin(), v.end(), m.data());
    } else if (entry.dtype == Dtype::F64) {
        const auto v = decode<double>(entry);
        std::copy(v.begin(), v.end(), m.data());
    } else {
        throw ContainerError("entry_to_matrix: expected a float tensor");
    }
    return m;
}

MatF entry_to_matrix_f32(const TensorEntry& entry) {
    if (entry.dtype != Dtype::F32)
        throw ContainerError("entry_to_matrix_f32: expected an F32 tensor");
    const auto [rows, cols] = matrix_shape(entry);
    MatF m(rows, cols);
    const auto v = decode<float>(entry);
    std::copy(v.begin(), v.end(), m.data());
    return m;
}

std::vector<double> entry_to_vector(const TensorEntry& entry) {
    if (entry.dtype == Dtype::F32) {
        const auto v = decode<float>(entry);
        return {v.begin(), v.end()};
    }
    if (entry.dtype == Dtype::F64)
        return decode<double>(entry);
    throw ContainerError("entry_to_vector: expected a float tensor");
}

std::vector<std::int32_t> entry_to_indices(const TensorEntry& entry) {
    if (entry.dtype != Dtype::I32)
        throw ContainerError("entry_to_indices: expected an I32 tensor");
    return decode<std::int32_t>(entry);
}

std::vector<std::int32_t> entry_to_i8_values(const TensorEntry& entry) {
    if (entry.dtype != Dtype::I8)
        throw ContainerError("entry_to_i8_values: expected an I8 tensor");
    const auto v = decode<std::int8_t>(entry);
    return {v.begin(), v.end()};
}

namespace {

template <typename T, typename U>
TensorEntry encode(Dtype dtype, std::vector<std::size_t> shape, std::span<const U> values) {
    TensorEntry entry;
    entry.dtype = dtype;
    entry.shape = std::move(shape);
    entry.data.resize(values.size() * sizeof(T));
    std::vector<T> narrow(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        narrow[i] = static_cast<T>(values[i]);
    std::memcpy(entry.data.data(), narrow.data(), entry.data.size());
    return entry;
}

} // namespace

TensorEntry make_f32_entry(const MatD& m) {
    return encode<float, double>(Dtype::F32, {m.rows(), m.cols()}, m.values());
}

TensorEntry make_f32_entry(const MatF& m) {
    return encode<float, float>(Dtype::F32, {m.rows(), m.cols()}, m.values());
}

TensorEntry make_f32_entry(std::span<const double> v) {
    return encode<float, double>(Dtype::F32, {v.size()}, v);
}

TensorEntry make_f64_entry(const MatD& m) {
    return encode<double, double>(Dtype::F64, {m.rows(), m.cols()}, m.values());
}

TensorEntry make_i8_entry(std::span<const std::int32_t> values, std::vector<std::size_t> shape) {
    for (const std::int32_t v : values)
        if (v < -128 || v > 127)
            throw ContainerError("make_i8_entry: value out of int8 range");
    return encode<std::int8_t, std::int32_t>(Dtype::I8, std::move(shape), values);
}

TensorEntry make_i32_entry(std::span<const std::int32_t> values) {
    return encode<std::int32_t, std::int32_t>(Dtype::I32, {values.size()}, values);
}

} // namespace spq
