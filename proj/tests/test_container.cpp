// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstring>

#include <json.hpp>

#include "spq/container.hpp"
#include "test_helpers.hpp"

using namespace spq;

namespace {

std::vector<std::uint8_t> raw_file(const std::string& header,
                                   const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> out;
    const std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>((len >> (8 * i)) & 0xff));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

} // namespace

TEST_SUITE("container") {

TEST_CASE("write then read is the identity on valid containers") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const TensorContainer c = test::fuzz_container(seed);
        const auto bytes = write_container(c);
        const TensorContainer back = read_container(bytes);
        CHECK(back == c);
        CHECK(write_container(back) == bytes);
    }
}

TEST_CASE("single F32 tensor parses with expected element count") {
    TensorContainer c;
    TensorEntry e;
    e.dtype = Dtype::F32;
    e.shape = {2, 3};
    e.data.assign(24, 0x5a);
    c.add("w", e);
    const TensorContainer back = read_container(write_container(c));
    CHECK(back.at("w").element_count() == 6);
    CHECK(back.at("w").data.size() == 24);
}

TEST_CASE("offsets past end of file are rejected") {
    const std::string header =
        R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";
    const auto bytes = raw_file(header, {0, 0, 0, 0}); // only 4 payload bytes
    CHECK_THROWS_WITH_AS(static_cast<void>(read_container(bytes)),
                         doctest::Contains("out-of-bounds"), ContainerError);
}

TEST_CASE("empty container round-trips as a header-only file") {
    const TensorContainer c;
    const auto bytes = write_container(c);
    const TensorContainer back = read_container(bytes);
    CHECK(back.size() == 0);
    CHECK(back == c);
}

TEST_CASE("serialization is deterministic and canonical") {
    const TensorContainer a = test::fuzz_container(7);
    const TensorContainer b = test::fuzz_container(7);
    CHECK(write_container(a) == write_container(b));
    // idempotence: re-serializing a parsed canonical file gives the same bytes
    const auto bytes = write_container(a);
    CHECK(write_container(read_container(bytes)) == bytes);
}

TEST_CASE("tensor_bytes arithmetic") {
    const std::vector<std::size_t> big = {4096, 4096};
    CHECK(tensor_bytes(Dtype::F32, big) == 67108864);
    // 8-bit storage is exactly 25% of the F32 figure
    CHECK(tensor_bytes(Dtype::I8, big) == 16777216);
    CHECK(tensor_bytes(Dtype::I8, big) * 4 == tensor_bytes(Dtype::F32, big));
    const std::vector<std::size_t> one = {1};
    CHECK(tensor_bytes(Dtype::F32, one) == 4);
    CHECK(tensor_bytes(Dtype::F64, one) == 8);
    CHECK(tensor_bytes(Dtype::I32, one) == 4);
}

TEST_CASE("tensor_bytes rejects overflowing extents") {
    const std::vector<std::size_t> huge = {std::size_t{1} << 62, std::size_t{1} << 62};
    CHECK_THROWS_AS(static_cast<void>(tensor_bytes(Dtype::I8, huge)), std::overflow_error);
}

TEST_CASE("payload length equals the sum of tensor bytes") {
    const TensorContainer c = test::fuzz_container(11);
    const auto bytes = write_container(c);
    const std::uint64_t header_len = [&] {
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i)
            v = (v << 8) | bytes[static_cast<std::size_t>(i)];
        return v;
    }();
    std::uint64_t expected = 0;
    for (const auto& [name, entry] : c.entries())
        expected += tensor_bytes(entry.dtype, entry.shape);
    CHECK(bytes.size() - 8 - header_len == expected);
    CHECK(c.total_tensor_bytes() == expected);
}

TEST_CASE("duplicate names in the header are rejected") {
    const std::string header =
        R"({"w":{"dtype":"I8","shape":[2],"data_offsets":[0,2]},)"
        R"("w":{"dtype":"I8","shape":[2],"data_offsets":[2,4]}})";
    const auto bytes = raw_file(header, {1, 2, 3, 4});
    CHECK_THROWS_WITH_AS(static_cast<void>(read_container(bytes)),
                         doctest::Contains("duplicate"), ContainerError);
}

TEST_CASE("unknown dtype is rejected") {
    const std::string header =
        R"({"w":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})";
    const auto bytes = raw_file(header, {0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(static_cast<void>(read_container(bytes)),
                         doctest::Contains("unknown dtype"), ContainerError);
}

TEST_CASE("overlapping payload regions are rejected") {
    const std::string header =
        R"({"a":{"dtype":"I8","shape":[3],"data_offsets":[0,3]},)"
        R"("b":{"dtype":"I8","shape":[3],"data_offsets":[1,4]}})";
    const auto bytes = raw_file(header, {1, 2, 3, 4});
    CHECK_THROWS_WITH_AS(static_cast<void>(read_container(bytes)),
                         doctest::Contains("overlapping"), ContainerError);
}

TEST_CASE("payload gaps are rejected") {
    const std::string header =
        R"({"a":{"dtype":"I8","shape":[1],"data_offsets":[0,1]},)"
        R"("b":{"dtype":"I8","shape":[1],"data_offsets":[2,3]}})";
    const auto bytes = raw_file(header, {1, 2, 3});
    CHECK_THROWS_WITH_AS(static_cast<void>(read_container(bytes)),
                         doctest::Contains("non-contiguous"), ContainerError);
}

TEST_CASE("malformed header text is rejected") {
    const auto bytes = raw_file("{not json", {});
    CHECK_THROWS_AS(static_cast<void>(read_container(bytes)), ContainerError);
    std::vector<std::uint8_t> tiny = {1, 2, 3};
    CHECK_THROWS_AS(static_cast<void>(read_container(tiny)), ContainerError);
}

TEST_CASE("metadata survives round-trips") {
    TensorContainer c;
    c.metadata()["stats.p"] = "1";
    c.metadata()["note"] = "hello";
    TensorEntry e;
    e.dtype = Dtype::I32;
    e.shape = {2};
    e.data.assign(8, 0);
    c.add("idx", e);
    const TensorContainer back = read_container(write_container(c));
    CHECK(back.metadata().at("stats.p") == "1");
    CHECK(back.metadata().at("note") == "hello");
}

TEST_CASE("container rejects invalid entries") {
    TensorContainer c;
    TensorEntry e;
    e.dtype = Dtype::F32;
    e.shape = {2};
    e.data.assign(8, 0);
    CHECK_THROWS_AS(c.add("", e), ContainerError);
    CHECK_THROWS_AS(c.add("__metadata__", e), ContainerError);
    TensorEntry bad = e;
    bad.data.resize(5);
    CHECK_THROWS_AS(c.add("w", bad), ContainerError);
    c.add("w", e);
    CHECK_THROWS_AS(c.add("w", e), ContainerError);
}

} // TEST_SUITE
