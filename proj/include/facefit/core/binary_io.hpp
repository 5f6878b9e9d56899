/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/core/binary_io.hpp
 *
 * Copyright 2026 The facefit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef FACEFIT_CORE_BINARY_IO_HPP
#define FACEFIT_CORE_BINARY_IO_HPP

#include "facefit/core/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

// Little-endian encoding helpers for the binary containers.

namespace facefit {

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
    {
        out.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
    {
        out.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
}

inline void put_f64(std::vector<unsigned char>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(const unsigned char* p)
{
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
    {
        v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    }
    return v;
}

inline std::uint64_t get_u64(const unsigned char* p)
{
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
    {
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return v;
}

inline double get_f64(const unsigned char* p) { return std::bit_cast<double>(get_u64(p)); }

inline std::vector<unsigned char> read_all_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
    {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_all_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
    {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
    {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

class ByteReader
{
public:
    ByteReader(std::vector<unsigned char> bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name))
    {
    }

    void expect_magic(const char* magic)
    {
        need(4);
        if (std::memcmp(bytes_.data(), magic, 4) != 0)
        {
            throw ParseError(name_ + ": bad magic, expected '" + std::string(magic, 4) + "'");
        }
        pos_ = 4;
    }
    std::uint32_t u32()
    {
        need(4);
        const auto v = get_u32(bytes_.data() + pos_);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64()
    {
        need(8);
        const auto v = get_u64(bytes_.data() + pos_);
        pos_ += 8;
        return v;
    }
    double f64()
    {
        need(8);
        const auto v = get_f64(bytes_.data() + pos_);
        pos_ += 8;
        return v;
    }
    void finish() const
    {
        if (pos_ != bytes_.size())
        {
            throw ParseError(name_ + ": trailing bytes after model data");
        }
    }
    /// Guards size fields against truncated or hostile files.
    void check_remaining(std::uint64_t doubles) const
    {
        if (doubles > (bytes_.size() - pos_) / 8)
        {
            throw ParseError(name_ + ": declared dimensions exceed file size");
        }
    }

private:
    void need(std::size_t k) const
    {
        if (pos_ + k > bytes_.size())
        {
            throw ParseError(name_ + ": truncated file");
        }
    }

    std::vector<unsigned char> bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

} // namespace detail

} // namespace facefit

#endif /* FACEFIT_CORE_BINARY_IO_HPP */
