/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/image.hpp
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

#ifndef FACEFIT_IMAGE_HPP
#define FACEFIT_IMAGE_HPP

#include "facefit/core/error.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace facefit {

/**
 * A rows x cols x 3 image of doubles, row-major with interleaved channels.
 * Used both for rendered images (H x W) and for UV textures (U x V, where the
 * row index is u and the column index is v).
 */
class ColorImage
{
public:
    ColorImage() = default;
    ColorImage(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols * 3, fill)
    {
        if (rows < 0 || cols < 0)
        {
            throw DimensionMismatch("image dimensions must be non-negative");
        }
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool same_shape(const ColorImage& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(int r, int c, int ch) { return data_[index(r, c, ch)]; }
    double operator()(int r, int c, int ch) const { return data_[index(r, c, ch)]; }

    Eigen::Vector3d pixel(int r, int c) const
    {
        const auto i = index(r, c, 0);
        return {data_[i], data_[i + 1], data_[i + 2]};
    }

    void set_pixel(int r, int c, const Eigen::Vector3d& rgb)
    {
        const auto i = index(r, c, 0);
        data_[i] = rgb[0];
        data_[i + 1] = rgb[1];
        data_[i + 2] = rgb[2];
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Eigen::Map<Eigen::VectorXd> as_vector() { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }
    Eigen::Map<const Eigen::VectorXd> as_vector() const
    {
        return {data_.data(), static_cast<Eigen::Index>(data_.size())};
    }

    static ColorImage from_vector(int rows, int cols, const Eigen::VectorXd& v)
    {
        ColorImage img(rows, cols);
        require_dims(static_cast<std::size_t>(v.size()) == img.size(), "vector length does not match image shape");
        std::copy(v.data(), v.data() + v.size(), img.data_.begin());
        return img;
    }

    void clamp01()
    {
        for (auto& x : data_)
        {
            x = std::clamp(x, 0.0, 1.0);
        }
    }

private:
    std::size_t index(int r, int c, int ch) const
    {
        return (static_cast<std::size_t>(r) * cols_ + c) * 3 + ch;
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

using Texture = ColorImage;

/// Per-pixel (or per-texel) boolean mask, row-major.
using Mask = std::vector<std::uint8_t>;

inline std::uint8_t to_byte(double x)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
}

/// Binary PPM (P6, maxval 255).
inline void write_ppm(const std::filesystem::path& path, const ColorImage& img)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
    {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << "P6\n" << img.cols() << ' ' << img.rows() << "\n255\n";
    std::vector<char> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
    {
        bytes[i] = static_cast<char>(to_byte(img.data()[i]));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
    {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

inline ColorImage read_ppm(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
    {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    auto next_token = [&]() {
        std::string tok;
        char ch;
        while (in.get(ch))
        {
            if (ch == '#')
            {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch)))
            {
                if (!tok.empty())
                {
                    break;
                }
                continue;
            }
            tok.push_back(ch);
        }
        return tok;
    };
    if (next_token() != "P6")
    {
        throw ParseError(path.string() + ": not a binary PPM (P6) file");
    }
    int cols = 0, rows = 0, maxval = 0;
    try
    {
        cols = std::stoi(next_token());
        rows = std::stoi(next_token());
        maxval = std::stoi(next_token());
    } catch (const std::exception&)
    {
        throw ParseError(path.string() + ": malformed PPM header");
    }
    if (cols <= 0 || rows <= 0 || maxval != 255)
    {
        throw ParseError(path.string() + ": only 8-bit PPM with positive dimensions is supported");
    }
    ColorImage img(rows, cols);
    std::vector<unsigned char> bytes(img.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    {
        throw ParseError(path.string() + ": truncated pixel data");
    }
    for (std::size_t i = 0; i < bytes.size(); ++i)
    {
        img.data()[i] = bytes[i] / 255.0;
    }
    return img;
}

} // namespace facefit

#endif /* FACEFIT_IMAGE_HPP */
