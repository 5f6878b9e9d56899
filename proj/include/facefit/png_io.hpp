/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/png_io.hpp
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

#ifndef FACEFIT_PNG_IO_HPP
#define FACEFIT_PNG_IO_HPP

// Requires linking libpng (CMake target facefit_png).

#include "facefit/core/error.hpp"
#include "facefit/image.hpp"

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace facefit {

namespace detail {

struct FileCloser
{
    void operator()(std::FILE* f) const
    {
        if (f)
        {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png_bytes(const std::filesystem::path& path, int rows, int cols, int channels,
                            const std::vector<unsigned char>& bytes)
{
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp)
    {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info)
    {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png)))
    {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < rows; ++r)
    {
        png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(r) * cols * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace detail

/// 8-bit RGB PNG; values are clamped to [0, 1] and scaled by 255.
inline void write_png(const std::filesystem::path& path, const ColorImage& img)
{
    std::vector<unsigned char> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
    {
        bytes[i] = to_byte(img.data()[i]);
    }
    detail::write_png_bytes(path, img.rows(), img.cols(), 3, bytes);
}

/// 8-bit grayscale PNG, 255 where the mask is set.
inline void write_mask_png(const std::filesystem::path& path, const Mask& mask, int rows, int cols)
{
    require_dims(mask.size() == static_cast<std::size_t>(rows) * cols, "mask size does not match dimensions");
    std::vector<unsigned char> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
    {
        bytes[i] = mask[i] ? 255 : 0;
    }
    detail::write_png_bytes(path, rows, cols, 1, bytes);
}

/// Reads any 8- or 16-bit PNG and converts it to RGB in [0, 1].
inline ColorImage read_png(const std::filesystem::path& path)
{
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp)
    {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    {
        throw ParseError(path.string() + ": not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info)
    {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png)))
    {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError(path.string() + ": corrupt PNG data");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int cols = static_cast<int>(png_get_image_width(png, info));
    const int rows = static_cast<int>(png_get_image_height(png, info));
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(cols) * 3)
    {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError(path.string() + ": unsupported PNG pixel layout");
    }
    std::vector<unsigned char> bytes(rowbytes * rows);
    std::vector<png_bytep> row_ptrs(rows);
    for (int r = 0; r < rows; ++r)
    {
        row_ptrs[r] = bytes.data() + rowbytes * r;
    }
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    ColorImage img(rows, cols);
    for (std::size_t i = 0; i < bytes.size(); ++i)
    {
        img.data()[i] = bytes[i] / 255.0;
    }
    return img;
}

/// Dispatches on extension: .ppm is read natively, everything else as PNG.
inline ColorImage read_image(const std::filesystem::path& path)
{
    if (path.extension() == ".ppm")
    {
        return read_ppm(path);
    }
    return read_png(path);
}

inline void write_image(const std::filesystem::path& path, const ColorImage& img)
{
    if (path.extension() == ".ppm")
    {
        write_ppm(path, img);
    } else
    {
        write_png(path, img);
    }
}

} // namespace facefit

#endif /* FACEFIT_PNG_IO_HPP */
