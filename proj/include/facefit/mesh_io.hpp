/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/mesh_io.hpp
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

#ifndef FACEFIT_MESH_IO_HPP
#define FACEFIT_MESH_IO_HPP

#include "facefit/core/error.hpp"
#include "facefit/geometry.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace facefit {

namespace detail {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double x)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& token, const std::string& context)
{
    double value = 0.0;
    const char* first = token.data();
    const char* last = token.data() + token.size();
    if (!token.empty() && *first == '+')
    {
        ++first;
    }
    const auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last)
    {
        throw ParseError(context + ": cannot parse number '" + token + "'");
    }
    return value;
}

inline long parse_int(const std::string& token, const std::string& context)
{
    long value = 0;
    const auto res = std::from_chars(token.data(), token.data() + token.size(), value);
    if (res.ec != std::errc() || res.ptr != token.data() + token.size())
    {
        throw ParseError(context + ": cannot parse integer '" + token + "'");
    }
    return value;
}

inline std::ifstream open_for_reading(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
    {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    return in;
}

inline std::ofstream open_for_writing(const std::filesystem::path& path, bool binary = false)
{
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out)
    {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    return out;
}

} // namespace detail

/**
 * Reads the subset of Wavefront OBJ we need: `v x y z` and triangular `f`
 * records with 1-based (optionally negative, relative) indices. Texture and
 * normal indices after a '/' are ignored; every other record type is skipped.
 */
inline Mesh read_obj(const std::filesystem::path& path)
{
    auto in = detail::open_for_reading(path);
    std::vector<Eigen::Vector3d> verts;
    std::vector<Triangle> tris;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line))
    {
        ++line_no;
        const std::string ctx = path.string() + ":" + std::to_string(line_no);
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#')
        {
            continue;
        }
        if (tag == "v")
        {
            std::string x, y, z;
            if (!(ls >> x >> y >> z))
            {
                throw ParseError(ctx + ": vertex record needs three coordinates");
            }
            verts.emplace_back(detail::parse_double(x, ctx), detail::parse_double(y, ctx),
                               detail::parse_double(z, ctx));
        } else if (tag == "f")
        {
            std::vector<int> idx;
            std::string tok;
            while (ls >> tok)
            {
                const auto slash = tok.find('/');
                long i = detail::parse_int(tok.substr(0, slash), ctx);
                if (i < 0)
                {
                    i = static_cast<long>(verts.size()) + i + 1;
                }
                if (i < 1)
                {
                    throw ParseError(ctx + ": face index " + tok + " is not a valid 1-based index");
                }
                idx.push_back(static_cast<int>(i - 1));
            }
            if (idx.size() != 3)
            {
                throw ParseError(ctx + ": only triangular faces are supported");
            }
            tris.push_back({idx[0], idx[1], idx[2]});
        }
    }

    Mesh mesh;
    mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i)
    {
        mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
    }
    mesh.triangles = std::move(tris);
    try
    {
        mesh.validate();
    } catch (const InvalidMesh& e)
    {
        throw ParseError(path.string() + ": " + e.what());
    }
    return mesh;
}

inline void write_obj(const std::filesystem::path& path, const Mesh& mesh)
{
    auto out = detail::open_for_writing(path);
    for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i)
    {
        out << "v " << detail::format_double(mesh.vertices(i, 0)) << ' ' << detail::format_double(mesh.vertices(i, 1))
            << ' ' << detail::format_double(mesh.vertices(i, 2)) << '\n';
    }
    for (const auto& t : mesh.triangles)
    {
        out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    }
    if (!out)
    {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

/// Plain text, one 0-based vertex index per line, exactly 68 lines.
inline std::vector<int> read_landmark_table(const std::filesystem::path& path)
{
    auto in = detail::open_for_reading(path);
    std::vector<int> indices;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line))
    {
        ++line_no;
        std::istringstream ls(line);
        std::string tok;
        if (!(ls >> tok))
        {
            continue;
        }
        const long v = detail::parse_int(tok, path.string() + ":" + std::to_string(line_no));
        if (v < 0)
        {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": negative vertex index");
        }
        indices.push_back(static_cast<int>(v));
    }
    if (indices.size() != kNumLandmarks)
    {
        throw ParseError(path.string() + ": expected " + std::to_string(kNumLandmarks) + " landmark indices, found " +
                         std::to_string(indices.size()));
    }
    return indices;
}

inline void write_landmark_table(const std::filesystem::path& path, const std::vector<int>& indices)
{
    auto out = detail::open_for_writing(path);
    for (int i : indices)
    {
        out << i << '\n';
    }
    if (!out)
    {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

/// Loads an OBJ and attaches the landmark table, checking indices against the mesh.
inline Mesh read_mesh_with_landmarks(const std::filesystem::path& obj, const std::filesystem::path& landmarks)
{
    Mesh mesh = read_obj(obj);
    mesh.landmark_indices = read_landmark_table(landmarks);
    try
    {
        mesh.validate();
    } catch (const InvalidMesh& e)
    {
        throw ParseError(landmarks.string() + ": " + e.what());
    }
    return mesh;
}

} // namespace facefit

#endif /* FACEFIT_MESH_IO_HPP */
