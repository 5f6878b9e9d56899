/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/render.hpp
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

#ifndef FACEFIT_RENDER_HPP
#define FACEFIT_RENDER_HPP

#include "facefit/core/binary_io.hpp"
#include "facefit/core/error.hpp"
#include "facefit/core/parallel.hpp"
#include "facefit/geometry.hpp"
#include "facefit/image.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace facefit {

inline constexpr int kEmptyFragment = -1;

/**
 * The visible surface at one pixel: which triangle, where inside it, and the
 * interpolated camera-space depth.
 */
struct Fragment
{
    int triangle = kEmptyFragment;
    Eigen::Vector3d bary = Eigen::Vector3d::Zero();
    double depth = 0.0;

    bool covered() const { return triangle != kEmptyFragment; }
};

class FragmentBuffer
{
public:
    FragmentBuffer() = default;
    FragmentBuffer(int width, int height) : width_(width), height_(height)
    {
        if (width <= 0 || height <= 0)
        {
            throw DimensionMismatch("fragment buffer dimensions must be positive");
        }
        fragments_.resize(static_cast<std::size_t>(width) * height);
    }

    int width() const { return width_; }
    int height() const { return height_; }

    Fragment& at(int row, int col) { return fragments_[static_cast<std::size_t>(row) * width_ + col]; }
    const Fragment& at(int row, int col) const { return fragments_[static_cast<std::size_t>(row) * width_ + col]; }

    const std::vector<Fragment>& fragments() const { return fragments_; }

    Mask coverage() const
    {
        Mask m(fragments_.size());
        for (std::size_t i = 0; i < fragments_.size(); ++i)
        {
            m[i] = fragments_[i].covered() ? 1 : 0;
        }
        return m;
    }

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<Fragment> fragments_;
};

struct RenderOptions
{
    int threads = 1;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

/// (b - a) x (p - a); positive when p is to the left of a->b in image coordinates.
inline double edge_function(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& p)
{
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

inline Eigen::Vector2d pixel_center(int row, int col) { return {col + 0.5, row + 0.5}; }

namespace detail {

struct ScreenTriangle
{
    Eigen::Vector2d p[3];
    double z[3];
    double area = 0.0;
    int row_min = 0, row_max = -1, col_min = 0, col_max = -1;
};

inline std::vector<ScreenTriangle> setup_triangles(const Mesh& mesh, const Projection& proj, int width, int height)
{
    std::vector<ScreenTriangle> out(mesh.triangles.size());
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t)
    {
        auto& st = out[t];
        for (int k = 0; k < 3; ++k)
        {
            const int vi = mesh.triangles[t][k];
            st.p[k] = proj.points.row(vi).transpose();
            st.z[k] = proj.depth[vi];
        }
        st.area = edge_function(st.p[0], st.p[1], st.p[2]);
        if (st.area == 0.0 || !std::isfinite(st.area))
        {
            continue; // degenerate in projection: never drawn
        }
        const double xmin = std::min({st.p[0].x(), st.p[1].x(), st.p[2].x()});
        const double xmax = std::max({st.p[0].x(), st.p[1].x(), st.p[2].x()});
        const double ymin = std::min({st.p[0].y(), st.p[1].y(), st.p[2].y()});
        const double ymax = std::max({st.p[0].y(), st.p[1].y(), st.p[2].y()});
        // Conservative by one pixel; the edge test makes the final decision.
        st.col_min = std::max(0, static_cast<int>(std::floor(xmin - 0.5)));
        st.col_max = std::min(width - 1, static_cast<int>(std::ceil(xmax - 0.5)));
        st.row_min = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
        st.row_max = std::min(height - 1, static_cast<int>(std::ceil(ymax - 0.5)));
    }
    return out;
}

/// Inclusion test with boundary pixels included; fills normalised weights.
inline bool inside(const ScreenTriangle& st, const Eigen::Vector2d& p, Eigen::Vector3d& bary)
{
    double w0 = edge_function(st.p[1], st.p[2], p);
    double w1 = edge_function(st.p[2], st.p[0], p);
    double w2 = edge_function(st.p[0], st.p[1], p);
    if (st.area < 0.0)
    {
        w0 = -w0;
        w1 = -w1;
        w2 = -w2;
    }
    if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0)
    {
        return false;
    }
    const double sum = w0 + w1 + w2;
    bary << w0 / sum, w1 / sum, w2 / sum;
    return true;
}

} // namespace detail

/**
 * Z-buffer rasterisation of the projected mesh. Each pixel centre takes the
 * enclosing triangle with the largest interpolated camera-space depth; exact
 * depth ties go to the lower triangle index. Work is split into fixed row
 * tiles, so the result does not depend on options.threads.
 */
inline FragmentBuffer rasterize(const Mesh& mesh, const CameraParams& cam, int width, int height,
                                const RenderOptions& options = {})
{
    mesh.validate();
    const Projection proj = project(mesh, cam);
    const auto tris = detail::setup_triangles(mesh, proj, width, height);
    FragmentBuffer fb(width, height);

    parallel_for_tiles(num_row_tiles(height), options.threads, [&](int tile) {
        const int r0 = tile * kTileRows;
        const int r1 = std::min(height, r0 + kTileRows);
        Eigen::Vector3d bary;
        for (std::size_t t = 0; t < tris.size(); ++t)
        {
            const auto& st = tris[t];
            if (st.row_max < r0 || st.row_min >= r1 || st.col_max < st.col_min)
            {
                continue;
            }
            const int rb = std::max(r0, st.row_min);
            const int re = std::min(r1 - 1, st.row_max);
            for (int r = rb; r <= re; ++r)
            {
                for (int c = st.col_min; c <= st.col_max; ++c)
                {
                    if (!detail::inside(st, pixel_center(r, c), bary))
                    {
                        continue;
                    }
                    const double depth = bary[0] * st.z[0] + bary[1] * st.z[1] + bary[2] * st.z[2];
                    Fragment& frag = fb.at(r, c);
                    if (!frag.covered() || depth > frag.depth)
                    {
                        frag.triangle = static_cast<int>(t);
                        frag.bary = bary;
                        frag.depth = depth;
                    }
                }
            }
        }
    });
    return fb;
}

/**
 * Reference rasteriser: every pixel against every triangle, no bounding boxes
 * and no tiling. Meant for small scenes in tests.
 */
inline FragmentBuffer brute_force_rasterize(const Mesh& mesh, const CameraParams& cam, int width, int height)
{
    FragmentBuffer fb(width, height);
    if (mesh.vertices.rows() == 0)
    {
        return fb;
    }
    const WeakPerspective camera(cam);
    for (int r = 0; r < height; ++r)
    {
        for (int c = 0; c < width; ++c)
        {
            const Eigen::Vector2d p(c + 0.5, r + 0.5);
            Fragment best;
            for (std::size_t t = 0; t < mesh.triangles.size(); ++t)
            {
                Eigen::Vector2d q[3];
                double z[3];
                for (int k = 0; k < 3; ++k)
                {
                    const Eigen::Vector3d s = mesh.vertices.row(mesh.triangles[t][k]).transpose();
                    q[k] = camera.project(s);
                    z[k] = camera.depth(s);
                }
                const double area = edge_function(q[0], q[1], q[2]);
                if (area == 0.0 || !std::isfinite(area))
                {
                    continue;
                }
                const double sign = area > 0.0 ? 1.0 : -1.0;
                const double e0 = edge_function(q[1], q[2], p);
                const double e1 = edge_function(q[2], q[0], p);
                const double e2 = edge_function(q[0], q[1], p);
                if (sign * e0 < 0.0 || sign * e1 < 0.0 || sign * e2 < 0.0)
                {
                    continue;
                }
                const double total = sign * e0 + sign * e1 + sign * e2;
                const Eigen::Vector3d l(sign * e0 / total, sign * e1 / total, sign * e2 / total);
                const double depth = l[0] * z[0] + l[1] * z[1] + l[2] * z[2];
                if (!best.covered() || depth > best.depth)
                {
                    best.triangle = static_cast<int>(t);
                    best.bary = l;
                    best.depth = depth;
                }
            }
            fb.at(r, c) = best;
        }
    }
    return fb;
}

/// The four texels around a continuous coordinate and the fractional offsets.
struct BilinearTaps
{
    int u0 = 0, u1 = 0, v0 = 0, v1 = 0;
    double fu = 0.0, fv = 0.0;

    double w00() const { return (1.0 - fu) * (1.0 - fv); }
    double w01() const { return (1.0 - fu) * fv; }
    double w10() const { return fu * (1.0 - fv); }
    double w11() const { return fu * fv; }
};

/// Coordinates outside [0, rows-1] x [0, cols-1] are clamped first.
inline BilinearTaps bilinear_taps(int rows, int cols, const UVCoord& uv)
{
    if (rows <= 0 || cols <= 0)
    {
        throw DimensionMismatch("cannot sample an empty texture");
    }
    const double u = std::clamp(uv.u, 0.0, static_cast<double>(rows - 1));
    const double v = std::clamp(uv.v, 0.0, static_cast<double>(cols - 1));
    BilinearTaps t;
    t.u0 = static_cast<int>(std::floor(u));
    t.v0 = static_cast<int>(std::floor(v));
    t.fu = u - t.u0;
    t.fv = v - t.v0;
    t.u1 = std::min(t.u0 + 1, rows - 1);
    t.v1 = std::min(t.v0 + 1, cols - 1);
    return t;
}

/// Bilinear texture lookup with weights (1 - |u - u'|)(1 - |v - v'|).
inline Eigen::Vector3d sample_bilinear(const Texture& tex, const UVCoord& uv)
{
    const auto t = bilinear_taps(tex.rows(), tex.cols(), uv);
    return t.w00() * tex.pixel(t.u0, t.v0) + t.w01() * tex.pixel(t.u0, t.v1) + t.w10() * tex.pixel(t.u1, t.v0) +
           t.w11() * tex.pixel(t.u1, t.v1);
}

/// Per-vertex UVs and sampled colours for one (shape, texture) pair.
struct VertexShading
{
    std::vector<UVSample> uv;
    std::vector<Eigen::Vector3d> color;
};

inline VertexShading shade_vertices(const Vertices& vertices, const Texture& tex, const UnwarpConstants& consts)
{
    consts.validate();
    VertexShading s;
    s.uv.reserve(vertices.rows());
    s.color.reserve(vertices.rows());
    for (Eigen::Index i = 0; i < vertices.rows(); ++i)
    {
        s.uv.push_back(unwarp_uv_with_jacobian(vertices.row(i).transpose(), consts, tex.rows(), tex.cols()));
        s.color.push_back(sample_bilinear(tex, s.uv.back().uv));
    }
    return s;
}

struct RenderedImage
{
    ColorImage pixels;
    Mask coverage;
};

namespace detail {

inline void check_fragments(const Mesh& mesh, const FragmentBuffer& fb)
{
    for (const auto& f : fb.fragments())
    {
        if (f.triangle >= mesh.num_triangles())
        {
            throw StaleFragments("fragment buffer references triangle " + std::to_string(f.triangle) +
                                 " but the mesh has " + std::to_string(mesh.num_triangles()));
        }
    }
}

} // namespace detail

/// Colours an existing fragment buffer: sum over the triangle's vertices of lambda_i * T(uv_i).
inline RenderedImage shade_fragments(const Mesh& mesh, const Texture& tex, const UnwarpConstants& consts,
                                     const FragmentBuffer& fb, const RenderOptions& options = {})
{
    detail::check_fragments(mesh, fb);
    const VertexShading shading = shade_vertices(mesh.vertices, tex, consts);
    RenderedImage out{ColorImage(fb.height(), fb.width()), fb.coverage()};
    parallel_for_tiles(num_row_tiles(fb.height()), options.threads, [&](int tile) {
        const int r0 = tile * kTileRows;
        const int r1 = std::min(fb.height(), r0 + kTileRows);
        for (int r = r0; r < r1; ++r)
        {
            for (int c = 0; c < fb.width(); ++c)
            {
                const Fragment& f = fb.at(r, c);
                if (!f.covered())
                {
                    out.pixels.set_pixel(r, c, options.background);
                    continue;
                }
                const auto& tri = mesh.triangles[f.triangle];
                const Eigen::Vector3d rgb = f.bary[0] * shading.color[tri[0]] + f.bary[1] * shading.color[tri[1]] +
                                            f.bary[2] * shading.color[tri[2]];
                out.pixels.set_pixel(r, c, rgb);
            }
        }
    });
    return out;
}

inline RenderedImage render(const Mesh& mesh, const CameraParams& cam, const Texture& tex,
                            const UnwarpConstants& consts, int width, int height, const RenderOptions& options = {})
{
    const FragmentBuffer fb = rasterize(mesh, cam, width, height, options);
    return shade_fragments(mesh, tex, consts, fb, options);
}

struct RenderGradients
{
    Texture d_texture;
    Vertices d_vertices;
    Vector6d d_camera = Vector6d::Zero();
};

/**
 * Exact gradient of sum_pixels <upstream, rendered> with the visibility in
 * `fb` held fixed. Three paths reach the inputs:
 *   - texture: the vertex colour gradient scattered through the bilinear taps;
 *   - vertices: through the barycentric weights (projected positions) and
 *     through each vertex's UV coordinate;
 *   - camera: through the projected positions only.
 * Partial sums are kept per row tile and reduced in tile order.
 */
inline RenderGradients render_backward(const Mesh& mesh, const CameraParams& cam, const Texture& tex,
                                       const UnwarpConstants& consts, const FragmentBuffer& fb,
                                       const ColorImage& upstream, const RenderOptions& options = {})
{
    if (upstream.rows() != fb.height() || upstream.cols() != fb.width())
    {
        throw StaleFragments("upstream gradient is " + std::to_string(upstream.rows()) + "x" +
                             std::to_string(upstream.cols()) + " but fragments are " + std::to_string(fb.height()) +
                             "x" + std::to_string(fb.width()));
    }
    detail::check_fragments(mesh, fb);

    const int q = mesh.num_vertices();
    const VertexShading shading = shade_vertices(mesh.vertices, tex, consts);
    const Projection proj = project(mesh, cam);

    const int num_tiles = num_row_tiles(fb.height());
    std::vector<Eigen::MatrixXd> tile_color(num_tiles);
    std::vector<Eigen::MatrixXd> tile_point(num_tiles);

    parallel_for_tiles(num_tiles, options.threads, [&](int tile) {
        Eigen::MatrixXd d_color = Eigen::MatrixXd::Zero(q, 3);
        Eigen::MatrixXd d_point = Eigen::MatrixXd::Zero(q, 2);
        const int r0 = tile * kTileRows;
        const int r1 = std::min(fb.height(), r0 + kTileRows);
        for (int r = r0; r < r1; ++r)
        {
            for (int c = 0; c < fb.width(); ++c)
            {
                const Fragment& f = fb.at(r, c);
                if (!f.covered())
                {
                    continue;
                }
                const Eigen::Vector3d g = upstream.pixel(r, c);
                if (g.isZero(0.0))
                {
                    continue;
                }
                const auto& tri = mesh.triangles[f.triangle];
                const Eigen::Vector2d p = pixel_center(r, c);
                Eigen::Vector2d pts[3];
                double dl_dlambda[3];
                for (int k = 0; k < 3; ++k)
                {
                    pts[k] = proj.points.row(tri[k]).transpose();
                    d_color.row(tri[k]) += f.bary[k] * g.transpose();
                    dl_dlambda[k] = g.dot(shading.color[tri[k]]);
                }
                // lambda_k = w_k / (w_0 + w_1 + w_2) with w_k the edge function
                // opposite vertex k, so dL = sum_k h_k dw_k.
                const double w_sum = edge_function(pts[1], pts[2], p) + edge_function(pts[2], pts[0], p) +
                                     edge_function(pts[0], pts[1], p);
                const double mean = f.bary[0] * dl_dlambda[0] + f.bary[1] * dl_dlambda[1] + f.bary[2] * dl_dlambda[2];
                for (int k = 0; k < 3; ++k)
                {
                    const double h = (dl_dlambda[k] - mean) / w_sum;
                    if (h == 0.0)
                    {
                        continue;
                    }
                    // w_k = edge_function(a, b, p) with a, b the two other vertices.
                    const int ia = (k + 1) % 3;
                    const int ib = (k + 2) % 3;
                    const Eigen::Vector2d& a = pts[ia];
                    const Eigen::Vector2d& b = pts[ib];
                    d_point(tri[ia], 0) += h * (b.y() - p.y());
                    d_point(tri[ia], 1) += h * (p.x() - b.x());
                    d_point(tri[ib], 0) += h * (p.y() - a.y());
                    d_point(tri[ib], 1) += h * (a.x() - p.x());
                }
            }
        }
        tile_color[tile] = std::move(d_color);
        tile_point[tile] = std::move(d_point);
    });

    Eigen::MatrixXd d_color = Eigen::MatrixXd::Zero(q, 3);
    Eigen::MatrixXd d_point = Eigen::MatrixXd::Zero(q, 2);
    for (int t = 0; t < num_tiles; ++t)
    {
        d_color += tile_color[t];
        d_point += tile_point[t];
    }

    RenderGradients out;
    out.d_texture = Texture(tex.rows(), tex.cols());
    out.d_vertices = Vertices::Zero(q, 3);
    const WeakPerspective camera(cam);
    const Eigen::Matrix<double, 2, 3> j_vertex = camera.vertex_jacobian();
    for (int i = 0; i < q; ++i)
    {
        const Eigen::Vector2d dp = d_point.row(i).transpose();
        const Eigen::Vector3d dc = d_color.row(i).transpose();
        const Eigen::Vector3d s = mesh.vertices.row(i).transpose();
        if (!dp.isZero(0.0))
        {
            out.d_camera += camera.camera_jacobian(s).transpose() * dp;
            out.d_vertices.row(i) += (j_vertex.transpose() * dp).transpose();
        }
        if (dc.isZero(0.0))
        {
            continue;
        }
        const UVSample& uv = shading.uv[i];
        const auto t = bilinear_taps(tex.rows(), tex.cols(), uv.uv);
        for (int ch = 0; ch < 3; ++ch)
        {
            out.d_texture(t.u0, t.v0, ch) += t.w00() * dc[ch];
            out.d_texture(t.u0, t.v1, ch) += t.w01() * dc[ch];
            out.d_texture(t.u1, t.v0, ch) += t.w10() * dc[ch];
            out.d_texture(t.u1, t.v1, ch) += t.w11() * dc[ch];
        }
        // Colour derivative along u and v of the bilinear patch.
        const Eigen::Vector3d t00 = tex.pixel(t.u0, t.v0), t01 = tex.pixel(t.u0, t.v1);
        const Eigen::Vector3d t10 = tex.pixel(t.u1, t.v0), t11 = tex.pixel(t.u1, t.v1);
        const Eigen::Vector3d dc_du = (1.0 - t.fv) * (t10 - t00) + t.fv * (t11 - t01);
        const Eigen::Vector3d dc_dv = (1.0 - t.fu) * (t01 - t00) + t.fu * (t11 - t10);
        const Eigen::Vector2d d_uv(dc.dot(dc_du), dc.dot(dc_dv));
        out.d_vertices.row(i) += (uv.jacobian.transpose() * d_uv).transpose();
    }
    return out;
}

struct UnwarpOptions
{
    /// Visibility tolerance as a fraction of the projected mesh's depth extent.
    double depth_tolerance = 0.02;
    int threads = 1;
};

struct UVUnwarp
{
    Texture texture;
    Mask valid;
    double valid_fraction = 0.0;
};

/**
 * Builds a texture by reading the image back through the UV parameterisation:
 * every texel is located on the surface (by rasterising the mesh in UV space),
 * projected with `cam`, and bilinearly read from the image if that surface
 * point is the visible one. Only triangles with all vertices at z > 0 (the
 * branch of the cylindrical unwarp facing +z) are used to locate texels.
 * Texels that fall outside the frame, are occluded, or whose read touches
 * uncovered pixels are marked invalid.
 */
inline UVUnwarp unwarp_image_to_uv(const ColorImage& image, const Mesh& mesh, const CameraParams& cam,
                                   const UnwarpConstants& consts, int tex_rows, int tex_cols,
                                   const UnwarpOptions& options = {})
{
    if (tex_rows <= 0 || tex_cols <= 0)
    {
        throw DimensionMismatch("texture dimensions must be positive");
    }
    consts.validate();
    const int width = image.cols();
    const int height = image.rows();
    const FragmentBuffer fb = rasterize(mesh, cam, width, height, {.threads = options.threads});
    const Projection proj = project(mesh, cam);
    const double depth_extent = proj.depth.size() > 0 ? proj.depth.maxCoeff() - proj.depth.minCoeff() : 0.0;
    const double tol = options.depth_tolerance * std::max(depth_extent, 1e-12);

    std::vector<Eigen::Vector2d> uv(mesh.num_vertices());
    for (int i = 0; i < mesh.num_vertices(); ++i)
    {
        const UVCoord c = unwarp_uv(mesh.vertices.row(i).transpose(), consts, tex_rows, tex_cols);
        uv[i] = {c.v, c.u}; // x = column, y = row
    }

    // Texel -> (triangle, barycentric) in UV space; lowest triangle index wins.
    std::vector<int> texel_tri(static_cast<std::size_t>(tex_rows) * tex_cols, kEmptyFragment);
    std::vector<Eigen::Vector3d> texel_bary(texel_tri.size());
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t)
    {
        const auto& tri = mesh.triangles[t];
        if (mesh.vertices(tri[0], 2) <= 0.0 || mesh.vertices(tri[1], 2) <= 0.0 || mesh.vertices(tri[2], 2) <= 0.0)
        {
            continue;
        }
        detail::ScreenTriangle st;
        for (int k = 0; k < 3; ++k)
        {
            st.p[k] = uv[tri[k]];
        }
        st.area = edge_function(st.p[0], st.p[1], st.p[2]);
        if (st.area == 0.0)
        {
            continue;
        }
        const int cmin = std::max(0, static_cast<int>(std::ceil(std::min({st.p[0].x(), st.p[1].x(), st.p[2].x()}))));
        const int cmax = std::min(tex_cols - 1,
                                  static_cast<int>(std::floor(std::max({st.p[0].x(), st.p[1].x(), st.p[2].x()}))));
        const int rmin = std::max(0, static_cast<int>(std::ceil(std::min({st.p[0].y(), st.p[1].y(), st.p[2].y()}))));
        const int rmax = std::min(tex_rows - 1,
                                  static_cast<int>(std::floor(std::max({st.p[0].y(), st.p[1].y(), st.p[2].y()}))));
        Eigen::Vector3d bary;
        for (int r = rmin; r <= rmax; ++r)
        {
            for (int c = cmin; c <= cmax; ++c)
            {
                const std::size_t idx = static_cast<std::size_t>(r) * tex_cols + c;
                if (texel_tri[idx] != kEmptyFragment)
                {
                    continue;
                }
                if (detail::inside(st, Eigen::Vector2d(c, r), bary))
                {
                    texel_tri[idx] = static_cast<int>(t);
                    texel_bary[idx] = bary;
                }
            }
        }
    }

    UVUnwarp out{Texture(tex_rows, tex_cols), Mask(texel_tri.size(), 0), 0.0};
    std::size_t valid_count = 0;
    for (int r = 0; r < tex_rows; ++r)
    {
        for (int c = 0; c < tex_cols; ++c)
        {
            const std::size_t idx = static_cast<std::size_t>(r) * tex_cols + c;
            const int t = texel_tri[idx];
            if (t == kEmptyFragment)
            {
                continue;
            }
            const auto& tri = mesh.triangles[t];
            const Eigen::Vector3d& l = texel_bary[idx];
            Eigen::Vector2d pts[3];
            for (int k = 0; k < 3; ++k)
            {
                pts[k] = proj.points.row(tri[k]).transpose();
            }
            const Eigen::Vector2d x = l[0] * pts[0] + l[1] * pts[1] + l[2] * pts[2];
            const int pr = static_cast<int>(std::floor(x.y()));
            const int pc = static_cast<int>(std::floor(x.x()));
            if (pr < 0 || pc < 0 || pr >= height || pc >= width)
            {
                continue;
            }
            const Fragment& frag = fb.at(pr, pc);
            if (!frag.covered())
            {
                continue;
            }
            // Depth of this texel's triangle plane at the pixel centre.
            const double area = edge_function(pts[0], pts[1], pts[2]);
            if (area == 0.0)
            {
                continue;
            }
            const Eigen::Vector2d pc_center = pixel_center(pr, pc);
            const double m0 = edge_function(pts[1], pts[2], pc_center) / area;
            const double m1 = edge_function(pts[2], pts[0], pc_center) / area;
            const double m2 = 1.0 - m0 - m1;
            const double plane_depth = m0 * proj.depth[tri[0]] + m1 * proj.depth[tri[1]] + m2 * proj.depth[tri[2]];
            // Neighbours across a ridge disagree in plane depth but are both visible.
            const auto& seen = mesh.triangles[frag.triangle];
            const bool adjacent = std::any_of(seen.begin(), seen.end(), [&](int v) {
                return v == tri[0] || v == tri[1] || v == tri[2];
            });
            if (!adjacent && std::abs(plane_depth - frag.depth) > tol)
            {
                continue;
            }
            // Bilinear read at continuous pixel-index coordinates.
            const auto taps = bilinear_taps(height, width, UVCoord{x.y() - 0.5, x.x() - 0.5});
            auto covered = [&](int rr, int cc, double w) { return w == 0.0 || fb.at(rr, cc).covered(); };
            if (!covered(taps.u0, taps.v0, taps.w00()) || !covered(taps.u0, taps.v1, taps.w01()) ||
                !covered(taps.u1, taps.v0, taps.w10()) || !covered(taps.u1, taps.v1, taps.w11()))
            {
                continue;
            }
            out.texture.set_pixel(r, c, sample_bilinear(image, UVCoord{x.y() - 0.5, x.x() - 0.5}));
            out.valid[idx] = 1;
            ++valid_count;
        }
    }
    out.valid_fraction = static_cast<double>(valid_count) / static_cast<double>(texel_tri.size());
    return out;
}

/**
 * Pixels whose centre lies more than `min_distance` pixels inside its own
 * visible triangle and whose 8 neighbours see the same triangle. On these
 * pixels the fixed-visibility derivative is the true derivative.
 */
inline Mask interior_pixel_mask(const Mesh& mesh, const CameraParams& cam, const FragmentBuffer& fb,
                                double min_distance = 1.0)
{
    detail::check_fragments(mesh, fb);
    const Projection proj = project(mesh, cam);
    Mask mask(static_cast<std::size_t>(fb.width()) * fb.height(), 0);
    const int reach = static_cast<int>(std::ceil(min_distance));
    for (int r = 0; r < fb.height(); ++r)
    {
        for (int c = 0; c < fb.width(); ++c)
        {
            const Fragment& f = fb.at(r, c);
            if (!f.covered())
            {
                continue;
            }
            bool ok = true;
            for (int dr = -reach; dr <= reach && ok; ++dr)
            {
                for (int dc = -reach; dc <= reach && ok; ++dc)
                {
                    const int rr = r + dr, cc = c + dc;
                    ok = rr >= 0 && cc >= 0 && rr < fb.height() && cc < fb.width() &&
                         fb.at(rr, cc).triangle == f.triangle;
                }
            }
            if (!ok)
            {
                continue;
            }
            const auto& tri = mesh.triangles[f.triangle];
            const Eigen::Vector2d p = pixel_center(r, c);
            for (int k = 0; k < 3 && ok; ++k)
            {
                const Eigen::Vector2d a = proj.points.row(tri[k]).transpose();
                const Eigen::Vector2d b = proj.points.row(tri[(k + 1) % 3]).transpose();
                const double len = (b - a).norm();
                ok = len > 0.0 && std::abs(edge_function(a, b, p)) / len > min_distance;
            }
            mask[static_cast<std::size_t>(r) * fb.width() + c] = ok ? 1 : 0;
        }
    }
    return mask;
}

// Fragment buffer dump, little-endian:
//   char[4] "FFFB" | u32 version (1) | u32 width | u32 height |
//   per pixel, row-major: i32 triangle (-1 = empty) | f64 l1 | f64 l2 | f64 l3 | f64 depth


inline void write_fragment_buffer(const std::filesystem::path& path, const FragmentBuffer& fb)
{
    std::vector<unsigned char> bytes{'F', 'F', 'F', 'B'};
    detail::put_u32(bytes, 1);
    detail::put_u32(bytes, static_cast<std::uint32_t>(fb.width()));
    detail::put_u32(bytes, static_cast<std::uint32_t>(fb.height()));
    for (const auto& f : fb.fragments())
    {
        detail::put_u32(bytes, static_cast<std::uint32_t>(f.triangle));
        detail::put_f64(bytes, f.bary[0]);
        detail::put_f64(bytes, f.bary[1]);
        detail::put_f64(bytes, f.bary[2]);
        detail::put_f64(bytes, f.depth);
    }
    detail::write_all_bytes(path, bytes);
}

inline FragmentBuffer read_fragment_buffer(const std::filesystem::path& path)
{
    const auto bytes = detail::read_all_bytes(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "FFFB", 4) != 0)
    {
        throw ParseError(path.string() + ": not a fragment buffer dump");
    }
    if (detail::get_u32(bytes.data() + 4) != 1)
    {
        throw ParseError(path.string() + ": unsupported fragment buffer version");
    }
    const auto width = detail::get_u32(bytes.data() + 8);
    const auto height = detail::get_u32(bytes.data() + 12);
    constexpr std::size_t kRecord = 4 + 4 * 8;
    if (width == 0 || height == 0 || bytes.size() != 16 + kRecord * width * height)
    {
        throw ParseError(path.string() + ": fragment buffer size does not match its header");
    }
    FragmentBuffer fb(static_cast<int>(width), static_cast<int>(height));
    const unsigned char* p = bytes.data() + 16;
    for (std::uint32_t r = 0; r < height; ++r)
    {
        for (std::uint32_t c = 0; c < width; ++c, p += kRecord)
        {
            Fragment& f = fb.at(static_cast<int>(r), static_cast<int>(c));
            f.triangle = static_cast<std::int32_t>(detail::get_u32(p));
            f.bary << detail::get_f64(p + 4), detail::get_f64(p + 12), detail::get_f64(p + 20);
            f.depth = detail::get_f64(p + 28);
        }
    }
    return fb;
}

} // namespace facefit

#endif /* FACEFIT_RENDER_HPP */
