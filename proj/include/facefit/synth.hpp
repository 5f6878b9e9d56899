/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/synth.hpp
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

#ifndef FACEFIT_SYNTH_HPP
#define FACEFIT_SYNTH_HPP

// Desk-scale synthetic heads: a grid mesh over the front of an ellipsoid with
// a nose bump, a 68-point landmark table, seeded smooth blend-shape offsets
// and procedural textures.

#include "facefit/core/error.hpp"
#include "facefit/geometry.hpp"
#include "facefit/image.hpp"

#include "Eigen/Core"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace facefit {

struct FaceGridSpec
{
    int rows = 33;           ///< vertex rows, top to bottom
    int cols = 29;           ///< vertex columns, left to right
    double theta_max = 1.2;  ///< half azimuth range in radians
    double half_height = 1.2;
};

namespace detail {

inline double legendre(int n, double x)
{
    switch (n)
    {
    case 0:
        return 1.0;
    case 1:
        return x;
    case 2:
        return 0.5 * (3.0 * x * x - 1.0);
    default:
        return 0.5 * (5.0 * x * x * x - 3.0 * x);
    }
}

inline int grid_index(const FaceGridSpec& g, int row, int col) { return row * g.cols + col; }

/// Normalised grid coordinates (h in [-1, 1] left to right, t in [-1, 1] bottom to top) of a vertex.
inline std::array<double, 2> grid_coords(const FaceGridSpec& g, int index)
{
    const int row = index / g.cols;
    const int col = index % g.cols;
    return {2.0 * col / (g.cols - 1) - 1.0, 1.0 - 2.0 * row / (g.rows - 1)};
}

inline int nearest_grid_vertex(const FaceGridSpec& g, double h, double t)
{
    const int col = static_cast<int>(std::lround((h + 1.0) * 0.5 * (g.cols - 1)));
    const int row = static_cast<int>(std::lround((1.0 - t) * 0.5 * (g.rows - 1)));
    return grid_index(g, std::clamp(row, 0, g.rows - 1), std::clamp(col, 0, g.cols - 1));
}

/// 68 points in the conventional face layout, in normalised grid coordinates.
inline std::vector<std::array<double, 2>> landmark_layout()
{
    std::vector<std::array<double, 2>> p;
    for (int s = 0; s <= 16; ++s) // jaw line
    {
        const double phi = std::numbers::pi * s / 16.0;
        p.push_back({-0.85 * std::cos(phi), 0.1 - 0.85 * std::sin(phi)});
    }
    for (int s = 0; s < 5; ++s) // brows
    {
        p.push_back({-0.7 + 0.13 * s, 0.5 + 0.05 * std::sin(std::numbers::pi * s / 4.0)});
    }
    for (int s = 0; s < 5; ++s)
    {
        p.push_back({0.18 + 0.13 * s, 0.5 + 0.05 * std::sin(std::numbers::pi * s / 4.0)});
    }
    for (int s = 0; s < 4; ++s) // nose bridge
    {
        p.push_back({0.0, 0.32 - 0.11 * s});
    }
    for (int s = 0; s < 5; ++s) // nostrils
    {
        p.push_back({-0.16 + 0.08 * s, -0.08});
    }
    auto eye = [&](double cx) {
        // corner, two upper points, corner, two lower points; left to right in h
        const double rx = 0.18, ry = 0.06, cy = 0.3;
        for (double a : {180.0, 120.0, 60.0, 0.0, 300.0, 240.0})
        {
            const double rad = a * std::numbers::pi / 180.0;
            p.push_back({cx + rx * std::cos(rad), cy + ry * std::sin(rad)});
        }
    };
    eye(-0.38);
    eye(0.38);
    for (int s = 0; s < 12; ++s) // outer lip contour
    {
        const double a = std::numbers::pi - 2.0 * std::numbers::pi * s / 12.0;
        p.push_back({0.38 * std::cos(a), -0.45 + 0.13 * std::sin(a)});
    }
    for (int s = 0; s < 8; ++s) // inner lip contour
    {
        const double a = std::numbers::pi - 2.0 * std::numbers::pi * s / 8.0;
        p.push_back({0.22 * std::cos(a), -0.45 + 0.05 * std::sin(a)});
    }
    return p;
}

} // namespace detail

/**
 * Front half of an ellipsoid sampled on a rows x cols grid, with a nose bump.
 * Triangles are wound counter-clockwise seen from +z; every vertex has z > 0.
 */
inline Mesh base_face_mesh(const FaceGridSpec& g = {})
{
    if (g.rows < 8 || g.cols < 8)
    {
        throw InvalidMesh("face grid needs at least 8 x 8 vertices");
    }
    Mesh mesh;
    mesh.vertices.resize(static_cast<Eigen::Index>(g.rows) * g.cols, 3);
    for (int i = 0; i < g.rows * g.cols; ++i)
    {
        const auto [h, t] = detail::grid_coords(g, i);
        const double theta = h * g.theta_max;
        const double y = t * g.half_height;
        const double ring = std::sqrt(1.0 - 0.45 * t * t);
        double x = 0.95 * ring * std::sin(theta);
        double z = 1.05 * ring * std::cos(theta);
        z += 0.3 * std::exp(-(x * x) / 0.02 - (y + 0.02) * (y + 0.02) / 0.12);
        mesh.vertices.row(i) << x, y, z;
    }
    for (int r = 0; r + 1 < g.rows; ++r)
    {
        for (int c = 0; c + 1 < g.cols; ++c)
        {
            const int a = detail::grid_index(g, r, c), b = detail::grid_index(g, r, c + 1);
            const int cc = detail::grid_index(g, r + 1, c), d = detail::grid_index(g, r + 1, c + 1);
            mesh.triangles.push_back({a, cc, b});
            mesh.triangles.push_back({b, cc, d});
        }
    }
    for (const auto& [h, t] : detail::landmark_layout())
    {
        mesh.landmark_indices.push_back(detail::nearest_grid_vertex(g, h, t));
    }
    mesh.validate();
    return mesh;
}

/// Linear family base + sum_k coeffs_k * scales_k * modes_k of smooth offsets.
struct BlendShapeFamily
{
    Mesh base;
    std::vector<Vertices> modes; ///< unit RMS per-vertex displacement
    std::vector<double> scales;

    int num_modes() const { return static_cast<int>(modes.size()); }

    Mesh mesh(const Eigen::VectorXd& coeffs) const
    {
        require_dims(coeffs.size() == num_modes(), "blend-shape coefficient count does not match the family");
        Mesh m = base;
        for (int k = 0; k < num_modes(); ++k)
        {
            m.vertices += coeffs[k] * scales[k] * modes[k];
        }
        return m;
    }

    /// Standard normal coefficients.
    Eigen::VectorXd draw(std::mt19937_64& rng) const
    {
        std::normal_distribution<double> normal;
        Eigen::VectorXd c(num_modes());
        for (int k = 0; k < num_modes(); ++k)
        {
            c[k] = normal(rng);
        }
        return c;
    }
};

/**
 * Seeded family of `num_modes` smooth displacement fields: each coordinate is
 * a random combination of products of low-order Legendre polynomials in the
 * grid coordinates. Mode k has scale amplitude / (1 + 0.25 k).
 */
inline BlendShapeFamily make_blendshape_family(const Mesh& base, int num_modes, std::uint64_t seed,
                                               const FaceGridSpec& g = {}, double amplitude = 0.06)
{
    require_dims(base.num_vertices() == g.rows * g.cols, "base mesh does not match the face grid");
    if (num_modes <= 0)
    {
        throw Error("blend-shape family needs at least one mode");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    BlendShapeFamily fam;
    fam.base = base;
    for (int k = 0; k < num_modes; ++k)
    {
        double w[3][4][4];
        for (auto& axis : w)
            for (auto& row : axis)
                for (double& x : row)
                    x = normal(rng);
        Vertices mode(base.num_vertices(), 3);
        for (int i = 0; i < base.num_vertices(); ++i)
        {
            const auto [h, t] = detail::grid_coords(g, i);
            for (int a = 0; a < 3; ++a)
            {
                double s = 0.0;
                for (int p = 0; p < 4; ++p)
                    for (int q = 0; q < 4; ++q)
                        s += w[a][p][q] * detail::legendre(p, h) * detail::legendre(q, t);
                mode(i, a) = s;
            }
        }
        mode /= std::sqrt(mode.squaredNorm() / base.num_vertices());
        fam.modes.push_back(std::move(mode));
        fam.scales.push_back(amplitude / (1.0 + 0.25 * k));
    }
    return fam;
}

/**
 * Nonlinear two-parameter family. The lower face rotates about a horizontal
 * axis through the jaw pivot by up to `jaw_angle`, with a weight that fades
 * smoothly from chin to brow, and the head twists about the vertical axis by
 * `twist` * y / y_max. Neither motion lies in a low-dimensional linear space.
 */
inline Vertices articulated_shape(const Mesh& base, double jaw_angle, double twist)
{
    Vertices v = base.vertices;
    const double y_max = base.vertices.col(1).cwiseAbs().maxCoeff();
    const double pivot_y = 0.1, pivot_z = -0.3;
    for (Eigen::Index i = 0; i < v.rows(); ++i)
    {
        const double y = v(i, 1);
        const double a = jaw_angle / (1.0 + std::exp((y + 0.2) / 0.25));
        const double dy = y - pivot_y, dz = v(i, 2) - pivot_z;
        v(i, 1) = pivot_y + std::cos(a) * dy - std::sin(a) * dz;
        v(i, 2) = pivot_z + std::sin(a) * dy + std::cos(a) * dz;
        const double b = twist * y / y_max;
        const double x = v(i, 0), z = v(i, 2);
        v(i, 0) = std::cos(b) * x + std::sin(b) * z;
        v(i, 2) = -std::sin(b) * x + std::cos(b) * z;
    }
    return v;
}

/// Linear texture family mean + sum_k coeffs_k * modes_k.
struct TextureFamily
{
    Texture mean;
    std::vector<Texture> modes;

    Texture texture(const Eigen::VectorXd& coeffs) const
    {
        require_dims(coeffs.size() == static_cast<Eigen::Index>(modes.size()),
                     "texture coefficient count does not match the family");
        Eigen::VectorXd t = mean.as_vector();
        for (std::size_t k = 0; k < modes.size(); ++k)
        {
            t += coeffs[static_cast<Eigen::Index>(k)] * modes[k].as_vector();
        }
        return Texture::from_vector(mean.rows(), mean.cols(), t);
    }

    Eigen::VectorXd draw(std::mt19937_64& rng) const
    {
        std::uniform_real_distribution<double> uniform(-1.0, 1.0);
        Eigen::VectorXd c(static_cast<Eigen::Index>(modes.size()));
        for (auto& x : c)
        {
            x = uniform(rng);
        }
        return c;
    }
};

/**
 * Procedural skin-like texture family on a rows x cols UV grid: a base tone
 * with darker eye regions and redder lips placed at the landmarks' texel
 * positions, plus seeded low-frequency colour waves as modes (each mode stays
 * within +/- 0.05 per channel, so |coeffs| <= 1 keeps values in [0, 1]).
 */
inline TextureFamily make_texture_family(const Mesh& base, const UnwarpConstants& consts, int rows, int cols,
                                         int num_modes, std::uint64_t seed)
{
    if (rows <= 0 || cols <= 0 || num_modes < 0)
    {
        throw DimensionMismatch("texture family dimensions must be positive");
    }
    const auto texel = [&](int landmark) {
        return unwarp_uv(base.vertices.row(base.landmark_indices.at(landmark)).transpose(), consts, rows, cols);
    };
    const UVCoord eye_r = texel(36), eye_r_in = texel(39), eye_l = texel(45), eye_l_in = texel(42);
    const UVCoord mouth_l = texel(48), mouth_r = texel(54);
    const double eye_u = 0.5 * (eye_r.u + eye_l.u);
    const double eye_v1 = 0.5 * (eye_r.v + eye_r_in.v), eye_v2 = 0.5 * (eye_l.v + eye_l_in.v);
    const double mouth_u = 0.5 * (mouth_l.u + mouth_r.u), mouth_v = 0.5 * (mouth_l.v + mouth_r.v);
    const double eye_w = std::max(2.0, 0.5 * std::abs(eye_r.v - eye_r_in.v));
    const double mouth_w = std::max(3.0, 0.5 * std::abs(mouth_r.v - mouth_l.v));

    TextureFamily fam;
    fam.mean = Texture(rows, cols);
    for (int u = 0; u < rows; ++u)
    {
        for (int v = 0; v < cols; ++v)
        {
            const double fu = static_cast<double>(u) / rows, fv = static_cast<double>(v) / cols;
            Eigen::Vector3d c(0.78, 0.58, 0.47);
            c += 0.08 * Eigen::Vector3d(1.0, 0.8, 0.7) * std::sin(2.0 * std::numbers::pi * (fu + 0.5 * fv));
            c += 0.05 * Eigen::Vector3d(0.4, 1.0, 0.6) * std::cos(2.0 * std::numbers::pi * (1.5 * fv - 0.3));
            auto blob = [&](double cu, double cv, double su, double sv) {
                return std::exp(-((u - cu) * (u - cu)) / (2 * su * su) - ((v - cv) * (v - cv)) / (2 * sv * sv));
            };
            const double eyes = blob(eye_u, eye_v1, 1.8, eye_w) + blob(eye_u, eye_v2, 1.8, eye_w);
            const double lips = blob(mouth_u, mouth_v, 2.0, mouth_w);
            c += eyes * Eigen::Vector3d(-0.45, -0.35, -0.28);
            c += lips * Eigen::Vector3d(0.05, -0.25, -0.2);
            fam.mean.set_pixel(u, v, c.cwiseMax(0.06).cwiseMin(0.94));
        }
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (int k = 0; k < num_modes; ++k)
    {
        const double ku = 0.5 + 1.5 * uniform(rng), kv = 0.5 + 1.5 * uniform(rng);
        const double phase = 2.0 * std::numbers::pi * uniform(rng);
        const Eigen::Vector3d tint(uniform(rng) - 0.5, uniform(rng) - 0.5, uniform(rng) - 0.5);
        Texture mode(rows, cols);
        for (int u = 0; u < rows; ++u)
        {
            for (int v = 0; v < cols; ++v)
            {
                const double s = std::sin(2.0 * std::numbers::pi * (ku * u / rows + kv * v / cols) + phase);
                mode.set_pixel(u, v, 0.1 * s * tint);
            }
        }
        fam.modes.push_back(std::move(mode));
    }
    return fam;
}

/// Camera looking at the synthetic head, upright in the image (roll = pi flips the y axis).
inline CameraParams default_camera(int width, int height)
{
    CameraParams cam;
    cam.f = std::min(width, height) / 3.0;
    cam.pitch = 0.0;
    cam.yaw = 0.0;
    cam.roll = std::numbers::pi;
    cam.tx = width / 2.0;
    cam.ty = height / 2.0;
    return cam;
}

struct SyntheticScene
{
    Mesh mesh;
    Texture texture;
    CameraParams cam;
    UnwarpConstants consts;
    Eigen::VectorXd shape_coeffs;
    Eigen::VectorXd texture_coeffs;
    int width = 64;
    int height = 64;
};

/// Everything needed to draw seeded scenes from one synthetic head family.
struct SyntheticWorld
{
    FaceGridSpec grid;
    BlendShapeFamily shapes;
    TextureFamily textures;
    UnwarpConstants consts;
    int tex_rows = 64;
    int tex_cols = 64;

    static SyntheticWorld create(std::uint64_t seed, int num_shape_modes = 12, int num_texture_modes = 8,
                                 int tex_rows = 64, int tex_cols = 64, const FaceGridSpec& grid = {})
    {
        SyntheticWorld w;
        w.grid = grid;
        w.tex_rows = tex_rows;
        w.tex_cols = tex_cols;
        const Mesh base = base_face_mesh(grid);
        w.consts = UnwarpConstants::for_mesh(base.vertices, tex_rows, tex_cols);
        w.shapes = make_blendshape_family(base, num_shape_modes, seed, grid);
        w.textures = make_texture_family(base, w.consts, tex_rows, tex_cols, num_texture_modes, seed + 1);
        return w;
    }

    /**
     * A seeded scene: random shape and texture coefficients and a camera with
     * small random pose and offset around default_camera.
     */
    SyntheticScene scene(std::uint64_t seed, int width = 64, int height = 64, double pose_spread = 1.0) const
    {
        std::mt19937_64 rng(seed);
        SyntheticScene s;
        s.width = width;
        s.height = height;
        s.consts = consts;
        s.shape_coeffs = shapes.draw(rng);
        s.mesh = shapes.mesh(s.shape_coeffs);
        s.texture_coeffs = textures.draw(rng);
        s.texture = textures.texture(s.texture_coeffs);
        std::uniform_real_distribution<double> uniform(-1.0, 1.0);
        s.cam = default_camera(width, height);
        s.cam.f *= 1.0 + 0.05 * pose_spread * uniform(rng);
        s.cam.pitch += 0.12 * pose_spread * uniform(rng);
        s.cam.yaw += 0.2 * pose_spread * uniform(rng);
        s.cam.roll += 0.08 * pose_spread * uniform(rng);
        s.cam.tx += 1.5 * pose_spread * uniform(rng);
        s.cam.ty += 1.5 * pose_spread * uniform(rng);
        return s;
    }
};

} // namespace facefit

#endif /* FACEFIT_SYNTH_HPP */
