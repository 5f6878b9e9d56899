/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/geometry.hpp
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

#ifndef FACEFIT_GEOMETRY_HPP
#define FACEFIT_GEOMETRY_HPP

#include "facefit/core/error.hpp"

#include "Eigen/Core"
#include "Eigen/Geometry"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace facefit {

/// Q x 3 vertex positions, one vertex per row.
using Vertices = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Triangle = std::array<int, 3>;
using Vector6d = Eigen::Matrix<double, 6, 1>;

inline constexpr int kNumLandmarks = 68;

/**
 * A triangle mesh with a fixed vertex order (dense correspondence across all
 * meshes of a model) and the table of vertex indices that correspond to the
 * 68 sparse facial landmarks.
 */
struct Mesh
{
    Vertices vertices;
    std::vector<Triangle> triangles;
    std::vector<int> landmark_indices;

    int num_vertices() const { return static_cast<int>(vertices.rows()); }
    int num_triangles() const { return static_cast<int>(triangles.size()); }

    /// Throws InvalidMesh if an index is out of range or a triangle repeats a vertex.
    void validate() const
    {
        const int q = num_vertices();
        if (q <= 0)
        {
            throw InvalidMesh("mesh has no vertices");
        }
        for (std::size_t t = 0; t < triangles.size(); ++t)
        {
            const auto& tri = triangles[t];
            for (int k = 0; k < 3; ++k)
            {
                if (tri[k] < 0 || tri[k] >= q)
                {
                    throw InvalidMesh("triangle " + std::to_string(t) + " references vertex " +
                                      std::to_string(tri[k]) + " outside [0, " + std::to_string(q) + ")");
                }
            }
            if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2])
            {
                throw InvalidMesh("triangle " + std::to_string(t) + " repeats a vertex index");
            }
        }
        for (int idx : landmark_indices)
        {
            if (idx < 0 || idx >= q)
            {
                throw InvalidMesh("landmark index " + std::to_string(idx) + " outside [0, " + std::to_string(q) +
                                  ")");
            }
        }
    }
};

/// Stacks the vertices as (x0, y0, z0, x1, ...), the layout used by the shape models.
inline Eigen::VectorXd flatten(const Vertices& v)
{
    return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

inline Vertices unflatten(const Eigen::VectorXd& flat)
{
    if (flat.size() % 3 != 0)
    {
        throw DimensionMismatch("flattened vertex vector length " + std::to_string(flat.size()) +
                                " is not a multiple of 3");
    }
    return Eigen::Map<const Vertices>(flat.data(), flat.size() / 3, 3);
}

/**
 * Weak-perspective camera, parameterised as (f, pitch, yaw, roll, tx, ty).
 * Angles are radians, the translation is in pixels.
 */
struct CameraParams
{
    double f = 1.0;
    double pitch = 0.0;
    double yaw = 0.0;
    double roll = 0.0;
    double tx = 0.0;
    double ty = 0.0;

    enum Index
    {
        kScale = 0,
        kPitch,
        kYaw,
        kRoll,
        kTx,
        kTy
    };

    Vector6d to_vector() const
    {
        Vector6d m;
        m << f, pitch, yaw, roll, tx, ty;
        return m;
    }

    static CameraParams from_vector(const Vector6d& m) { return {m[0], m[1], m[2], m[3], m[4], m[5]}; }

    void validate() const
    {
        if (!(f > 0.0) || !std::isfinite(f))
        {
            throw Error("camera scale f must be positive and finite");
        }
        if (!std::isfinite(pitch) || !std::isfinite(yaw) || !std::isfinite(roll) || !std::isfinite(tx) ||
            !std::isfinite(ty))
        {
            throw Error("camera parameters must be finite");
        }
    }
};

namespace detail {

inline Eigen::Matrix3d rot_x(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << 1, 0, 0, 0, c, -s, 0, s, c;
    return r;
}

inline Eigen::Matrix3d rot_y(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << c, 0, s, 0, 1, 0, -s, 0, c;
    return r;
}

inline Eigen::Matrix3d rot_z(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << c, -s, 0, s, c, 0, 0, 0, 1;
    return r;
}

inline Eigen::Matrix3d drot_x(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << 0, 0, 0, 0, -s, -c, 0, c, -s;
    return r;
}

inline Eigen::Matrix3d drot_y(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << -s, 0, c, 0, 0, 0, -c, 0, -s;
    return r;
}

inline Eigen::Matrix3d drot_z(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    Eigen::Matrix3d r;
    r << -s, -c, 0, c, -s, 0, 0, 0, 0;
    return r;
}

} // namespace detail

/// R = Rz(roll) * Ry(yaw) * Rx(pitch).
inline Eigen::Matrix3d rotation_from_angles(double pitch, double yaw, double roll)
{
    return detail::rot_z(roll) * detail::rot_y(yaw) * detail::rot_x(pitch);
}

/**
 * Precomputed rotation (and its angle derivatives) for one camera. Image
 * position of a model-space point s is f * Pr * R * s + t; its depth is the
 * third row of R * s, larger meaning closer to the image plane.
 */
class WeakPerspective
{
public:
    explicit WeakPerspective(const CameraParams& cam) : cam_(cam)
    {
        const Eigen::Matrix3d rx = detail::rot_x(cam.pitch);
        const Eigen::Matrix3d ry = detail::rot_y(cam.yaw);
        const Eigen::Matrix3d rz = detail::rot_z(cam.roll);
        rotation_ = rz * ry * rx;
        d_rotation_[0] = rz * ry * detail::drot_x(cam.pitch);
        d_rotation_[1] = rz * detail::drot_y(cam.yaw) * rx;
        d_rotation_[2] = detail::drot_z(cam.roll) * ry * rx;
    }

    const CameraParams& params() const { return cam_; }
    const Eigen::Matrix3d& rotation() const { return rotation_; }

    Eigen::Vector2d project(const Eigen::Vector3d& s) const
    {
        const Eigen::Vector3d r = rotation_ * s;
        return {cam_.f * r.x() + cam_.tx, cam_.f * r.y() + cam_.ty};
    }

    double depth(const Eigen::Vector3d& s) const { return rotation_.row(2).dot(s); }

    /// d(image point) / d(f, pitch, yaw, roll, tx, ty).
    Eigen::Matrix<double, 2, 6> camera_jacobian(const Eigen::Vector3d& s) const
    {
        Eigen::Matrix<double, 2, 6> j;
        const Eigen::Vector3d r = rotation_ * s;
        j.col(0) = r.head<2>();
        for (int k = 0; k < 3; ++k)
        {
            j.col(1 + k) = cam_.f * (d_rotation_[k] * s).head<2>();
        }
        j.col(4) << 1.0, 0.0;
        j.col(5) << 0.0, 1.0;
        return j;
    }

    /// d(image point) / d(s); identical for every vertex.
    Eigen::Matrix<double, 2, 3> vertex_jacobian() const { return cam_.f * rotation_.topRows<2>(); }

private:
    CameraParams cam_;
    Eigen::Matrix3d rotation_;
    std::array<Eigen::Matrix3d, 3> d_rotation_;
};

struct Projection
{
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> points; ///< Q x 2, pixels
    Eigen::VectorXd depth;                                             ///< Q, camera-space z
};

inline Projection project(const Vertices& vertices, const CameraParams& cam)
{
    const WeakPerspective camera(cam);
    Projection out;
    out.points.resize(vertices.rows(), 2);
    out.depth.resize(vertices.rows());
    for (Eigen::Index i = 0; i < vertices.rows(); ++i)
    {
        const Eigen::Vector3d s = vertices.row(i).transpose();
        out.points.row(i) = camera.project(s).transpose();
        out.depth[i] = camera.depth(s);
    }
    return out;
}

inline Projection project(const Mesh& mesh, const CameraParams& cam) { return project(mesh.vertices, cam); }

/// Continuous texel coordinates: u indexes texture rows, v texture columns.
struct UVCoord
{
    double u = 0.0;
    double v = 0.0;
};

/**
 * Scale and offset of the cylindrical unwarp
 *   v = a1 * atan(x / z) + b1,   u = a2 * y + b2.
 */
struct UnwarpConstants
{
    double a1 = 1.0;
    double b1 = 0.0;
    double a2 = 1.0;
    double b2 = 0.0;

    void validate() const
    {
        if (a1 == 0.0 || a2 == 0.0 || !std::isfinite(a1) || !std::isfinite(a2) || !std::isfinite(b1) ||
            !std::isfinite(b2))
        {
            throw Error("unwarp constants must be finite with non-zero scales");
        }
    }

    /**
     * Default placement for a texture of rows x cols texels: the arctan range
     * spans the columns, y_max lands on row `margin` and y_min on row
     * rows - margin (top of the face at the top of the texture).
     */
    static UnwarpConstants for_mesh(const Vertices& reference, int rows, int cols, double margin = 4.0)
    {
        if (reference.rows() == 0)
        {
            throw InvalidMesh("cannot derive unwarp constants from an empty mesh");
        }
        const double y_min = reference.col(1).minCoeff();
        const double y_max = reference.col(1).maxCoeff();
        if (!(y_max > y_min))
        {
            throw InvalidMesh("cannot derive unwarp constants from a mesh with zero height");
        }
        UnwarpConstants c;
        c.a1 = cols / std::numbers::pi;
        c.b1 = cols / 2.0;
        c.a2 = -(rows - 2.0 * margin) / (y_max - y_min);
        c.b2 = margin - c.a2 * y_max;
        return c;
    }
};

/// UV coordinate of a vertex with its derivative; clamped components have zero derivative.
struct UVSample
{
    UVCoord uv;
    Eigen::Matrix<double, 2, 3> jacobian; ///< rows: d u, d v; columns: d x, d y, d z
    bool clamped_u = false;
    bool clamped_v = false;
    double raw_u = 0.0; ///< before clamping
    double raw_v = 0.0;
};

inline UVSample unwarp_uv_with_jacobian(const Eigen::Vector3d& p, const UnwarpConstants& c, int rows, int cols)
{
    const double x = p.x(), y = p.y(), z = p.z();
    if (x == 0.0 && z == 0.0)
    {
        throw DegenerateVertex("cylindrical unwarp undefined for a vertex on the y axis (x = z = 0)");
    }
    UVSample s;
    s.raw_v = c.a1 * std::atan(x / z) + c.b1;
    s.raw_u = c.a2 * y + c.b2;
    s.uv.u = std::clamp(s.raw_u, 0.0, static_cast<double>(rows - 1));
    s.uv.v = std::clamp(s.raw_v, 0.0, static_cast<double>(cols - 1));
    s.clamped_u = s.uv.u != s.raw_u;
    s.clamped_v = s.uv.v != s.raw_v;

    const double r2 = x * x + z * z;
    s.jacobian.setZero();
    if (!s.clamped_u)
    {
        s.jacobian(0, 1) = c.a2;
    }
    if (!s.clamped_v)
    {
        s.jacobian(1, 0) = c.a1 * z / r2;
        s.jacobian(1, 2) = -c.a1 * x / r2;
    }
    return s;
}

inline UVCoord unwarp_uv(const Eigen::Vector3d& p, const UnwarpConstants& c, int rows, int cols)
{
    return unwarp_uv_with_jacobian(p, c, rows, cols).uv;
}

namespace detail {

inline std::vector<Eigen::Vector3d> vertex_normal_sums(const Mesh& mesh)
{
    std::vector<Eigen::Vector3d> sums(mesh.num_vertices(), Eigen::Vector3d::Zero());
    for (const auto& tri : mesh.triangles)
    {
        const Eigen::Vector3d a = mesh.vertices.row(tri[0]);
        const Eigen::Vector3d b = mesh.vertices.row(tri[1]);
        const Eigen::Vector3d c = mesh.vertices.row(tri[2]);
        // Twice the area times the unit face normal.
        const Eigen::Vector3d n = (b - a).cross(c - a);
        for (int k = 0; k < 3; ++k)
        {
            sums[tri[k]] += n;
        }
    }
    return sums;
}

} // namespace detail

/**
 * Area-weighted vertex normals. Throws ZeroAreaFan for a vertex whose incident
 * triangles (if any) contribute a zero normal.
 */
inline Vertices vertex_normals(const Mesh& mesh)
{
    const auto sums = detail::vertex_normal_sums(mesh);
    Vertices normals(mesh.num_vertices(), 3);
    for (int i = 0; i < mesh.num_vertices(); ++i)
    {
        const double len = sums[i].norm();
        if (!(len > 0.0))
        {
            throw ZeroAreaFan("vertex " + std::to_string(i) + " has no incident triangle with non-zero area");
        }
        normals.row(i) = (sums[i] / len).transpose();
    }
    return normals;
}

/**
 * Reverse-mode derivative of vertex_normals: given dL/d(normals), returns
 * dL/d(vertices).
 */
inline Vertices vertex_normals_backward(const Mesh& mesh, const Vertices& d_normals)
{
    require_dims(d_normals.rows() == mesh.vertices.rows(), "normal gradient has wrong vertex count");
    const auto sums = detail::vertex_normal_sums(mesh);
    std::vector<Eigen::Vector3d> d_sums(sums.size());
    for (std::size_t i = 0; i < sums.size(); ++i)
    {
        const double len = sums[i].norm();
        if (!(len > 0.0))
        {
            throw ZeroAreaFan("vertex " + std::to_string(i) + " has no incident triangle with non-zero area");
        }
        const Eigen::Vector3d n = sums[i] / len;
        const Eigen::Vector3d g = d_normals.row(static_cast<Eigen::Index>(i)).transpose();
        d_sums[i] = (g - n * n.dot(g)) / len;
    }
    Vertices d_vertices = Vertices::Zero(mesh.num_vertices(), 3);
    for (const auto& tri : mesh.triangles)
    {
        const Eigen::Vector3d a = mesh.vertices.row(tri[0]);
        const Eigen::Vector3d b = mesh.vertices.row(tri[1]);
        const Eigen::Vector3d c = mesh.vertices.row(tri[2]);
        const Eigen::Vector3d g = d_sums[tri[0]] + d_sums[tri[1]] + d_sums[tri[2]];
        d_vertices.row(tri[0]) += (b - c).cross(g).transpose();
        d_vertices.row(tri[1]) += (c - a).cross(g).transpose();
        d_vertices.row(tri[2]) += (a - b).cross(g).transpose();
    }
    return d_vertices;
}

/// Positions within the 68-entry landmark table of the outer eye corners.
struct EyeCornerLandmarks
{
    int left = 36;
    int right = 45;
};

/**
 * Distance between the two outer-eye-corner landmark vertices. Returns 0 for
 * coincident corners; metrics that divide by it reject that case.
 */
inline double inter_ocular_distance(const Mesh& mesh, EyeCornerLandmarks eyes = {})
{
    const int table = static_cast<int>(mesh.landmark_indices.size());
    if (eyes.left < 0 || eyes.right < 0 || eyes.left >= table || eyes.right >= table)
    {
        throw MissingLandmarks("landmark table has " + std::to_string(table) + " entries; eye corners " +
                               std::to_string(eyes.left) + " and " + std::to_string(eyes.right) + " required");
    }
    const int a = mesh.landmark_indices[eyes.left];
    const int b = mesh.landmark_indices[eyes.right];
    if (a < 0 || b < 0 || a >= mesh.num_vertices() || b >= mesh.num_vertices())
    {
        throw MissingLandmarks("eye-corner landmark refers to a vertex outside the mesh");
    }
    return (mesh.vertices.row(a) - mesh.vertices.row(b)).norm();
}

} // namespace facefit

#endif /* FACEFIT_GEOMETRY_HPP */
