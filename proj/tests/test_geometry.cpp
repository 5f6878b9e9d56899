/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: tests/test_geometry.cpp
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

#include "facefit/geometry.hpp"
#include "facefit/mesh_io.hpp"
#include "facefit/synth.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>
#include <random>

using namespace facefit;

namespace {

Mesh single_vertex_mesh(const Eigen::Vector3d& p)
{
    Mesh m;
    m.vertices = p.transpose();
    return m;
}

Mesh flat_square()
{
    Mesh m;
    m.vertices.resize(4, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0;
    m.triangles = {{0, 1, 2}, {0, 2, 3}};
    return m;
}

} // namespace

TEST(Rotation, ZeroAnglesGiveIdentity)
{
    EXPECT_TRUE(rotation_from_angles(0, 0, 0).isApprox(Eigen::Matrix3d::Identity(), 0.0));
}

TEST(Rotation, OrthonormalWithUnitDeterminant)
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> a(-4.0, 4.0);
    for (int i = 0; i < 500; ++i)
    {
        const Eigen::Matrix3d r = rotation_from_angles(a(rng), a(rng), a(rng));
        EXPECT_LT((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
    }
}

TEST(Rotation, MatchesQuaternionComposition)
{
    const Eigen::Matrix3d r = rotation_from_angles(0.3, -0.7, 1.1);
    const Eigen::Matrix3d q = oracle::rotation(0.3, -0.7, 1.1);
    EXPECT_LT((r - q).cwiseAbs().maxCoeff(), 1e-12);

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> a(-3.0, 3.0);
    for (int i = 0; i < 100; ++i)
    {
        const double p = a(rng), y = a(rng), w = a(rng);
        EXPECT_LT((rotation_from_angles(p, y, w) - oracle::rotation(p, y, w)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Project, SelectsXYAndReportsDepth)
{
    CameraParams cam;
    const Projection p = project(single_vertex_mesh({1, 2, 3}), cam);
    EXPECT_DOUBLE_EQ(p.points(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(p.points(0, 1), 2.0);
    EXPECT_DOUBLE_EQ(p.depth[0], 3.0);
}

TEST(Project, ScalesAndTranslates)
{
    CameraParams cam;
    cam.f = 2.0;
    cam.tx = 3.0;
    cam.ty = 4.0;
    const Projection p = project(single_vertex_mesh({1, 1, 5}), cam);
    EXPECT_DOUBLE_EQ(p.points(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(p.points(0, 1), 6.0);
}

TEST(Project, QuarterTurnYawMatchesOracle)
{
    CameraParams cam;
    cam.yaw = std::numbers::pi / 2.0;
    const Projection p = project(single_vertex_mesh({1, 0, 0}), cam);
    const Eigen::Vector3d r = oracle::rotation(0, std::numbers::pi / 2.0, 0) * Eigen::Vector3d(1, 0, 0);
    EXPECT_NEAR(p.points(0, 0), r.x(), 1e-15);
    EXPECT_NEAR(p.points(0, 1), r.y(), 1e-15);
    EXPECT_NEAR(p.depth[0], r.z(), 1e-15);
    EXPECT_NEAR(p.depth[0], -1.0, 1e-15);
}

TEST(Project, HomogeneousInScale)
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Mesh m;
    m.vertices = Vertices::NullaryExpr(20, 3, [&]() { return u(rng); });
    CameraParams cam;
    cam.f = 1.7;
    cam.pitch = 0.2;
    cam.yaw = -0.4;
    cam.roll = 0.9;
    const Projection a = project(m, cam);
    cam.f *= 2.0;
    const Projection b = project(m, cam);
    EXPECT_LT((b.points - 2.0 * a.points).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Project, JacobiansMatchFiniteDifferences)
{
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double h = 1e-5;
    for (int trial = 0; trial < 20; ++trial)
    {
        CameraParams cam;
        cam.f = 1.0 + std::abs(u(rng));
        cam.pitch = u(rng);
        cam.yaw = u(rng);
        cam.roll = 3.0 * u(rng);
        cam.tx = 5 * u(rng);
        cam.ty = 5 * u(rng);
        const Eigen::Vector3d s(u(rng), u(rng), u(rng));
        const WeakPerspective wp(cam);
        const auto jc = wp.camera_jacobian(s);
        for (int k = 0; k < 6; ++k)
        {
            Vector6d m = cam.to_vector();
            m[k] += h;
            const Eigen::Vector2d plus = WeakPerspective(CameraParams::from_vector(m)).project(s);
            m[k] -= 2 * h;
            const Eigen::Vector2d minus = WeakPerspective(CameraParams::from_vector(m)).project(s);
            const Eigen::Vector2d fd = (plus - minus) / (2 * h);
            for (int r = 0; r < 2; ++r)
            {
                const double denom = std::max({std::abs(fd[r]), std::abs(jc(r, k)), 1e-3});
                EXPECT_LT(std::abs(fd[r] - jc(r, k)) / denom, 1e-6) << "camera component " << k;
            }
        }
        const auto jv = wp.vertex_jacobian();
        for (int k = 0; k < 3; ++k)
        {
            Eigen::Vector3d sp = s, sm = s;
            sp[k] += h;
            sm[k] -= h;
            const Eigen::Vector2d fd = (wp.project(sp) - wp.project(sm)) / (2 * h);
            for (int r = 0; r < 2; ++r)
            {
                const double denom = std::max({std::abs(fd[r]), std::abs(jv(r, k)), 1e-3});
                EXPECT_LT(std::abs(fd[r] - jv(r, k)) / denom, 1e-6);
            }
        }
    }
}

TEST(CameraParams, RejectsNonPositiveScale)
{
    CameraParams cam;
    cam.f = 0.0;
    EXPECT_THROW(cam.validate(), Error);
    cam.f = 1.0;
    cam.yaw = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(cam.validate(), Error);
}

TEST(Unwarp, CentreColumnOnTheAxis)
{
    const UnwarpConstants c{10.0, 7.0, -3.0, 20.0};
    EXPECT_DOUBLE_EQ(unwarp_uv({0.0, 0.5, 2.0}, c, 64, 64).v, 7.0);
}

TEST(Unwarp, DiagonalGivesQuarterPi)
{
    const UnwarpConstants c{10.0, 7.0, -3.0, 20.0};
    EXPECT_NEAR(unwarp_uv({1.5, 0.0, 1.5}, c, 64, 64).v, 10.0 * std::numbers::pi / 4.0 + 7.0, 1e-12);
}

TEST(Unwarp, DefaultConstantsPlaceMarginRows)
{
    const Mesh base = base_face_mesh();
    const int rows = 64, cols = 48;
    const auto c = UnwarpConstants::for_mesh(base.vertices, rows, cols);
    EXPECT_NEAR(c.a1, cols / std::numbers::pi, 1e-12);
    EXPECT_NEAR(c.b1, cols / 2.0, 1e-12);
    Eigen::Index lo = 0, hi = 0;
    base.vertices.col(1).minCoeff(&lo);
    base.vertices.col(1).maxCoeff(&hi);
    EXPECT_NEAR(unwarp_uv(base.vertices.row(hi).transpose(), c, rows, cols).u, 4.0, 1e-12);
    EXPECT_NEAR(unwarp_uv(base.vertices.row(lo).transpose(), c, rows, cols).u, rows - 4.0, 1e-12);
}

TEST(Unwarp, MonotoneInHeightAndAzimuth)
{
    const auto c = UnwarpConstants::for_mesh(base_face_mesh().vertices, 64, 64);
    double prev = -1.0;
    for (double y = 1.0; y >= -1.0; y -= 0.05)
    {
        const double u = unwarp_uv({0.2, y, 1.0}, c, 64, 64).u;
        EXPECT_GT(u, prev);
        prev = u;
    }
    prev = -1.0;
    for (double x = -1.0; x <= 1.0; x += 0.05)
    {
        const double v = unwarp_uv({x, 0.0, 1.0}, c, 64, 64).v;
        EXPECT_GT(v, prev);
        prev = v;
    }
}

TEST(Unwarp, RejectsVertexOnAxis)
{
    EXPECT_THROW(unwarp_uv({0.0, 1.0, 0.0}, UnwarpConstants{}, 8, 8), DegenerateVertex);
}

TEST(Unwarp, RejectsZeroScale)
{
    UnwarpConstants c;
    c.a1 = 0.0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Unwarp, JacobianZeroOnClampedComponent)
{
    const UnwarpConstants c{10.0, 32.0, -100.0, 32.0};
    const UVSample s = unwarp_uv_with_jacobian({0.1, 5.0, 1.0}, c, 64, 64);
    EXPECT_TRUE(s.clamped_u);
    EXPECT_EQ(s.uv.u, 0.0);
    EXPECT_EQ(s.jacobian(0, 1), 0.0);
    EXPECT_NE(s.jacobian(1, 0), 0.0);
}

TEST(VertexNormals, FlatSquarePointsUp)
{
    const Vertices n = vertex_normals(flat_square());
    for (int i = 0; i < 4; ++i)
    {
        EXPECT_NEAR((n.row(i) - Eigen::RowVector3d(0, 0, 1)).norm(), 0.0, 1e-15);
    }
}

TEST(VertexNormals, SphereNormalsAreRadial)
{
    const Mesh sphere = oracle::uv_sphere(16, 24);
    const Vertices n = vertex_normals(sphere);
    const double cos5 = std::cos(5.0 * std::numbers::pi / 180.0);
    for (int i = 0; i < sphere.num_vertices(); ++i)
    {
        EXPECT_NEAR(n.row(i).norm(), 1.0, 1e-12);
        EXPECT_GT(n.row(i).dot(sphere.vertices.row(i).normalized()), cos5) << "vertex " << i;
    }
}

TEST(VertexNormals, InvariantUnderScaling)
{
    Mesh sphere = oracle::uv_sphere(8, 12);
    const Vertices a = vertex_normals(sphere);
    sphere.vertices *= 3.7;
    EXPECT_LT((vertex_normals(sphere) - a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(VertexNormals, IsolatedVertexIsAnError)
{
    Mesh m = flat_square();
    m.vertices.conservativeResize(5, 3);
    m.vertices.row(4) << 2, 2, 2;
    EXPECT_THROW(vertex_normals(m), ZeroAreaFan);
}

TEST(VertexNormals, BackwardMatchesFiniteDifferences)
{
    Mesh m = oracle::uv_sphere(5, 7);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    m.vertices += 0.1 * Vertices::NullaryExpr(m.num_vertices(), 3, [&]() { return u(rng); });
    const Vertices g = Vertices::NullaryExpr(m.num_vertices(), 3, [&]() { return u(rng); });
    const Vertices analytic = vertex_normals_backward(m, g);
    const double h = 1e-6;
    for (int i = 0; i < m.num_vertices(); ++i)
    {
        for (int k = 0; k < 3; ++k)
        {
            Mesh p = m, q = m;
            p.vertices(i, k) += h;
            q.vertices(i, k) -= h;
            const double fd = ((vertex_normals(p).array() - vertex_normals(q).array()) * g.array()).sum() / (2 * h);
            EXPECT_NEAR(analytic(i, k), fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(InterOcular, DistanceBetweenEyeCorners)
{
    Mesh m;
    m.vertices = Vertices::Zero(68, 3);
    m.landmark_indices.resize(68);
    for (int i = 0; i < 68; ++i)
        m.landmark_indices[i] = i;
    m.vertices.row(36) << -1, 0, 0;
    m.vertices.row(45) << 1, 0, 0;
    EXPECT_DOUBLE_EQ(inter_ocular_distance(m), 2.0);
    m.vertices *= 3.0;
    EXPECT_DOUBLE_EQ(inter_ocular_distance(m), 6.0);
    m.vertices.row(45) = m.vertices.row(36);
    EXPECT_EQ(inter_ocular_distance(m), 0.0);
}

TEST(InterOcular, MissingTableRaises)
{
    EXPECT_THROW(inter_ocular_distance(flat_square()), MissingLandmarks);
}

TEST(Mesh, ValidateRejectsBadIndices)
{
    Mesh m = flat_square();
    m.triangles.push_back({0, 1, 7});
    EXPECT_THROW(m.validate(), InvalidMesh);
    m = flat_square();
    m.triangles.push_back({1, 1, 2});
    EXPECT_THROW(m.validate(), InvalidMesh);
    EXPECT_THROW(Mesh{}.validate(), InvalidMesh);
}

TEST(MeshIo, ObjAndLandmarkTableRoundTrip)
{
    const Mesh base = base_face_mesh();
    const auto dir = std::filesystem::temp_directory_path() / "facefit_test_geometry";
    std::filesystem::create_directories(dir);
    write_obj(dir / "m.obj", base);
    write_landmark_table(dir / "lm.txt", base.landmark_indices);
    const Mesh back = read_mesh_with_landmarks(dir / "m.obj", dir / "lm.txt");
    EXPECT_EQ(back.vertices, base.vertices);
    EXPECT_EQ(back.triangles, base.triangles);
    EXPECT_EQ(back.landmark_indices, base.landmark_indices);
    EXPECT_EQ(back.landmark_indices.size(), 68u);
}

TEST(MeshIo, MalformedObjNamesTheLine)
{
    const auto path = std::filesystem::temp_directory_path() / "facefit_bad.obj";
    {
        std::ofstream out(path);
        out << "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n";
    }
    try
    {
        read_obj(path);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e)
    {
        EXPECT_NE(std::string(e.what()).find(":4"), std::string::npos) << e.what();
    }
    EXPECT_THROW(read_obj("/nonexistent/facefit.obj"), IoError);
}
