/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: tests/test_render.cpp
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

#include "facefit/gradcheck.hpp"
#include "facefit/render.hpp"
#include "facefit/synth.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace facefit;

namespace {

// Frontal camera mapping model (x, y) to pixel (x, y).
CameraParams pixel_camera()
{
    CameraParams cam;
    return cam;
}

Mesh triangle(const Eigen::Vector3d& a, const Eigen::Vector3d& b, const Eigen::Vector3d& c)
{
    Mesh m;
    m.vertices.resize(3, 3);
    m.vertices.row(0) = a.transpose();
    m.vertices.row(1) = b.transpose();
    m.vertices.row(2) = c.transpose();
    m.triangles = {{0, 1, 2}};
    return m;
}

void expect_same_buffers(const FragmentBuffer& a, const FragmentBuffer& b)
{
    ASSERT_EQ(a.width(), b.width());
    ASSERT_EQ(a.height(), b.height());
    for (int r = 0; r < a.height(); ++r)
    {
        for (int c = 0; c < a.width(); ++c)
        {
            const Fragment& x = a.at(r, c);
            const Fragment& y = b.at(r, c);
            ASSERT_EQ(x.triangle, y.triangle) << "pixel " << r << "," << c;
            if (x.covered())
            {
                EXPECT_LE((x.bary - y.bary).cwiseAbs().maxCoeff(), 1e-12);
                EXPECT_LE(std::abs(x.depth - y.depth), 1e-12);
            }
        }
    }
}

Texture random_texture(int rows, int cols, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Texture t(rows, cols);
    for (auto& x : t.data())
        x = u(rng);
    return t;
}

} // namespace

TEST(Rasterize, FullScreenTriangleCoversEverything)
{
    const Mesh m = triangle({-1, -1, 0}, {40, -1, 0}, {-1, 40, 0});
    const FragmentBuffer fb = rasterize(m, pixel_camera(), 16, 16);
    for (const auto& f : fb.fragments())
    {
        ASSERT_EQ(f.triangle, 0);
        EXPECT_NEAR(f.bary.sum(), 1.0, 1e-12);
        EXPECT_GE(f.bary.minCoeff(), 0.0);
    }
}

TEST(Rasterize, CloserTriangleWins)
{
    Mesh m;
    m.vertices.resize(6, 3);
    m.vertices << -1, -1, 1, 20, -1, 1, -1, 20, 1, -1, -1, 2, 20, -1, 2, -1, 20, 2;
    m.triangles = {{0, 1, 2}, {3, 4, 5}};
    const FragmentBuffer fb = rasterize(m, pixel_camera(), 8, 8);
    for (const auto& f : fb.fragments())
    {
        EXPECT_EQ(f.triangle, 1);
        EXPECT_NEAR(f.depth, 2.0, 1e-12);
    }
}

TEST(Rasterize, DepthTieGoesToLowerIndex)
{
    Mesh m;
    m.vertices.resize(6, 3);
    // z = 0 keeps the interpolated depths exactly equal.
    m.vertices << -1, -1, 0, 20, -1, 0, -1, 20, 0, -1, -1, 0, 20, -1, 0, -1, 20, 0;
    m.triangles = {{3, 4, 5}, {0, 2, 1}};
    const FragmentBuffer fb = rasterize(m, pixel_camera(), 8, 8);
    for (const auto& f : fb.fragments())
        EXPECT_EQ(f.triangle, 0);
}

TEST(Rasterize, BothWindingsAccepted)
{
    const Mesh ccw = triangle({1, 1, 0}, {7, 1, 0}, {1, 7, 0});
    const Mesh cw = triangle({1, 1, 0}, {1, 7, 0}, {7, 1, 0});
    const FragmentBuffer a = rasterize(ccw, pixel_camera(), 8, 8);
    const FragmentBuffer b = rasterize(cw, pixel_camera(), 8, 8);
    int covered = 0;
    for (std::size_t i = 0; i < a.fragments().size(); ++i)
    {
        EXPECT_EQ(a.fragments()[i].covered(), b.fragments()[i].covered());
        covered += a.fragments()[i].covered();
    }
    EXPECT_GT(covered, 10);
}

TEST(Rasterize, BoundaryPixelCentresIncluded)
{
    // Hypotenuse passes exactly through the pixel centres (c + 0.5, r + 0.5) with c + r = 5.
    const Mesh m = triangle({0, 0, 0}, {6, 0, 0}, {0, 6, 0});
    const FragmentBuffer fb = rasterize(m, pixel_camera(), 8, 8);
    EXPECT_TRUE(fb.at(0, 5).covered());
    EXPECT_TRUE(fb.at(5, 0).covered());
    EXPECT_TRUE(fb.at(2, 3).covered());
    EXPECT_FALSE(fb.at(3, 3).covered());
}

TEST(Rasterize, EmptyMeshLeavesBufferEmpty)
{
    const FragmentBuffer fb = brute_force_rasterize(Mesh{}, pixel_camera(), 5, 4);
    for (const auto& f : fb.fragments())
        EXPECT_FALSE(f.covered());
    const Mask cov = fb.coverage();
    EXPECT_EQ(std::count(cov.begin(), cov.end(), 1), 0);
}

TEST(Rasterize, SingleTriangleMatchesBruteForce)
{
    const Mesh m = triangle({0.3, 0.7, 0.1}, {9.2, 2.1, 0.5}, {4.4, 8.8, -0.2});
    expect_same_buffers(rasterize(m, pixel_camera(), 10, 10), brute_force_rasterize(m, pixel_camera(), 10, 10));
}

TEST(Rasterize, RandomScenesMatchBruteForce)
{
    std::mt19937_64 rng(42);
    for (int i = 0; i < 20; ++i)
    {
        const auto s = oracle::random_triangles(rng, 50, 32, 32);
        expect_same_buffers(rasterize(s.mesh, s.cam, 32, 32), brute_force_rasterize(s.mesh, s.cam, 32, 32));
    }
}

TEST(Rasterize, IndependentOfTriangleOrderWithoutTies)
{
    std::mt19937_64 rng(8);
    auto s = oracle::random_triangles(rng, 30, 32, 32);
    const FragmentBuffer a = rasterize(s.mesh, s.cam, 32, 32);
    Mesh shuffled = s.mesh;
    std::vector<int> perm(shuffled.triangles.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t t = 0; t < perm.size(); ++t)
        shuffled.triangles[t] = s.mesh.triangles[perm[t]];
    const FragmentBuffer b = rasterize(shuffled, s.cam, 32, 32);
    for (std::size_t i = 0; i < a.fragments().size(); ++i)
    {
        const auto& fa = a.fragments()[i];
        const auto& fb = b.fragments()[i];
        ASSERT_EQ(fa.covered(), fb.covered());
        if (fa.covered())
            EXPECT_EQ(fa.triangle, perm[fb.triangle]);
    }
}

TEST(Rasterize, ThreadCountDoesNotChangeTheBuffer)
{
    std::mt19937_64 rng(9);
    const auto s = oracle::random_triangles(rng, 80, 64, 64);
    RenderOptions one, many;
    many.threads = 7;
    const FragmentBuffer a = rasterize(s.mesh, s.cam, 64, 64, one);
    const FragmentBuffer b = rasterize(s.mesh, s.cam, 64, 64, many);
    for (std::size_t i = 0; i < a.fragments().size(); ++i)
    {
        EXPECT_EQ(a.fragments()[i].triangle, b.fragments()[i].triangle);
        EXPECT_EQ(a.fragments()[i].bary, b.fragments()[i].bary);
        EXPECT_EQ(a.fragments()[i].depth, b.fragments()[i].depth);
    }
}

TEST(Bilinear, IntegerCoordinatesReturnTexels)
{
    std::mt19937_64 rng(1);
    const Texture t = random_texture(5, 6, rng);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 6; ++c)
            EXPECT_EQ(sample_bilinear(t, {double(r), double(c)}), t.pixel(r, c));
}

TEST(Bilinear, MidpointAverages)
{
    std::mt19937_64 rng(2);
    const Texture t = random_texture(4, 4, rng);
    const Eigen::Vector3d mid = sample_bilinear(t, {1.0, 2.5});
    EXPECT_LT((mid - 0.5 * (t.pixel(1, 2) + t.pixel(1, 3))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Bilinear, ReproducesLinearRamp)
{
    Texture t(16, 16);
    for (int u = 0; u < 16; ++u)
        for (int v = 0; v < 16; ++v)
            t.set_pixel(u, v, Eigen::Vector3d::Constant(0.01 * u + 0.02 * v));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(0.0, 15.0);
    for (int i = 0; i < 200; ++i)
    {
        const double u = d(rng), v = d(rng);
        EXPECT_NEAR(sample_bilinear(t, {u, v})[0], 0.01 * u + 0.02 * v, 1e-12);
    }
}

TEST(Render, ConstantTextureGivesConstantCoverage)
{
    const Mesh base = base_face_mesh();
    const CameraParams cam = default_camera(64, 64);
    const auto consts = UnwarpConstants::for_mesh(base.vertices, 32, 32);
    const Texture tex(32, 32, 0.37);
    const RenderedImage img = render(base, cam, tex, consts, 64, 64);
    int covered = 0;
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c)
            if (img.coverage[r * 64 + c])
            {
                ++covered;
                EXPECT_NEAR(img.pixels(r, c, 1), 0.37, 1e-12);
            } else
            {
                EXPECT_EQ(img.pixels(r, c, 1), 0.0);
            }
    EXPECT_GT(covered, 500);
}

TEST(Render, CentroidBlendsVertexColours)
{
    // Vertices chosen so their UVs land exactly on texels (0,0), (0,2) and (2,0).
    const UnwarpConstants consts{8.0 / std::numbers::pi, 0.0, 1.0, 0.0};
    const Mesh m = triangle({0.0, 0.0, 1.0}, {1.0, 0.0, 1.0}, {0.0, 2.0, 1.0});
    Texture tex(4, 4);
    tex.set_pixel(0, 0, {1, 0, 0});
    tex.set_pixel(0, 2, {0, 1, 0});
    tex.set_pixel(2, 0, {0, 0, 1});
    CameraParams cam;
    cam.f = 4.0;
    cam.tx = 1.0;
    cam.ty = 1.0;
    const Eigen::Vector2d centroid = (WeakPerspective(cam).project(m.vertices.row(0).transpose()) +
                                      WeakPerspective(cam).project(m.vertices.row(1).transpose()) +
                                      WeakPerspective(cam).project(m.vertices.row(2).transpose())) /
                                     3.0;
    // Place the centroid on a pixel centre.
    cam.tx += std::floor(centroid.x()) + 0.5 - centroid.x();
    cam.ty += std::floor(centroid.y()) + 0.5 - centroid.y();
    const int r = static_cast<int>(std::floor(centroid.y())), c = static_cast<int>(std::floor(centroid.x()));
    const RenderedImage img = render(m, cam, tex, consts, 16, 16);
    ASSERT_TRUE(img.coverage[r * 16 + c]);
    EXPECT_LT((img.pixels.pixel(r, c) - Eigen::Vector3d::Constant(1.0 / 3.0)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Render, MatchesStraightLineOracle)
{
    std::mt19937_64 rng(77);
    for (int i = 0; i < 10; ++i)
    {
        auto s = oracle::random_triangles(rng, 40, 32, 32);
        s.mesh.vertices.col(2).array() += 3.0; // keep x = z = 0 away
        const Texture tex = random_texture(12, 10, rng);
        const UnwarpConstants consts{5.0, 4.5, -2.0, 6.0};
        RenderOptions opts;
        opts.background = {0.1, 0.2, 0.3};
        const RenderedImage img = render(s.mesh, s.cam, tex, consts, 32, 32, opts);
        const ColorImage ref =
            oracle::shade(s.mesh, tex, consts, brute_force_rasterize(s.mesh, s.cam, 32, 32), opts.background);
        EXPECT_LE((img.pixels.as_vector() - ref.as_vector()).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Render, InvariantToUnsampledTexels)
{
    const SyntheticWorld w = SyntheticWorld::create(2, 4, 2, 32, 32);
    const SyntheticScene s = w.scene(4, 48, 48);
    const RenderedImage a = render(s.mesh, s.cam, s.texture, s.consts, 48, 48);
    // Texels touched by any vertex footprint.
    std::vector<bool> used(32 * 32, false);
    for (int i = 0; i < s.mesh.num_vertices(); ++i)
    {
        const auto t = bilinear_taps(32, 32, unwarp_uv(s.mesh.vertices.row(i).transpose(), s.consts, 32, 32));
        used[t.u0 * 32 + t.v0] = used[t.u0 * 32 + t.v1] = used[t.u1 * 32 + t.v0] = used[t.u1 * 32 + t.v1] = true;
    }
    Texture changed = s.texture;
    for (int u = 0; u < 32; ++u)
        for (int v = 0; v < 32; ++v)
            if (!used[u * 32 + v])
                changed.set_pixel(u, v, {0.9, 0.1, 0.5});
    const RenderedImage b = render(s.mesh, s.cam, changed, s.consts, 48, 48);
    EXPECT_EQ(a.pixels.data(), b.pixels.data());
}

TEST(Render, StaleFragmentsRejected)
{
    const Mesh m = triangle({0, 0, 1}, {6, 0, 1}, {0, 6, 1});
    const FragmentBuffer fb = rasterize(m, pixel_camera(), 8, 8);
    Mesh smaller = m;
    smaller.triangles.clear();
    EXPECT_THROW(shade_fragments(smaller, Texture(4, 4), UnwarpConstants{}, fb), StaleFragments);
}

TEST(RenderBackward, ZeroUpstreamGivesZeroGradients)
{
    const RenderCheckScene s = make_render_check_scene(3);
    const FragmentBuffer fb = rasterize(s.mesh, s.cam, s.width, s.height);
    const RenderGradients g =
        render_backward(s.mesh, s.cam, s.texture, s.consts, fb, ColorImage(s.height, s.width));
    EXPECT_EQ(g.d_texture.as_vector().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.d_vertices.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.d_camera.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RenderBackward, TextureGradientIsSparse)
{
    const RenderCheckScene s = make_render_check_scene(4);
    const FragmentBuffer fb = rasterize(s.mesh, s.cam, s.width, s.height);
    const ColorImage up(s.height, s.width, 1.0);
    const RenderGradients g = render_backward(s.mesh, s.cam, s.texture, s.consts, fb, up);
    std::size_t covered = 0;
    for (auto c : fb.coverage())
        covered += c;
    std::size_t nonzero = 0;
    for (double x : g.d_texture.data())
        nonzero += x != 0.0;
    EXPECT_GT(nonzero, 0u);
    EXPECT_LE(nonzero, 4 * 3 * covered);
}

TEST(RenderBackward, TextureGradientEqualsWeightedFootprint)
{
    // d_texture[texel] = sum over pixels of upstream * lambda * bilinear weight.
    const RenderCheckScene s = make_render_check_scene(6);
    const FragmentBuffer fb = rasterize(s.mesh, s.cam, s.width, s.height);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    ColorImage up(s.height, s.width);
    for (auto& x : up.data())
        x = u(rng);
    const RenderGradients g = render_backward(s.mesh, s.cam, s.texture, s.consts, fb, up);
    Texture expected(s.texture.rows(), s.texture.cols());
    for (int r = 0; r < s.height; ++r)
        for (int c = 0; c < s.width; ++c)
        {
            const Fragment& f = fb.at(r, c);
            if (!f.covered())
                continue;
            for (int j = 0; j < 3; ++j)
            {
                const Eigen::Vector3d p = s.mesh.vertices.row(s.mesh.triangles[f.triangle][j]).transpose();
                const auto t = bilinear_taps(s.texture.rows(), s.texture.cols(),
                                             unwarp_uv(p, s.consts, s.texture.rows(), s.texture.cols()));
                const std::array<std::tuple<int, int, double>, 4> taps{
                    {{t.u0, t.v0, t.w00()}, {t.u0, t.v1, t.w01()}, {t.u1, t.v0, t.w10()}, {t.u1, t.v1, t.w11()}}};
                for (const auto& [tu, tv, w] : taps)
                    for (int ch = 0; ch < 3; ++ch)
                        expected(tu, tv, ch) += up(r, c, ch) * f.bary[j] * w;
            }
        }
    EXPECT_LT((expected.as_vector() - g.d_texture.as_vector()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RenderBackward, MatchesFiniteDifferencesOnCheckScenes)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed)
    {
        const RenderCheckScene s = make_render_check_scene(seed);
        RenderCheckOptions opts;
        opts.step = 1e-4;
        opts.seed = seed;
        const GradCheckReport r = check_render_gradients(s, opts);
        ASSERT_EQ(r.blocks.size(), 3u);
        for (const auto& b : r.blocks)
        {
            EXPECT_GT(b.checked, 0) << b.name;
            EXPECT_LT(b.max_rel_error, 1e-4) << b.name << " seed " << seed;
        }
    }
}

TEST(RenderBackward, ThreadCountDoesNotChangeGradients)
{
    const RenderCheckScene s = make_render_check_scene(12, 48, 16, 6);
    const FragmentBuffer fb = rasterize(s.mesh, s.cam, s.width, s.height);
    const ColorImage up(s.height, s.width, 0.5);
    RenderOptions many;
    many.threads = 5;
    const RenderGradients a = render_backward(s.mesh, s.cam, s.texture, s.consts, fb, up);
    const RenderGradients b = render_backward(s.mesh, s.cam, s.texture, s.consts, fb, up, many);
    EXPECT_EQ(a.d_texture.data(), b.d_texture.data());
    EXPECT_EQ(a.d_vertices, b.d_vertices);
    EXPECT_EQ(a.d_camera, b.d_camera);
}

TEST(InteriorMask, ExcludesEdgeBand)
{
    const Mesh m = triangle({0, 0, 1}, {20, 0, 1}, {0, 20, 1});
    const FragmentBuffer fb = rasterize(m, pixel_camera(), 24, 24);
    const Mask interior = interior_pixel_mask(m, pixel_camera(), fb, 1.0);
    EXPECT_FALSE(interior[0 * 24 + 5]); // centre 0.5 px from the top edge
    EXPECT_TRUE(interior[5 * 24 + 5]);
    EXPECT_FALSE(interior[23 * 24 + 23]);
}

TEST(Unwarp, FrontalTexelReadsImageColour)
{
    const SyntheticWorld w = SyntheticWorld::create(5, 4, 2, 32, 32);
    SyntheticScene s = w.scene(1, 128, 128, 0.0);
    const RenderedImage img = render(s.mesh, s.cam, s.texture, s.consts, 128, 128);
    const UVUnwarp uv = unwarp_image_to_uv(img.pixels, s.mesh, s.cam, s.consts, 32, 32);
    // The nose tip is frontal and visible.
    Eigen::Index tip = 0;
    s.mesh.vertices.col(2).maxCoeff(&tip);
    const UVCoord c = unwarp_uv(s.mesh.vertices.row(tip).transpose(), s.consts, 32, 32);
    const int u = static_cast<int>(std::lround(c.u)), v = static_cast<int>(std::lround(c.v));
    ASSERT_TRUE(uv.valid[u * 32 + v]);
    EXPECT_LT((uv.texture.pixel(u, v) - s.texture.pixel(u, v)).cwiseAbs().maxCoeff(), 0.02);
}

TEST(Unwarp, AvertedSideIsInvalid)
{
    Mesh sphere = oracle::uv_sphere(24, 32);
    sphere.vertices.col(0).array() += 0.01; // keep the poles off the unwarp axis
    const auto consts = UnwarpConstants::for_mesh(sphere.vertices, 32, 32);
    std::mt19937_64 rng(4);
    const Texture tex = random_texture(32, 32, rng);
    CameraParams cam;
    cam.f = 20.0;
    cam.tx = cam.ty = 32.0;
    const RenderedImage img = render(sphere, cam, tex, consts, 64, 64);
    const UVUnwarp front = unwarp_image_to_uv(img.pixels, sphere, cam, consts, 32, 32);
    EXPECT_GT(front.valid_fraction, 0.3);
    cam.yaw = std::numbers::pi;
    const UVUnwarp back = unwarp_image_to_uv(img.pixels, sphere, cam, consts, 32, 32);
    EXPECT_LT(back.valid_fraction, 0.02);
}

TEST(Unwarp, RoundTripRecoversTexture)
{
    const SyntheticWorld w = SyntheticWorld::create(3);
    for (std::uint64_t seed = 0; seed < 3; ++seed)
    {
        const SyntheticScene s = w.scene(seed, 64, 64);
        const RenderedImage img = render(s.mesh, s.cam, s.texture, s.consts, 64, 64);
        const UVUnwarp uv = unwarp_image_to_uv(img.pixels, s.mesh, s.cam, s.consts, 64, 64);
        double sum = 0.0;
        std::size_t n = 0;
        for (int r = 0; r < 64; ++r)
            for (int c = 0; c < 64; ++c)
                if (uv.valid[r * 64 + c])
                {
                    sum += (uv.texture.pixel(r, c) - s.texture.pixel(r, c)).cwiseAbs().sum();
                    n += 3;
                }
        EXPECT_GT(uv.valid_fraction, 0.3);
        EXPECT_LT(sum / n, 0.02);
    }
}

TEST(FragmentIo, RoundTrip)
{
    const RenderCheckScene s = make_render_check_scene(1);
    const FragmentBuffer fb = rasterize(s.mesh, s.cam, s.width, s.height);
    const auto path = std::filesystem::temp_directory_path() / "facefit_fb.bin";
    write_fragment_buffer(path, fb);
    const FragmentBuffer back = read_fragment_buffer(path);
    expect_same_buffers(fb, back);
}
