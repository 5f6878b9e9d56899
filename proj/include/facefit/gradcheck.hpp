/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/gradcheck.hpp
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

#ifndef FACEFIT_GRADCHECK_HPP
#define FACEFIT_GRADCHECK_HPP

// Central finite-difference checks of the analytic gradients.
//
// Relative error per component is |a - n| / max(|a|, |n|, floor), where the
// floor is 1e-4 times the largest numeric component of the block (and at
// least 1e-12). Central differences in double carry an absolute rounding
// error near eps * |f| / step, so components far below the block's scale
// cannot be resolved relative to their own size.

#include "facefit/core/error.hpp"
#include "facefit/geometry.hpp"
#include "facefit/loss.hpp"
#include "facefit/model.hpp"
#include "facefit/render.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace facefit {

struct BlockError
{
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0; ///< components whose stencil crosses a known kink
    Eigen::Index worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

struct GradCheckReport
{
    std::vector<BlockError> blocks;

    double max_rel_error() const
    {
        double m = 0.0;
        for (const auto& b : blocks)
        {
            m = std::max(m, b.max_rel_error);
        }
        return m;
    }

    bool passed(double tolerance) const
    {
        return std::all_of(blocks.begin(), blocks.end(),
                           [&](const BlockError& b) { return b.max_rel_error < tolerance; });
    }

    /// Merges per-scene reports, keeping the worst error per block name.
    void merge(const GradCheckReport& other)
    {
        for (const auto& b : other.blocks)
        {
            auto it = std::find_if(blocks.begin(), blocks.end(), [&](const BlockError& x) { return x.name == b.name; });
            if (it == blocks.end())
            {
                blocks.push_back(b);
                continue;
            }
            if (b.max_rel_error > it->max_rel_error)
            {
                it->max_rel_error = b.max_rel_error;
                it->worst_index = b.worst_index;
                it->worst_analytic = b.worst_analytic;
                it->worst_numeric = b.worst_numeric;
            }
            it->checked += b.checked;
            it->skipped += b.skipped;
        }
    }

    nlohmann::json to_json(double tolerance) const
    {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& b : blocks)
        {
            arr.push_back({{"name", b.name},
                           {"max_rel_error", b.max_rel_error},
                           {"checked", b.checked},
                           {"skipped", b.skipped},
                           {"worst_index", b.worst_index}});
        }
        return {{"tolerance", tolerance}, {"passed", passed(tolerance)}, {"blocks", arr}};
    }
};

/**
 * Compares `analytic` with central differences of `f` around `x` on the
 * listed components (all when empty). `skip(i)` marks components whose
 * stencil is known to cross a kink of f.
 */
inline BlockError check_block(const std::string& name, const std::function<double(const Eigen::VectorXd&)>& f,
                              const Eigen::VectorXd& x, const Eigen::VectorXd& analytic, double step,
                              std::vector<Eigen::Index> components = {},
                              const std::function<bool(Eigen::Index)>& skip = {})
{
    require_dims(x.size() == analytic.size(), "gradient block '" + name + "' does not match its parameters");
    if (components.empty())
    {
        components.resize(static_cast<std::size_t>(x.size()));
        std::iota(components.begin(), components.end(), Eigen::Index{0});
    }
    BlockError out;
    out.name = name;
    std::vector<std::pair<Eigen::Index, double>> numeric;
    numeric.reserve(components.size());
    double scale = 0.0;
    Eigen::VectorXd probe = x;
    for (Eigen::Index i : components)
    {
        if (skip && skip(i))
        {
            ++out.skipped;
            continue;
        }
        probe[i] = x[i] + step;
        const double plus = f(probe);
        probe[i] = x[i] - step;
        const double minus = f(probe);
        probe[i] = x[i];
        const double n = (plus - minus) / (2.0 * step);
        numeric.emplace_back(i, n);
        scale = std::max(scale, std::abs(n));
    }
    const double floor = std::max(1e-4 * scale, 1e-12);
    for (const auto& [i, n] : numeric)
    {
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        const double err = std::abs(a - n) / denom;
        if (err > out.max_rel_error || out.worst_index < 0)
        {
            out.max_rel_error = err;
            out.worst_index = i;
            out.worst_analytic = a;
            out.worst_numeric = n;
        }
        ++out.checked;
    }
    return out;
}

/// Up to `count` distinct component indices out of n, drawn with `rng`; all of them when count >= n.
inline std::vector<Eigen::Index> sample_components(Eigen::Index n, std::size_t count, std::mt19937_64& rng)
{
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    if (count >= idx.size())
    {
        return idx;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// --- rendering layer ----------------------------------------------------------

struct RenderCheckScene
{
    Mesh mesh;
    CameraParams cam;
    Texture texture;
    UnwarpConstants consts;
    int width = 32;
    int height = 32;
};

struct RenderCheckOptions
{
    double step = 1e-5;             ///< central-difference step; truncation error grows as step^2 on small triangles
    double edge_distance = 1.0;    ///< pixels closer than this to a visible edge are excluded
    std::size_t max_components = 0; ///< per block; 0 checks every component
    std::uint64_t seed = 0;         ///< upstream weights and component sampling
    int threads = 1;
};

/**
 * Checks d_texture, d_vertices and d_camera of render_backward on the
 * objective sum over interior pixels of <g, rendered>, with g random.
 * Vertex components whose stencil moves the vertex's UV across a texel grid
 * line or a clamp boundary are skipped: the bilinear lookup has a kink there.
 */
inline GradCheckReport check_render_gradients(const RenderCheckScene& s, const RenderCheckOptions& opt = {})
{
    RenderOptions ropts;
    ropts.threads = opt.threads;
    const FragmentBuffer fb = rasterize(s.mesh, s.cam, s.width, s.height, ropts);
    const Mask interior = interior_pixel_mask(s.mesh, s.cam, fb, opt.edge_distance);

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    ColorImage upstream(s.height, s.width);
    for (std::size_t i = 0; i < interior.size(); ++i)
    {
        for (std::size_t ch = 0; ch < 3; ++ch)
        {
            const double g = uniform(rng);
            upstream.data()[3 * i + ch] = interior[i] ? g : 0.0;
        }
    }
    const auto objective = [&](const Mesh& mesh, const CameraParams& cam, const Texture& tex) {
        const RenderedImage img = render(mesh, cam, tex, s.consts, s.width, s.height, ropts);
        return img.pixels.as_vector().dot(upstream.as_vector());
    };
    const RenderGradients grads = render_backward(s.mesh, s.cam, s.texture, s.consts, fb, upstream, ropts);

    GradCheckReport report;
    const Eigen::VectorXd tex0 = s.texture.as_vector();
    report.blocks.push_back(check_block(
        "render.d_texture",
        [&](const Eigen::VectorXd& t) {
            return objective(s.mesh, s.cam, Texture::from_vector(s.texture.rows(), s.texture.cols(), t));
        },
        tex0, grads.d_texture.as_vector(), opt.step,
        opt.max_components ? sample_components(tex0.size(), opt.max_components, rng) : std::vector<Eigen::Index>{}));

    const Eigen::VectorXd v0 = flatten(s.mesh.vertices);
    Mesh probe = s.mesh;
    const auto uv_kink = [&](Eigen::Index i) {
        Eigen::Vector3d lo = s.mesh.vertices.row(i / 3).transpose();
        Eigen::Vector3d hi = lo;
        lo[i % 3] -= opt.step;
        hi[i % 3] += opt.step;
        const UVSample a = unwarp_uv_with_jacobian(lo, s.consts, s.texture.rows(), s.texture.cols());
        const UVSample b = unwarp_uv_with_jacobian(hi, s.consts, s.texture.rows(), s.texture.cols());
        return std::floor(a.uv.u) != std::floor(b.uv.u) || std::floor(a.uv.v) != std::floor(b.uv.v) ||
               a.clamped_u != b.clamped_u || a.clamped_v != b.clamped_v || a.clamped_u || a.clamped_v;
    };
    report.blocks.push_back(check_block(
        "render.d_vertices",
        [&](const Eigen::VectorXd& v) {
            probe.vertices = unflatten(v);
            return objective(probe, s.cam, s.texture);
        },
        v0, flatten(grads.d_vertices), opt.step,
        opt.max_components ? sample_components(v0.size(), opt.max_components, rng) : std::vector<Eigen::Index>{},
        uv_kink));

    report.blocks.push_back(check_block(
        "render.d_camera",
        [&](const Eigen::VectorXd& m) { return objective(s.mesh, CameraParams::from_vector(m), s.texture); },
        s.cam.to_vector(), grads.d_camera, opt.step));
    return report;
}

/**
 * Seeded gradient-check scene: a jittered heightfield sheet of
 * (n + 1) x (n + 1) vertices in front of the camera, random pose, random
 * texel values.
 */
inline RenderCheckScene make_render_check_scene(std::uint64_t seed, int size = 32, int tex_size = 16, int n = 4)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    RenderCheckScene s;
    s.width = size;
    s.height = size;
    const int side = n + 1;
    s.mesh.vertices.resize(side * side, 3);
    const double spacing = 2.0 / n;
    const double wx = uniform(rng), wy = uniform(rng), ph = 3.0 * uniform(rng);
    for (int r = 0; r < side; ++r)
    {
        for (int c = 0; c < side; ++c)
        {
            const double x = -1.0 + spacing * c + 0.2 * spacing * uniform(rng);
            const double y = -1.0 + spacing * r + 0.2 * spacing * uniform(rng);
            const double z = 1.0 + 0.15 * std::sin(wx * x + wy * y + ph) + 0.02 * uniform(rng);
            s.mesh.vertices.row(r * side + c) << x, y, z;
        }
    }
    for (int r = 0; r < n; ++r)
    {
        for (int c = 0; c < n; ++c)
        {
            const int a = r * side + c, b = a + 1, d = a + side, e = d + 1;
            // Mixed windings exercise both orientations of the edge test.
            if ((r + c) % 2 == 0)
            {
                s.mesh.triangles.push_back({a, b, d});
                s.mesh.triangles.push_back({b, e, d});
            } else
            {
                s.mesh.triangles.push_back({a, d, b});
                s.mesh.triangles.push_back({b, d, e});
            }
        }
    }
    s.mesh.validate();
    s.cam.f = size * (0.4 + 0.05 * unit(rng));
    s.cam.pitch = 0.3 * uniform(rng);
    s.cam.yaw = 0.3 * uniform(rng);
    s.cam.roll = 3.0 * uniform(rng);
    s.cam.tx = size / 2.0 + 2.0 * uniform(rng);
    s.cam.ty = size / 2.0 + 2.0 * uniform(rng);
    s.texture = Texture(tex_size, tex_size);
    for (auto& x : s.texture.data())
    {
        x = unit(rng);
    }
    s.consts = UnwarpConstants::for_mesh(s.mesh.vertices, tex_size, tex_size);
    return s;
}

// --- decoder ---------------------------------------------------------------

/// Checks every weight, bias and input gradient of mlp_backward for <upstream, output>.
inline GradCheckReport check_mlp_gradients(const MlpDecoder& dec, const Eigen::VectorXd& input,
                                           const Eigen::VectorXd& upstream, double step = 1e-5)
{
    const auto fwd = mlp_forward(dec, input);
    const MlpGradients grads = mlp_backward(dec, fwd.cache, upstream);
    GradCheckReport report;

    MlpDecoder probe = dec;
    Eigen::VectorXd weights(dec.num_parameters());
    Eigen::VectorXd analytic(dec.num_parameters());
    Eigen::Index offset = 0;
    for (std::size_t k = 0; k < dec.layers().size(); ++k)
    {
        const auto& l = dec.layers()[k];
        weights.segment(offset, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
        analytic.segment(offset, l.weight.size()) =
            Eigen::Map<const Eigen::VectorXd>(grads.layers[k].weight.data(), l.weight.size());
        offset += l.weight.size();
        weights.segment(offset, l.bias.size()) = l.bias;
        analytic.segment(offset, l.bias.size()) = grads.layers[k].bias;
        offset += l.bias.size();
    }
    report.blocks.push_back(check_block(
        "mlp.d_parameters",
        [&](const Eigen::VectorXd& w) {
            Eigen::Index o = 0;
            for (auto& l : probe.layers())
            {
                l.weight = Eigen::Map<const Eigen::MatrixXd>(w.data() + o, l.weight.rows(), l.weight.cols());
                o += l.weight.size();
                l.bias = w.segment(o, l.bias.size());
                o += l.bias.size();
            }
            return upstream.dot(mlp_forward(probe, input).output);
        },
        weights, analytic, step));
    report.blocks.push_back(check_block(
        "mlp.d_input", [&](const Eigen::VectorXd& x) { return upstream.dot(mlp_forward(dec, x).output); }, input,
        grads.d_input, step));
    return report;
}

/// Random decoder with 1-2 hidden layers, random biases, input and upstream.
inline GradCheckReport check_random_mlp(std::uint64_t seed, double step = 1e-5)
{
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> width(2, 12);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    std::vector<int> dims{width(rng)};
    const int hidden = 1 + static_cast<int>(rng() % 2);
    for (int h = 0; h < hidden; ++h)
    {
        dims.push_back(width(rng) + 4);
    }
    dims.push_back(width(rng));
    MlpDecoder dec = MlpDecoder::create(dims, rng());
    for (auto& l : dec.layers())
    {
        l.bias = l.bias.unaryExpr([&](double) { return 0.5 * uniform(rng); });
    }
    Eigen::VectorXd input = Eigen::VectorXd::NullaryExpr(dims.front(), [&]() { return uniform(rng); });
    Eigen::VectorXd upstream = Eigen::VectorXd::NullaryExpr(dims.back(), [&]() { return uniform(rng); });
    return check_mlp_gradients(dec, input, upstream, step);
}

// --- landmarks -------------------------------------------------------------

/// Checks the camera and vertex gradients of landmark_loss.
inline GradCheckReport check_landmark_gradients(const Mesh& mesh, const CameraParams& cam,
                                                const LandmarkSet& landmarks, double step = 1e-5)
{
    const LandmarkLoss l = landmark_loss(mesh, cam, landmarks);
    GradCheckReport report;
    report.blocks.push_back(check_block(
        "landmark.d_camera",
        [&](const Eigen::VectorXd& m) { return landmark_loss(mesh, CameraParams::from_vector(m), landmarks).value; },
        cam.to_vector(), l.d_camera, step));

    // Only landmark vertices influence the loss; checking those keeps the harness fast on large meshes.
    std::vector<int> used(mesh.landmark_indices.begin(), mesh.landmark_indices.end());
    std::sort(used.begin(), used.end());
    used.erase(std::unique(used.begin(), used.end()), used.end());
    std::vector<Eigen::Index> components;
    for (int v : used)
    {
        for (int a = 0; a < 3; ++a)
        {
            components.push_back(3 * static_cast<Eigen::Index>(v) + a);
        }
    }
    Mesh probe = mesh;
    report.blocks.push_back(check_block(
        "landmark.d_vertices",
        [&](const Eigen::VectorXd& v) {
            probe.vertices = unflatten(v);
            return landmark_loss(probe, cam, landmarks).value;
        },
        flatten(mesh.vertices), flatten(l.scatter(mesh)), step, components));
    return report;
}

/// Random mesh, landmark table (repeats allowed), camera, targets and visibility.
inline GradCheckReport check_random_landmarks(std::uint64_t seed, double step = 1e-5)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    Mesh mesh;
    const int q = 80 + static_cast<int>(rng() % 60);
    mesh.vertices = Vertices::NullaryExpr(q, 3, [&]() { return uniform(rng); });
    mesh.triangles.push_back({0, 1, 2});
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        mesh.landmark_indices.push_back(static_cast<int>(rng() % q));
    }
    CameraParams cam{20.0 + 10.0 * uniform(rng), 0.5 * uniform(rng), 0.5 * uniform(rng), 3.0 * uniform(rng),
                     32.0 + 5.0 * uniform(rng), 32.0 + 5.0 * uniform(rng)};
    LandmarkSet lm = project_landmarks(mesh, cam);
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        lm.points(k, 0) += 3.0 * uniform(rng);
        lm.points(k, 1) += 3.0 * uniform(rng);
        lm.visible[k] = uniform(rng) > -0.6;
    }
    lm.visible[static_cast<std::size_t>(rng() % kNumLandmarks)] = true;
    return check_landmark_gradients(mesh, cam, lm, step);
}

} // namespace facefit

#endif /* FACEFIT_GRADCHECK_HPP */
