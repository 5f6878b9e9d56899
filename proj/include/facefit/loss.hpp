/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/loss.hpp
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

#ifndef FACEFIT_LOSS_HPP
#define FACEFIT_LOSS_HPP

#include "facefit/core/error.hpp"
#include "facefit/geometry.hpp"
#include "facefit/image.hpp"
#include "facefit/mesh_io.hpp"
#include "facefit/render.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

// Reductions used throughout:
//   rec_loss       mean |rendered - target| over selected pixels and channels
//   landmark_loss  Frobenius norm of the visible landmark residuals (pixels)
//   L_S            root-mean-square vertex distance
//   L_T            mean |T - T~| over valid texels and channels
//   L_m            Euclidean norm of the camera parameter difference

namespace facefit {

inline double sign_or_zero(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// 68 image-space landmarks (pixels) with per-landmark visibility.
struct LandmarkSet
{
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> points =
        Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>::Zero(kNumLandmarks, 2);
    std::vector<bool> visible = std::vector<bool>(kNumLandmarks, true);

    int num_visible() const { return static_cast<int>(std::count(visible.begin(), visible.end(), true)); }

    void validate() const
    {
        require_dims(points.rows() == kNumLandmarks && visible.size() == kNumLandmarks,
                     "a landmark set has exactly 68 entries");
        if (!points.allFinite())
        {
            throw Error("landmark coordinates must be finite");
        }
    }
};

/// Landmark vertices of `mesh` projected with `cam`; all marked visible.
inline LandmarkSet project_landmarks(const Mesh& mesh, const CameraParams& cam)
{
    if (mesh.landmark_indices.size() != kNumLandmarks)
    {
        throw MissingLandmarks("mesh landmark table has " + std::to_string(mesh.landmark_indices.size()) +
                               " entries, expected 68");
    }
    const WeakPerspective camera(cam);
    LandmarkSet out;
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        out.points.row(k) = camera.project(mesh.vertices.row(mesh.landmark_indices[k]).transpose()).transpose();
    }
    return out;
}

/**
 * Projected landmarks with visibility taken from a fragment buffer: a
 * landmark is visible when it projects inside the frame onto a covered pixel
 * whose depth is within `depth_tolerance` (model units) of its own.
 */
inline LandmarkSet project_landmarks(const Mesh& mesh, const CameraParams& cam, const FragmentBuffer& fb,
                                     double depth_tolerance)
{
    LandmarkSet out = project_landmarks(mesh, cam);
    const WeakPerspective camera(cam);
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        const double x = out.points(k, 0), y = out.points(k, 1);
        const int c = static_cast<int>(std::floor(x)), r = static_cast<int>(std::floor(y));
        if (r < 0 || c < 0 || r >= fb.height() || c >= fb.width() || !fb.at(r, c).covered())
        {
            out.visible[k] = false;
            continue;
        }
        const double z = camera.depth(mesh.vertices.row(mesh.landmark_indices[k]).transpose());
        out.visible[k] = fb.at(r, c).depth - z <= depth_tolerance;
    }
    return out;
}

/// CSV, 68 rows of `x,y,visible` (visible is 0 or 1). An optional `x,y,visible` header is accepted.
inline LandmarkSet read_landmark_csv(const std::filesystem::path& path)
{
    auto in = detail::open_for_reading(path);
    LandmarkSet out;
    std::string line;
    int row = 0, line_no = 0;
    while (std::getline(in, line))
    {
        ++line_no;
        if (line.empty() || line == "\r" || line.rfind("x,y", 0) == 0)
        {
            continue;
        }
        const std::string ctx = path.string() + ":" + std::to_string(line_no);
        std::stringstream ss(line);
        std::string x, y, vis;
        if (!std::getline(ss, x, ',') || !std::getline(ss, y, ',') || !std::getline(ss, vis))
        {
            throw ParseError(ctx + ": expected x,y,visible");
        }
        if (!vis.empty() && vis.back() == '\r')
        {
            vis.pop_back();
        }
        if (row >= kNumLandmarks)
        {
            throw ParseError(path.string() + ": more than 68 landmark rows");
        }
        out.points(row, 0) = detail::parse_double(x, ctx);
        out.points(row, 1) = detail::parse_double(y, ctx);
        const long v = detail::parse_int(vis, ctx);
        if (v != 0 && v != 1)
        {
            throw ParseError(ctx + ": visibility must be 0 or 1");
        }
        out.visible[row] = v == 1;
        ++row;
    }
    if (row != kNumLandmarks)
    {
        throw ParseError(path.string() + ": expected 68 landmark rows, found " + std::to_string(row));
    }
    return out;
}

inline void write_landmark_csv(const std::filesystem::path& path, const LandmarkSet& lm)
{
    lm.validate();
    auto out = detail::open_for_writing(path);
    out << "x,y,visible\n";
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        out << detail::format_double(lm.points(k, 0)) << ',' << detail::format_double(lm.points(k, 1)) << ','
            << (lm.visible[k] ? 1 : 0) << '\n';
    }
    if (!out)
    {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

struct ImageLoss
{
    double value = 0.0;
    ColorImage gradient; ///< d value / d rendered pixels
    std::size_t selected_pixels = 0;
};

/**
 * Mean absolute difference between the rendered and target images, over all
 * pixels or only over the rendered coverage. The subgradient at an exact
 * match is 0.
 */
inline ImageLoss rec_loss(const RenderedImage& rendered, const ColorImage& target, bool mask_to_coverage)
{
    require_dims(rendered.pixels.same_shape(target), "rendered and target images differ in size");
    require_dims(rendered.coverage.size() == static_cast<std::size_t>(target.rows()) * target.cols(),
                 "coverage mask does not match the image");
    ImageLoss out;
    out.gradient = ColorImage(target.rows(), target.cols());
    for (std::size_t i = 0; i < rendered.coverage.size(); ++i)
    {
        if (!mask_to_coverage || rendered.coverage[i])
        {
            ++out.selected_pixels;
        }
    }
    if (out.selected_pixels == 0)
    {
        throw EmptySelection("reconstruction loss has no pixels to compare");
    }
    const double scale = 1.0 / (3.0 * static_cast<double>(out.selected_pixels));
    const auto& r = rendered.pixels.data();
    const auto& t = target.data();
    auto& g = out.gradient.data();
    double sum = 0.0;
    for (std::size_t i = 0; i < rendered.coverage.size(); ++i)
    {
        if (mask_to_coverage && !rendered.coverage[i])
        {
            continue;
        }
        for (std::size_t ch = 0; ch < 3; ++ch)
        {
            const double d = r[3 * i + ch] - t[3 * i + ch];
            sum += std::abs(d);
            g[3 * i + ch] = sign_or_zero(d) * scale;
        }
    }
    out.value = sum * scale;
    return out;
}

struct LandmarkLoss
{
    double value = 0.0;
    Vector6d d_camera = Vector6d::Zero();
    Vertices d_landmark_vertices; ///< 68 x 3, row k is the gradient for landmark k's vertex

    /// Scatters the landmark-vertex gradient into a full Q x 3 array.
    Vertices scatter(const Mesh& mesh) const
    {
        Vertices d = Vertices::Zero(mesh.num_vertices(), 3);
        for (int k = 0; k < kNumLandmarks; ++k)
        {
            d.row(mesh.landmark_indices[k]) += d_landmark_vertices.row(k);
        }
        return d;
    }
};

/// Frobenius norm of (projected landmark vertices - target) over visible landmarks.
inline LandmarkLoss landmark_loss(const Mesh& mesh, const CameraParams& cam, const LandmarkSet& landmarks)
{
    landmarks.validate();
    if (mesh.landmark_indices.size() != kNumLandmarks)
    {
        throw MissingLandmarks("mesh landmark table has " + std::to_string(mesh.landmark_indices.size()) +
                               " entries, expected 68");
    }
    if (landmarks.num_visible() == 0)
    {
        throw EmptySelection("landmark loss needs at least one visible landmark");
    }
    const WeakPerspective camera(cam);
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> residual =
        Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>::Zero(kNumLandmarks, 2);
    double sq = 0.0;
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        if (!landmarks.visible[k])
        {
            continue;
        }
        const Eigen::Vector3d s = mesh.vertices.row(mesh.landmark_indices[k]).transpose();
        residual.row(k) = camera.project(s).transpose() - landmarks.points.row(k);
        sq += residual.row(k).squaredNorm();
    }
    LandmarkLoss out;
    out.value = std::sqrt(sq);
    out.d_landmark_vertices = Vertices::Zero(kNumLandmarks, 3);
    if (out.value == 0.0)
    {
        return out;
    }
    const Eigen::Matrix<double, 2, 3> j_vertex = camera.vertex_jacobian();
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        if (!landmarks.visible[k])
        {
            continue;
        }
        const Eigen::Vector2d g = residual.row(k).transpose() / out.value;
        const Eigen::Vector3d s = mesh.vertices.row(mesh.landmark_indices[k]).transpose();
        out.d_camera += camera.camera_jacobian(s).transpose() * g;
        out.d_landmark_vertices.row(k) = (j_vertex.transpose() * g).transpose();
    }
    return out;
}

struct PretrainLosses
{
    double shape = 0.0;   ///< L_S
    double texture = 0.0; ///< L_T
    double camera = 0.0;  ///< L_m
    Vertices d_shape;
    Texture d_texture;
    Vector6d d_camera = Vector6d::Zero();
};

/**
 * Losses against pseudo ground truth: RMS vertex deviation, masked mean
 * absolute texel deviation, and the camera parameter distance.
 */
inline PretrainLosses pretrain_losses(const Vertices& shape, const Vertices& shape_target, const Texture& texture,
                                      const Texture& texture_target, const Mask& texture_mask,
                                      const CameraParams& cam, const CameraParams& cam_target)
{
    require_dims(shape.rows() == shape_target.rows() && shape.rows() > 0, "shape and target differ in vertex count");
    require_dims(texture.same_shape(texture_target), "texture and target differ in size");
    require_dims(texture_mask.size() == static_cast<std::size_t>(texture.rows()) * texture.cols(),
                 "texture mask does not match the texture");

    PretrainLosses out;
    const Vertices diff = shape - shape_target;
    const double q = static_cast<double>(shape.rows());
    out.shape = std::sqrt(diff.squaredNorm() / q);
    out.d_shape = out.shape > 0.0 ? Vertices(diff / (q * out.shape)) : Vertices(Vertices::Zero(shape.rows(), 3));

    std::size_t valid = 0;
    for (auto m : texture_mask)
    {
        valid += m ? 1 : 0;
    }
    if (valid == 0)
    {
        throw EmptySelection("pseudo ground-truth texture has no valid texels");
    }
    out.d_texture = Texture(texture.rows(), texture.cols());
    const double scale = 1.0 / (3.0 * static_cast<double>(valid));
    double sum = 0.0;
    for (std::size_t i = 0; i < texture_mask.size(); ++i)
    {
        if (!texture_mask[i])
        {
            continue;
        }
        for (std::size_t ch = 0; ch < 3; ++ch)
        {
            const double d = texture.data()[3 * i + ch] - texture_target.data()[3 * i + ch];
            sum += std::abs(d);
            out.d_texture.data()[3 * i + ch] = sign_or_zero(d) * scale;
        }
    }
    out.texture = sum * scale;

    const Vector6d dm = cam.to_vector() - cam_target.to_vector();
    out.camera = dm.norm();
    if (out.camera > 0.0)
    {
        out.d_camera = dm / out.camera;
    }
    return out;
}

/// Non-negative weights; the adversarial weight is fixed at zero.
struct LossWeights
{
    double lambda_landmark = 1.0;
    double lambda_texture = 1.0;
    double lambda_camera = 1.0;

    void validate() const
    {
        if (!(lambda_landmark >= 0.0) || !(lambda_texture >= 0.0) || !(lambda_camera >= 0.0) ||
            !std::isfinite(lambda_landmark) || !std::isfinite(lambda_texture) || !std::isfinite(lambda_camera))
        {
            throw Error("loss weights must be finite and non-negative");
        }
    }
};

struct LossComponents
{
    double rec = 0.0;
    double landmark = 0.0;
    double shape = 0.0;
    double texture = 0.0;
    double camera = 0.0;
};

enum class LossPhase
{
    Fitting,    ///< rec + lambda_L * landmark
    Pretraining ///< shape + lambda_T * texture + lambda_m * camera + lambda_L * landmark
};

inline double total_loss(const LossComponents& c, const LossWeights& w, LossPhase phase = LossPhase::Fitting)
{
    w.validate();
    if (phase == LossPhase::Fitting)
    {
        return c.rec + w.lambda_landmark * c.landmark;
    }
    return c.shape + w.lambda_texture * c.texture + w.lambda_camera * c.camera + w.lambda_landmark * c.landmark;
}

/// sqrt(width * height) of the box around the visible landmarks.
inline double landmark_bbox_size(const LandmarkSet& lm)
{
    lm.validate();
    if (lm.num_visible() == 0)
    {
        throw EmptySelection("no visible landmarks to bound");
    }
    Eigen::Vector2d lo = Eigen::Vector2d::Constant(std::numeric_limits<double>::infinity());
    Eigen::Vector2d hi = -lo;
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        if (lm.visible[k])
        {
            lo = lo.cwiseMin(lm.points.row(k).transpose());
            hi = hi.cwiseMax(lm.points.row(k).transpose());
        }
    }
    return std::sqrt((hi - lo).prod());
}

/// Mean visible-landmark error divided by the face bounding-box size.
inline double nme_alignment(const LandmarkSet& predicted, const LandmarkSet& truth, double bbox_size)
{
    predicted.validate();
    truth.validate();
    if (!(bbox_size > 0.0) || !std::isfinite(bbox_size))
    {
        throw Error("bounding box size must be positive");
    }
    if (predicted.visible != truth.visible)
    {
        throw DimensionMismatch("predicted and true landmark visibility masks differ");
    }
    if (truth.num_visible() == 0)
    {
        throw EmptySelection("no visible landmarks to evaluate");
    }
    double sum = 0.0;
    for (int k = 0; k < kNumLandmarks; ++k)
    {
        if (truth.visible[k])
        {
            sum += (predicted.points.row(k) - truth.points.row(k)).norm();
        }
    }
    return sum / truth.num_visible() / bbox_size;
}

/// Mean per-vertex distance divided by the true mesh's inter-ocular distance.
inline double nme_shape(const Mesh& predicted, const Mesh& truth, EyeCornerLandmarks eyes = {})
{
    require_dims(predicted.num_vertices() == truth.num_vertices() && truth.num_vertices() > 0,
                 "meshes differ in vertex count (" + std::to_string(predicted.num_vertices()) + " vs " +
                     std::to_string(truth.num_vertices()) + ")");
    if (!predicted.triangles.empty() && !truth.triangles.empty() && predicted.triangles != truth.triangles)
    {
        throw DimensionMismatch("meshes do not share topology");
    }
    const double iod = inter_ocular_distance(truth, eyes);
    if (!(iod > 0.0))
    {
        throw NumericError("inter-ocular distance of the reference mesh is zero");
    }
    double sum = 0.0;
    for (int i = 0; i < truth.num_vertices(); ++i)
    {
        sum += (predicted.vertices.row(i) - truth.vertices.row(i)).norm();
    }
    return sum / truth.num_vertices() / iod;
}

struct ShapeMatchLoss
{
    double value = 0.0;
    double vertex_term = 0.0; ///< RMS vertex distance
    double normal_term = 0.0; ///< mean (1 - cos) between vertex normals
    Vertices d_vertices;
};

/**
 * RMS vertex distance plus normal_weight * mean(1 - cos angle) between the
 * predicted and target vertex normals. `target_normals` is only read when
 * normal_weight > 0.
 */
inline ShapeMatchLoss shape_match_loss(const Mesh& predicted, const Vertices& target, const Vertices& target_normals,
                                       double normal_weight)
{
    require_dims(predicted.vertices.rows() == target.rows(), "predicted and target vertex counts differ");
    ShapeMatchLoss out;
    const double q = static_cast<double>(target.rows());
    const Vertices diff = predicted.vertices - target;
    out.vertex_term = std::sqrt(diff.squaredNorm() / q);
    out.d_vertices = out.vertex_term > 0.0 ? Vertices(diff / (q * out.vertex_term))
                                           : Vertices(Vertices::Zero(target.rows(), 3));
    if (normal_weight > 0.0)
    {
        require_dims(target_normals.rows() == target.rows(), "target normals have the wrong vertex count");
        const Vertices normals = vertex_normals(predicted);
        double sum = 0.0;
        for (Eigen::Index i = 0; i < normals.rows(); ++i)
        {
            sum += 1.0 - normals.row(i).dot(target_normals.row(i));
        }
        out.normal_term = sum / q;
        const Vertices d_normals = -(normal_weight / q) * target_normals;
        out.d_vertices += vertex_normals_backward(predicted, d_normals);
    }
    out.value = out.vertex_term + normal_weight * out.normal_term;
    return out;
}

} // namespace facefit

#endif /* FACEFIT_LOSS_HPP */
