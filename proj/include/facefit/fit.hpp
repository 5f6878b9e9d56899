/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/fit.hpp
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

#ifndef FACEFIT_FIT_HPP
#define FACEFIT_FIT_HPP

#include "facefit/core/error.hpp"
#include "facefit/geometry.hpp"
#include "facefit/image.hpp"
#include "facefit/loss.hpp"
#include "facefit/model.hpp"
#include "facefit/render.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace facefit {

enum class Optimizer
{
    Adam,
    GradientDescent
};

/// Moment accumulators for a list of parameter blocks.
struct AdamState
{
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    Optimizer optimizer = Optimizer::Adam;
    long step = 0;
    std::vector<Eigen::VectorXd> m;
    std::vector<Eigen::VectorXd> v;
};

/**
 * One bias-corrected Adam update (or a plain gradient step) in place.
 * Accumulators are created on the first call and must keep their shapes.
 */
inline void adam_step(AdamState& state, std::vector<Eigen::VectorXd>& params,
                      const std::vector<Eigen::VectorXd>& grads)
{
    require_dims(params.size() == grads.size(), "parameter and gradient block counts differ");
    for (std::size_t b = 0; b < params.size(); ++b)
    {
        require_dims(params[b].size() == grads[b].size(),
                     "gradient block " + std::to_string(b) + " has the wrong length");
    }
    if (state.m.empty() && state.step == 0)
    {
        for (const auto& p : params)
        {
            state.m.push_back(Eigen::VectorXd::Zero(p.size()));
            state.v.push_back(Eigen::VectorXd::Zero(p.size()));
        }
    }
    require_dims(state.m.size() == params.size(), "optimizer state has the wrong number of blocks");
    ++state.step;
    if (state.optimizer == Optimizer::GradientDescent)
    {
        for (std::size_t b = 0; b < params.size(); ++b)
        {
            params[b] -= state.lr * grads[b];
        }
        return;
    }
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t b = 0; b < params.size(); ++b)
    {
        require_dims(state.m[b].size() == params[b].size(), "optimizer state block " + std::to_string(b) +
                                                                 " does not match its parameters");
        state.m[b] = state.beta1 * state.m[b] + (1.0 - state.beta1) * grads[b];
        state.v[b] = state.beta2 * state.v[b] + (1.0 - state.beta2) * grads[b].cwiseProduct(grads[b]);
        params[b].array() -= state.lr * (state.m[b].array() / c1) / ((state.v[b].array() / c2).sqrt() + state.epsilon);
    }
}

/// Which variables an optimisation may move.
struct FreeBlocks
{
    bool camera = false;
    bool shape_params = false;   ///< linear coefficients or decoder latent
    bool texture_params = false; ///< linear texture coefficients
    bool texture = false;        ///< free-variable texture image
    bool vertices = false;       ///< free-variable vertex positions

    bool any() const { return camera || shape_params || texture_params || texture || vertices; }
};

struct FitConfig
{
    int max_iters = 1000;
    double tolerance = 0.0; ///< stop once |loss change| falls below this; 0 disables
    double lr = 2e-4;
    double lr_decay = 1.0; ///< per-step multiplicative factor on lr; 1 keeps it constant
    Optimizer optimizer = Optimizer::Adam;
    FreeBlocks free;
    std::uint64_t seed = 0;
    int snapshot_stride = 0; ///< 0 disables snapshots
    double lambda_landmark = 1.0;
    bool mask_to_coverage = true;
    double divergence_factor = 10.0;
    int threads = 1;

    void validate(bool need_free_block = true) const
    {
        if (max_iters <= 0)
        {
            throw Error("max_iters must be positive");
        }
        if (!(tolerance >= 0.0) || !(lr > 0.0) || !(lr_decay > 0.0 && lr_decay <= 1.0) ||
            !(lambda_landmark >= 0.0) || !(divergence_factor > 1.0) || snapshot_stride < 0)
        {
            throw Error("invalid fit configuration value");
        }
        if (need_free_block && !free.any())
        {
            throw Error("fit configuration has no free parameter block");
        }
    }
};

inline FitConfig fit_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object())
    {
        throw ParseError("fit config must be a JSON object");
    }
    FitConfig cfg;
    try
    {
        for (const auto& [key, value] : j.items())
        {
            if (key == "max_iters")
                cfg.max_iters = value.get<int>();
            else if (key == "tolerance")
                cfg.tolerance = value.get<double>();
            else if (key == "lr")
                cfg.lr = value.get<double>();
            else if (key == "lr_decay")
                cfg.lr_decay = value.get<double>();
            else if (key == "seed")
                cfg.seed = value.get<std::uint64_t>();
            else if (key == "snapshot_stride")
                cfg.snapshot_stride = value.get<int>();
            else if (key == "lambda_landmark")
                cfg.lambda_landmark = value.get<double>();
            else if (key == "mask_to_coverage")
                cfg.mask_to_coverage = value.get<bool>();
            else if (key == "divergence_factor")
                cfg.divergence_factor = value.get<double>();
            else if (key == "optimizer")
            {
                const auto name = value.get<std::string>();
                if (name == "adam")
                    cfg.optimizer = Optimizer::Adam;
                else if (name == "gd")
                    cfg.optimizer = Optimizer::GradientDescent;
                else
                    throw ParseError("fit config field 'optimizer': unknown value '" + name + "'");
            } else if (key == "free")
            {
                for (const auto& block : value)
                {
                    const auto name = block.get<std::string>();
                    if (name == "camera")
                        cfg.free.camera = true;
                    else if (name == "shape_params")
                        cfg.free.shape_params = true;
                    else if (name == "texture_params")
                        cfg.free.texture_params = true;
                    else if (name == "texture")
                        cfg.free.texture = true;
                    else if (name == "vertices")
                        cfg.free.vertices = true;
                    else
                        throw ParseError("fit config field 'free': unknown block '" + name + "'");
                }
            } else
            {
                throw ParseError("fit config: unknown field '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e)
    {
        throw ParseError(std::string("fit config: ") + e.what());
    }
    try
    {
        cfg.validate();
    } catch (const Error& e)
    {
        throw ParseError(std::string("fit config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json fit_config_to_json(const FitConfig& cfg)
{
    nlohmann::json free = nlohmann::json::array();
    if (cfg.free.camera)
        free.push_back("camera");
    if (cfg.free.shape_params)
        free.push_back("shape_params");
    if (cfg.free.texture_params)
        free.push_back("texture_params");
    if (cfg.free.texture)
        free.push_back("texture");
    if (cfg.free.vertices)
        free.push_back("vertices");
    return {{"max_iters", cfg.max_iters},
            {"tolerance", cfg.tolerance},
            {"lr", cfg.lr},
            {"lr_decay", cfg.lr_decay},
            {"optimizer", cfg.optimizer == Optimizer::Adam ? "adam" : "gd"},
            {"free", free},
            {"seed", cfg.seed},
            {"snapshot_stride", cfg.snapshot_stride},
            {"lambda_landmark", cfg.lambda_landmark},
            {"mask_to_coverage", cfg.mask_to_coverage},
            {"divergence_factor", cfg.divergence_factor}};
}

struct FitTrace
{
    std::vector<double> losses; ///< loss at every evaluated iterate, in order
    int steps = 0;              ///< optimizer steps taken
    bool converged = false;     ///< stopped on the tolerance test

    /// Running minimum of the loss trace.
    std::vector<double> envelope() const
    {
        std::vector<double> out(losses.size());
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < losses.size(); ++i)
        {
            best = std::min(best, losses[i]);
            out[i] = best;
        }
        return out;
    }
};

/// Loss and gradient for each block at the given parameters.
using Objective = std::function<double(const std::vector<Eigen::VectorXd>&, std::vector<Eigen::VectorXd>&)>;

struct MinimizeResult
{
    std::vector<Eigen::VectorXd> params; ///< best iterate seen
    double loss = 0.0;                   ///< objective at `params`
    FitTrace trace;
};

/**
 * Runs the configured optimizer on `objective` and returns the iterate with
 * the lowest loss. Throws DivergenceError once the loss exceeds
 * cfg.divergence_factor times the initial loss.
 */
inline MinimizeResult minimize(const Objective& objective, std::vector<Eigen::VectorXd> params, const FitConfig& cfg,
                               const std::function<void(int, const std::vector<Eigen::VectorXd>&)>& on_iterate = {})
{
    cfg.validate(false);
    AdamState state;
    state.lr = cfg.lr;
    state.optimizer = cfg.optimizer;

    MinimizeResult out;
    std::vector<Eigen::VectorXd> grads(params.size());
    double initial = 0.0;
    double previous = 0.0;
    out.loss = std::numeric_limits<double>::infinity();
    for (int it = 0;; ++it)
    {
        for (std::size_t b = 0; b < params.size(); ++b)
        {
            grads[b] = Eigen::VectorXd::Zero(params[b].size());
        }
        const double loss = objective(params, grads);
        if (!std::isfinite(loss))
        {
            throw DivergenceError("objective became non-finite at iteration " + std::to_string(it));
        }
        if (on_iterate)
        {
            on_iterate(it, params);
        }
        out.trace.losses.push_back(loss);
        if (it == 0)
        {
            initial = loss;
        } else if (loss > cfg.divergence_factor * initial)
        {
            throw DivergenceError("loss " + std::to_string(loss) + " exceeds " +
                                  std::to_string(cfg.divergence_factor) + "x the initial loss " +
                                  std::to_string(initial));
        }
        if (loss < out.loss)
        {
            out.loss = loss;
            out.params = params;
        }
        if (loss == 0.0 || it == cfg.max_iters)
        {
            break;
        }
        if (it > 0 && std::abs(loss - previous) < cfg.tolerance)
        {
            out.trace.converged = true;
            break;
        }
        previous = loss;
        adam_step(state, params, grads);
        state.lr *= cfg.lr_decay;
        ++out.trace.steps;
    }
    return out;
}

// --- texture fitting --------------------------------------------------------

struct TextureFitResult
{
    Texture texture;
    Eigen::VectorXd coeffs; ///< empty in free-variable mode
    double loss = 0.0;      ///< masked mean absolute texel error
    FitTrace trace;
};

namespace detail {

/// Masked mean absolute error over texels and its gradient w.r.t. the flat texture.
inline double masked_l1(const Eigen::VectorXd& texture, const Texture& target, const Mask& mask, Eigen::VectorXd* grad)
{
    std::size_t valid = 0;
    for (auto m : mask)
    {
        valid += m ? 1 : 0;
    }
    const double scale = 1.0 / (3.0 * static_cast<double>(valid));
    double sum = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i)
    {
        if (!mask[i])
        {
            continue;
        }
        for (std::size_t ch = 0; ch < 3; ++ch)
        {
            const double d = texture[3 * i + ch] - target.data()[3 * i + ch];
            sum += std::abs(d);
            if (grad)
            {
                (*grad)[3 * i + ch] = sign_or_zero(d) * scale;
            }
        }
    }
    return sum * scale;
}

inline void check_texture_target(const Texture& target, const Mask& mask)
{
    require_dims(mask.size() == static_cast<std::size_t>(target.rows()) * target.cols(),
                 "texture mask does not match the target texture");
    if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    {
        throw EmptySelection("texture mask selects no texels");
    }
}

} // namespace detail

/// Fits linear texture coefficients (starting at zero) to the valid texels of `target`.
inline TextureFitResult fit_texture(const Texture& target, const Mask& mask, const LinearModel& model,
                                    const FitConfig& cfg)
{
    detail::check_texture_target(target, mask);
    require_dims(static_cast<std::size_t>(model.dim()) == target.size(), "texture model dimension " +
                                                                             std::to_string(model.dim()) +
                                                                             " does not match the target");
    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        const Eigen::VectorXd tex = linear_decode(model, p[0]);
        Eigen::VectorXd d = Eigen::VectorXd::Zero(tex.size());
        const double loss = detail::masked_l1(tex, target, mask, &d);
        g[0] = model.basis.transpose() * d;
        return loss;
    };
    auto res = minimize(objective, {Eigen::VectorXd::Zero(model.num_components())}, cfg);
    TextureFitResult out;
    out.coeffs = res.params[0];
    out.texture = Texture::from_vector(target.rows(), target.cols(), linear_decode(model, out.coeffs));
    out.loss = res.loss;
    out.trace = std::move(res.trace);
    return out;
}

/// Free-variable mode: the texture itself is optimised, starting from `init`.
inline TextureFitResult fit_texture_free(const Texture& target, const Mask& mask, const Texture& init,
                                         const FitConfig& cfg)
{
    detail::check_texture_target(target, mask);
    require_dims(init.same_shape(target), "initial texture does not match the target");
    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        return detail::masked_l1(p[0], target, mask, &g[0]);
    };
    auto res = minimize(objective, {Eigen::VectorXd(init.as_vector())}, cfg);
    TextureFitResult out;
    out.texture = Texture::from_vector(target.rows(), target.cols(), res.params[0]);
    out.loss = res.loss;
    out.trace = std::move(res.trace);
    return out;
}

// --- shape fitting ----------------------------------------------------------

struct ShapeFitResult
{
    Mesh mesh;
    Eigen::VectorXd coeffs; ///< linear coefficients or decoder latent; empty for free vertices
    double loss = 0.0;      ///< vertex + weighted normal term
    double nme = 0.0;       ///< nme_shape against the target
    FitTrace trace;
};

namespace detail {

inline Vertices target_normals_or_empty(const Mesh& target, double normal_weight)
{
    return normal_weight > 0.0 ? vertex_normals(target) : Vertices(0, 3);
}

inline ShapeFitResult finish_shape_fit(const Mesh& target, Vertices vertices, Eigen::VectorXd coeffs,
                                       MinimizeResult&& res)
{
    ShapeFitResult out;
    out.mesh = target;
    out.mesh.vertices = std::move(vertices);
    out.coeffs = std::move(coeffs);
    out.loss = res.loss;
    out.nme = nme_shape(out.mesh, target);
    out.trace = std::move(res.trace);
    return out;
}

} // namespace detail

/// Fits linear shape coefficients (starting at zero); the target supplies topology and landmarks.
inline ShapeFitResult fit_shape(const Mesh& target, const LinearModel& model, double normal_weight,
                                const FitConfig& cfg)
{
    target.validate();
    require_dims(model.dim() == 3 * target.num_vertices(), "shape model does not match the target vertex count");
    const Vertices target_normals = detail::target_normals_or_empty(target, normal_weight);
    Mesh work = target;
    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        work.vertices = unflatten(linear_decode(model, p[0]));
        const auto l = shape_match_loss(work, target.vertices, target_normals, normal_weight);
        g[0] = model.basis.transpose() * flatten(l.d_vertices);
        return l.value;
    };
    auto res = minimize(objective, {Eigen::VectorXd::Zero(model.num_components())}, cfg);
    Eigen::VectorXd coeffs = res.params[0];
    return detail::finish_shape_fit(target, unflatten(linear_decode(model, coeffs)), coeffs, std::move(res));
}

/// Fits a decoder latent with the decoder weights frozen.
inline ShapeFitResult fit_shape(const Mesh& target, const MlpDecoder& decoder, const Eigen::VectorXd& init_latent,
                                double normal_weight, const FitConfig& cfg)
{
    target.validate();
    require_dims(decoder.output_dim() == 3 * target.num_vertices(),
                 "decoder output does not match the target vertex count");
    require_dims(init_latent.size() == decoder.input_dim(), "initial latent has the wrong length");
    const Vertices target_normals = detail::target_normals_or_empty(target, normal_weight);
    Mesh work = target;
    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        const auto fwd = mlp_forward(decoder, p[0]);
        work.vertices = unflatten(fwd.output);
        const auto l = shape_match_loss(work, target.vertices, target_normals, normal_weight);
        g[0] = mlp_backward(decoder, fwd.cache, flatten(l.d_vertices)).d_input;
        return l.value;
    };
    auto res = minimize(objective, {init_latent}, cfg);
    Eigen::VectorXd latent = res.params[0];
    return detail::finish_shape_fit(target, unflatten(mlp_forward(decoder, latent).output), latent, std::move(res));
}

/// Free-variable mode: vertex positions are optimised directly from `init`.
inline ShapeFitResult fit_shape_free(const Mesh& target, const Vertices& init, double normal_weight,
                                     const FitConfig& cfg)
{
    target.validate();
    require_dims(init.rows() == target.num_vertices(), "initial vertices do not match the target");
    const Vertices target_normals = detail::target_normals_or_empty(target, normal_weight);
    Mesh work = target;
    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        work.vertices = unflatten(p[0]);
        const auto l = shape_match_loss(work, target.vertices, target_normals, normal_weight);
        g[0] = flatten(l.d_vertices);
        return l.value;
    };
    auto res = minimize(objective, {flatten(init)}, cfg);
    return detail::finish_shape_fit(target, unflatten(res.params[0]), Eigen::VectorXd(), std::move(res));
}

// --- decoder training -------------------------------------------------------

struct DecoderTraining
{
    MlpDecoder decoder;
    std::vector<Eigen::VectorXd> latents; ///< one per training sample
    double loss = 0.0;                    ///< mean squared vertex-coordinate error
    FitTrace trace;
};

/**
 * Auto-decoder training: decoder weights and one latent per sample are
 * optimised jointly on the mean squared reconstruction error. Latents start
 * at `init_latents` (for example PCA coefficients).
 */
inline DecoderTraining train_decoder(const std::vector<Eigen::VectorXd>& samples,
                                     const std::vector<Eigen::VectorXd>& init_latents,
                                     const std::vector<int>& hidden_dims, const FitConfig& cfg)
{
    if (samples.empty() || samples.size() != init_latents.size())
    {
        throw DimensionMismatch("decoder training needs one initial latent per sample");
    }
    const int latent_dim = static_cast<int>(init_latents[0].size());
    const int out_dim = static_cast<int>(samples[0].size());
    std::vector<int> dims{latent_dim};
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    dims.push_back(out_dim);
    MlpDecoder decoder = MlpDecoder::create(dims, cfg.seed);

    // Block layout: W0, b0, W1, b1, ..., then one block per latent.
    std::vector<Eigen::VectorXd> params;
    for (const auto& layer : decoder.layers())
    {
        params.push_back(Eigen::Map<const Eigen::VectorXd>(layer.weight.data(), layer.weight.size()));
        params.push_back(layer.bias);
    }
    const std::size_t latent_offset = params.size();
    for (std::size_t s = 0; s < samples.size(); ++s)
    {
        require_dims(samples[s].size() == out_dim && init_latents[s].size() == latent_dim,
                     "training sample " + std::to_string(s) + " has the wrong dimension");
        params.push_back(init_latents[s]);
    }

    auto unpack = [&](const std::vector<Eigen::VectorXd>& p, MlpDecoder& dec) {
        auto& layers = dec.layers();
        for (std::size_t k = 0; k < layers.size(); ++k)
        {
            layers[k].weight = Eigen::Map<const Eigen::MatrixXd>(p[2 * k].data(), layers[k].weight.rows(),
                                                                 layers[k].weight.cols());
            layers[k].bias = p[2 * k + 1];
        }
    };

    MlpDecoder work = decoder;
    const double scale = 1.0 / (static_cast<double>(samples.size()) * out_dim);
    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        unpack(p, work);
        double loss = 0.0;
        for (std::size_t s = 0; s < samples.size(); ++s)
        {
            const auto fwd = mlp_forward(work, p[latent_offset + s]);
            const Eigen::VectorXd r = fwd.output - samples[s];
            loss += r.squaredNorm() * scale;
            const auto grads = mlp_backward(work, fwd.cache, 2.0 * scale * r);
            for (std::size_t k = 0; k < grads.layers.size(); ++k)
            {
                g[2 * k] += Eigen::Map<const Eigen::VectorXd>(grads.layers[k].weight.data(),
                                                              grads.layers[k].weight.size());
                g[2 * k + 1] += grads.layers[k].bias;
            }
            g[latent_offset + s] = grads.d_input;
        }
        return loss;
    };
    auto res = minimize(objective, std::move(params), cfg);
    DecoderTraining out;
    out.decoder = decoder;
    unpack(res.params, out.decoder);
    out.latents.assign(res.params.begin() + static_cast<long>(latent_offset), res.params.end());
    out.loss = res.loss;
    out.trace = std::move(res.trace);
    return out;
}

// --- full scene fitting -----------------------------------------------------

/// Optional generative models for the shape and texture blocks.
struct SceneModels
{
    const LinearModel* shape = nullptr;   ///< used when shape_params is free and no decoder is given
    const MlpDecoder* decoder = nullptr;  ///< shape decoder; its weights stay fixed
    const LinearModel* texture = nullptr; ///< used when texture_params is free
};

struct SceneState
{
    CameraParams cam;
    Mesh mesh;
    Texture texture;
    Eigen::VectorXd shape_coeffs;   ///< linear coefficients or decoder latent
    Eigen::VectorXd texture_coeffs; ///< linear texture coefficients
};

struct SceneFitResult
{
    SceneState state;
    double loss = 0.0; ///< rec_loss + lambda_landmark * landmark_loss at `state`
    double rec = 0.0;
    double landmark = 0.0;
    FitTrace trace;
};

struct SceneFitInputs
{
    const ColorImage* target = nullptr;
    UnwarpConstants consts;
    const LandmarkSet* landmarks = nullptr;
    SceneModels models;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    /// Called with (iteration, rendered iterate) every cfg.snapshot_stride iterations.
    std::function<void(int, const RenderedImage&)> on_snapshot;
};

namespace detail {

/// Maps the optimisation blocks to a concrete scene and back.
class SceneParameterization
{
public:
    SceneParameterization(const SceneState& init, const FitConfig& cfg, const SceneModels& models)
        : base_(init), free_(cfg.free), models_(models)
    {
        if (free_.shape_params && !models_.shape && !models_.decoder)
        {
            throw Error("shape_params is free but no shape model or decoder was supplied");
        }
        if (free_.texture_params && !models_.texture)
        {
            throw Error("texture_params is free but no texture model was supplied");
        }
        if (free_.shape_params && free_.vertices)
        {
            throw Error("shape_params and vertices cannot both be free");
        }
        if (free_.texture_params && free_.texture)
        {
            throw Error("texture_params and texture cannot both be free");
        }
        if (free_.shape_params)
        {
            const Eigen::Index n = models_.decoder ? models_.decoder->input_dim() : models_.shape->num_components();
            if (base_.shape_coeffs.size() == 0)
            {
                base_.shape_coeffs = Eigen::VectorXd::Zero(n);
            }
            require_dims(base_.shape_coeffs.size() == n, "initial shape coefficients have the wrong length");
        }
        if (free_.texture_params)
        {
            if (base_.texture_coeffs.size() == 0)
            {
                base_.texture_coeffs = Eigen::VectorXd::Zero(models_.texture->num_components());
            }
            require_dims(base_.texture_coeffs.size() == models_.texture->num_components(),
                         "initial texture coefficients have the wrong length");
        }
    }

    std::vector<Eigen::VectorXd> initial_params() const
    {
        std::vector<Eigen::VectorXd> p;
        if (free_.camera)
            p.push_back(base_.cam.to_vector());
        if (free_.shape_params)
            p.push_back(base_.shape_coeffs);
        if (free_.vertices)
            p.push_back(flatten(base_.mesh.vertices));
        if (free_.texture_params)
            p.push_back(base_.texture_coeffs);
        if (free_.texture)
            p.push_back(base_.texture.as_vector());
        return p;
    }

    /// Scene at `p`; when `cache` is given the decoder forward cache is stored for the backward pass.
    SceneState decode(const std::vector<Eigen::VectorXd>& p, std::optional<MlpCache>* cache = nullptr) const
    {
        SceneState s = base_;
        std::size_t b = 0;
        if (free_.camera)
            s.cam = CameraParams::from_vector(p[b++]);
        if (free_.shape_params)
        {
            s.shape_coeffs = p[b++];
            if (models_.decoder)
            {
                auto fwd = mlp_forward(*models_.decoder, s.shape_coeffs);
                s.mesh.vertices = unflatten(fwd.output);
                if (cache)
                    *cache = std::move(fwd.cache);
            } else
            {
                s.mesh.vertices = unflatten(linear_decode(*models_.shape, s.shape_coeffs));
            }
        }
        if (free_.vertices)
            s.mesh.vertices = unflatten(p[b++]);
        if (free_.texture_params)
        {
            s.texture_coeffs = p[b++];
            s.texture = Texture::from_vector(base_.texture.rows(), base_.texture.cols(),
                                             linear_decode(*models_.texture, s.texture_coeffs));
        }
        if (free_.texture)
            s.texture = Texture::from_vector(base_.texture.rows(), base_.texture.cols(), p[b++]);
        return s;
    }

    /// Routes scene-level gradients into the block gradients.
    void pullback(const Vector6d& d_camera, const Vertices& d_vertices, const Texture& d_texture,
                  const std::optional<MlpCache>& cache, std::vector<Eigen::VectorXd>& g) const
    {
        std::size_t b = 0;
        if (free_.camera)
            g[b++] = d_camera;
        if (free_.shape_params)
        {
            const Eigen::VectorXd dv = flatten(d_vertices);
            if (models_.decoder)
                g[b++] = mlp_backward(*models_.decoder, *cache, dv).d_input;
            else
                g[b++] = models_.shape->basis.transpose() * dv;
        }
        if (free_.vertices)
            g[b++] = flatten(d_vertices);
        if (free_.texture_params)
            g[b++] = models_.texture->basis.transpose() * d_texture.as_vector();
        if (free_.texture)
            g[b++] = d_texture.as_vector();
    }

private:
    SceneState base_;
    FreeBlocks free_;
    SceneModels models_;
};

} // namespace detail

/**
 * Analysis-by-synthesis: minimises rec_loss (plus lambda_landmark *
 * landmark_loss when landmarks are supplied) through the renderer over the
 * free blocks of cfg. Visibility is recomputed at every iterate.
 */
inline SceneFitResult fit_scene(const SceneFitInputs& in, const SceneState& init, const FitConfig& cfg)
{
    cfg.validate();
    if (!in.target)
    {
        throw Error("fit_scene needs a target image");
    }
    init.mesh.validate();
    const ColorImage& target = *in.target;
    const detail::SceneParameterization param(init, cfg, in.models);
    RenderOptions ropts;
    ropts.threads = cfg.threads;
    ropts.background = in.background;

    struct Evaluation
    {
        double loss, rec, landmark;
    };
    auto evaluate = [&](const SceneState& s, std::optional<MlpCache>& cache, std::vector<Eigen::VectorXd>* g,
                        RenderedImage* rendered_out) -> Evaluation {
        const FragmentBuffer fb = rasterize(s.mesh, s.cam, target.cols(), target.rows(), ropts);
        RenderedImage rendered = shade_fragments(s.mesh, s.texture, in.consts, fb, ropts);
        const ImageLoss rec = rec_loss(rendered, target, cfg.mask_to_coverage);
        Evaluation e{rec.value, rec.value, 0.0};
        std::optional<LandmarkLoss> lm;
        if (in.landmarks)
        {
            lm = landmark_loss(s.mesh, s.cam, *in.landmarks);
            e.landmark = lm->value;
            e.loss += cfg.lambda_landmark * lm->value;
        }
        if (g)
        {
            RenderGradients rg = render_backward(s.mesh, s.cam, s.texture, in.consts, fb, rec.gradient, ropts);
            if (lm)
            {
                rg.d_camera += cfg.lambda_landmark * lm->d_camera;
                rg.d_vertices += cfg.lambda_landmark * lm->scatter(s.mesh);
            }
            param.pullback(rg.d_camera, rg.d_vertices, rg.d_texture, cache, *g);
        }
        if (rendered_out)
        {
            *rendered_out = std::move(rendered);
        }
        return e;
    };

    const Objective objective = [&](const std::vector<Eigen::VectorXd>& p, std::vector<Eigen::VectorXd>& g) {
        std::optional<MlpCache> cache;
        const SceneState s = param.decode(p, &cache);
        return evaluate(s, cache, &g, nullptr).loss;
    };
    std::function<void(int, const std::vector<Eigen::VectorXd>&)> on_iterate;
    if (in.on_snapshot && cfg.snapshot_stride > 0)
    {
        on_iterate = [&](int it, const std::vector<Eigen::VectorXd>& p) {
            if (it % cfg.snapshot_stride != 0)
            {
                return;
            }
            std::optional<MlpCache> cache;
            RenderedImage img;
            evaluate(param.decode(p), cache, nullptr, &img);
            in.on_snapshot(it, img);
        };
    }

    auto res = minimize(objective, param.initial_params(), cfg, on_iterate);
    SceneFitResult out;
    out.state = param.decode(res.params);
    std::optional<MlpCache> cache;
    const Evaluation e = evaluate(out.state, cache, nullptr, nullptr);
    out.loss = e.loss;
    out.rec = e.rec;
    out.landmark = e.landmark;
    out.trace = std::move(res.trace);
    return out;
}

/// Texture read back from an image through a fitted camera and shape, with its validity mask.
inline UVUnwarp build_pseudo_groundtruth(const ColorImage& image, const CameraParams& cam, const Mesh& shape,
                                         const UnwarpConstants& consts, int tex_rows, int tex_cols,
                                         const UnwarpOptions& options = {})
{
    return unwarp_image_to_uv(image, shape, cam, consts, tex_rows, tex_cols, options);
}

} // namespace facefit

#endif /* FACEFIT_FIT_HPP */
