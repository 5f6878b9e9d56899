/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/model.hpp
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

#ifndef FACEFIT_MODEL_HPP
#define FACEFIT_MODEL_HPP

#include "facefit/core/error.hpp"
#include "facefit/core/binary_io.hpp"

#include "Eigen/Core"
#include "Eigen/SVD"
#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace facefit {

/**
 * A linear (PCA) model x = mean + basis * coeffs. Used for shapes (n = 3Q,
 * vertices stacked as x0 y0 z0 x1 ...) and for textures (n = U * V * 3).
 */
struct LinearModel
{
    Eigen::VectorXd mean;
    Eigen::MatrixXd basis; ///< n x l, orthonormal columns
    Eigen::VectorXd singular_values;

    int dim() const { return static_cast<int>(mean.size()); }
    int num_components() const { return static_cast<int>(basis.cols()); }

    /// Orthogonal projection onto the model's span, as coefficients.
    Eigen::VectorXd encode(const Eigen::VectorXd& x) const
    {
        require_dims(x.size() == mean.size(), "sample length " + std::to_string(x.size()) +
                                                  " does not match model dimension " + std::to_string(dim()));
        return basis.transpose() * (x - mean);
    }
};

/**
 * PCA via the SVD of the centred data matrix. Each basis column is signed so
 * that its largest-magnitude entry is positive.
 */
inline LinearModel pca_fit(const std::vector<Eigen::VectorXd>& samples, int num_components)
{
    if (samples.size() < 2)
    {
        throw DimensionMismatch("pca_fit needs at least two samples");
    }
    const Eigen::Index n = samples.front().size();
    const auto count = static_cast<Eigen::Index>(samples.size());
    for (const auto& s : samples)
    {
        require_dims(s.size() == n, "all samples must have the same length");
    }
    if (num_components < 1 || num_components > std::min<Eigen::Index>(n, count - 1))
    {
        throw DimensionMismatch("requested " + std::to_string(num_components) + " components; allowed range is [1, " +
                                std::to_string(std::min<Eigen::Index>(n, count - 1)) + "]");
    }

    LinearModel model;
    model.mean = Eigen::VectorXd::Zero(n);
    for (const auto& s : samples)
    {
        model.mean += s;
    }
    model.mean /= static_cast<double>(count);

    Eigen::MatrixXd centred(n, count);
    for (Eigen::Index j = 0; j < count; ++j)
    {
        centred.col(j) = samples[j] - model.mean;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinU);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double cutoff = 1e-10 * (sv.size() > 0 ? sv[0] : 0.0);
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv[rank] > cutoff && sv[rank] > 0.0)
    {
        ++rank;
    }
    if (num_components > rank)
    {
        throw RankDeficient("requested " + std::to_string(num_components) + " components but the data has numerical rank " +
                            std::to_string(rank));
    }

    model.basis = svd.matrixU().leftCols(num_components);
    model.singular_values = sv.head(num_components);
    for (int k = 0; k < num_components; ++k)
    {
        Eigen::Index arg = 0;
        model.basis.col(k).cwiseAbs().maxCoeff(&arg);
        if (model.basis(arg, k) < 0.0)
        {
            model.basis.col(k) *= -1.0;
        }
    }
    return model;
}

inline Eigen::VectorXd linear_decode(const LinearModel& model, const Eigen::VectorXd& coeffs)
{
    require_dims(coeffs.size() == model.basis.cols(), "expected " + std::to_string(model.basis.cols()) +
                                                          " coefficients, got " + std::to_string(coeffs.size()));
    return model.mean + model.basis * coeffs;
}

// ---------------------------------------------------------------------------
// MLP decoder

struct DenseLayer
{
    Eigen::MatrixXd weight; ///< out x in
    Eigen::VectorXd bias;   ///< out
};

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_derivative(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

/**
 * Fully connected decoder: affine + eLU (alpha = 1) on every layer but the
 * last, which is affine only.
 */
class MlpDecoder
{
public:
    MlpDecoder() = default;
    explicit MlpDecoder(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

    /// Glorot-uniform weights, zero biases. dims = {input, hidden..., output}.
    static MlpDecoder create(const std::vector<int>& dims, std::uint64_t seed)
    {
        if (dims.size() < 2)
        {
            throw DimensionMismatch("an MLP needs at least an input and an output dimension");
        }
        std::mt19937_64 rng(seed);
        std::vector<DenseLayer> layers;
        for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        {
            if (dims[i] <= 0 || dims[i + 1] <= 0)
            {
                throw DimensionMismatch("layer dimensions must be positive");
            }
            const double limit = std::sqrt(6.0 / (dims[i] + dims[i + 1]));
            std::uniform_real_distribution<double> dist(-limit, limit);
            DenseLayer layer{Eigen::MatrixXd(dims[i + 1], dims[i]), Eigen::VectorXd::Zero(dims[i + 1])};
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            {
                for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
                {
                    layer.weight(r, c) = dist(rng);
                }
            }
            layers.push_back(std::move(layer));
        }
        return MlpDecoder(std::move(layers));
    }

    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }
    int input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
    int output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

    void validate() const
    {
        if (layers_.empty())
        {
            throw DimensionMismatch("decoder has no layers");
        }
        for (std::size_t i = 0; i < layers_.size(); ++i)
        {
            require_dims(layers_[i].bias.size() == layers_[i].weight.rows(),
                         "layer " + std::to_string(i) + " bias does not match its weight rows");
            if (i > 0)
            {
                require_dims(layers_[i].weight.cols() == layers_[i - 1].weight.rows(),
                             "layer " + std::to_string(i) + " input does not chain with the previous output");
            }
        }
    }

    /// Total number of weights and biases.
    Eigen::Index num_parameters() const
    {
        Eigen::Index n = 0;
        for (const auto& l : layers_)
        {
            n += l.weight.size() + l.bias.size();
        }
        return n;
    }

private:
    std::vector<DenseLayer> layers_;
};

/// Activations kept by mlp_forward for the backward pass.
struct MlpCache
{
    std::vector<Eigen::VectorXd> inputs;         ///< input of each layer
    std::vector<Eigen::VectorXd> pre_activation; ///< affine output of each layer
};

struct MlpForward
{
    Eigen::VectorXd output;
    MlpCache cache;
};

inline MlpForward mlp_forward(const MlpDecoder& dec, const Eigen::VectorXd& input)
{
    require_dims(input.size() == dec.input_dim(), "decoder expects input of length " +
                                                     std::to_string(dec.input_dim()) + ", got " +
                                                     std::to_string(input.size()));
    MlpForward out;
    Eigen::VectorXd x = input;
    const auto& layers = dec.layers();
    for (std::size_t i = 0; i < layers.size(); ++i)
    {
        out.cache.inputs.push_back(x);
        Eigen::VectorXd z = layers[i].weight * x + layers[i].bias;
        out.cache.pre_activation.push_back(z);
        if (i + 1 < layers.size())
        {
            x = z.unaryExpr([](double v) { return elu(v); });
        } else
        {
            x = std::move(z);
        }
    }
    out.output = std::move(x);
    return out;
}

struct MlpGradients
{
    std::vector<DenseLayer> layers; ///< same shapes as the decoder
    Eigen::VectorXd d_input;
};

/// Reverse-mode gradients of <upstream, output> for the cached forward pass.
inline MlpGradients mlp_backward(const MlpDecoder& dec, const MlpCache& cache, const Eigen::VectorXd& upstream)
{
    const auto& layers = dec.layers();
    if (cache.inputs.size() != layers.size() || cache.pre_activation.size() != layers.size())
    {
        throw DimensionMismatch("stale MLP cache: layer count differs from the decoder");
    }
    require_dims(upstream.size() == dec.output_dim(), "upstream gradient has length " +
                                                          std::to_string(upstream.size()) + ", decoder output is " +
                                                          std::to_string(dec.output_dim()));
    for (std::size_t i = 0; i < layers.size(); ++i)
    {
        require_dims(cache.inputs[i].size() == layers[i].weight.cols() &&
                         cache.pre_activation[i].size() == layers[i].weight.rows(),
                     "stale MLP cache: activations do not match layer " + std::to_string(i));
    }

    MlpGradients g;
    g.layers.resize(layers.size());
    Eigen::VectorXd delta = upstream; // dL / d(pre-activation) of the current layer
    for (std::size_t k = layers.size(); k-- > 0;)
    {
        if (k + 1 < layers.size())
        {
            delta = delta.cwiseProduct(cache.pre_activation[k].unaryExpr([](double v) { return elu_derivative(v); }));
        }
        g.layers[k].weight = delta * cache.inputs[k].transpose();
        g.layers[k].bias = delta;
        delta = layers[k].weight.transpose() * delta;
    }
    g.d_input = std::move(delta);
    return g;
}

// ---------------------------------------------------------------------------
// Serialisation.
//
// LinearModel, little-endian:
//   char[4] "FFLM" | u32 version (1) | u64 n | u64 l |
//   f64 mean[n] | f64 basis[n * l] (row-major) | f64 singular_values[l]
// MlpDecoder, little-endian:
//   char[4] "FFMD" | u32 version (1) | u32 layer count |
//   per layer: u64 rows | u64 cols | f64 weight[rows * cols] (row-major) | f64 bias[rows]


inline void save_linear_model(const std::filesystem::path& path, const LinearModel& m)
{
    std::vector<unsigned char> bytes{'F', 'F', 'L', 'M'};
    detail::put_u32(bytes, 1);
    detail::put_u64(bytes, static_cast<std::uint64_t>(m.mean.size()));
    detail::put_u64(bytes, static_cast<std::uint64_t>(m.basis.cols()));
    for (Eigen::Index i = 0; i < m.mean.size(); ++i)
    {
        detail::put_f64(bytes, m.mean[i]);
    }
    for (Eigen::Index r = 0; r < m.basis.rows(); ++r)
    {
        for (Eigen::Index c = 0; c < m.basis.cols(); ++c)
        {
            detail::put_f64(bytes, m.basis(r, c));
        }
    }
    for (Eigen::Index i = 0; i < m.singular_values.size(); ++i)
    {
        detail::put_f64(bytes, m.singular_values[i]);
    }
    detail::write_all_bytes(path, bytes);
}

inline LinearModel load_linear_model(const std::filesystem::path& path)
{
    detail::ByteReader in(detail::read_all_bytes(path), path.string());
    in.expect_magic("FFLM");
    if (in.u32() != 1)
    {
        throw ParseError(path.string() + ": unsupported linear model version");
    }
    const auto n = in.u64();
    const auto l = in.u64();
    if (l > n)
    {
        throw ParseError(path.string() + ": more components than dimensions");
    }
    in.check_remaining(n + n * l + l);
    LinearModel m;
    m.mean.resize(static_cast<Eigen::Index>(n));
    m.basis.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(l));
    m.singular_values.resize(static_cast<Eigen::Index>(l));
    for (auto& x : m.mean)
    {
        x = in.f64();
    }
    for (Eigen::Index r = 0; r < m.basis.rows(); ++r)
    {
        for (Eigen::Index c = 0; c < m.basis.cols(); ++c)
        {
            m.basis(r, c) = in.f64();
        }
    }
    for (auto& x : m.singular_values)
    {
        x = in.f64();
    }
    in.finish();
    return m;
}

inline void save_decoder(const std::filesystem::path& path, const MlpDecoder& dec)
{
    std::vector<unsigned char> bytes{'F', 'F', 'M', 'D'};
    detail::put_u32(bytes, 1);
    detail::put_u32(bytes, static_cast<std::uint32_t>(dec.layers().size()));
    for (const auto& l : dec.layers())
    {
        detail::put_u64(bytes, static_cast<std::uint64_t>(l.weight.rows()));
        detail::put_u64(bytes, static_cast<std::uint64_t>(l.weight.cols()));
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        {
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
            {
                detail::put_f64(bytes, l.weight(r, c));
            }
        }
        for (Eigen::Index r = 0; r < l.bias.size(); ++r)
        {
            detail::put_f64(bytes, l.bias[r]);
        }
    }
    detail::write_all_bytes(path, bytes);
}

inline MlpDecoder load_decoder(const std::filesystem::path& path)
{
    detail::ByteReader in(detail::read_all_bytes(path), path.string());
    in.expect_magic("FFMD");
    if (in.u32() != 1)
    {
        throw ParseError(path.string() + ": unsupported decoder version");
    }
    const auto count = in.u32();
    std::vector<DenseLayer> layers(count);
    for (auto& l : layers)
    {
        const auto rows = in.u64();
        const auto cols = in.u64();
        if (cols != 0 && rows > std::numeric_limits<std::uint64_t>::max() / cols)
        {
            throw ParseError(path.string() + ": layer dimensions overflow");
        }
        in.check_remaining(rows * cols + rows);
        l.weight.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        l.bias.resize(static_cast<Eigen::Index>(rows));
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        {
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
            {
                l.weight(r, c) = in.f64();
            }
        }
        for (auto& b : l.bias)
        {
            b = in.f64();
        }
    }
    in.finish();
    try
    {
        return MlpDecoder(std::move(layers));
    } catch (const DimensionMismatch& e)
    {
        throw ParseError(path.string() + ": " + e.what());
    }
}

/// Shape and texture latent codes; 160 entries each by default.
struct LatentParams
{
    Eigen::VectorXd f_shape = Eigen::VectorXd::Zero(160);
    Eigen::VectorXd f_texture = Eigen::VectorXd::Zero(160);
};

inline nlohmann::json to_json_array(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd from_json_array(const nlohmann::json& j)
{
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline nlohmann::json latent_to_json(const LatentParams& p)
{
    return {{"f_S", to_json_array(p.f_shape)}, {"f_T", to_json_array(p.f_texture)}};
}

inline LatentParams latent_from_json(const nlohmann::json& j)
{
    try
    {
        return {from_json_array(j.at("f_S")), from_json_array(j.at("f_T"))};
    } catch (const nlohmann::json::exception& e)
    {
        throw ParseError(std::string("latent parameters: ") + e.what());
    }
}

} // namespace facefit

#endif /* FACEFIT_MODEL_HPP */
