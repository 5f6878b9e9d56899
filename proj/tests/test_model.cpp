/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: tests/test_model.cpp
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
#include "facefit/model.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace facefit;

namespace {

std::vector<Eigen::VectorXd> random_samples(int count, int dim, std::mt19937_64& rng)
{
    std::normal_distribution<double> n;
    std::vector<Eigen::VectorXd> out;
    for (int i = 0; i < count; ++i)
        out.push_back(Eigen::VectorXd::NullaryExpr(dim, [&]() { return n(rng); }));
    return out;
}

double orthonormality_error(const LinearModel& m)
{
    const auto l = m.num_components();
    return (m.basis.transpose() * m.basis - Eigen::MatrixXd::Identity(l, l)).cwiseAbs().maxCoeff();
}

} // namespace

TEST(Pca, PlanarSamplesReconstructExactly)
{
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    const Eigen::VectorXd origin = Eigen::VectorXd::NullaryExpr(9, [&]() { return n(rng); });
    const Eigen::VectorXd a = Eigen::VectorXd::NullaryExpr(9, [&]() { return n(rng); });
    const Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(9, [&]() { return n(rng); });
    std::vector<Eigen::VectorXd> samples;
    for (int i = 0; i < 12; ++i)
        samples.push_back(origin + n(rng) * a + n(rng) * b);
    const LinearModel m = pca_fit(samples, 2);
    for (const auto& x : samples)
        EXPECT_LT((linear_decode(m, m.encode(x)) - x).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(pca_fit(samples, 3), RankDeficient);
}

TEST(Pca, BasisIsOrthonormal)
{
    std::mt19937_64 rng(2);
    const auto samples = random_samples(30, 40, rng);
    for (int l : {1, 5, 29})
        EXPECT_LT(orthonormality_error(pca_fit(samples, l)), 1e-10);
}

TEST(Pca, SingularValuesMatchCovarianceEigenvalues)
{
    std::mt19937_64 rng(3);
    const auto samples = random_samples(20, 3 * 50, rng);
    const LinearModel m = pca_fit(samples, 19);
    const auto eig = oracle::symmetric_eigenvalues(oracle::covariance(samples));
    for (int k = 0; k < 19; ++k)
    {
        const double from_cov = std::sqrt(eig[k] * (samples.size() - 1));
        EXPECT_NEAR(m.singular_values[k], from_cov, 1e-8 * std::max(1.0, from_cov)) << "component " << k;
    }
}

TEST(Pca, FullRankReconstructsTrainingSet)
{
    std::mt19937_64 rng(4);
    const auto samples = random_samples(15, 60, rng);
    const LinearModel m = pca_fit(samples, 14);
    for (const auto& x : samples)
        EXPECT_LT((linear_decode(m, m.encode(x)) - x).norm() / x.norm(), 1e-8);
}

TEST(Pca, ReconstructionErrorNonIncreasingInComponents)
{
    std::mt19937_64 rng(5);
    const auto samples = random_samples(25, 30, rng);
    double prev = std::numeric_limits<double>::infinity();
    for (int l = 1; l <= 24; ++l)
    {
        const LinearModel m = pca_fit(samples, l);
        double err = 0.0;
        for (const auto& x : samples)
            err += (linear_decode(m, m.encode(x)) - x).squaredNorm();
        EXPECT_LE(err, prev * (1.0 + 1e-12));
        prev = err;
    }
}

TEST(Pca, SignConventionMakesLargestEntryPositive)
{
    std::mt19937_64 rng(6);
    const LinearModel m = pca_fit(random_samples(10, 12, rng), 4);
    for (int k = 0; k < 4; ++k)
    {
        Eigen::Index arg = 0;
        m.basis.col(k).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(m.basis(arg, k), 0.0);
    }
}

TEST(Pca, InvalidRequestsRejected)
{
    std::mt19937_64 rng(7);
    const auto samples = random_samples(5, 8, rng);
    EXPECT_THROW(pca_fit(samples, 0), DimensionMismatch);
    EXPECT_THROW(pca_fit(samples, 5), DimensionMismatch);
    EXPECT_THROW(pca_fit({samples[0]}, 1), DimensionMismatch);
    auto ragged = samples;
    ragged[2] = Eigen::VectorXd::Zero(7);
    EXPECT_THROW(pca_fit(ragged, 2), DimensionMismatch);
}

TEST(LinearDecode, ZeroAndUnitCoefficients)
{
    std::mt19937_64 rng(8);
    const LinearModel m = pca_fit(random_samples(10, 12, rng), 4);
    EXPECT_EQ(linear_decode(m, Eigen::VectorXd::Zero(4)), m.mean);
    for (int k = 0; k < 4; ++k)
    {
        EXPECT_LT((linear_decode(m, Eigen::VectorXd::Unit(4, k)) - (m.mean + m.basis.col(k))).cwiseAbs().maxCoeff(),
                  1e-15);
    }
    EXPECT_THROW(linear_decode(m, Eigen::VectorXd::Zero(3)), DimensionMismatch);
}

TEST(LinearDecode, MatchesNaiveMultiply)
{
    std::mt19937_64 rng(9);
    const LinearModel m = pca_fit(random_samples(12, 30, rng), 8);
    std::normal_distribution<double> n;
    for (int i = 0; i < 10; ++i)
    {
        const Eigen::VectorXd c = Eigen::VectorXd::NullaryExpr(8, [&]() { return n(rng); });
        const Eigen::VectorXd ref = m.mean + oracle::matvec(m.basis, c);
        EXPECT_LT((linear_decode(m, c) - ref).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(LinearModelIo, RoundTripIsExact)
{
    std::mt19937_64 rng(10);
    const LinearModel m = pca_fit(random_samples(8, 20, rng), 5);
    const auto path = std::filesystem::temp_directory_path() / "facefit_model.fflm";
    save_linear_model(path, m);
    const LinearModel back = load_linear_model(path);
    EXPECT_EQ(back.mean, m.mean);
    EXPECT_EQ(back.basis, m.basis);
    EXPECT_EQ(back.singular_values, m.singular_values);
}

TEST(LinearModelIo, TruncatedFileRejected)
{
    std::mt19937_64 rng(11);
    const auto path = std::filesystem::temp_directory_path() / "facefit_trunc.fflm";
    save_linear_model(path, pca_fit(random_samples(8, 20, rng), 5));
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
    EXPECT_THROW(load_linear_model(path), ParseError);
    EXPECT_THROW(load_linear_model("/nonexistent/model.fflm"), IoError);
}

TEST(Elu, ContinuouslyDifferentiableAtZero)
{
    EXPECT_EQ(elu(0.0), 0.0);
    EXPECT_EQ(elu_derivative(0.0), 1.0);
    EXPECT_NEAR(elu_derivative(-1e-12), 1.0, 1e-11);
    EXPECT_NEAR((elu(1e-7) - elu(-1e-7)) / 2e-7, 1.0, 1e-7);
}

TEST(Mlp, ZeroWeightsGiveZeroOutput)
{
    MlpDecoder dec = MlpDecoder::create({4, 6, 3}, 1);
    for (auto& l : dec.layers())
    {
        l.weight.setZero();
        l.bias.setZero();
    }
    EXPECT_EQ(mlp_forward(dec, Eigen::VectorXd::Ones(4)).output, Eigen::VectorXd::Zero(3));
}

TEST(Mlp, IdentityLayerPassesInputThrough)
{
    const MlpDecoder dec({DenseLayer{Eigen::MatrixXd::Identity(5, 5), Eigen::VectorXd::Zero(5)}});
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(5, -2.0, 2.0);
    EXPECT_EQ(mlp_forward(dec, x).output, x);
}

TEST(Mlp, MatchesIndependentForward)
{
    MlpDecoder dec = MlpDecoder::create({8, 16, 12}, 3);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    for (auto& l : dec.layers())
        l.bias = Eigen::VectorXd::NullaryExpr(l.bias.size(), [&]() { return 0.3 * n(rng); });
    for (int i = 0; i < 10; ++i)
    {
        const Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(8, [&]() { return n(rng); });
        EXPECT_LT((mlp_forward(dec, x).output - oracle::mlp(dec.layers(), x)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Mlp, ForwardIsBitwiseDeterministic)
{
    const MlpDecoder a = MlpDecoder::create({6, 10, 10, 4}, 99);
    const MlpDecoder b = MlpDecoder::create({6, 10, 10, 4}, 99);
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(6, -1.0, 1.0);
    EXPECT_EQ(mlp_forward(a, x).output, mlp_forward(b, x).output);
}

TEST(Mlp, GlorotInitialisationBounds)
{
    const MlpDecoder dec = MlpDecoder::create({10, 30}, 4);
    const double limit = std::sqrt(6.0 / 40.0);
    EXPECT_LE(dec.layers()[0].weight.cwiseAbs().maxCoeff(), limit);
    EXPECT_EQ(dec.layers()[0].bias, Eigen::VectorXd::Zero(30));
    EXPECT_EQ(dec.num_parameters(), 10 * 30 + 30);
}

TEST(MlpBackward, ZeroUpstreamGivesZeroGradients)
{
    const MlpDecoder dec = MlpDecoder::create({3, 5, 2}, 1);
    const auto f = mlp_forward(dec, Eigen::VectorXd::Ones(3));
    const auto g = mlp_backward(dec, f.cache, Eigen::VectorXd::Zero(2));
    EXPECT_EQ(g.d_input, Eigen::VectorXd::Zero(3));
    for (const auto& l : g.layers)
    {
        EXPECT_EQ(l.weight.cwiseAbs().maxCoeff(), 0.0);
        EXPECT_EQ(l.bias.cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(MlpBackward, LinearDecoderInputGradientIsTransposeProduct)
{
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n;
    const Eigen::MatrixXd w = Eigen::MatrixXd::NullaryExpr(4, 6, [&]() { return n(rng); });
    const MlpDecoder dec({DenseLayer{w, Eigen::VectorXd::Zero(4)}});
    const Eigen::VectorXd up = Eigen::VectorXd::NullaryExpr(4, [&]() { return n(rng); });
    const auto f = mlp_forward(dec, Eigen::VectorXd::Ones(6));
    EXPECT_EQ(mlp_backward(dec, f.cache, up).d_input, w.transpose() * up);
}

TEST(MlpBackward, MatchesFiniteDifferences)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed)
    {
        const GradCheckReport r = check_random_mlp(seed);
        for (const auto& b : r.blocks)
            EXPECT_LT(b.max_rel_error, 1e-6) << b.name << " seed " << seed;
    }
}

TEST(MlpBackward, DimensionMismatchRejected)
{
    const MlpDecoder dec = MlpDecoder::create({3, 5, 2}, 1);
    EXPECT_THROW(mlp_forward(dec, Eigen::VectorXd::Ones(4)), DimensionMismatch);
    const auto f = mlp_forward(dec, Eigen::VectorXd::Ones(3));
    EXPECT_THROW(mlp_backward(dec, f.cache, Eigen::VectorXd::Ones(3)), DimensionMismatch);
}

TEST(DecoderIo, RoundTripIsExact)
{
    const MlpDecoder dec = MlpDecoder::create({4, 7, 9}, 12);
    const auto path = std::filesystem::temp_directory_path() / "facefit_decoder.ffmd";
    save_decoder(path, dec);
    const MlpDecoder back = load_decoder(path);
    ASSERT_EQ(back.layers().size(), dec.layers().size());
    for (std::size_t i = 0; i < dec.layers().size(); ++i)
    {
        EXPECT_EQ(back.layers()[i].weight, dec.layers()[i].weight);
        EXPECT_EQ(back.layers()[i].bias, dec.layers()[i].bias);
    }
}

TEST(Latent, JsonRoundTrip)
{
    LatentParams p;
    p.f_shape = Eigen::VectorXd::LinSpaced(160, -1.0, 1.0);
    p.f_texture = Eigen::VectorXd::LinSpaced(160, 0.5, 2.0);
    const LatentParams back = latent_from_json(latent_to_json(p));
    EXPECT_EQ(back.f_shape, p.f_shape);
    EXPECT_EQ(back.f_texture, p.f_texture);
}
