/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: tools/facefit_cli.cpp
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

// facefit: render, fit, gradcheck, synth, pca, metrics and calibrate commands.
// Exit codes: 0 success, 1 numeric or convergence failure, 2 IO or parse failure.

#include "facefit/fit.hpp"
#include "facefit/gradcheck.hpp"
#include "facefit/scene.hpp"
#include "facefit/synth.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace facefit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumeric = 1;
constexpr int kExitIo = 2;

struct GlobalOptions
{
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out;
};

std::string indexed_name(const std::string& prefix, int i, const std::string& suffix, int digits = 3)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*d", digits, i);
    return prefix + buf + suffix;
}

void ensure_parent(const fs::path& p)
{
    if (p.has_parent_path())
    {
        fs::create_directories(p.parent_path());
    }
}

json vector_json(const Eigen::VectorXd& v) { return to_json_array(v); }

// --- render ------------------------------------------------------------------

struct RenderArgs
{
    std::string scene;
    std::string mask;
    std::string fragments;
};

int cmd_render(const GlobalOptions& g, const RenderArgs& a)
{
    const LoadedScene s = load_scene(a.scene);
    RenderOptions opts;
    opts.threads = g.threads;
    opts.background = s.file.background;
    const FragmentBuffer fb = rasterize(s.mesh, s.file.cam, s.file.width, s.file.height, opts);
    const RenderedImage img = shade_fragments(s.mesh, s.texture, s.consts, fb, opts);

    const fs::path out = g.out.empty() ? fs::path("render.png") : fs::path(g.out);
    const fs::path mask = a.mask.empty() ? out.parent_path() / (out.stem().string() + "_mask.png") : fs::path(a.mask);
    ensure_parent(out);
    ensure_parent(mask);
    write_image(out, img.pixels);
    write_mask_png(mask, img.coverage, s.file.height, s.file.width);
    if (!a.fragments.empty())
    {
        ensure_parent(a.fragments);
        write_fragment_buffer(a.fragments, fb);
    }
    std::size_t covered = 0;
    for (auto c : img.coverage)
    {
        covered += c;
    }
    std::cout << json{{"image", out.string()}, {"mask", mask.string()}, {"covered_pixels", covered}}.dump() << '\n';
    return kExitOk;
}

// --- gradcheck ---------------------------------------------------------------

struct GradcheckArgs
{
    std::string scene;
    double tolerance = 1e-4;
    std::size_t samples = 200;
};

int cmd_gradcheck(const GlobalOptions& g, const GradcheckArgs& a)
{
    const LoadedScene s = load_scene(a.scene);
    RenderCheckScene rs{s.mesh, s.file.cam, s.texture, s.consts, s.file.width, s.file.height};
    RenderCheckOptions ro;
    ro.seed = g.seed;
    ro.threads = g.threads;
    ro.max_components = a.samples;

    {
        const FragmentBuffer fb = rasterize(rs.mesh, rs.cam, rs.width, rs.height);
        const Mask interior = interior_pixel_mask(rs.mesh, rs.cam, fb, ro.edge_distance);
        if (std::none_of(interior.begin(), interior.end(), [](std::uint8_t m) { return m != 0; }))
        {
            throw EmptySelection("no pixel lies more than 1 px inside a visible triangle; render the scene larger");
        }
    }
    GradCheckReport report = check_render_gradients(rs, ro);

    if (s.decoder)
    {
        std::mt19937_64 rng(g.seed);
        std::uniform_real_distribution<double> uniform(-1.0, 1.0);
        const Eigen::VectorXd input =
            Eigen::VectorXd::NullaryExpr(s.decoder->input_dim(), [&]() { return uniform(rng); });
        const Eigen::VectorXd upstream =
            Eigen::VectorXd::NullaryExpr(s.decoder->output_dim(), [&]() { return uniform(rng); });
        report.merge(check_mlp_gradients(*s.decoder, input, upstream));
    } else
    {
        report.merge(check_random_mlp(g.seed));
    }

    if (s.mesh.landmark_indices.size() == kNumLandmarks)
    {
        LandmarkSet lm = s.landmarks ? *s.landmarks : project_landmarks(s.mesh, s.file.cam);
        std::mt19937_64 rng(g.seed + 1);
        std::uniform_real_distribution<double> uniform(-2.0, 2.0);
        for (int k = 0; k < kNumLandmarks; ++k)
        {
            lm.points(k, 0) += uniform(rng);
            lm.points(k, 1) += uniform(rng);
        }
        if (lm.num_visible() == 0)
        {
            std::fill(lm.visible.begin(), lm.visible.end(), true);
        }
        report.merge(check_landmark_gradients(s.mesh, s.file.cam, lm));
    } else
    {
        report.merge(check_random_landmarks(g.seed));
    }

    const json j = report.to_json(a.tolerance);
    const fs::path out = g.out.empty() ? fs::path("gradcheck.json") : fs::path(g.out);
    ensure_parent(out);
    write_json_file(out, j);
    std::cout << j.dump(2) << '\n';
    return report.passed(a.tolerance) ? kExitOk : kExitNumeric;
}

// --- fit -----------------------------------------------------------------------

struct FitArgs
{
    std::string scene;
    std::string target;
    std::string config;
};

int cmd_fit(const GlobalOptions& g, const FitArgs& a)
{
    const LoadedScene s = load_scene(a.scene);
    const ColorImage target = read_image(a.target);
    if (target.rows() != s.file.height || target.cols() != s.file.width)
    {
        throw ParseError("target image '" + a.target + "' is " + std::to_string(target.cols()) + "x" +
                         std::to_string(target.rows()) + " but the scene is " + std::to_string(s.file.width) + "x" +
                         std::to_string(s.file.height));
    }
    FitConfig cfg = fit_config_from_json(read_json_file(a.config));
    cfg.threads = g.threads;

    SceneFitInputs in;
    in.target = &target;
    in.consts = s.consts;
    in.background = s.file.background;
    if (s.landmarks && cfg.lambda_landmark > 0.0)
    {
        in.landmarks = &*s.landmarks;
    }
    in.models.shape = s.shape_model ? &*s.shape_model : nullptr;
    in.models.decoder = s.decoder ? &*s.decoder : nullptr;
    in.models.texture = s.texture_model ? &*s.texture_model : nullptr;

    SceneState init{s.file.cam, s.mesh, s.texture, {}, {}};
    if (s.latent && s.decoder)
    {
        init.shape_coeffs = s.latent->f_shape;
    }
    if (s.latent && s.texture_model && s.latent->f_texture.size() == s.texture_model->num_components())
    {
        init.texture_coeffs = s.latent->f_texture;
    }

    const fs::path out = g.out.empty() ? fs::path("fit_out") : fs::path(g.out);
    fs::create_directories(out);
    in.on_snapshot = [&](int it, const RenderedImage& img) {
        write_png(out / indexed_name("snapshot_", it, ".png", 5), img.pixels);
    };

    const SceneFitResult r = fit_scene(in, init, cfg);
    write_obj(out / "fitted_mesh.obj", r.state.mesh);
    write_png(out / "fitted_texture.png", r.state.texture);
    RenderOptions ropts;
    ropts.threads = g.threads;
    ropts.background = s.file.background;
    const RenderedImage final_img =
        render(r.state.mesh, r.state.cam, r.state.texture, s.consts, s.file.width, s.file.height, ropts);
    write_png(out / "fitted_render.png", final_img.pixels);

    json result{{"config", fit_config_to_json(cfg)},
                {"seed", g.seed},
                {"steps", r.trace.steps},
                {"converged", r.trace.converged},
                {"loss", r.loss},
                {"rec_loss", r.rec},
                {"landmark_loss", r.landmark},
                {"camera", camera_to_json(r.state.cam)},
                {"loss_trace", r.trace.losses}};
    if (in.landmarks)
    {
        LandmarkSet fitted = project_landmarks(r.state.mesh, r.state.cam);
        fitted.visible = in.landmarks->visible;
        result["nme_alignment"] = nme_alignment(fitted, *in.landmarks, landmark_bbox_size(*in.landmarks));
    }
    if (r.state.shape_coeffs.size() > 0)
        result["shape_coeffs"] = vector_json(r.state.shape_coeffs);
    if (r.state.texture_coeffs.size() > 0)
        result["texture_coeffs"] = vector_json(r.state.texture_coeffs);
    write_json_file(out / "result.json", result);
    std::cout << json{{"loss", r.loss}, {"rec_loss", r.rec}, {"steps", r.trace.steps}}.dump() << '\n';
    return kExitOk;
}

// --- synth -----------------------------------------------------------------------

struct SynthArgs
{
    int count = 10;
    int size = 64;
    int tex_size = 64;
    int modes = 12;
};

int cmd_synth(const GlobalOptions& g, const SynthArgs& a)
{
    if (a.count <= 0 || a.size <= 0 || a.tex_size <= 0 || a.modes <= 0)
    {
        throw ParseError("--count, --size, --tex-size and --modes must be positive");
    }
    const fs::path out = g.out.empty() ? fs::path("synth_out") : fs::path(g.out);
    fs::create_directories(out);
    const SyntheticWorld world = SyntheticWorld::create(g.seed, a.modes, 8, a.tex_size, a.tex_size);
    write_obj(out / "base.obj", world.shapes.base);
    write_landmark_table(out / "landmarks.txt", world.shapes.base.landmark_indices);

    json index = json::array();
    for (int i = 0; i < a.count; ++i)
    {
        const std::uint64_t scene_seed = g.seed * 1000003ULL + static_cast<std::uint64_t>(i) + 1;
        const SyntheticScene sc = world.scene(scene_seed, a.size, a.size);
        const std::string stem = indexed_name("face_", i, "");
        write_obj(out / (stem + ".obj"), sc.mesh);
        write_png(out / (stem + ".png"), sc.texture);

        RenderOptions ropts;
        ropts.threads = g.threads;
        const FragmentBuffer fb = rasterize(sc.mesh, sc.cam, sc.width, sc.height, ropts);
        const Projection proj = project(sc.mesh, sc.cam);
        const double extent = proj.depth.maxCoeff() - proj.depth.minCoeff();
        write_landmark_csv(out / (stem + ".csv"), project_landmarks(sc.mesh, sc.cam, fb, 0.05 * extent));

        SceneFile sf;
        sf.mesh_path = stem + ".obj";
        sf.landmark_table_path = "landmarks.txt";
        sf.texture_path = stem + ".png";
        sf.landmarks_path = stem + ".csv";
        sf.cam = sc.cam;
        sf.unwarp = sc.consts;
        sf.width = sc.width;
        sf.height = sc.height;
        write_json_file(out / (stem + ".json"), scene_to_json(sf));
        index.push_back({{"scene", stem + ".json"},
                         {"shape_coeffs", vector_json(sc.shape_coeffs)},
                         {"texture_coeffs", vector_json(sc.texture_coeffs)}});
    }
    write_json_file(out / "index.json", {{"seed", g.seed}, {"count", a.count}, {"samples", index}});
    std::cout << json{{"out", out.string()}, {"count", a.count}}.dump() << '\n';
    return kExitOk;
}

// --- pca -------------------------------------------------------------------------

struct PcaArgs
{
    std::vector<std::string> meshes;
    int components = 5;
};

int cmd_pca(const GlobalOptions& g, const PcaArgs& a)
{
    if (a.meshes.size() < 2)
    {
        throw ParseError("pca needs at least two meshes");
    }
    std::vector<Eigen::VectorXd> samples;
    Mesh first;
    for (std::size_t i = 0; i < a.meshes.size(); ++i)
    {
        const Mesh m = read_obj(a.meshes[i]);
        if (i == 0)
        {
            first = m;
        } else if (m.num_vertices() != first.num_vertices() || m.triangles != first.triangles)
        {
            throw DimensionMismatch("mesh '" + a.meshes[i] + "' does not share topology with '" + a.meshes[0] +
                                    "' (" + std::to_string(m.num_vertices()) + " vs " +
                                    std::to_string(first.num_vertices()) + " vertices)");
        }
        samples.push_back(flatten(m.vertices));
    }
    const LinearModel model = pca_fit(samples, a.components);
    const fs::path out = g.out.empty() ? fs::path("pca.fflm") : fs::path(g.out);
    ensure_parent(out);
    save_linear_model(out, model);

    const LinearModel reloaded = load_linear_model(out);
    const double ortho =
        (reloaded.basis.transpose() * reloaded.basis - Eigen::MatrixXd::Identity(model.num_components(),
                                                                                  model.num_components()))
            .cwiseAbs()
            .maxCoeff();
    json summary{{"model", out.string()},
                 {"dim", model.dim()},
                 {"components", model.num_components()},
                 {"singular_values", vector_json(model.singular_values)},
                 {"orthonormality_error", ortho}};
    std::cout << summary.dump(2) << '\n';
    if (!(ortho < 1e-10))
    {
        std::cerr << "facefit: reloaded basis is not orthonormal\n";
        return kExitNumeric;
    }
    return kExitOk;
}

// --- metrics -----------------------------------------------------------------------

struct MetricsArgs
{
    std::string pred_mesh;
    std::string truth_mesh;
    std::string landmark_table;
    std::string pred_landmarks;
    std::string truth_landmarks;
    double bbox = 0.0;
};

int cmd_metrics(const GlobalOptions& g, const MetricsArgs& a)
{
    json report = json::object();
    const bool shape = !a.pred_mesh.empty() || !a.truth_mesh.empty();
    const bool align = !a.pred_landmarks.empty() || !a.truth_landmarks.empty();
    if (!shape && !align)
    {
        throw ParseError("metrics needs --pred-mesh/--truth-mesh or --pred-landmarks/--truth-landmarks");
    }
    if (shape)
    {
        if (a.pred_mesh.empty() || a.truth_mesh.empty() || a.landmark_table.empty())
        {
            throw ParseError("shape NME needs --pred-mesh, --truth-mesh and --landmark-table");
        }
        const Mesh pred = read_mesh_with_landmarks(a.pred_mesh, a.landmark_table);
        const Mesh truth = read_mesh_with_landmarks(a.truth_mesh, a.landmark_table);
        report["nme_shape"] = nme_shape(pred, truth);
    }
    if (align)
    {
        if (a.pred_landmarks.empty() || a.truth_landmarks.empty())
        {
            throw ParseError("alignment NME needs --pred-landmarks and --truth-landmarks");
        }
        LandmarkSet pred = read_landmark_csv(a.pred_landmarks);
        const LandmarkSet truth = read_landmark_csv(a.truth_landmarks);
        // Scored on the landmarks visible in the reference.
        pred.visible = truth.visible;
        const double bbox = a.bbox > 0.0 ? a.bbox : landmark_bbox_size(truth);
        report["bbox_size"] = bbox;
        report["nme_alignment"] = nme_alignment(pred, truth, bbox);
    }
    if (!g.out.empty())
    {
        ensure_parent(g.out);
        write_json_file(g.out, report);
    }
    std::cout << report.dump(2) << '\n';
    return kExitOk;
}

// --- calibrate -----------------------------------------------------------------------

struct CalibrateArgs
{
    std::string scene;
};

/// Prints the magnitude of every loss component at a seeded perturbation of the scene.
int cmd_calibrate(const GlobalOptions& g, const CalibrateArgs& a)
{
    const LoadedScene s = load_scene(a.scene);
    RenderOptions ropts;
    ropts.threads = g.threads;
    ropts.background = s.file.background;
    const RenderedImage target = render(s.mesh, s.file.cam, s.texture, s.consts, s.file.width, s.file.height, ropts);

    std::mt19937_64 rng(g.seed);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    CameraParams cam = s.file.cam;
    cam.f *= 1.0 + 0.02 * uniform(rng);
    cam.yaw += 0.05 * uniform(rng);
    cam.pitch += 0.05 * uniform(rng);
    cam.tx += uniform(rng);
    cam.ty += uniform(rng);
    Mesh shape = s.mesh;
    shape.vertices += 0.01 * Vertices::NullaryExpr(shape.num_vertices(), 3, [&]() { return uniform(rng); });

    const RenderedImage rendered = render(shape, cam, s.texture, s.consts, s.file.width, s.file.height, ropts);
    json comps{{"rec", rec_loss(rendered, target.pixels, true).value}};
    if (shape.landmark_indices.size() == kNumLandmarks)
    {
        comps["landmark"] = landmark_loss(shape, cam, project_landmarks(s.mesh, s.file.cam)).value;
    }
    const UVUnwarp pseudo =
        build_pseudo_groundtruth(target.pixels, s.file.cam, s.mesh, s.consts, s.texture.rows(), s.texture.cols());
    const PretrainLosses p = pretrain_losses(shape.vertices, s.mesh.vertices, s.texture, pseudo.texture, pseudo.valid,
                                             cam, s.file.cam);
    comps["shape"] = p.shape;
    comps["texture"] = p.texture;
    comps["camera"] = p.camera;
    std::cout << json{{"components", comps}, {"pseudo_valid_fraction", pseudo.valid_fraction}}.dump(2) << '\n';
    return kExitOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"facefit: differentiable face rendering and morphable-model fitting"};
    app.require_subcommand(1);
    app.fallthrough();
    GlobalOptions g;
    app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads (never changes results)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_option("--out", g.out, "Output file or directory");

    RenderArgs render_args;
    auto* render_cmd = app.add_subcommand("render", "Render a scene to PNG plus a coverage mask");
    render_cmd->add_option("scene", render_args.scene, "Scene JSON")->required();
    render_cmd->add_option("--mask", render_args.mask, "Coverage mask path (default <out>_mask.png)");
    render_cmd->add_option("--fragments", render_args.fragments, "Also dump the fragment buffer");

    GradcheckArgs grad_args;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every gradient block");
    grad_cmd->add_option("scene", grad_args.scene, "Scene JSON")->required();
    grad_cmd->add_option("--tolerance", grad_args.tolerance, "Maximum relative error")->capture_default_str();
    grad_cmd->add_option("--samples", grad_args.samples, "Components checked per large block")->capture_default_str();

    FitArgs fit_args;
    auto* fit_cmd = app.add_subcommand("fit", "Fit a scene to a target image");
    fit_cmd->add_option("scene", fit_args.scene, "Scene JSON (initial state)")->required();
    fit_cmd->add_option("--target", fit_args.target, "Target image")->required();
    fit_cmd->add_option("--config", fit_args.config, "Fit config JSON")->required();

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic head family");
    synth_cmd->add_option("--count", synth_args.count, "Number of heads")->capture_default_str();
    synth_cmd->add_option("--size", synth_args.size, "Image size in pixels")->capture_default_str();
    synth_cmd->add_option("--tex-size", synth_args.tex_size, "Texture size in texels")->capture_default_str();
    synth_cmd->add_option("--modes", synth_args.modes, "Blend-shape modes")->capture_default_str();

    PcaArgs pca_args;
    auto* pca_cmd = app.add_subcommand("pca", "Build a linear shape model from OBJ meshes");
    pca_cmd->add_option("meshes", pca_args.meshes, "Input meshes")->required();
    pca_cmd->add_option("--components", pca_args.components, "Number of components")->capture_default_str();

    MetricsArgs metrics_args;
    auto* metrics_cmd = app.add_subcommand("metrics", "Shape and alignment NME");
    metrics_cmd->add_option("--pred-mesh", metrics_args.pred_mesh);
    metrics_cmd->add_option("--truth-mesh", metrics_args.truth_mesh);
    metrics_cmd->add_option("--landmark-table", metrics_args.landmark_table);
    metrics_cmd->add_option("--pred-landmarks", metrics_args.pred_landmarks);
    metrics_cmd->add_option("--truth-landmarks", metrics_args.truth_landmarks);
    metrics_cmd->add_option("--bbox", metrics_args.bbox,
                            "Bounding-box size for alignment NME (default: from the true landmarks)");

    CalibrateArgs calibrate_args;
    auto* calibrate_cmd = app.add_subcommand("calibrate", "Print loss component magnitudes for weight tuning");
    calibrate_cmd->add_option("scene", calibrate_args.scene, "Scene JSON")->required();

    try
    {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e)
    {
        return app.exit(e);
    } catch (const CLI::ParseError& e)
    {
        app.exit(e);
        return kExitIo;
    }

    try
    {
        if (*render_cmd)
            return cmd_render(g, render_args);
        if (*grad_cmd)
            return cmd_gradcheck(g, grad_args);
        if (*fit_cmd)
            return cmd_fit(g, fit_args);
        if (*synth_cmd)
            return cmd_synth(g, synth_args);
        if (*pca_cmd)
            return cmd_pca(g, pca_args);
        if (*metrics_cmd)
            return cmd_metrics(g, metrics_args);
        if (*calibrate_cmd)
            return cmd_calibrate(g, calibrate_args);
    } catch (const IoError& e)
    {
        std::cerr << "facefit: " << e.what() << '\n';
        return kExitIo;
    } catch (const DimensionMismatch& e)
    {
        std::cerr << "facefit: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericError& e)
    {
        std::cerr << "facefit: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e)
    {
        std::cerr << "facefit: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error& e)
    {
        std::cerr << "facefit: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e)
    {
        std::cerr << "facefit: " << e.what() << '\n';
        return kExitNumeric;
    }
    return kExitOk;
}
