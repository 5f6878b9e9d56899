/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/scene.hpp
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

#ifndef FACEFIT_SCENE_HPP
#define FACEFIT_SCENE_HPP

// Scene description files (JSON). Relative paths are resolved against the
// directory holding the scene file.
//
//   {
//     "mesh": "face.obj",                  required, Wavefront OBJ
//     "landmark_table": "landmarks.txt",   optional, 68 vertex indices
//     "texture": "texture.png",            required, PNG or PPM
//     "landmarks": "landmarks.csv",        optional, 68 rows x,y,visible
//     "camera": {"f":..,"pitch":..,"yaw":..,"roll":..,"tx":..,"ty":..},
//     "unwarp": {"a1":..,"b1":..,"a2":..,"b2":..},   optional, derived from the mesh
//     "width": 64, "height": 64,
//     "background": [0, 0, 0],             optional
//     "shape_model": "shape.fflm",         optional, linear shape model
//     "texture_model": "texture.fflm",     optional, linear texture model
//     "decoder": "decoder.ffmd",           optional, MLP shape decoder
//     "latent": "latent.json"              optional, {"f_S": [...], "f_T": [...]}
//   }
//
// Requires linking libpng (CMake target facefit_png).

#include "facefit/core/error.hpp"
#include "facefit/geometry.hpp"
#include "facefit/loss.hpp"
#include "facefit/mesh_io.hpp"
#include "facefit/model.hpp"
#include "facefit/png_io.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

namespace facefit {

struct SceneFile
{
    std::filesystem::path mesh_path;
    std::filesystem::path landmark_table_path;
    std::filesystem::path texture_path;
    std::filesystem::path landmarks_path;
    std::filesystem::path shape_model_path;
    std::filesystem::path texture_model_path;
    std::filesystem::path decoder_path;
    std::filesystem::path latent_path;
    CameraParams cam;
    std::optional<UnwarpConstants> unwarp;
    int width = 64;
    int height = 64;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

/// Everything a scene file references, loaded.
struct LoadedScene
{
    SceneFile file;
    Mesh mesh;
    Texture texture;
    UnwarpConstants consts;
    std::optional<LandmarkSet> landmarks;
    std::optional<LinearModel> shape_model;
    std::optional<LinearModel> texture_model;
    std::optional<MlpDecoder> decoder;
    std::optional<LatentParams> latent;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
    {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    try
    {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e)
    {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j)
{
    std::ofstream out(path);
    if (!out)
    {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << j.dump(2) << '\n';
    if (!out)
    {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

inline nlohmann::json camera_to_json(const CameraParams& c)
{
    return {{"f", c.f}, {"pitch", c.pitch}, {"yaw", c.yaw}, {"roll", c.roll}, {"tx", c.tx}, {"ty", c.ty}};
}

inline CameraParams camera_from_json(const nlohmann::json& j)
{
    CameraParams c;
    c.f = j.at("f").get<double>();
    c.pitch = j.at("pitch").get<double>();
    c.yaw = j.at("yaw").get<double>();
    c.roll = j.at("roll").get<double>();
    c.tx = j.at("tx").get<double>();
    c.ty = j.at("ty").get<double>();
    return c;
}

inline nlohmann::json unwarp_to_json(const UnwarpConstants& u)
{
    return {{"a1", u.a1}, {"b1", u.b1}, {"a2", u.a2}, {"b2", u.b2}};
}

inline UnwarpConstants unwarp_from_json(const nlohmann::json& j)
{
    UnwarpConstants u;
    u.a1 = j.at("a1").get<double>();
    u.b1 = j.at("b1").get<double>();
    u.a2 = j.at("a2").get<double>();
    u.b2 = j.at("b2").get<double>();
    return u;
}

/// Parses and validates a scene file without loading the referenced files.
inline SceneFile parse_scene_file(const std::filesystem::path& path)
{
    const nlohmann::json j = read_json_file(path);
    const std::filesystem::path dir = path.parent_path();
    SceneFile s;
    std::string field;
    try
    {
        auto resolve = [&](const char* key) -> std::filesystem::path {
            field = key;
            if (!j.contains(key))
            {
                return {};
            }
            std::filesystem::path p = j.at(key).get<std::string>();
            return p.is_absolute() ? p : dir / p;
        };
        s.mesh_path = resolve("mesh");
        s.landmark_table_path = resolve("landmark_table");
        s.texture_path = resolve("texture");
        s.landmarks_path = resolve("landmarks");
        s.shape_model_path = resolve("shape_model");
        s.texture_model_path = resolve("texture_model");
        s.decoder_path = resolve("decoder");
        s.latent_path = resolve("latent");
        field = "camera";
        s.cam = camera_from_json(j.at("camera"));
        s.cam.validate();
        field = "unwarp";
        if (j.contains("unwarp"))
        {
            s.unwarp = unwarp_from_json(j.at("unwarp"));
            s.unwarp->validate();
        }
        field = "width";
        s.width = j.at("width").get<int>();
        field = "height";
        s.height = j.at("height").get<int>();
        field = "background";
        if (j.contains("background"))
        {
            const auto bg = j.at("background").get<std::vector<double>>();
            if (bg.size() != 3)
            {
                throw ParseError("expected three values");
            }
            s.background = Eigen::Vector3d(bg[0], bg[1], bg[2]);
        }
        for (const auto& [key, value] : j.items())
        {
            static const char* known[] = {"mesh",          "landmark_table", "texture", "landmarks", "camera",
                                          "unwarp",        "width",          "height",  "background",
                                          "shape_model",   "texture_model",  "decoder", "latent"};
            if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
                std::end(known))
            {
                field = key;
                throw ParseError("unknown field");
            }
        }
    } catch (const nlohmann::json::exception& e)
    {
        throw ParseError(path.string() + ": scene field '" + field + "': " + e.what());
    } catch (const Error& e)
    {
        throw ParseError(path.string() + ": scene field '" + field + "': " + e.what());
    }
    if (s.mesh_path.empty())
    {
        throw ParseError(path.string() + ": scene field 'mesh' is required");
    }
    if (s.texture_path.empty())
    {
        throw ParseError(path.string() + ": scene field 'texture' is required");
    }
    if (s.width <= 0 || s.height <= 0)
    {
        throw ParseError(path.string() + ": scene fields 'width' and 'height' must be positive");
    }
    return s;
}

namespace detail {

inline void require_file(const std::filesystem::path& p, const char* field)
{
    if (!std::filesystem::exists(p))
    {
        throw IoError(std::string("scene field '") + field + "': file '" + p.string() + "' does not exist");
    }
}

} // namespace detail

inline LoadedScene load_scene(const std::filesystem::path& path)
{
    LoadedScene s;
    s.file = parse_scene_file(path);
    const SceneFile& f = s.file;
    detail::require_file(f.mesh_path, "mesh");
    detail::require_file(f.texture_path, "texture");
    if (!f.landmark_table_path.empty())
    {
        detail::require_file(f.landmark_table_path, "landmark_table");
        s.mesh = read_mesh_with_landmarks(f.mesh_path, f.landmark_table_path);
    } else
    {
        s.mesh = read_obj(f.mesh_path);
    }
    s.texture = read_image(f.texture_path);
    s.consts = f.unwarp ? *f.unwarp : UnwarpConstants::for_mesh(s.mesh.vertices, s.texture.rows(), s.texture.cols());
    if (!f.landmarks_path.empty())
    {
        detail::require_file(f.landmarks_path, "landmarks");
        s.landmarks = read_landmark_csv(f.landmarks_path);
    }
    if (!f.shape_model_path.empty())
    {
        detail::require_file(f.shape_model_path, "shape_model");
        s.shape_model = load_linear_model(f.shape_model_path);
    }
    if (!f.texture_model_path.empty())
    {
        detail::require_file(f.texture_model_path, "texture_model");
        s.texture_model = load_linear_model(f.texture_model_path);
    }
    if (!f.decoder_path.empty())
    {
        detail::require_file(f.decoder_path, "decoder");
        s.decoder = load_decoder(f.decoder_path);
    }
    if (!f.latent_path.empty())
    {
        detail::require_file(f.latent_path, "latent");
        s.latent = latent_from_json(read_json_file(f.latent_path));
    }
    return s;
}

/// Scene JSON with paths written as given (callers pass paths relative to the scene file).
inline nlohmann::json scene_to_json(const SceneFile& s)
{
    nlohmann::json j;
    j["mesh"] = s.mesh_path.generic_string();
    j["texture"] = s.texture_path.generic_string();
    if (!s.landmark_table_path.empty())
        j["landmark_table"] = s.landmark_table_path.generic_string();
    if (!s.landmarks_path.empty())
        j["landmarks"] = s.landmarks_path.generic_string();
    if (!s.shape_model_path.empty())
        j["shape_model"] = s.shape_model_path.generic_string();
    if (!s.texture_model_path.empty())
        j["texture_model"] = s.texture_model_path.generic_string();
    if (!s.decoder_path.empty())
        j["decoder"] = s.decoder_path.generic_string();
    if (!s.latent_path.empty())
        j["latent"] = s.latent_path.generic_string();
    j["camera"] = camera_to_json(s.cam);
    if (s.unwarp)
        j["unwarp"] = unwarp_to_json(*s.unwarp);
    j["width"] = s.width;
    j["height"] = s.height;
    j["background"] = {s.background[0], s.background[1], s.background[2]};
    return j;
}

} // namespace facefit

#endif /* FACEFIT_SCENE_HPP */
