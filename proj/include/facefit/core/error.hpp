/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/core/error.hpp
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

#ifndef FACEFIT_CORE_ERROR_HPP
#define FACEFIT_CORE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace facefit {

/**
 * Base class of every error the library throws. Callers that only care about
 * "something numeric went wrong" vs. "the input could not be read" can catch
 * NumericError or IoError respectively.
 */
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public Error
{
public:
    using Error::Error;
};

class IoError : public Error
{
public:
    using Error::Error;
};

// Geometry.
class InvalidMesh : public Error
{
public:
    using Error::Error;
};

class DegenerateVertex : public NumericError
{
public:
    using NumericError::NumericError;
};

class ZeroAreaFan : public NumericError
{
public:
    using NumericError::NumericError;
};

class MissingLandmarks : public Error
{
public:
    using Error::Error;
};

// Rendering.
class StaleFragments : public Error
{
public:
    using Error::Error;
};

// Models and losses.
class DimensionMismatch : public Error
{
public:
    using Error::Error;
};

class RankDeficient : public NumericError
{
public:
    using NumericError::NumericError;
};

class EmptySelection : public NumericError
{
public:
    using NumericError::NumericError;
};

// Fitting.
class DivergenceError : public NumericError
{
public:
    using NumericError::NumericError;
};

class ParseError : public IoError
{
public:
    using IoError::IoError;
};

inline void require_dims(bool ok, const std::string& what)
{
    if (!ok)
    {
        throw DimensionMismatch(what);
    }
}

} // namespace facefit

#endif /* FACEFIT_CORE_ERROR_HPP */
