#pragma once

// Convenience umbrella: pulls in the whole library.

#include "glg/denoise.hpp"
#include "glg/edges.hpp"
#include "glg/errors.hpp"
#include "glg/estimate.hpp"
#include "glg/grid.hpp"
#include "glg/io.hpp"
#include "glg/model.hpp"
#include "glg/parallel.hpp"
#include "glg/quadrature.hpp"
#include "glg/rng.hpp"
#include "glg/states.hpp"
#include "glg/wavelet.hpp"
