#pragma once

#include "types.hpp"
#include "parallel.hpp"
#include "lattice.hpp"
#include "greens.hpp"
#include "bands.hpp"
#include "scattering.hpp"
#include "linalg.hpp"
#include "realspace.hpp"
