#pragma once

#include "npml/data.hpp"
#include "npml/experiments.hpp"
#include "npml/io.hpp"
#include "npml/error.hpp"
#include "npml/likelihood.hpp"
#include "npml/measures.hpp"
#include "npml/model.hpp"
#include "npml/parallel.hpp"
#include "npml/quadrature.hpp"
#include "npml/rng.hpp"
#include "npml/solver.hpp"
