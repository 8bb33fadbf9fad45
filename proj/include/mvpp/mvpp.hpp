#pragma once

#include "mvpp/diagnostics.hpp"
#include "mvpp/engine.hpp"
#include "mvpp/error.hpp"
#include "mvpp/fenwick.hpp"
#include "mvpp/io.hpp"
#include "mvpp/kernels.hpp"
#include "mvpp/measure.hpp"
#include "mvpp/models.hpp"
#include "mvpp/qsd.hpp"
#include "mvpp/rng.hpp"
#include "mvpp/space.hpp"
