// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "autodiff.hpp"
#include "config.hpp"
#include "encoder.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "gradcheck.hpp"
#include "gradcheck_suite.hpp"
#include "interpolation.hpp"
#include "io.hpp"
#include "layers.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "parameters.hpp"
#include "random.hpp"
#include "refinement.hpp"
#include "superpoints.hpp"
#include "synthetic.hpp"
#include "tensor.hpp"
#include "training.hpp"
#include "transport.hpp"
