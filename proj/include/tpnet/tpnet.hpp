#pragma once

#include "tpnet/backbone.hpp"
#include "tpnet/config.hpp"
#include "tpnet/data.hpp"
#include "tpnet/error.hpp"
#include "tpnet/image.hpp"
#include "tpnet/metrics.hpp"
#include "tpnet/model.hpp"
#include "tpnet/ops.hpp"
#include "tpnet/params.hpp"
#include "tpnet/rng.hpp"
#include "tpnet/tensor.hpp"
#include "tpnet/trainer.hpp"
