#pragma once

#include "mkst/errors.hpp"
#include "mkst/tensor.hpp"
#include "mkst/autograd.hpp"
#include "mkst/ops.hpp"
#include "mkst/params.hpp"
#include "mkst/attention.hpp"
#include "mkst/utcae.hpp"
#include "mkst/jpb.hpp"
#include "mkst/config.hpp"
#include "mkst/data.hpp"
#include "mkst/revin.hpp"
#include "mkst/forecaster.hpp"
#include "mkst/training.hpp"
#include "mkst/evaluation.hpp"
#include "mkst/plot.hpp"
