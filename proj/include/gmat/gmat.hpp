#pragma once

#include "gmat/autodiff.hpp"
#include "gmat/checkpoint.hpp"
#include "gmat/codec.hpp"
#include "gmat/config.hpp"
#include "gmat/data.hpp"
#include "gmat/errors.hpp"
#include "gmat/experiment.hpp"
#include "gmat/growth.hpp"
#include "gmat/matrix.hpp"
#include "gmat/metrics.hpp"
#include "gmat/model.hpp"
#include "gmat/prototypes.hpp"
#include "gmat/replay.hpp"
#include "gmat/rng.hpp"
#include "gmat/training.hpp"
