#pragma once

#include "histoperm/augment.hpp"
#include "histoperm/config.hpp"
#include "histoperm/dataset_io.hpp"
#include "histoperm/errors.hpp"
#include "histoperm/experiment.hpp"
#include "histoperm/image.hpp"
#include "histoperm/losses.hpp"
#include "histoperm/methods.hpp"
#include "histoperm/metrics.hpp"
#include "histoperm/nn.hpp"
#include "histoperm/optim.hpp"
#include "histoperm/probe.hpp"
#include "histoperm/random.hpp"
#include "histoperm/synth.hpp"
#include "histoperm/tensor.hpp"
#include "histoperm/views.hpp"
