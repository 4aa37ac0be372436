#pragma once

// Umbrella header.

#include "taa/activations.hpp"
#include "taa/adapter.hpp"
#include "taa/checkpoint.hpp"
#include "taa/common.hpp"
#include "taa/conditioning.hpp"
#include "taa/data.hpp"
#include "taa/encoder.hpp"
#include "taa/metrics.hpp"
#include "taa/nn.hpp"
#include "taa/optim.hpp"
#include "taa/rng.hpp"
#include "taa/text_encoder.hpp"
#include "taa/training.hpp"
