#pragma once

// Convenience umbrella: the whole library in one include.

#include "hran/ablation.hpp"
#include "hran/autodiff.hpp"
#include "hran/checkpoint.hpp"
#include "hran/config.hpp"
#include "hran/corpus.hpp"
#include "hran/decoding.hpp"
#include "hran/error.hpp"
#include "hran/evaluation.hpp"
#include "hran/grad_check.hpp"
#include "hran/layers.hpp"
#include "hran/model.hpp"
#include "hran/rng.hpp"
#include "hran/tensor.hpp"
#include "hran/trace_export.hpp"
#include "hran/training.hpp"
#include "hran/types.hpp"

namespace hran {}
