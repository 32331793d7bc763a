#pragma once

// Everything in one include.

#include "dyco/autodiff.hpp"
#include "dyco/backbone.hpp"
#include "dyco/binary_io.hpp"
#include "dyco/checkpoint.hpp"
#include "dyco/clustering.hpp"
#include "dyco/dynamic_head.hpp"
#include "dyco/grid_index.hpp"
#include "dyco/losses.hpp"
#include "dyco/metrics.hpp"
#include "dyco/model.hpp"
#include "dyco/nn.hpp"
#include "dyco/pipeline.hpp"
#include "dyco/scene.hpp"
#include "dyco/tensor.hpp"
