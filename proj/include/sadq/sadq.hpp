// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sadq/attention.hpp"
#include "sadq/config.hpp"
#include "sadq/diffusion.hpp"
#include "sadq/eval.hpp"
#include "sadq/model.hpp"
#include "sadq/moe.hpp"
#include "sadq/numeric/checkpoint.hpp"
#include "sadq/numeric/fpenv.hpp"
#include "sadq/numeric/gradcheck.hpp"
#include "sadq/numeric/nn.hpp"
#include "sadq/numeric/ops.hpp"
#include "sadq/numeric/random.hpp"
#include "sadq/numeric/tensor.hpp"
#include "sadq/sampler.hpp"
#include "sadq/tasks.hpp"
#include "sadq/train.hpp"
