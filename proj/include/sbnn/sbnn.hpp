#pragma once

#include "sbnn/alloc.hpp"
#include "sbnn/binarize.hpp"
#include "sbnn/checkpoint.hpp"
#include "sbnn/data.hpp"
#include "sbnn/errors.hpp"
#include "sbnn/kernels.hpp"
#include "sbnn/losses.hpp"
#include "sbnn/nn.hpp"
#include "sbnn/ops.hpp"
#include "sbnn/optim.hpp"
#include "sbnn/pipeline.hpp"
#include "sbnn/tensor.hpp"
