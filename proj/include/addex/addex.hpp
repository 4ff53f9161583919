#pragma once

#include "addex/autodiff.hpp"
#include "addex/checkpoint.hpp"
#include "addex/distill.hpp"
#include "addex/experiment.hpp"
#include "addex/grad_check.hpp"
#include "addex/io.hpp"
#include "addex/metrics.hpp"
#include "addex/models.hpp"
#include "addex/optim.hpp"
#include "addex/prior.hpp"
#include "addex/pretrain.hpp"
#include "addex/random.hpp"
#include "addex/synthetic.hpp"
#include "addex/tensor.hpp"
