#pragma once

#include "attack.hpp"
#include "config.hpp"
#include "data.hpp"
#include "distill.hpp"
#include "eval.hpp"
#include "hash.hpp"
#include "losses.hpp"
#include "models.hpp"
#include "optim.hpp"
#include "pipeline.hpp"
#include "pretrain.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "timing.hpp"
