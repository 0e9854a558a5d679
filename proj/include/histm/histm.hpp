#pragma once

#include "histm/checkpoint.hpp"
#include "histm/data.hpp"
#include "histm/diagnostics.hpp"
#include "histm/evaluation.hpp"
#include "histm/grad_check.hpp"
#include "histm/init.hpp"
#include "histm/mamba.hpp"
#include "histm/metrics.hpp"
#include "histm/model.hpp"
#include "histm/ops.hpp"
#include "histm/random.hpp"
#include "histm/run_config.hpp"
#include "histm/tensor.hpp"
#include "histm/training.hpp"
