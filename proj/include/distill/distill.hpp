#pragma once

#include "distill/common.hpp"
#include "distill/dataset.hpp"
#include "distill/dqn.hpp"
#include "distill/env.hpp"
#include "distill/experiment.hpp"
#include "distill/hdt.hpp"
#include "distill/km.hpp"
#include "distill/metrics.hpp"
#include "distill/model.hpp"
#include "distill/nn.hpp"
#include "distill/persistence.hpp"
#include "distill/sdt.hpp"
