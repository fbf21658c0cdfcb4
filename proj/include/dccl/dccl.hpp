#pragma once

#include "dccl/anchor.hpp"
#include "dccl/config.hpp"
#include "dccl/connectivity.hpp"
#include "dccl/error.hpp"
#include "dccl/harness.hpp"
#include "dccl/losses.hpp"
#include "dccl/nets.hpp"
#include "dccl/optim.hpp"
#include "dccl/random.hpp"
#include "dccl/synthdata.hpp"
#include "dccl/tensor.hpp"
#include "dccl/textio.hpp"
#include "dccl/training.hpp"
