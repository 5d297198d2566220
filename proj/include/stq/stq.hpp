#pragma once

#include "stq/autodiff.hpp"
#include "stq/calib.hpp"
#include "stq/container.hpp"
#include "stq/error.hpp"
#include "stq/lba.hpp"
#include "stq/linalg.hpp"
#include "stq/model.hpp"
#include "stq/optim.hpp"
#include "stq/pipeline.hpp"
#include "stq/qlayer.hpp"
#include "stq/quantizer.hpp"
#include "stq/rng.hpp"
#include "stq/stca.hpp"
#include "stq/tensor.hpp"
