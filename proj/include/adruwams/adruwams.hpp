#pragma once

#include "checkpoint.hpp"
#include "data.hpp"
#include "error.hpp"
#include "gradcheck.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "serialize.hpp"
#include "stats.hpp"
#include "tensor.hpp"
#include "training.hpp"
#include "volume_io.hpp"
