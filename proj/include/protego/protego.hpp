#pragma once

// Everything in one include.

#include "protego/attacks.hpp"
#include "protego/config.hpp"
#include "protego/dataset.hpp"
#include "protego/detector.hpp"
#include "protego/error.hpp"
#include "protego/features.hpp"
#include "protego/harness.hpp"
#include "protego/interpret.hpp"
#include "protego/metrics.hpp"
#include "protego/netpbm.hpp"
#include "protego/parallel.hpp"
#include "protego/ptf.hpp"
#include "protego/random.hpp"
#include "protego/tensor.hpp"
#include "protego/vit.hpp"
