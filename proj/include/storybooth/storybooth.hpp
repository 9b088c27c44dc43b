#pragma once

// Umbrella header. Individual headers stand on their own; pull this in when
// you want the whole library.

#include "storybooth/ablation.hpp"
#include "storybooth/attention.hpp"
#include "storybooth/cli.hpp"
#include "storybooth/denoiser.hpp"
#include "storybooth/errors.hpp"
#include "storybooth/harness.hpp"
#include "storybooth/linalg.hpp"
#include "storybooth/masks.hpp"
#include "storybooth/plan.hpp"
#include "storybooth/planner.hpp"
#include "storybooth/rng.hpp"
#include "storybooth/stats.hpp"
#include "storybooth/tokenmerge.hpp"
#include "storybooth/version.hpp"
