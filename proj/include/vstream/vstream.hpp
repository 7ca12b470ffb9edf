#pragma once

#include "vstream/assembly.hpp"
#include "vstream/bounded_queue.hpp"
#include "vstream/config.hpp"
#include "vstream/csm.hpp"
#include "vstream/dam.hpp"
#include "vstream/distance.hpp"
#include "vstream/errors.hpp"
#include "vstream/feature_bank.hpp"
#include "vstream/log.hpp"
#include "vstream/policies.hpp"
#include "vstream/rng.hpp"
#include "vstream/runtime.hpp"
#include "vstream/synth.hpp"
#include "vstream/types.hpp"
