#pragma once

#include "infoseek/control.hpp"
#include "infoseek/core.hpp"
#include "infoseek/estimation.hpp"
#include "infoseek/models.hpp"
#include "infoseek/netsim.hpp"
#include "infoseek/particles.hpp"
#include "infoseek/rng.hpp"
#include "infoseek/scenario.hpp"
