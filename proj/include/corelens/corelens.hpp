#pragma once

#include "corelens/distiller.hpp"
#include "corelens/embstore.hpp"
#include "corelens/error.hpp"
#include "corelens/metrics.hpp"
#include "corelens/probe.hpp"
#include "corelens/promptcraft.hpp"
#include "corelens/refenc.hpp"
#include "corelens/rng.hpp"
#include "corelens/simaudit.hpp"
