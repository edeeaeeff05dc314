#pragma once

#include "core.hpp"
#include "dynamics.hpp"
#include "echo.hpp"
#include "master.hpp"
#include "measure.hpp"
#include "model.hpp"
#include "robservable.hpp"
#include "rng.hpp"
#include "scenario.hpp"
#include "tree.hpp"
#include "version.hpp"
