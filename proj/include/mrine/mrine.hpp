// Umbrella header.
#pragma once

#include "mrine/diffcore.hpp"
#include "mrine/statespace.hpp"
#include "mrine/model.hpp"
#include "mrine/objective.hpp"
#include "mrine/trainer.hpp"
#include "mrine/lorenz.hpp"
#include "mrine/evalkit.hpp"
#include "mrine/dataio.hpp"
