#pragma once

#include "meanfield/empirical.hpp"
#include "meanfield/experiment.hpp"
#include "meanfield/flow.hpp"
#include "meanfield/json_io.hpp"
#include "meanfield/mdp.hpp"
#include "meanfield/measure.hpp"
#include "meanfield/particle.hpp"
#include "meanfield/rng.hpp"
