#pragma once

#include "mdpde/errors.hpp"
#include "mdpde/model.hpp"
#include "mdpde/divergence.hpp"
#include "mdpde/estimator.hpp"
#include "mdpde/asymptotics.hpp"
#include "mdpde/robustness.hpp"
#include "mdpde/simulation.hpp"
#include "mdpde/io.hpp"
