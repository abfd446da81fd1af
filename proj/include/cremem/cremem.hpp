#pragma once

#include "cremem/errors.hpp"
#include "cremem/formula.hpp"
#include "cremem/contrasts.hpp"
#include "cremem/covariance.hpp"
#include "cremem/dataset.hpp"
#include "cremem/design.hpp"
#include "cremem/optim.hpp"
#include "cremem/reml.hpp"
#include "cremem/inference.hpp"
#include "cremem/simulation.hpp"
#include "cremem/report.hpp"
