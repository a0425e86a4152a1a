#ifndef CRVKIT_CRVKIT_HPP
#define CRVKIT_CRVKIT_HPP

// Umbrella header pulling in the whole toolkit.

#include "crvkit/error.hpp"
#include "crvkit/table.hpp"
#include "crvkit/csv.hpp"
#include "crvkit/matkern.hpp"
#include "crvkit/model_frame.hpp"
#include "crvkit/estimator.hpp"
#include "crvkit/crve.hpp"
#include "crvkit/inference.hpp"
#include "crvkit/simlab.hpp"
#include "crvkit/runner.hpp"

#endif
