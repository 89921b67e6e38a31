// Umbrella header for the regime-switching jump-diffusion pricing library.
#pragma once

#include "smjd/core.hpp"
#include "smjd/fd_solver.hpp"
#include "smjd/interpolation.hpp"
#include "smjd/io.hpp"
#include "smjd/market_model.hpp"
#include "smjd/mc_engine.hpp"
#include "smjd/payoff.hpp"
#include "smjd/pricing_kernel.hpp"
#include "smjd/quadrature.hpp"
#include "smjd/semi_markov.hpp"
