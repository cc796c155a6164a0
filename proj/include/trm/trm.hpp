#pragma once

#include "autodiff.hpp"
#include "rng.hpp"
#include "config.hpp"
#include "log.hpp"
#include "jobs.hpp"
#include "simplex.hpp"
#include "envgen.hpp"
#include "model.hpp"
#include "inner_solver.hpp"
#include "objectives.hpp"
#include "trainer.hpp"
#include "analysis.hpp"
#include "counterexample.hpp"
#include "experiment.hpp"
