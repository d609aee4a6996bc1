#pragma once

#include "lanetape/bench.hpp"
#include "lanetape/calibrate.hpp"
#include "lanetape/expectation.hpp"
#include "lanetape/heston.hpp"
#include "lanetape/kernel.hpp"
#include "lanetape/parallel.hpp"
#include "lanetape/rng.hpp"
#include "lanetape/tape.hpp"
