#pragma once

#include "qenv/certificates.hpp"
#include "qenv/envelopes.hpp"
#include "qenv/experiments.hpp"
#include "qenv/io.hpp"
#include "qenv/parallel.hpp"
#include "qenv/problem.hpp"
#include "qenv/solvers.hpp"
#include "qenv/spectral.hpp"
