#pragma once

#include "kronsmooth/types.hpp"
#include "kronsmooth/kron.hpp"
#include "kronsmooth/kernels.hpp"
#include "kronsmooth/optim.hpp"
#include "kronsmooth/parallel.hpp"
#include "kronsmooth/rng.hpp"
#include "kronsmooth/diag_smoother.hpp"
#include "kronsmooth/rank_select.hpp"
#include "kronsmooth/lowrank_em.hpp"
#include "kronsmooth/split_eval.hpp"
#include "kronsmooth/simgen.hpp"
