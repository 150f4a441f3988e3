#pragma once

#include "rdof/adjust.hpp"
#include "rdof/cli.hpp"
#include "rdof/dataset.hpp"
#include "rdof/error.hpp"
#include "rdof/multiverse.hpp"
#include "rdof/parallel.hpp"
#include "rdof/preprocess.hpp"
#include "rdof/rng.hpp"
#include "rdof/simstudy.hpp"
#include "rdof/stattests.hpp"
