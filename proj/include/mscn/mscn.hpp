#pragma once

#include "mscn/checkpoint.hpp"
#include "mscn/common.hpp"
#include "mscn/data.hpp"
#include "mscn/eval.hpp"
#include "mscn/losses.hpp"
#include "mscn/model.hpp"
#include "mscn/optimizer.hpp"
#include "mscn/png_io.hpp"
#include "mscn/rng.hpp"
#include "mscn/runconfig.hpp"
#include "mscn/selfcheck.hpp"
#include "mscn/tape.hpp"
#include "mscn/tensor.hpp"
#include "mscn/training.hpp"
