#pragma once

#include "umr/autograd.hpp"
#include "umr/checkpoint.hpp"
#include "umr/config.hpp"
#include "umr/datagen.hpp"
#include "umr/encoder.hpp"
#include "umr/eval.hpp"
#include "umr/gradcheck.hpp"
#include "umr/gradsuite.hpp"
#include "umr/index.hpp"
#include "umr/losses.hpp"
#include "umr/rng.hpp"
#include "umr/schedules.hpp"
#include "umr/tensor.hpp"
#include "umr/trainer.hpp"
