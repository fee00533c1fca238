#pragma once

#include "hidiff/autodiff/ops.hpp"
#include "hidiff/autodiff/optim.hpp"
#include "hidiff/autodiff/tape.hpp"
