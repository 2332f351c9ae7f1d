#pragma once

// Umbrella header.
#include "smcd/denoiser.hpp"
#include "smcd/evaluation.hpp"
#include "smcd/io.hpp"
#include "smcd/model.hpp"
#include "smcd/sampling.hpp"
#include "smcd/synthetic.hpp"
#include "smcd/training.hpp"
