#pragma once

#include "checkpoint.hpp"
#include "conditioning.hpp"
#include "denoiser.hpp"
#include "diffusion_math.hpp"
#include "errors.hpp"
#include "evalkit.hpp"
#include "sampling.hpp"
#include "traj_data.hpp"
#include "training.hpp"
