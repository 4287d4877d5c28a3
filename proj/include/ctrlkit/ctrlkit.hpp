#pragma once

// Umbrella header for the library. The HTTP service and CLI layers live in
// ctrlkit/service.hpp and ctrlkit/cli.hpp and are not included here.

#include "ctrlkit/attribution.hpp"
#include "ctrlkit/corpus.hpp"
#include "ctrlkit/errors.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/registry.hpp"
#include "ctrlkit/rng.hpp"
#include "ctrlkit/sampler.hpp"
#include "ctrlkit/synthetic.hpp"
#include "ctrlkit/tensor.hpp"
#include "ctrlkit/tokenizer.hpp"
#include "ctrlkit/trainer.hpp"
