#pragma once

#include "gapan/anchorgen.hpp"
#include "gapan/config.hpp"
#include "gapan/data.hpp"
#include "gapan/errors.hpp"
#include "gapan/flow.hpp"
#include "gapan/losses.hpp"
#include "gapan/model.hpp"
#include "gapan/numerics.hpp"
#include "gapan/prior.hpp"
#include "gapan/random.hpp"
#include "gapan/retrieval.hpp"
#include "gapan/trainer.hpp"
#include "gapan/gradcheck.hpp"
