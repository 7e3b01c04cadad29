#pragma once

#include "fluxnet/bnnvi.hpp"
#include "fluxnet/errors.hpp"
#include "fluxnet/evalmetrics.hpp"
#include "fluxnet/hpo.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/mcd.hpp"
#include "fluxnet/model_io.hpp"
#include "fluxnet/nncore.hpp"
#include "fluxnet/pipeline.hpp"
#include "fluxnet/predictive.hpp"
#include "fluxnet/preprocess.hpp"
#include "fluxnet/rng.hpp"
#include "fluxnet/synthdata.hpp"
