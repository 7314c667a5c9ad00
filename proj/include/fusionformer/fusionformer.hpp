#pragma once

#include "fusionformer/checkpoint.hpp"
#include "fusionformer/config.hpp"
#include "fusionformer/data.hpp"
#include "fusionformer/decoding.hpp"
#include "fusionformer/errors.hpp"
#include "fusionformer/fusion.hpp"
#include "fusionformer/metrics.hpp"
#include "fusionformer/model.hpp"
#include "fusionformer/tensor.hpp"
#include "fusionformer/training.hpp"
#include "fusionformer/util.hpp"
