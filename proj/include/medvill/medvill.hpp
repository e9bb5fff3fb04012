#pragma once

#include "medvill/autodiff.hpp"
#include "medvill/checkpoint.hpp"
#include "medvill/config.hpp"
#include "medvill/corpus.hpp"
#include "medvill/error.hpp"
#include "medvill/evaluate.hpp"
#include "medvill/gradcheck.hpp"
#include "medvill/image.hpp"
#include "medvill/masks.hpp"
#include "medvill/metrics.hpp"
#include "medvill/model.hpp"
#include "medvill/optim.hpp"
#include "medvill/params.hpp"
#include "medvill/pretrain.hpp"
#include "medvill/report.hpp"
#include "medvill/rng.hpp"
#include "medvill/stats.hpp"
#include "medvill/tasks.hpp"
#include "medvill/tensor.hpp"
#include "medvill/text.hpp"
