#pragma once

#include "fin/config.hpp"
#include "fin/errors.hpp"
#include "fin/experiment.hpp"
#include "fin/fragment.hpp"
#include "fin/integrate.hpp"
#include "fin/metrics.hpp"
#include "fin/model.hpp"
#include "fin/params.hpp"
#include "fin/prepare.hpp"
#include "fin/raw.hpp"
#include "fin/reviews.hpp"
#include "fin/stkeys.hpp"
#include "fin/store.hpp"
#include "fin/synthetic.hpp"
#include "fin/train.hpp"
#include "fin/vocab.hpp"
