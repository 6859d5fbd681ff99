#pragma once

#include "pfmda/errors.hpp"
#include "pfmda/tensor.hpp"
#include "pfmda/ops.hpp"
#include "pfmda/gradcheck.hpp"
#include "pfmda/parameters.hpp"
#include "pfmda/attention.hpp"
#include "pfmda/networks.hpp"
#include "pfmda/losses.hpp"
#include "pfmda/optim.hpp"
#include "pfmda/pfmt.hpp"
#include "pfmda/phantom.hpp"
#include "pfmda/dosimetry.hpp"
#include "pfmda/config.hpp"
#include "pfmda/checkpoint.hpp"
#include "pfmda/training.hpp"
#include "pfmda/evaluation.hpp"
#include "pfmda/ablation.hpp"
#include "pfmda/gradient_suite.hpp"
