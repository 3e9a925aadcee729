#pragma once

#include "cisseg/calib/calib_distill.hpp"
#include "cisseg/dapd/dapd.hpp"
#include "cisseg/diffcore/array.hpp"
#include "cisseg/diffcore/gradcheck.hpp"
#include "cisseg/diffcore/numeric.hpp"
#include "cisseg/diffcore/ops.hpp"
#include "cisseg/diffcore/tape.hpp"
#include "cisseg/errors.hpp"
#include "cisseg/harness/config.hpp"
#include "cisseg/harness/metrics.hpp"
#include "cisseg/harness/report.hpp"
#include "cisseg/harness/schedule.hpp"
#include "cisseg/harness/trainer.hpp"
#include "cisseg/io.hpp"
#include "cisseg/model/segnet.hpp"
#include "cisseg/phantoms/phantom.hpp"
#include "cisseg/prototypes/finalize.hpp"
#include "cisseg/prototypes/prototypes.hpp"
#include "cisseg/pseudo/pseudo.hpp"
