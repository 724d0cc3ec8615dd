/**
 * @file hjbfl.hpp
 * @brief Convenience header pulling in the whole library.
 */
#pragma once

#include "hjbfl/bilinear_benchmark.hpp"
#include "hjbfl/config.hpp"
#include "hjbfl/core_types.hpp"
#include "hjbfl/learning.hpp"
#include "hjbfl/metrics_report.hpp"
#include "hjbfl/ode_solvers.hpp"
#include "hjbfl/openloop_oracle.hpp"
#include "hjbfl/optimize.hpp"
#include "hjbfl/partition_model.hpp"
#include "hjbfl/persistence.hpp"
#include "hjbfl/pipeline.hpp"
#include "hjbfl/resnet_model.hpp"
