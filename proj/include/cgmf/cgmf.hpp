#pragma once

#include "cgmf/container.hpp"
#include "cgmf/errors.hpp"
#include "cgmf/fusion.hpp"
#include "cgmf/gradcheck.hpp"
#include "cgmf/metrics.hpp"
#include "cgmf/pipeline.hpp"
#include "cgmf/serde.hpp"
#include "cgmf/tensor.hpp"
