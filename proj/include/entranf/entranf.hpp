#pragma once

#include "entranf/core.hpp"
#include "entranf/filters.hpp"
#include "entranf/kernels.hpp"
#include "entranf/metrics.hpp"
#include "entranf/mmd.hpp"
#include "entranf/models.hpp"
#include "entranf/transport.hpp"
