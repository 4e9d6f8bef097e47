#pragma once

#include "tlmma/types.hpp"
#include "tlmma/spatial.hpp"
#include "tlmma/estimators.hpp"
#include "tlmma/influence.hpp"
#include "tlmma/averaging.hpp"
#include "tlmma/simulation.hpp"
#include "tlmma/io.hpp"
