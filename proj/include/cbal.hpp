// Copyright 2026 The cbal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Umbrella header.

#pragma once

#include "cbal/balance.hpp"
#include "cbal/binary_io.hpp"
#include "cbal/covae.hpp"
#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/expfam.hpp"
#include "cbal/matrix.hpp"
#include "cbal/numkit.hpp"
#include "cbal/oracle.hpp"
#include "cbal/pipeline.hpp"
#include "cbal/rng.hpp"
#include "cbal/scmgen.hpp"
#include "cbal/trainer.hpp"
