/* Copyright 2026 The smola Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Everything in one include.

#include "smola/error.hpp"
#include "smola/numkit/csv.hpp"
#include "smola/numkit/matrix.hpp"
#include "smola/numkit/ops.hpp"
#include "smola/numkit/rng.hpp"
#include "smola/numkit/svd.hpp"
#include "smola/core.hpp"
#include "smola/omni.hpp"
#include "smola/baselines.hpp"
#include "smola/serialize.hpp"
#include "smola/trainer.hpp"
#include "smola/diagnostics.hpp"
#include "smola/gradcheck.hpp"
