// Copyright 2026 The NBPO Authors.
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

#pragma once

#include "nbpo/baselines.hpp"
#include "nbpo/common.hpp"
#include "nbpo/corpus.hpp"
#include "nbpo/eval.hpp"
#include "nbpo/experiment.hpp"
#include "nbpo/model.hpp"
#include "nbpo/objective.hpp"
#include "nbpo/trainer.hpp"
