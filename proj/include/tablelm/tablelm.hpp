// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tablelm/allocator.hpp"
#include "tablelm/checkpoint.hpp"
#include "tablelm/corpus.hpp"
#include "tablelm/evaluator.hpp"
#include "tablelm/loss_ledger.hpp"
#include "tablelm/model_core.hpp"
#include "tablelm/trainer.hpp"
#include "tablelm/word_table.hpp"
