// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "json.hpp"
#include "mote/tensor.hpp"

namespace mote {

/// {"shape": [...], "data": [...]}. Doubles round-trip exactly.
nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j, bool requires_grad = false);

}  // namespace mote
