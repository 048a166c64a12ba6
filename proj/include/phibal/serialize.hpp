// SPDX-License-Identifier: Apache-2.0
//
// Shape-tagged JSON for tensors: {"shape": [r, c], "data": [...]}. Doubles
// round-trip exactly through nlohmann's shortest-representation printer.

#pragma once

#include <json.hpp>

#include "phibal/tensor.hpp"

namespace phibal {

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

}  // namespace phibal
