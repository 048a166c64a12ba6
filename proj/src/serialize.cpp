// SPDX-License-Identifier: Apache-2.0
#include "phibal/serialize.hpp"

#include "phibal/error.hpp"

namespace phibal {

nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"data", t.values()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tensor snapshot: ") + e.what());
  }
}

}  // namespace phibal
