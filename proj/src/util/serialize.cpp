// SPDX-License-Identifier: Apache-2.0

#include "mote/serialize.hpp"

#include <stdexcept>

namespace mote {

nlohmann::json tensor_to_json(const Tensor& t) {
    const auto d = t.data();
    return {{"shape", t.shape()}, {"data", std::vector<double>(d.begin(), d.end())}};
}

Tensor tensor_from_json(const nlohmann::json& j, bool requires_grad) {
    if (!j.is_object() || !j.contains("shape") || !j.contains("data")) {
        throw std::invalid_argument("tensor json needs shape and data");
    }
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>(), requires_grad);
}

}  // namespace mote
