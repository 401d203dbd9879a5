#pragma once

#include <json.hpp>

#include "pxc/dataio.hpp"
#include "pxc/training.hpp"

namespace pxc {

// JSON views of the run configuration. Readers are strict: unknown keys are
// rejected with the offending path in the message; absent keys fall back to
// the defaults.

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j,
                                   const std::string& path = "train");

nlohmann::json generator_spec_to_json(const GeneratorSpec& spec);
GeneratorSpec generator_spec_from_json(const nlohmann::json& j,
                                       const std::string& path = "data");

}  // namespace pxc
