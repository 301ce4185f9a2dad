// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <json.hpp>

#include "ecgpt/nn.hpp"

namespace ecgpt {

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Stable hash of the canonical config serialization, for run provenance.
std::string model_config_hash(const ModelConfig& config);

// Single-file checkpoint: 8-byte magic, little-endian u64 manifest length,
// JSON manifest (format version, config, tensor names/shapes/dtype), then
// concatenated little-endian f32 blobs in manifest order. Tensor values are
// serialized in logical row-major order (conv weights as [out, in, k]).
void save_checkpoint(const Model<float>& model, const std::string& path);

// Loading rebuilds the model from the manifest config and validates every
// tensor name and shape against it; errors name the offending tensor.
Model<float> load_checkpoint(const std::string& path);

}  // namespace ecgpt
