// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "ecgpt/errors.hpp"
#include "ecgpt/hash.hpp"

namespace ecgpt {

namespace {

constexpr char kMagic[8] = {'E', 'C', 'G', 'P', 'T', 'C', 'K', '1'};
constexpr int kFormatVersion = 1;

// Tensor elements in logical row-major order; matches the manifest shapes.
std::vector<float> serialize_tensor(const Mat<float>& t) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(t.size()));
  for (Index r = 0; r < t.rows(); ++r) {
    for (Index c = 0; c < t.cols(); ++c) out.push_back(t(r, c));
  }
  return out;
}

void deserialize_tensor(const float* data, Mat<float>& t) {
  std::size_t i = 0;
  for (Index r = 0; r < t.rows(); ++r) {
    for (Index c = 0; c < t.cols(); ++c) t(r, c) = data[i++];
  }
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"n_blocks", s.n_blocks}, {"channels", s.channels}, {"stride", s.stride}});
  }
  return nlohmann::json{{"in_leads", c.in_leads},
                        {"stem_channels", c.stem_channels},
                        {"stem_stride", c.stem_stride},
                        {"stages", stages},
                        {"bottleneck_expansion", c.bottleneck_expansion},
                        {"se_reduction", c.se_reduction},
                        {"kernel_size", c.kernel_size},
                        {"drop_path_rate", c.drop_path_rate},
                        {"dropout_rate", c.dropout_rate},
                        {"n_classes", c.n_classes},
                        {"batch_level_drop_path", c.batch_level_drop_path}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.in_leads = j.value("in_leads", c.in_leads);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.stem_stride = j.value("stem_stride", c.stem_stride);
    if (j.contains("stages")) {
      c.stages.clear();
      for (const auto& s : j.at("stages")) {
        StageConfig st;
        st.n_blocks = s.value("n_blocks", st.n_blocks);
        st.channels = s.value("channels", st.channels);
        st.stride = s.value("stride", st.stride);
        c.stages.push_back(st);
      }
    }
    c.bottleneck_expansion = j.value("bottleneck_expansion", c.bottleneck_expansion);
    c.se_reduction = j.value("se_reduction", c.se_reduction);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    c.drop_path_rate = j.value("drop_path_rate", c.drop_path_rate);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.batch_level_drop_path = j.value("batch_level_drop_path", c.batch_level_drop_path);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string model_config_hash(const ModelConfig& config) {
  return hex64(fnv1a64(model_config_to_json(config).dump()));
}

void save_checkpoint(const Model<float>& model, const std::string& path) {
  auto refs = tensor_refs(model, true);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& ref : refs) {
    nlohmann::json shape = nlohmann::json::array();
    for (const Index d : ref.shape) shape.push_back(d);
    tensors.push_back({{"name", ref.name}, {"shape", shape}, {"dtype", "f32"}});
  }
  nlohmann::json manifest{{"format_version", kFormatVersion},
                          {"config", model_config_to_json(model.config)},
                          {"tensors", tensors}};
  const std::string manifest_bytes = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = manifest_bytes.size();
  unsigned char len_le[8];
  for (int i = 0; i < 8; ++i) len_le[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(len_le), 8);
  out.write(manifest_bytes.data(), static_cast<std::streamsize>(manifest_bytes.size()));
  for (const auto& ref : refs) {
    const std::vector<float> blob = serialize_tensor(*ref.tensor);
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("checkpoint " + path + ": bad magic (not a checkpoint file)");
  }
  unsigned char len_le[8];
  in.read(reinterpret_cast<char*>(len_le), 8);
  if (!in) throw DataError("checkpoint " + path + ": truncated header");
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | len_le[i];
  std::string manifest_bytes(len, '\0');
  in.read(manifest_bytes.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint " + path + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + ": manifest parse error: " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kFormatVersion) {
    throw DataError("checkpoint " + path + ": format version " + std::to_string(version) +
                    " not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
  const ModelConfig config = model_config_from_json(manifest.at("config"));
  Model<float> model = make_model<float>(config, Rng(0));

  struct Entry {
    std::vector<Index> shape;
    std::size_t order;
  };
  std::map<std::string, Entry> listed;
  std::size_t order = 0;
  for (const auto& t : manifest.at("tensors")) {
    Entry e;
    for (const auto& d : t.at("shape")) e.shape.push_back(d.get<Index>());
    if (t.value("dtype", "f32") != std::string("f32")) {
      throw DataError("checkpoint " + path + ": tensor " + t.at("name").get<std::string>() +
                      " has unsupported dtype");
    }
    e.order = order++;
    listed.emplace(t.at("name").get<std::string>(), e);
  }

  auto refs = tensor_refs(model, true);
  if (listed.size() != refs.size()) {
    for (const auto& ref : refs) {
      if (listed.find(ref.name) == listed.end()) {
        throw DataError("checkpoint " + path + ": missing tensor " + ref.name);
      }
    }
    throw DataError("checkpoint " + path + ": manifest lists unexpected tensors");
  }

  // Blob offsets follow manifest order.
  std::vector<std::uint64_t> offsets(listed.size() + 1, 0);
  {
    std::vector<std::uint64_t> sizes(listed.size(), 0);
    for (const auto& [name, e] : listed) {
      std::uint64_t n = 1;
      for (const Index d : e.shape) n *= static_cast<std::uint64_t>(d);
      sizes[e.order] = n;
    }
    for (std::size_t i = 0; i < sizes.size(); ++i) offsets[i + 1] = offsets[i] + sizes[i];
  }
  const std::streampos blob_start = in.tellg();

  for (const auto& ref : refs) {
    const auto it = listed.find(ref.name);
    if (it == listed.end()) throw DataError("checkpoint " + path + ": missing tensor " + ref.name);
    if (it->second.shape != ref.shape) {
      throw DataError("checkpoint " + path + ": shape mismatch for tensor " + ref.name);
    }
    const std::uint64_t count = offsets[it->second.order + 1] - offsets[it->second.order];
    std::vector<float> blob(count);
    in.seekg(blob_start + static_cast<std::streamoff>(offsets[it->second.order] * sizeof(float)));
    in.read(reinterpret_cast<char*>(blob.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw DataError("checkpoint " + path + ": truncated blob for tensor " + ref.name);
    deserialize_tensor(blob.data(), *ref.tensor);
  }
  return model;
}

}  // namespace ecgpt
