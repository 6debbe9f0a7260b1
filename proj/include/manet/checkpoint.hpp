#pragma once

// Checkpoint container:
//   manet-checkpoint 1\n
//   <key> <value>\n ...        model config and seed, keys sorted
//   params <count>\n
//   end\n
// followed by <count> records of
//   uint32 name length, name bytes, 4 x uint32 shape (n,c,h,w),
//   n*c*h*w float32 values,
// all little-endian.

#include <filesystem>
#include <map>
#include <string>

#include "manet/networks.hpp"

namespace manet::io {

std::map<std::string, std::string> config_fields(const nn::ModelConfig& config);
nn::ModelConfig config_from_fields(const std::map<std::string, std::string>& fields);

std::string encode_checkpoint(const nn::Model<float>& model);
nn::Model<float> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const nn::Model<float>& model);
nn::Model<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace manet::io
