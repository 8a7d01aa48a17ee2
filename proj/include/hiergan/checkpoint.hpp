// SPDX-License-Identifier: Apache-2.0
//
// Single-file tensor container:
//
//   magic "HGCKPT01"
//   u32 metadata count, then (string key, string value) pairs
//   u32 section count, then per section:
//     string name, u32 tensor count,
//     per tensor: string name, u8 dtype, u32 ndim, i64 dims[ndim], u64 nbytes, raw bytes
//     u64 FNV-1a checksum of the section payload
//
// Strings are u32 length + bytes. All integers and tensor data are little-endian.
#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace hiergan {

struct NamedTensor {
  std::string name;
  torch::Tensor tensor;
};

struct TensorSection {
  std::string name;
  std::vector<NamedTensor> tensors;
};

struct TensorContainer {
  std::map<std::string, std::string> metadata;
  std::vector<TensorSection> sections;

  const TensorSection& section(const std::string& name) const;  // IoError when absent
  bool has_section(const std::string& name) const;
};

void save_container(const std::filesystem::path& path, const TensorContainer& container);
/// Throws IoError naming the file and the section being read on any corruption.
TensorContainer load_container(const std::filesystem::path& path);

/// Parameters followed by buffers, in registration order, as named tensors.
std::vector<NamedTensor> module_tensors(const torch::nn::Module& module);
/// Copies a section into a module; names, shapes and dtypes must match exactly.
void load_module_tensors(torch::nn::Module& module, const TensorSection& section);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace hiergan
