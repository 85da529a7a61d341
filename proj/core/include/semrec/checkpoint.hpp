#pragma once

#include <string>
#include <utility>
#include <vector>

#include "semrec/tensor.hpp"

namespace semrec {

using MetaMap = std::vector<std::pair<std::string, std::string>>;
using ListMap = std::vector<std::pair<std::string, std::vector<std::string>>>;

// Checkpoint format: a JSON manifest (version, kind, meta, named-tensor
// index) next to a raw little-endian float32 blob. blob_path is stored
// relative to the manifest.
void save_named_tensors(const std::string& manifest_path, const std::string& kind,
                        const MetaMap& meta, const ListMap& lists,
                        const std::vector<std::pair<std::string, Tensor>>& tensors);

struct LoadedCheckpoint {
  int version = 0;
  std::string kind;
  MetaMap meta;
  ListMap lists;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
  std::string meta_value(const std::string& key) const;  // throws if absent
  const std::vector<std::string>* find_list(const std::string& key) const;
};

LoadedCheckpoint load_named_tensors(const std::string& manifest_path);

}  // namespace semrec
