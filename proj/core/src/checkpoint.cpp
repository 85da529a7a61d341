#include "semrec/checkpoint.hpp"

#include <bit>
#include <filesystem>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float32");

namespace semrec {

void save_named_tensors(const std::string& manifest_path, const std::string& kind,
                        const MetaMap& meta, const ListMap& lists,
                        const std::vector<std::pair<std::string, Tensor>>& tensors) {
  namespace fs = std::filesystem;
  const fs::path manifest(manifest_path);
  const fs::path blob = fs::path(manifest).replace_extension(".bin");

  nlohmann::ordered_json j;
  j["version"] = 1;
  j["kind"] = kind;
  nlohmann::ordered_json jm = nlohmann::ordered_json::object();
  for (const auto& [k, v] : meta) jm[k] = v;
  j["meta"] = jm;
  nlohmann::ordered_json jl = nlohmann::ordered_json::object();
  for (const auto& [k, v] : lists) jl[k] = v;
  j["lists"] = jl;
  j["blob"] = blob.filename().string();

  std::ofstream bf(blob, std::ios::binary);
  if (!bf) throw ValidationError("checkpoint: cannot write " + blob.string());
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  int64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = tensor.shape();
    e["offset"] = offset;
    index.push_back(e);
    auto data = tensor.values();
    bf.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
    offset += static_cast<int64_t>(data.size());
  }
  if (!bf) throw ValidationError("checkpoint: short write to " + blob.string());
  bf.close();
  j["tensors"] = index;

  std::ofstream mf(manifest);
  if (!mf) throw ValidationError("checkpoint: cannot write " + manifest.string());
  mf << j.dump(2) << "\n";
}

const Tensor* LoadedCheckpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string LoadedCheckpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw ValidationError("checkpoint: missing meta key '" + key + "'");
}

const std::vector<std::string>* LoadedCheckpoint::find_list(const std::string& key) const {
  for (const auto& [k, v] : lists)
    if (k == key) return &v;
  return nullptr;
}

LoadedCheckpoint load_named_tensors(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream mf(manifest_path);
  if (!mf) throw ValidationError("checkpoint: cannot read " + manifest_path);
  nlohmann::json j;
  mf >> j;
  LoadedCheckpoint out;
  if (!j.contains("version")) throw ValidationError("checkpoint: missing version in " + manifest_path);
  out.version = j["version"].get<int>();
  if (out.version != 1)
    throw ValidationError("checkpoint: unsupported version " + std::to_string(out.version));
  out.kind = j.value("kind", "");
  for (const auto& [k, v] : j["meta"].items()) out.meta.emplace_back(k, v.get<std::string>());
  if (j.contains("lists"))
    for (const auto& [k, v] : j["lists"].items())
      out.lists.emplace_back(k, v.get<std::vector<std::string>>());

  const fs::path blob = fs::path(manifest_path).parent_path() / j["blob"].get<std::string>();
  std::ifstream bf(blob, std::ios::binary);
  if (!bf) throw ValidationError("checkpoint: cannot read blob " + blob.string());
  for (const auto& e : j["tensors"]) {
    const auto shape = e["shape"].get<std::vector<int>>();
    int64_t count = 1;
    for (int d : shape) count *= d;
    std::vector<float> data(static_cast<size_t>(count));
    bf.seekg(e["offset"].get<int64_t>() * static_cast<int64_t>(sizeof(float)));
    bf.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!bf) throw ValidationError("checkpoint: truncated blob " + blob.string());
    out.tensors.emplace_back(e["name"].get<std::string>(),
                             Tensor::from_data(shape, std::move(data)));
  }
  return out;
}

}  // namespace semrec
