#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attex/training.hpp"
#include "attex/vocab.hpp"

namespace attex {

// Checkpoint file layout, version 1:
//   bytes 0..3   magic "ATX1"
//   bytes 4..7   header length H, uint32 little-endian
//   bytes 8..8+H header JSON: {version, kind, params:[{name,shape,offset}], meta}
//   remainder    raw little-endian float32 blob, params in manifest order
// The header JSON is emitted with sorted keys and the manifest follows the
// model's parameter order, so save -> load -> save is byte-identical.

namespace ckpt_detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline void put_f32_le(std::string& out, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32_le(out, u);
}

inline float get_f32_le(const unsigned char* p) {
  const uint32_t u = get_u32_le(p);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace ckpt_detail

struct RawCheckpoint {
  std::string kind;
  nlohmann::json meta;
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
  };
  std::vector<Entry> entries;

  const Entry& find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw FormatError("checkpoint is missing parameter '" + name + "'");
  }
};

template <typename S>
void write_checkpoint(const std::string& path, const std::string& kind,
                      const std::vector<std::pair<std::string, Tensor<S>>>& params,
                      const nlohmann::json& meta) {
  nlohmann::json manifest = nlohmann::json::array();
  std::set<std::string> seen;
  std::string blob;
  for (const auto& [name, p] : params) {
    if (!seen.insert(name).second)
      throw ContractError("duplicate parameter name in checkpoint: " + name);
    manifest.push_back({{"name", name},
                        {"shape", p.shape()},
                        {"offset", static_cast<uint64_t>(blob.size())}});
    for (S v : p.values()) ckpt_detail::put_f32_le(blob, static_cast<float>(v));
  }
  nlohmann::json header = {{"version", 1}, {"kind", kind}, {"params", manifest}, {"meta", meta}};
  const std::string head = header.dump();

  std::string file;
  file.reserve(8 + head.size() + blob.size());
  file += "ATX1";
  ckpt_detail::put_u32_le(file, static_cast<uint32_t>(head.size()));
  file += head;
  file += blob;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PathError("cannot write checkpoint: " + path);
  out.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!out) throw PathError("short write on checkpoint: " + path);
}

inline RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open checkpoint: " + path);
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (file.size() < 8 || file.compare(0, 4, "ATX1") != 0)
    throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto* bytes = reinterpret_cast<const unsigned char*>(file.data());
  const uint32_t head_len = ckpt_detail::get_u32_le(bytes + 4);
  if (file.size() < 8 + static_cast<size_t>(head_len))
    throw FormatError(path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.substr(8, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt header: " + e.what());
  }
  if (header.value("version", 0) != 1)
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(header.value("version", 0)));

  RawCheckpoint raw;
  raw.kind = header.at("kind").get<std::string>();
  raw.meta = header.value("meta", nlohmann::json::object());

  const size_t blob_off = 8 + head_len;
  const size_t blob_len = file.size() - blob_off;
  size_t expect = 0;
  for (const auto& jp : header.at("params")) {
    RawCheckpoint::Entry e;
    e.name = jp.at("name").get<std::string>();
    e.shape = jp.at("shape").get<std::vector<int>>();
    size_t numel = 1;
    for (int d : e.shape) {
      if (d <= 0) throw FormatError(path + ": bad shape for '" + e.name + "'");
      numel *= static_cast<size_t>(d);
    }
    const uint64_t offset = jp.at("offset").get<uint64_t>();
    if (offset != expect) throw FormatError(path + ": non-contiguous manifest at '" + e.name + "'");
    if (offset + numel * 4 > blob_len)
      throw FormatError(path + ": truncated blob at '" + e.name + "'");
    e.values.resize(numel);
    for (size_t i = 0; i < numel; ++i)
      e.values[i] = ckpt_detail::get_f32_le(bytes + blob_off + offset + i * 4);
    expect = offset + numel * 4;
    raw.entries.push_back(std::move(e));
  }
  if (expect != blob_len)
    throw FormatError(path + ": blob length " + std::to_string(blob_len) + " does not match manifest " +
                      std::to_string(expect));
  return raw;
}

// Copies every parameter's values out of the raw checkpoint. Both directions
// must match exactly: a missing or extra parameter is a format error.
template <typename S>
void fill_from_checkpoint(const RawCheckpoint& raw,
                          const std::vector<std::pair<std::string, Tensor<S>>>& params) {
  if (params.size() != raw.entries.size())
    throw FormatError("checkpoint holds " + std::to_string(raw.entries.size()) +
                      " parameters, model expects " + std::to_string(params.size()));
  for (const auto& [name, p] : params) {
    const auto& e = raw.find(name);
    if (e.shape != p.shape())
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(e.shape) +
                        ", model expects " + shape_str(p.shape()));
    Tensor<S> t = p;
    auto& vals = t.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<S>(e.values[i]);
  }
}

template <typename S>
void save_classifier_checkpoint(const std::string& path, const CnnClassifier<S>& clf,
                                const ClassifierTrainConfig& cfg) {
  nlohmann::json meta = {{"image_size", clf.image_size()},
                         {"num_classes", clf.num_classes()},
                         {"config", cfg.to_json()}};
  write_checkpoint(path, "classifier", clf.named_params(), meta);
}

template <typename S>
CnnClassifier<S> load_classifier_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path);
  if (raw.kind != "classifier")
    throw FormatError(path + ": expected a classifier checkpoint, found '" + raw.kind + "'");
  auto clf = CnnClassifier<S>::from_params(raw.meta.at("image_size").get<int>(),
                                           raw.meta.at("num_classes").get<int>());
  fill_from_checkpoint(raw, clf.named_params());
  return clf;
}

template <typename S>
struct ExplainerBundle {
  ExplainerModel<S> model;
  CnnClassifier<S> classifier;
  Vocabulary vocab;
  TrainConfig config;
};

// The explainer checkpoint embeds the frozen classifier so a single file can
// reproduce features, decisions, and explanations.
template <typename S>
void save_explainer_checkpoint(const std::string& path, const ExplainerModel<S>& model,
                               const CnnClassifier<S>& clf, const Vocabulary& vocab,
                               const TrainConfig& cfg) {
  auto params = model.named_params();
  for (auto& p : clf.named_params()) params.push_back(p);
  nlohmann::json meta = {{"vocab", vocab.to_json()},
                         {"config", cfg.to_json()},
                         {"encoder", {{"image_size", clf.image_size()},
                                      {"num_classes", clf.num_classes()}}},
                         {"dims", {{"vocab_size", model.vocab_size},
                                   {"embed_dim", model.embed_dim},
                                   {"hidden_dim", model.hidden_dim},
                                   {"feature_dim", model.feature_dim},
                                   {"attn_dim", model.attn_dim}}}};
  write_checkpoint(path, "explainer", params, meta);
}

template <typename S>
ExplainerBundle<S> load_explainer_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path);
  if (raw.kind != "explainer")
    throw FormatError(path + ": expected an explainer checkpoint, found '" + raw.kind + "'");
  const auto& dims = raw.meta.at("dims");
  ExplainerBundle<S> b;
  b.config = TrainConfig::from_json(raw.meta.at("config"));
  b.vocab = Vocabulary::from_json(raw.meta.at("vocab"));
  b.model = ExplainerModel<S>::zeros_like_dims(
      dims.at("vocab_size").get<int>(), dims.at("embed_dim").get<int>(),
      dims.at("hidden_dim").get<int>(), dims.at("feature_dim").get<int>(),
      dims.at("attn_dim").get<int>(), b.config.context_scale);
  b.classifier = CnnClassifier<S>::from_params(raw.meta.at("encoder").at("image_size").get<int>(),
                                               raw.meta.at("encoder").at("num_classes").get<int>());
  auto params = b.model.named_params();
  for (auto& p : b.classifier.named_params()) params.push_back(p);
  fill_from_checkpoint(raw, params);
  if (b.vocab.size() != b.model.vocab_size)
    throw FormatError(path + ": vocabulary size " + std::to_string(b.vocab.size()) +
                      " does not match model vocab_size " + std::to_string(b.model.vocab_size));
  return b;
}

}  // namespace attex
