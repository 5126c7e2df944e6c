#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <utility>

#include "mneme/errors.hpp"
#include "mneme/model.hpp"

// "MNEME1" weight files: magic bytes, a length-prefixed JSON block (model
// config under "model", caller extras such as the vocab alongside), then one
// record per parameter: name length + bytes, rank, dims, raw f64 data. All
// integers and floats little-endian. Round-trips are bit-exact.

namespace mneme {

namespace ckpt_detail {

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8) throw format_error("checkpoint truncated inside an integer field");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace ckpt_detail

inline void save_checkpoint(Model& model, const std::string& path,
                            nlohmann::json extra = nlohmann::json::object()) {
  using ckpt_detail::put_u64;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw input_error("cannot open '" + path + "' for writing");
  os.write("MNEME1", 6);
  extra["model"] = model.cfg.to_json();
  const std::string blob = extra.dump();
  put_u64(os, blob.size());
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (auto& [name, t] : model.params()) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = t.shape();
    put_u64(os, s.size());
    for (long d : s) put_u64(os, static_cast<uint64_t>(d));
    const auto& v = t.value();
    for (long i = 0; i < v.size(); ++i) put_u64(os, std::bit_cast<uint64_t>(v[i]));
  }
  if (!os) throw input_error("write to '" + path + "' failed");
}

struct LoadedModel {
  Model model;
  nlohmann::json extra;  // the JSON block minus the "model" entry
};

inline LoadedModel load_checkpoint(const std::string& path) {
  using ckpt_detail::get_u64;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("cannot open '" + path + "'");
  char magic[6];
  is.read(magic, 6);
  if (is.gcount() != 6 || std::string(magic, 6) != "MNEME1")
    throw format_error("'" + path + "' is not a MNEME1 checkpoint");
  const uint64_t blob_len = get_u64(is);
  std::string blob(blob_len, '\0');
  is.read(blob.data(), static_cast<std::streamsize>(blob_len));
  if (static_cast<uint64_t>(is.gcount()) != blob_len)
    throw format_error("checkpoint truncated inside the config block");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("checkpoint config block is not valid JSON: ") + e.what());
  }
  if (!j.contains("model")) throw format_error("checkpoint config lacks a model block");
  ModelConfig cfg = ModelConfig::from_json(j.at("model"));
  Model model(cfg, 0);

  std::set<std::string> filled;
  while (true) {
    if (is.peek() == std::char_traits<char>::eof()) break;
    const uint64_t name_len = get_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (static_cast<uint64_t>(is.gcount()) != name_len)
      throw format_error("checkpoint truncated inside a parameter name");
    const uint64_t rank = get_u64(is);
    Shape dims(rank);
    long numel = 1;
    for (uint64_t r = 0; r < rank; ++r) {
      dims[r] = static_cast<long>(get_u64(is));
      numel *= dims[r];
    }
    if (!model.has_param(name))
      throw format_error("checkpoint names unknown parameter '" + name + "'");
    Tensor t = model.param(name);
    if (t.shape() != dims)
      throw format_error("parameter '" + name + "' has shape " + shape_str(dims) +
                         " in the file but " + shape_str(t.shape()) + " in the model");
    auto& v = t.value();
    for (long i = 0; i < numel; ++i) v[i] = std::bit_cast<double>(get_u64(is));
    filled.insert(name);
  }
  if (filled.size() != model.params().size())
    throw format_error("checkpoint is missing parameter records (" +
                       std::to_string(filled.size()) + " of " +
                       std::to_string(model.params().size()) + ")");
  j.erase("model");
  return {std::move(model), std::move(j)};
}

}  // namespace mneme
