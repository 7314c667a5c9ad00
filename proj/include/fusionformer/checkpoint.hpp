#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusionformer/config.hpp"
#include "fusionformer/data.hpp"
#include "fusionformer/errors.hpp"
#include "fusionformer/model.hpp"
#include "fusionformer/util.hpp"

namespace fusionformer {

// Self-describing binary checkpoint:
//   bytes 0..7    magic "FFCKPT01"
//   bytes 8..15   uint64 little-endian JSON header length H
//   bytes 16..16+H UTF-8 JSON: {"format", "version", "config", "vocab",
//                  "params": [{"name", "shape"}, ...]}
//   then, in header order, each parameter as row-major IEEE-754 float64,
//   little-endian.
// The vocabulary (non-reserved tokens in id order) travels with the model so
// a checkpoint decodes standalone.

inline constexpr char kCheckpointMagic[8] = {'F', 'F', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

inline void append_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t read_u64(const std::string& buf, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off + static_cast<size_t>(i)]))
         << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const Vocab& vocab) {
  const std::vector<NamedParam> params = model.named_params();
  nlohmann::json header;
  header["format"] = "fusionformer-checkpoint";
  header["version"] = 1;
  header["config"] = to_json(model.cfg);
  header["vocab"] = vocab.tokens();
  nlohmann::json plist = nlohmann::json::array();
  for (const NamedParam& p : params)
    plist.push_back(nlohmann::json{{"name", p.name}, {"shape", p.tensor.shape()}});
  header["params"] = plist;

  const std::string hjson = header.dump();
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::append_u64(out, hjson.size());
  out += hjson;
  for (const NamedParam& p : params) {
    const auto& data = p.tensor.data();
    const size_t bytes = data.size() * sizeof(double);
    const size_t off = out.size();
    out.resize(off + bytes);
    std::memcpy(out.data() + off, data.data(), bytes);
  }
  atomic_write_file(path, out);
}

struct Checkpoint {
  Model model;
  Vocab vocab;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  const uint64_t hlen = detail::read_u64(buf, 8);
  if (16 + hlen > buf.size()) throw IoError("truncated checkpoint header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "fusionformer-checkpoint")
    throw IoError("unrecognized checkpoint format in " + path.string());

  Checkpoint ck;
  ck.vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
  const ModelConfig cfg = model_config_from_json(header.at("config"));
  ck.model = Model::init(cfg, 0);

  std::vector<NamedParam> params = ck.model.named_params();
  const auto& plist = header.at("params");
  if (plist.size() != params.size())
    throw IoError("checkpoint/config mismatch: " + std::to_string(plist.size()) +
                  " stored parameters, model has " + std::to_string(params.size()));
  size_t off = 16 + hlen;
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string name = plist[i].at("name").get<std::string>();
    const std::vector<int> shape = plist[i].at("shape").get<std::vector<int>>();
    if (name != params[i].name || shape != params[i].tensor.shape())
      throw IoError("checkpoint/config mismatch at parameter '" + name + "' (model expects '" +
                    params[i].name + "')");
    auto& data = params[i].tensor.data();
    const size_t bytes = data.size() * sizeof(double);
    if (off + bytes > buf.size()) throw IoError("truncated checkpoint data: " + path.string());
    std::memcpy(data.data(), buf.data() + off, bytes);
    off += bytes;
  }
  if (off != buf.size()) throw IoError("trailing bytes in checkpoint: " + path.string());
  return ck;
}

}  // namespace fusionformer
