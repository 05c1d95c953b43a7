#include "dynpatch/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "dynpatch/error.hpp"

namespace dynpatch {

using json = nlohmann::json;

namespace {

void put_u32_le(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32_le(const unsigned char *p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace

void save_checkpoint(const std::filesystem::path &path, const ModelParams<float> &params) {
  json tensors = json::array();
  for (const auto &slot : params.layout->params.slots())
    tensors.push_back({{"name", slot.name}, {"shape", {slot.rows, slot.cols}}, {"offset", slot.offset * 4}});
  const json manifest = {{"config", json::parse(to_json_text(params.config))}, {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::string out;
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (Index i = 0; i < params.values.size(); ++i)
    put_u32_le(out, std::bit_cast<std::uint32_t>(params.values[i]));

  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size())))
    throw Error(ErrorKind::IoError, "cannot write checkpoint " + path.string());
}

ModelParams<float> load_checkpoint(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw Error(ErrorKind::IoError, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto *p = reinterpret_cast<const unsigned char *>(bytes.data());
  if (bytes.size() < 5)
    throw Error(ErrorKind::ShortBuffer, "checkpoint too short");
  if (p[0] != kCheckpointVersion)
    throw Error(ErrorKind::BadMagic, "unsupported checkpoint version");
  const std::size_t mlen = get_u32_le(p + 1);
  if (bytes.size() < 5 + mlen)
    throw Error(ErrorKind::ShortBuffer, "checkpoint manifest truncated");

  json manifest;
  try {
    manifest = json::parse(bytes.substr(5, mlen));
  } catch (const json::exception &e) {
    throw Error(ErrorKind::BadMagic, std::string("checkpoint manifest is not JSON: ") + e.what());
  }
  ModelParams<float> params;
  params.config = model_config_from_json(manifest.at("config").dump());
  params.layout = std::make_shared<const ModelLayout>(make_model_layout(params.config));
  const auto &layout = params.layout->params;
  const std::size_t payload = 5 + mlen;
  if (bytes.size() - payload != static_cast<std::size_t>(layout.total()) * 4)
    throw Error(ErrorKind::SizeMismatch, "checkpoint payload size does not match its config");

  params.values.resize(layout.total());
  const auto &entries = manifest.at("tensors");
  if (entries.size() != layout.slots().size())
    throw Error(ErrorKind::SizeMismatch, "checkpoint tensor list does not match its config");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto &slot = layout.slots()[i];
    const auto &e = entries[i];
    if (e.at("name").get<std::string>() != slot.name || e.at("shape").at(0).get<Index>() != slot.rows ||
        e.at("shape").at(1).get<Index>() != slot.cols)
      throw Error(ErrorKind::SizeMismatch, "checkpoint tensor " + slot.name + " does not match its config");
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + static_cast<std::size_t>(slot.size()) * 4 > bytes.size() - payload)
      throw Error(ErrorKind::SizeMismatch, "checkpoint tensor " + slot.name + " overruns the payload");
    for (Index k = 0; k < slot.size(); ++k)
      params.values[slot.offset + k] =
          std::bit_cast<float>(get_u32_le(p + payload + offset + static_cast<std::size_t>(k) * 4));
  }
  if (!params.values.allFinite())
    throw Error(ErrorKind::NonFiniteData, "checkpoint contains non-finite values");
  return params;
}

} // namespace dynpatch
