#include "dynpatch/model/config.hpp"

#include <cmath>

#include <json.hpp>

#include "dynpatch/error.hpp"

namespace dynpatch {

using json = nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string &msg) { throw Error(ErrorKind::BadConfig, msg); };
  if (embed_dim < 6 || dec_dim < 6)
    fail("embed_dim and dec_dim must be at least 6");
  if (enc_heads < 1 || dec_heads < 1 || embed_dim % enc_heads != 0 || dec_dim % dec_heads != 0)
    fail("widths must be divisible by their head counts");
  if (enc_depth < 0 || dec_depth < 0)
    fail("depths must be non-negative");
  if (num_scales < 1 || base_edge < 1 || frames < 1)
    fail("num_scales, base_edge and frames must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    fail("mask_ratio must lie in [0, 1]");
  if (!(mlp_ratio > 0.0))
    fail("mlp_ratio must be positive");
}

Index ModelConfig::hidden(Index dim) const {
  return std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(dim) * mlp_ratio)));
}

std::string to_json_text(const ModelConfig &c) {
  const json doc = {{"embed_dim", c.embed_dim},   {"enc_depth", c.enc_depth},
                    {"enc_heads", c.enc_heads},   {"dec_dim", c.dec_dim},
                    {"dec_depth", c.dec_depth},   {"dec_heads", c.dec_heads},
                    {"num_scales", c.num_scales}, {"base_edge", c.base_edge},
                    {"frames", c.frames},         {"mask_ratio", c.mask_ratio},
                    {"patch_norm_targets", c.patch_norm_targets}, {"mlp_ratio", c.mlp_ratio}};
  return doc.dump();
}

ModelConfig model_config_from_json(const std::string &text) {
  try {
    const auto doc = json::parse(text);
    ModelConfig c;
    c.embed_dim = doc.at("embed_dim").get<Index>();
    c.enc_depth = doc.at("enc_depth").get<int>();
    c.enc_heads = doc.at("enc_heads").get<int>();
    c.dec_dim = doc.at("dec_dim").get<Index>();
    c.dec_depth = doc.at("dec_depth").get<int>();
    c.dec_heads = doc.at("dec_heads").get<int>();
    c.num_scales = doc.at("num_scales").get<int>();
    c.base_edge = doc.at("base_edge").get<Index>();
    c.frames = doc.at("frames").get<Index>();
    c.mask_ratio = doc.at("mask_ratio").get<double>();
    c.patch_norm_targets = doc.at("patch_norm_targets").get<bool>();
    c.mlp_ratio = doc.at("mlp_ratio").get<double>();
    c.validate();
    return c;
  } catch (const json::exception &e) {
    throw Error(ErrorKind::BadConfig, std::string("malformed model config: ") + e.what());
  }
}

} // namespace dynpatch
