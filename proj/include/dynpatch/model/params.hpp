#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dynpatch/model/config.hpp"

namespace dynpatch {

template <typename S> using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S> using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// One named tensor inside the flat parameter vector (column-major).
struct ParamSlot {
  std::string name;
  Index rows = 0, cols = 0;
  Index offset = 0;
  Index size() const noexcept { return rows * cols; }
};

class ParamLayout {
public:
  int add(std::string name, Index rows, Index cols);
  const ParamSlot &operator[](int id) const { return slots_[static_cast<std::size_t>(id)]; }
  const std::vector<ParamSlot> &slots() const noexcept { return slots_; }
  Index total() const noexcept { return total_; }
  std::optional<int> find(const std::string &name) const;
  /// "name[r,c]" for a flat index.
  std::string describe(Index flat) const;

private:
  std::vector<ParamSlot> slots_;
  Index total_ = 0;
};

struct LinearSlots {
  int weight = -1, bias = -1;
};
struct NormSlots {
  int gamma = -1, beta = -1;
};
struct BlockSlots {
  NormSlots ln1;
  LinearSlots qkv, proj;
  NormSlots ln2;
  LinearSlots fc1, fc2;
};

/// Slot ids for every learnable quantity, built deterministically from a config.
struct ModelLayout {
  ParamLayout params;
  LinearSlots phi;      // T*b^3 -> C
  LinearSlots grid_agg; // 8C -> C
  LinearSlots zero_fc1; // C -> hidden
  LinearSlots zero_fc2; // hidden -> C, zero at init
  std::vector<BlockSlots> enc, dec;
  LinearSlots enc_to_dec;
  int mask_token = -1;  // dec_dim x 1
  int scale_table = -1; // K x dec_dim
  std::vector<LinearSlots> heads;
};

ModelLayout make_model_layout(const ModelConfig &cfg);

/// All learnable quantities in one flat vector. Gradients use the same type.
template <typename S> struct ModelParams {
  ModelConfig config;
  std::shared_ptr<const ModelLayout> layout;
  Vec<S> values;

  Eigen::Map<Mat<S>> mat(int slot) {
    const auto &p = layout->params[slot];
    return {values.data() + p.offset, p.rows, p.cols};
  }
  Eigen::Map<const Mat<S>> mat(int slot) const {
    const auto &p = layout->params[slot];
    return {values.data() + p.offset, p.rows, p.cols};
  }
  Eigen::Map<Vec<S>> vec(int slot) {
    const auto &p = layout->params[slot];
    return {values.data() + p.offset, p.size()};
  }
  Eigen::Map<const Vec<S>> vec(int slot) const {
    const auto &p = layout->params[slot];
    return {values.data() + p.offset, p.size()};
  }

  ModelParams zeros_like() const { return ModelParams{config, layout, Vec<S>::Zero(values.size())}; }

  template <typename T> ModelParams<T> cast() const { return ModelParams<T>{config, layout, values.template cast<T>()}; }
};

/// Xavier-uniform weights, zero biases, unit LayerNorm gains, N(0, 0.02)
/// mask token and scale table; the ZeroMLP output layer is exactly zero.
template <typename S> ModelParams<S> init_params(const ModelConfig &cfg, std::uint64_t seed);

extern template ModelParams<float> init_params<float>(const ModelConfig &, std::uint64_t);
extern template ModelParams<double> init_params<double>(const ModelConfig &, std::uint64_t);

} // namespace dynpatch
