#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dialclip/tensor.hpp"

namespace dialclip {

// Named handle onto a model parameter. `decay` marks weight matrices that
// take decoupled weight decay; biases, norms, embeddings-as-prompts do not.
struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = false;
};

using ParamList = std::vector<ParamRef>;

namespace init {

inline Tensor weight(std::size_t out, std::size_t in, Rng& rng) {
  return Tensor::randn({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}
// std 1/in: outputs start near zero, so initial retrieval scores are small.
inline Tensor small_weight(std::size_t out, std::size_t in, Rng& rng) {
  return Tensor::randn({out, in}, rng, 1.0 / static_cast<double>(in));
}
inline Tensor bias(std::size_t n) { return Tensor::zeros({n}); }
inline Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0); }

}  // namespace init

inline std::size_t count_values(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace dialclip
