#pragma once

#include <string>
#include <vector>

#include "dialclip/dialog.hpp"
#include "dialclip/module.hpp"
#include "dialclip/tensor.hpp"

namespace dialclip {

/// Query-side and candidate-side affine maps into the shared retrieval space.
struct ProjectionExpert {
  Tensor query_w, query_b, cand_w, cand_b;

  static ProjectionExpert create(std::size_t out_dim, std::size_t d_model, Rng& rng) {
    return {init::small_weight(out_dim, d_model, rng), init::bias(out_dim),
            init::small_weight(out_dim, d_model, rng), init::bias(out_dim)};
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "query.w", query_w, true});
    out.push_back({prefix + "query.b", query_b, false});
    out.push_back({prefix + "cand.w", cand_w, true});
    out.push_back({prefix + "cand.b", cand_b, false});
  }
};

/// Hard-routed projection heads, one per retrieval type. With `shared` set
/// every type routes to a single expert.
class MixtureOfProjection {
 public:
  MixtureOfProjection() = default;

  MixtureOfProjection(std::size_t out_dim, std::size_t d_model, bool shared, Rng& rng)
      : shared_(shared) {
    if (out_dim == 0) throw ConfigError("projection width must be positive");
    const std::size_t n = shared ? 1 : kAllRetrievalTypes.size();
    for (std::size_t i = 0; i < n; ++i) experts_.push_back(ProjectionExpert::create(out_dim, d_model, rng));
  }

  bool shared() const { return shared_; }
  std::size_t size() const { return experts_.size(); }
  std::size_t out_dim() const { return experts_.front().query_w.rows(); }

  std::size_t expert_index(RetrievalType rt) const { return shared_ ? 0 : rt.index(); }

  const ProjectionExpert& select_expert(RetrievalType rt) const { return experts_[expert_index(rt)]; }
  const ProjectionExpert& expert(std::size_t i) const { return experts_.at(i); }

  Tensor project_query(const Tensor& x, RetrievalType rt) const {
    const auto& e = select_expert(rt);
    return ops::linear(x, e.query_w, e.query_b);
  }

  Tensor project_candidate(const Tensor& y, RetrievalType rt) const {
    const auto& e = select_expert(rt);
    return ops::linear(y, e.cand_w, e.cand_b);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < experts_.size(); ++i)
      experts_[i].collect(out, prefix + "expert" + std::to_string(i) + ".");
  }

 private:
  bool shared_ = false;
  std::vector<ProjectionExpert> experts_;
};

}  // namespace dialclip
