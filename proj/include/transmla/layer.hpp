#pragma once

#include <string>
#include <variant>

#include "transmla/attention.hpp"
#include "transmla/rewrites.hpp"

namespace transmla {

/// Layers that can be persisted and compared end to end.
using AnyLayer = std::variant<GqaLayer, MlaLayer, MlaFactorizedLayer>;

inline std::string layer_kind(const AnyLayer& layer) {
  struct {
    std::string operator()(const GqaLayer&) const { return "gqa"; }
    std::string operator()(const MlaLayer&) const { return "mla"; }
    std::string operator()(const MlaFactorizedLayer&) const { return "mla_factorized"; }
  } v;
  return std::visit(v, layer);
}

inline std::size_t layer_hidden_dim(const AnyLayer& layer) {
  return std::visit([](const auto& l) { return l.D; }, layer);
}

/// True for forms defined without rotary embedding.
inline bool content_only(const AnyLayer& layer) { return std::holds_alternative<MlaFactorizedLayer>(layer); }

inline void validate_layer(const AnyLayer& layer) {
  std::visit([](const auto& l) { l.validate(); }, layer);
}

inline std::size_t layer_cache_scalars(const AnyLayer& layer) {
  struct {
    std::size_t operator()(const GqaLayer& l) const { return l.cache_scalars_per_token(); }
    std::size_t operator()(const MlaLayer& l) const { return l.cache_scalars_per_token(); }
    std::size_t operator()(const MlaFactorizedLayer& l) const { return l.latent_dim(); }
  } v;
  return std::visit(v, layer);
}

/// Output of any layer. kNone skips RoPE on GQA layers so they can be compared
/// with content-only forms; MLA layers always carry their rope head.
inline Matrix layer_forward(const AnyLayer& layer, const Matrix& x, Positional pos = Positional::kRope) {
  struct {
    const Matrix& x;
    Positional pos;
    Matrix operator()(const GqaLayer& l) const { return gqa_forward(l, x, pos); }
    Matrix operator()(const MlaLayer& l) const {
      require(pos == Positional::kRope || l.d_rope == 0, "layer_forward: an MLA layer with a rope head needs RoPE");
      return mla_forward_absorbed(l, x).y;
    }
    Matrix operator()(const MlaFactorizedLayer& l) const {
      require(pos == Positional::kNone, "layer_forward: the factorized form is content-only");
      return mla_factorized_forward(l, x);
    }
  } v{x, pos};
  return std::visit(v, layer);
}

}  // namespace transmla
