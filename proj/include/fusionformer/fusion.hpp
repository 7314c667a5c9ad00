#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fusionformer/errors.hpp"
#include "fusionformer/tensor.hpp"

namespace fusionformer {

// Operators that fuse the three per-layer attention outputs (current reply,
// persona, history), each of shape [L_c, d], into a single [L_c, d] matrix.

enum class FusionMethod { kAvg, kMax, kMin, kSw, kDw, kLinear, kAtt };

inline const char* to_string(FusionMethod m) {
  switch (m) {
    case FusionMethod::kAvg: return "avg";
    case FusionMethod::kMax: return "max";
    case FusionMethod::kMin: return "min";
    case FusionMethod::kSw: return "sw";
    case FusionMethod::kDw: return "dw";
    case FusionMethod::kLinear: return "linear";
    case FusionMethod::kAtt: return "att";
  }
  return "?";
}

inline FusionMethod parse_fusion_method(const std::string& s) {
  if (s == "avg") return FusionMethod::kAvg;
  if (s == "max") return FusionMethod::kMax;
  if (s == "min") return FusionMethod::kMin;
  if (s == "sw") return FusionMethod::kSw;
  if (s == "dw") return FusionMethod::kDw;
  if (s == "linear") return FusionMethod::kLinear;
  if (s == "att") return FusionMethod::kAtt;
  throw ConfigError("unknown fusion method '" + s +
                    "' (expected avg|max|min|sw|dw|linear|att)");
}

inline constexpr double kFusionWeightEps = 1e-8;

// Learnable fusion parameters for one decoder layer. Which tensors are
// defined depends on the method; avg/max/min/att carry none.
struct FusionParams {
  FusionMethod method = FusionMethod::kAvg;
  Tensor sw;     // [3] scalar weights (current, persona, history)
  Tensor dw;     // [3, d] per-dimension weights, one row per source
  Tensor lin_w;  // [3d, d]
  Tensor lin_b;  // [d]

  std::vector<Tensor> parameters() const {
    switch (method) {
      case FusionMethod::kSw: return {sw};
      case FusionMethod::kDw: return {dw};
      case FusionMethod::kLinear: return {lin_w, lin_b};
      default: return {};
    }
  }
};

namespace detail {

inline void check_fusion_shapes(const Tensor& a_c, const Tensor& a_p, const Tensor& a_h) {
  check_same_shape(a_c, a_p, "fuse");
  check_same_shape(a_c, a_h, "fuse");
  if (a_c.ndim() != 2) throw DimensionError("fuse: rank-2 inputs required");
}

}  // namespace detail

namespace detail {

// (a + b + c) / 3 with the same summation order and division as the
// weighting methods, so their uniform-weight reductions are bitwise equal.
inline Tensor fuse_avg(const Tensor& a_c, const Tensor& a_p, const Tensor& a_h) {
  Tensor out = make_result(a_c.shape(), {a_c, a_p, a_h});
  for (size_t i = 0; i < out.size(); ++i)
    out.data()[i] = (a_c.data()[i] + a_p.data()[i] + a_h.data()[i]) / 3.0;
  if (out.requires_grad()) {
    TensorNode* src[3] = {a_c.node(), a_p.node(), a_h.node()};
    auto* on = out.node();
    out.node()->backprop = [src = std::array<TensorNode*, 3>{src[0], src[1], src[2]}, on] {
      for (TensorNode* n : src) {
        if (!n->requires_grad) continue;
        for (size_t i = 0; i < on->grad.size(); ++i) n->grad[i] += on->grad[i] / 3.0;
      }
    };
  }
  return out;
}

}  // namespace detail

// Elementwise mean / max / min across the three sources.
inline Tensor fuse_static(FusionMethod kind, const Tensor& a_c, const Tensor& a_p,
                          const Tensor& a_h) {
  detail::check_fusion_shapes(a_c, a_p, a_h);
  switch (kind) {
    case FusionMethod::kAvg: return detail::fuse_avg(a_c, a_p, a_h);
    case FusionMethod::kMax: return maximum(maximum(a_c, a_p), a_h);
    case FusionMethod::kMin: return minimum(minimum(a_c, a_p), a_h);
    default:
      throw ContractError(std::string("fuse_static: '") + to_string(kind) +
                          "' is not a static method");
  }
}

// A^f = (w_c A^c + w_p A^p + w_h A^h) / (w_c + w_p + w_h), scalar weights.
inline Tensor fuse_sw(const Tensor& w, const Tensor& a_c, const Tensor& a_p, const Tensor& a_h) {
  detail::check_fusion_shapes(a_c, a_p, a_h);
  if (w.size() != 3) throw DimensionError("fuse_sw: weight tensor must have 3 entries");
  const double w0 = w.data()[0], w1 = w.data()[1], w2 = w.data()[2];
  const double wsum = w0 + w1 + w2;
  if (std::fabs(wsum) <= kFusionWeightEps)
    throw DegenerateWeightsError("fuse_sw: |w_c + w_p + w_h| = " + std::to_string(std::fabs(wsum)) +
                                 " <= " + std::to_string(kFusionWeightEps));
  Tensor out = detail::make_result(a_c.shape(), {w, a_c, a_p, a_h});
  for (size_t i = 0; i < out.size(); ++i)
    out.data()[i] = (w0 * a_c.data()[i] + w1 * a_p.data()[i] + w2 * a_h.data()[i]) / wsum;
  if (out.requires_grad()) {
    auto* wn = w.node();
    auto* cn = a_c.node();
    auto* pn = a_p.node();
    auto* hn = a_h.node();
    auto* on = out.node();
    out.node()->backprop = [wn, cn, pn, hn, on, w0, w1, w2, wsum] {
      detail::TensorNode* src[3] = {cn, pn, hn};
      const double ws[3] = {w0, w1, w2};
      for (int s = 0; s < 3; ++s) {
        if (!src[s]->requires_grad) continue;
        const double coef = ws[s] / wsum;
        for (size_t i = 0; i < on->grad.size(); ++i) src[s]->grad[i] += on->grad[i] * coef;
      }
      if (wn->requires_grad) {
        for (int s = 0; s < 3; ++s) {
          double acc = 0.0;
          for (size_t i = 0; i < on->grad.size(); ++i)
            acc += on->grad[i] * (src[s]->value[i] - on->value[i]);
          wn->grad[static_cast<size_t>(s)] += acc / wsum;
        }
      }
    };
  }
  return out;
}

// Per-feature-dimension weighted combination; w is [3, d] with one row per
// source, applied identically to every row of the inputs.
inline Tensor fuse_dw(const Tensor& w, const Tensor& a_c, const Tensor& a_p, const Tensor& a_h) {
  detail::check_fusion_shapes(a_c, a_p, a_h);
  const int d = a_c.cols();
  if (w.ndim() != 2 || w.rows() != 3 || w.cols() != d)
    throw DimensionError("fuse_dw: weights must be [3," + std::to_string(d) + "], got " +
                         detail::shape_str(w.shape()));
  std::vector<double> wsum(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) {
    wsum[static_cast<size_t>(j)] = w.at(0, j) + w.at(1, j) + w.at(2, j);
    if (std::fabs(wsum[static_cast<size_t>(j)]) <= kFusionWeightEps)
      throw DegenerateWeightsError("fuse_dw: |w_c + w_p + w_h| <= " +
                                   std::to_string(kFusionWeightEps) + " at dimension j=" +
                                   std::to_string(j));
  }
  const int m = a_c.rows();
  Tensor out = detail::make_result(a_c.shape(), {w, a_c, a_p, a_h});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < d; ++j) {
      out.at(i, j) = (w.at(0, j) * a_c.at(i, j) + w.at(1, j) * a_p.at(i, j) +
                      w.at(2, j) * a_h.at(i, j)) /
                     wsum[static_cast<size_t>(j)];
    }
  }
  if (out.requires_grad()) {
    auto* wn = w.node();
    auto* cn = a_c.node();
    auto* pn = a_p.node();
    auto* hn = a_h.node();
    auto* on = out.node();
    out.node()->backprop = [wn, cn, pn, hn, on, wsum = std::move(wsum), m, d] {
      detail::TensorNode* src[3] = {cn, pn, hn};
      for (int i = 0; i < m; ++i) {
        const double* g = on->grad.data() + static_cast<size_t>(i) * d;
        const double* f = on->value.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
          const double inv = 1.0 / wsum[static_cast<size_t>(j)];
          for (int s = 0; s < 3; ++s) {
            const double wv = wn->value[static_cast<size_t>(s) * d + j];
            const double av = src[s]->value[static_cast<size_t>(i) * d + j];
            if (src[s]->requires_grad)
              src[s]->grad[static_cast<size_t>(i) * d + j] += g[j] * wv * inv;
            if (wn->requires_grad)
              wn->grad[static_cast<size_t>(s) * d + j] += g[j] * (av - f[j]) * inv;
          }
        }
      }
    };
  }
  return out;
}

// A^f = [A^c ; A^p ; A^h] W_f + b along the feature axis, W_f in [3d, d].
inline Tensor fuse_linear(const Tensor& lin_w, const Tensor& lin_b, const Tensor& a_c,
                          const Tensor& a_p, const Tensor& a_h) {
  detail::check_fusion_shapes(a_c, a_p, a_h);
  const int d = a_c.cols();
  if (lin_w.ndim() != 2 || lin_w.rows() != 3 * d || lin_w.cols() != d)
    throw DimensionError("fuse_linear: W_f must be [" + std::to_string(3 * d) + "," +
                         std::to_string(d) + "], got " + detail::shape_str(lin_w.shape()));
  Tensor cat = concat_cols({a_c, a_p, a_h});
  return add_rowvec(matmul(cat, lin_w), lin_b);
}

// Z = softmax_rows(sign(A^c A^p^T) .* sqrt(|A^c A^p^T|) / sqrt(d)) A^h.
// History supplies the value term; the parameter-free form of the method.
inline Tensor fuse_att(const Tensor& a_c, const Tensor& a_p, const Tensor& a_h) {
  detail::check_fusion_shapes(a_c, a_p, a_h);
  const int d = a_c.cols();
  Tensor m = matmul_nt(a_c, a_p);              // [L_c, L_c]
  Tensor s = signed_sqrt(m);                   // sign .* sqrt(abs), subgradient 0 at 0
  Tensor z = softmax_rows(scale(s, 1.0 / std::sqrt(static_cast<double>(d))));
  return matmul(z, a_h);
}

inline Tensor fuse(const FusionParams& params, const Tensor& a_c, const Tensor& a_p,
                   const Tensor& a_h) {
  switch (params.method) {
    case FusionMethod::kAvg:
    case FusionMethod::kMax:
    case FusionMethod::kMin: return fuse_static(params.method, a_c, a_p, a_h);
    case FusionMethod::kSw: return fuse_sw(params.sw, a_c, a_p, a_h);
    case FusionMethod::kDw: return fuse_dw(params.dw, a_c, a_p, a_h);
    case FusionMethod::kLinear: return fuse_linear(params.lin_w, params.lin_b, a_c, a_p, a_h);
    case FusionMethod::kAtt: return fuse_att(a_c, a_p, a_h);
  }
  throw ContractError("fuse: invalid method");
}

// Initial parameters for one decoder layer. Source-weighting methods start
// at uniform weight 1 so every method begins at the average baseline;
// the linear map draws from Normal(0, 0.02) with zero bias.
inline FusionParams init_fusion_params(FusionMethod method, int d, Rng& rng) {
  FusionParams p;
  p.method = method;
  switch (method) {
    case FusionMethod::kSw:
      p.sw = Tensor({3}, 1.0, true);
      break;
    case FusionMethod::kDw:
      p.dw = Tensor({3, d}, 1.0, true);
      break;
    case FusionMethod::kLinear:
      p.lin_w = Tensor::randn({3 * d, d}, rng, 0.02, true);
      p.lin_b = Tensor({d}, 0.0, true);
      break;
    default:
      break;
  }
  return p;
}

}  // namespace fusionformer
