#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lql/tensor.hpp"

namespace lql {

/// Rotation angle for (possibly fractional) effective position p and pair
/// index i. This single expression is shared by table construction and the
/// interpolation-equivalence check, so angles(m; s) == angles(m*s; 1)
/// bit-exactly: both reduce to rope_angle(double(m) * s, ...).
inline double rope_angle(double effective_pos, std::size_t pair_index,
                         std::size_t head_dim, double base) {
  const double inv_freq =
      std::pow(base, -2.0 * static_cast<double>(pair_index) /
                         static_cast<double>(head_dim));
  return effective_pos * inv_freq;
}

/// Precomputed rotary embedding table with a position-interpolation scale.
/// Entry (m, i) encodes angle (m * scale) * base^(-2i/head_dim). Angles are
/// evaluated in double and stored as cos/sin in the working precision.
template <class S>
struct RopeTableT {
  std::size_t head_dim = 0;
  double base = 10000.0;
  double scale = 1.0;  // pretrained_ctx / target_ctx, in (0, 1]
  std::size_t max_pos = 0;
  std::vector<S> cos_values;  // [max_pos, head_dim/2]
  std::vector<S> sin_values;

  std::size_t pairs() const { return head_dim / 2; }
};

using RopeTable = RopeTableT<float>;

template <class S = float>
RopeTableT<S> build_rope_table(std::size_t head_dim, double base,
                               std::size_t pretrained_ctx,
                               std::size_t target_ctx, std::size_t max_pos) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw config_error("rope: head_dim must be a positive even number");
  }
  if (pretrained_ctx == 0 || target_ctx == 0) {
    throw config_error("rope: context lengths must be positive");
  }
  if (target_ctx < pretrained_ctx) {
    throw config_error("rope: target_ctx must be >= pretrained_ctx");
  }
  if (max_pos > target_ctx) {
    throw config_error("rope: max_pos exceeds target_ctx");
  }
  RopeTableT<S> t;
  t.head_dim = head_dim;
  t.base = base;
  t.scale = static_cast<double>(pretrained_ctx) / static_cast<double>(target_ctx);
  t.max_pos = max_pos;
  const std::size_t pairs = head_dim / 2;
  t.cos_values.resize(max_pos * pairs);
  t.sin_values.resize(max_pos * pairs);
  for (std::size_t m = 0; m < max_pos; ++m) {
    const double eff = static_cast<double>(m) * t.scale;
    for (std::size_t i = 0; i < pairs; ++i) {
      const double a = rope_angle(eff, i, head_dim, base);
      t.cos_values[m * pairs + i] = static_cast<S>(std::cos(a));
      t.sin_values[m * pairs + i] = static_cast<S>(std::sin(a));
    }
  }
  return t;
}

namespace detail {

template <class S>
TensorT<S> apply_rope_impl(const TensorT<S>& x,
                           std::span<const std::size_t> positions,
                           const RopeTableT<S>& table, bool inverse) {
  if (x.ndim() != 3 || x.dim(2) != table.head_dim) {
    throw shape_error("apply_rope expects [seq, heads, head_dim] with head_dim " +
                      std::to_string(table.head_dim) + ", got " +
                      shape_str(x.shape()));
  }
  const std::size_t seq = x.dim(0);
  if (positions.size() != seq) {
    throw shape_error("apply_rope: positions length does not match sequence");
  }
  for (auto p : positions) {
    if (p >= table.max_pos) {
      throw shape_error("apply_rope: position " + std::to_string(p) +
                        " outside table range " + std::to_string(table.max_pos));
    }
  }
  const std::size_t heads = x.dim(1);
  const std::size_t pairs = table.pairs();
  const S* px = x.values().data();
  const S sgn = inverse ? S(-1) : S(1);
  std::vector<S> out(x.numel());
  std::vector<std::size_t> pos_copy(positions.begin(), positions.end());
  for (std::size_t tpos = 0; tpos < seq; ++tpos) {
    const std::size_t m = pos_copy[tpos];
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = (tpos * heads + h) * table.head_dim;
      for (std::size_t i = 0; i < pairs; ++i) {
        const S c = table.cos_values[m * pairs + i];
        const S s = sgn * table.sin_values[m * pairs + i];
        const S a = px[off + 2 * i];
        const S b = px[off + 2 * i + 1];
        out[off + 2 * i] = a * c - b * s;
        out[off + 2 * i + 1] = a * s + b * c;
      }
    }
  }
  auto xn = x.handle();
  const RopeTableT<S>* tp = &table;  // tables outlive graphs (owned by the model)
  return make_op<S>(x.shape(), std::move(out), {x},
                    [xn, tp, pos_copy, seq, heads, pairs, sgn](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* g = self.grad.data();
    for (std::size_t tpos = 0; tpos < seq; ++tpos) {
      const std::size_t m = pos_copy[tpos];
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = (tpos * heads + h) * tp->head_dim;
        for (std::size_t i = 0; i < pairs; ++i) {
          const S c = tp->cos_values[m * pairs + i];
          const S s = sgn * tp->sin_values[m * pairs + i];
          const S ga = g[off + 2 * i];
          const S gb = g[off + 2 * i + 1];
          // rotate the gradient by the negated angle
          xn->grad[off + 2 * i] += ga * c + gb * s;
          xn->grad[off + 2 * i + 1] += -ga * s + gb * c;
        }
      }
    }
  });
}

}  // namespace detail

/// Rotates each (x_{2i}, x_{2i+1}) pair by the table angle for the token's
/// position. Pair norms are preserved; gradients rotate by the negated angle.
template <class S>
TensorT<S> apply_rope(const TensorT<S>& x, std::span<const std::size_t> positions,
                      const RopeTableT<S>& table) {
  return detail::apply_rope_impl(x, positions, table, false);
}

/// Inverse rotation; apply_rope_inverse(apply_rope(x)) round-trips.
template <class S>
TensorT<S> apply_rope_inverse(const TensorT<S>& x,
                              std::span<const std::size_t> positions,
                              const RopeTableT<S>& table) {
  return detail::apply_rope_impl(x, positions, table, true);
}

/// True iff the rotation at integer position m under the scaled table equals
/// the rotation at fractional effective position m*scale under scale 1,
/// elementwise within tol. table_unscaled supplies the scale-1 reference
/// parameters and must share head_dim and base.
template <class S>
bool interpolation_equivalence_check(std::size_t m,
                                     const RopeTableT<S>& table_scaled,
                                     const RopeTableT<S>& table_unscaled,
                                     double tol = 1e-6) {
  if (table_unscaled.scale != 1.0) {
    throw config_error("interpolation_equivalence_check: reference table must have scale 1");
  }
  if (table_scaled.head_dim != table_unscaled.head_dim ||
      table_scaled.base != table_unscaled.base) {
    throw config_error("interpolation_equivalence_check: table parameter mismatch");
  }
  if (m >= table_scaled.max_pos) {
    throw shape_error("interpolation_equivalence_check: m outside table range");
  }
  const std::size_t pairs = table_scaled.pairs();
  const double eff = static_cast<double>(m) * table_scaled.scale;
  for (std::size_t i = 0; i < pairs; ++i) {
    const double a = rope_angle(eff * table_unscaled.scale, i,
                                table_unscaled.head_dim, table_unscaled.base);
    const double dc = static_cast<double>(table_scaled.cos_values[m * pairs + i]) - std::cos(a);
    const double ds = static_cast<double>(table_scaled.sin_values[m * pairs + i]) - std::sin(a);
    if (std::fabs(dc) > tol || std::fabs(ds) > tol) return false;
  }
  return true;
}

}  // namespace lql
