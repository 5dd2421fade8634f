#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "lql/nf4.hpp"
#include "lql/tensor.hpp"

namespace lql {

/// Projections that carry adapters, one set per transformer layer.
inline constexpr std::array<const char*, 7> kAdapterTargets = {
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"};

/// Trainable low-rank factor pair attached to one frozen projection.
/// The adapter contribution to a forward pass is scaling * B * (A * x)
/// with scaling = alpha / rank; B starts at zero so a fresh adapter is a
/// no-op.
template <class S>
struct LoraAdapterT {
  std::string target;      // projection name, e.g. "q_proj"
  std::size_t layer = 0;
  std::size_t rank = 0;
  double alpha = 16.0;
  TensorT<S> a;  // [rank, d_in], trainable
  TensorT<S> b;  // [d_out, rank], trainable
  bool merged = false;

  double scaling() const { return alpha / static_cast<double>(rank); }
  std::size_t d_in() const { return a.dim(1); }
  std::size_t d_out() const { return b.dim(0); }
  std::size_t parameter_count() const { return rank * (d_in() + d_out()); }
};

using LoraAdapter = LoraAdapterT<float>;

/// A is Gaussian with standard deviation 1/sqrt(rank); B is exact zero.
template <class S = float>
LoraAdapterT<S> init_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank,
                             double alpha, Rng& rng, std::string target = "",
                             std::size_t layer = 0) {
  if (rank < 1) throw config_error("lora: rank must be >= 1");
  if (rank > std::min(d_in, d_out)) {
    throw config_error("lora: rank " + std::to_string(rank) +
                       " exceeds min(d_in, d_out) = " +
                       std::to_string(std::min(d_in, d_out)));
  }
  LoraAdapterT<S> ad;
  ad.target = std::move(target);
  ad.layer = layer;
  ad.rank = rank;
  ad.alpha = alpha;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  std::vector<S> a_data(rank * d_in);
  for (auto& v : a_data) v = static_cast<S>(rng.normal(0.0, stddev));
  ad.a = TensorT<S>::from_data({rank, d_in}, std::move(a_data), /*requires_grad=*/true);
  ad.b = TensorT<S>::zeros({d_out, rank}, /*requires_grad=*/true);
  return ad;
}

/// x[n, d_in] through a frozen weight [d_out, d_in] plus the adapter path:
/// y = x * W^T + scaling * (x * A^T) * B^T. Gradients reach only A and B.
template <class S>
TensorT<S> adapted_linear(const TensorT<S>& x, const TensorT<S>& frozen_weight,
                          const LoraAdapterT<S>& adapter) {
  if (x.ndim() != 2 || x.dim(1) != adapter.d_in() ||
      frozen_weight.dim(1) != adapter.d_in() ||
      frozen_weight.dim(0) != adapter.d_out()) {
    throw shape_error("adapted_linear shape mismatch");
  }
  auto base = matmul_nt(x, frozen_weight);
  auto down = matmul_nt(x, adapter.a);            // [n, rank]
  auto up = matmul_nt(down, adapter.b);           // [n, d_out]
  return add(base, scale(up, static_cast<S>(adapter.scaling())));
}

/// Contract-level convenience: dequantizes the frozen base on use.
template <class S>
TensorT<S> adapted_forward(const TensorT<S>& x, const QuantizedTensor& base,
                           const LoraAdapterT<S>& adapter) {
  return adapted_linear(x, dequantize_tensor<S>(base), adapter);
}

/// dequantize(base) + scaling * B * A as a full-precision matrix. Merging is
/// stateful: a second merge of the same adapter is rejected.
template <class S>
TensorT<S> merge_adapter(const QuantizedTensor& base, LoraAdapterT<S>& adapter) {
  if (adapter.merged) {
    throw contract_error("merge_adapter: adapter " + adapter.target +
                         " is already merged");
  }
  auto w = dequantize_tensor<S>(base);
  if (w.ndim() != 2 || w.dim(0) != adapter.d_out() || w.dim(1) != adapter.d_in()) {
    throw shape_error("merge_adapter shape mismatch");
  }
  auto delta = matmul(adapter.b, adapter.a);  // [d_out, d_in]
  auto merged = add(w, scale(delta, static_cast<S>(adapter.scaling())));
  adapter.merged = true;
  return merged.clone_detached(false);
}

/// The seven adapter shapes of one transformer layer.
struct AdapteratureShape {
  const char* target;
  std::size_t d_in;
  std::size_t d_out;
};

inline std::array<AdapteratureShape, 7> adapter_shapes_for_layer(std::size_t d_model,
                                                                 std::size_t d_ff) {
  return {{{"q_proj", d_model, d_model},
           {"k_proj", d_model, d_model},
           {"v_proj", d_model, d_model},
           {"o_proj", d_model, d_model},
           {"gate_proj", d_model, d_ff},
           {"up_proj", d_model, d_ff},
           {"down_proj", d_ff, d_model}}};
}

/// Total trainable parameters: sum over all adapters of rank*(d_in + d_out).
/// Embeddings, norms, and base weights are frozen and excluded.
inline std::size_t trainable_param_count(std::size_t n_layers, std::size_t d_model,
                                         std::size_t d_ff, std::size_t rank) {
  if (rank < 1) throw config_error("lora: rank must be >= 1");
  std::size_t per_layer = 0;
  for (const auto& s : adapter_shapes_for_layer(d_model, d_ff)) {
    per_layer += rank * (s.d_in + s.d_out);
  }
  return n_layers * per_layer;
}

}  // namespace lql
