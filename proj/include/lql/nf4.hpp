#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "lql/tensor.hpp"

namespace lql {

// ---------------------------------------------------------------------------
// NF4 codebook
// ---------------------------------------------------------------------------

/// 16 strictly increasing levels in [-1, 1] containing exactly -1, 0, 1.
struct Nf4Codebook {
  std::array<float, 16> values;

  /// Widest gap between adjacent levels; absmax * widest_gap / 2 bounds the
  /// per-element reconstruction error.
  float widest_gap() const {
    float g = 0.0f;
    for (int i = 0; i + 1 < 16; ++i) g = std::max(g, values[i + 1] - values[i]);
    return g;
  }
};

/// Probability mass clipped off each tail when placing the codebook levels
/// on standard-normal quantiles (the conventional 4-bit NormalFloat offset).
inline constexpr double kNf4QuantileOffset = 0.0322917;

/// Inverse standard normal CDF: Acklam's rational approximation refined by
/// one Halley step against the erf-based CDF. Accurate to ~1e-15 over (0,1).
inline double normal_cdf_inv(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw numeric_error("normal_cdf_inv: p outside (0, 1)");
  }
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= phigh) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // One Halley refinement: F(x) - p with F the erf-based normal CDF.
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

/// Levels at standard-normal quantiles: 8 negative levels from evenly spaced
/// quantiles of the negative half, 7 positive levels from the positive half,
/// plus exact 0; each half is normalized so the endpoints land exactly on
/// -1 and 1.
inline Nf4Codebook build_nf4_codebook() {
  Nf4Codebook cb{};
  const double p0 = kNf4QuantileOffset;
  // Negative half: probabilities evenly spaced on [p0, 0.5), 8 levels.
  std::array<double, 8> neg{};
  for (int j = 0; j < 8; ++j) {
    const double p = p0 + (0.5 - p0) * static_cast<double>(j) / 8.0;
    neg[j] = normal_cdf_inv(p);
  }
  const double neg_scale = -neg[0];  // |quantile at p0|
  // Positive half: probabilities evenly spaced on (0.5, 1 - p0], 7 levels.
  std::array<double, 7> pos{};
  for (int j = 0; j < 7; ++j) {
    const double p = (1.0 - p0) - (0.5 - p0) * static_cast<double>(6 - j) / 7.0;
    pos[j] = normal_cdf_inv(p);
  }
  const double pos_scale = pos[6];  // quantile at 1 - p0
  for (int j = 0; j < 8; ++j) cb.values[j] = static_cast<float>(neg[j] / neg_scale);
  cb.values[8] = 0.0f;
  for (int j = 0; j < 7; ++j) cb.values[9 + j] = static_cast<float>(pos[j] / pos_scale);
  cb.values[0] = -1.0f;
  cb.values[15] = 1.0f;
  return cb;
}

inline const Nf4Codebook& nf4_codebook() {
  static const Nf4Codebook cb = build_nf4_codebook();
  return cb;
}

/// Nearest codebook level for v (already normalized by absmax); midpoint
/// ties resolve to the lower index.
inline std::uint8_t nf4_code_for(double v, const Nf4Codebook& cb = nf4_codebook()) {
  std::uint8_t idx = 0;
  while (idx < 15 &&
         v > 0.5 * (static_cast<double>(cb.values[idx]) +
                    static_cast<double>(cb.values[idx + 1]))) {
    ++idx;
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Nibble packing (two 4-bit codes per byte, low nibble = earlier element)
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > 15) throw contract_error("pack_nibbles: code exceeds 4 bits");
    if (i % 2 == 0) {
      out[i / 2] = codes[i];
    } else {
      out[i / 2] = static_cast<std::uint8_t>(out[i / 2] | (codes[i] << 4));
    }
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> bytes,
                                                std::size_t count) {
  if (bytes.size() != (count + 1) / 2) {
    throw format_error("unpack_nibbles: byte length does not match element count");
  }
  std::vector<std::uint8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = (i % 2 == 0) ? (bytes[i / 2] & 0x0F) : (bytes[i / 2] >> 4);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quantized tensors
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultQuantBlock = 64;
inline constexpr std::size_t kAbsmaxSuperblock = 256;

/// Packed 4-bit NormalFloat weights with per-block absmax constants. When
/// double_quantized is set the absmax values are stored as 8-bit affine
/// codes with one {min, scale} pair per superblock of 256 blocks.
struct QuantizedTensor {
  Shape shape;
  std::size_t block_size = kDefaultQuantBlock;
  bool double_quantized = false;
  std::vector<std::uint8_t> codes;  // packed nibbles, ceil(n/2) bytes

  std::vector<float> absmax;               // plain storage (empty when DQ)
  std::vector<std::uint8_t> absmax_codes;  // DQ storage
  std::vector<float> sb_min;               // per superblock
  std::vector<float> sb_scale;

  std::size_t numel() const { return shape_numel(shape); }
  std::size_t n_blocks() const { return (numel() + block_size - 1) / block_size; }
  std::size_t n_superblocks() const {
    return (n_blocks() + kAbsmaxSuperblock - 1) / kAbsmaxSuperblock;
  }

  /// Reconstructed absmax for one block (de-double-quantized if needed).
  float block_absmax(std::size_t b) const {
    if (!double_quantized) return absmax[b];
    const std::size_t sb = b / kAbsmaxSuperblock;
    return sb_min[sb] + sb_scale[sb] * static_cast<float>(absmax_codes[b]);
  }
};

/// Per-block absmax scaling followed by nearest-level NF4 code assignment;
/// optionally double-quantizes the absmax constants. Codes are always
/// assigned from the exact absmax, so double quantization only changes the
/// precision of the stored constants, never the codes.
inline QuantizedTensor quantize_tensor(Shape shape, std::span<const float> data,
                                       std::size_t block_size = kDefaultQuantBlock,
                                       bool double_quantize = false) {
  if (block_size < 1) throw config_error("quantize_tensor: block_size must be >= 1");
  if (shape_numel(shape) != data.size()) {
    throw shape_error("quantize_tensor: data length does not match shape");
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw numeric_error("quantize_tensor: non-finite input");
  }
  const Nf4Codebook& cb = nf4_codebook();
  QuantizedTensor q;
  q.shape = std::move(shape);
  q.block_size = block_size;
  q.double_quantized = double_quantize;
  const std::size_t n = data.size();
  const std::size_t nb = (n + block_size - 1) / block_size;
  std::vector<std::uint8_t> codes(n);
  std::vector<float> absmax(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * block_size;
    const std::size_t hi = std::min(n, lo + block_size);
    float am = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) am = std::max(am, std::fabs(data[i]));
    absmax[b] = am;
    if (am == 0.0f) {
      // Degenerate all-zero block: dequantizes to exact 0 via absmax 0.
      for (std::size_t i = lo; i < hi; ++i) codes[i] = 8;  // the exact-0 level
      continue;
    }
    for (std::size_t i = lo; i < hi; ++i) {
      const double v = static_cast<double>(data[i]) / static_cast<double>(am);
      codes[i] = nf4_code_for(v, cb);
    }
  }
  q.codes = pack_nibbles(codes);
  if (!double_quantize) {
    q.absmax = std::move(absmax);
    return q;
  }
  const std::size_t nsb = (nb + kAbsmaxSuperblock - 1) / kAbsmaxSuperblock;
  q.absmax_codes.resize(nb);
  q.sb_min.resize(nsb);
  q.sb_scale.resize(nsb);
  for (std::size_t sb = 0; sb < nsb; ++sb) {
    const std::size_t lo = sb * kAbsmaxSuperblock;
    const std::size_t hi = std::min(nb, lo + kAbsmaxSuperblock);
    float mn = absmax[lo], mx = absmax[lo];
    for (std::size_t b = lo; b < hi; ++b) {
      mn = std::min(mn, absmax[b]);
      mx = std::max(mx, absmax[b]);
    }
    const float scale = (mx - mn) / 255.0f;
    q.sb_min[sb] = mn;
    q.sb_scale[sb] = scale;
    for (std::size_t b = lo; b < hi; ++b) {
      long code = 0;
      if (scale > 0.0f) {
        code = std::lround(static_cast<double>(absmax[b] - mn) / scale);
        code = std::clamp(code, 0L, 255L);
      }
      q.absmax_codes[b] = static_cast<std::uint8_t>(code);
    }
  }
  return q;
}

template <class S>
QuantizedTensor quantize_tensor(const TensorT<S>& x,
                                std::size_t block_size = kDefaultQuantBlock,
                                bool double_quantize = false) {
  std::vector<float> data(x.numel());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(x.values()[i]);
  return quantize_tensor(x.shape(), data, block_size, double_quantize);
}

/// element = codebook[code] * block absmax, computed in float regardless of
/// the working precision so float and double models see identical weights.
template <class S = float>
TensorT<S> dequantize_tensor(const QuantizedTensor& q) {
  const Nf4Codebook& cb = nf4_codebook();
  const std::size_t n = q.numel();
  if (q.codes.size() != (n + 1) / 2) {
    throw format_error("dequantize_tensor: packed code length mismatch");
  }
  if (!q.double_quantized && q.absmax.size() != q.n_blocks()) {
    throw format_error("dequantize_tensor: absmax length mismatch");
  }
  if (q.double_quantized &&
      (q.absmax_codes.size() != q.n_blocks() || q.sb_min.size() != q.n_superblocks() ||
       q.sb_scale.size() != q.n_superblocks())) {
    throw format_error("dequantize_tensor: double-quantized absmax length mismatch");
  }
  std::vector<S> out(n);
  for (std::size_t b = 0; b < q.n_blocks(); ++b) {
    const float am = q.block_absmax(b);
    const std::size_t lo = b * q.block_size;
    const std::size_t hi = std::min(n, lo + q.block_size);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::uint8_t code =
          (i % 2 == 0) ? (q.codes[i / 2] & 0x0F) : (q.codes[i / 2] >> 4);
      out[i] = static_cast<S>(cb.values[code] * am);
    }
  }
  return TensorT<S>::from_data(q.shape, std::move(out), /*requires_grad=*/false);
}

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

/// Exact bit accounting of a quantized tensor. Code bits count 4 per
/// parameter (the packed file may add one padding nibble for odd counts).
struct StorageReport {
  std::size_t parameter_count = 0;
  std::size_t code_bits = 0;
  std::size_t absmax_bits = 0;
  std::size_t superblock_bits = 0;
  std::size_t total_bits = 0;
  double bits_per_parameter = 0.0;
};

inline StorageReport storage_report(const QuantizedTensor& q) {
  StorageReport r;
  r.parameter_count = q.numel();
  r.code_bits = 4 * q.numel();
  r.absmax_bits = q.double_quantized ? 8 * q.n_blocks() : 32 * q.n_blocks();
  r.superblock_bits = q.double_quantized ? 64 * q.n_superblocks() : 0;
  r.total_bits = r.code_bits + r.absmax_bits + r.superblock_bits;
  r.bits_per_parameter =
      static_cast<double>(r.total_bits) / static_cast<double>(r.parameter_count);
  return r;
}

// ---------------------------------------------------------------------------
// Serialized section format (little-endian)
//   header { element count: u64, block_size: u32, flags: u8 bit0 = DQ }
//   packed codes: ceil(n/2) bytes, low nibble first
//   absmax: n_blocks * f32, or n_blocks * u8 + n_superblocks * {min f32, scale f32}
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  // Host is little-endian on every supported target; memcpy preserves order.
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  std::uint8_t buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw format_error("unexpected end of stream");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_bytes(std::ostream& os, std::span<const std::uint8_t> b) {
  os.write(reinterpret_cast<const char*>(b.data()),
           static_cast<std::streamsize>(b.size()));
}

inline std::vector<std::uint8_t> read_bytes(std::istream& is, std::size_t n) {
  std::vector<std::uint8_t> b(n);
  is.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n));
  if (!is) throw format_error("unexpected end of stream");
  return b;
}

}  // namespace detail

inline void write_quant_section(std::ostream& os, const QuantizedTensor& q) {
  detail::write_le<std::uint64_t>(os, q.numel());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(q.block_size));
  detail::write_le<std::uint8_t>(os, q.double_quantized ? 1 : 0);
  detail::write_bytes(os, q.codes);
  if (!q.double_quantized) {
    for (float a : q.absmax) detail::write_le<float>(os, a);
  } else {
    detail::write_bytes(os, q.absmax_codes);
    for (std::size_t sb = 0; sb < q.sb_min.size(); ++sb) {
      detail::write_le<float>(os, q.sb_min[sb]);
      detail::write_le<float>(os, q.sb_scale[sb]);
    }
  }
}

/// Reads a section written by write_quant_section. The tensor shape is
/// carried by the enclosing container; its extent product must match the
/// stored element count.
inline QuantizedTensor read_quant_section(std::istream& is, Shape shape) {
  QuantizedTensor q;
  const std::uint64_t count = detail::read_le<std::uint64_t>(is);
  if (count != shape_numel(shape)) {
    throw format_error("quantized section element count does not match shape");
  }
  q.shape = std::move(shape);
  q.block_size = detail::read_le<std::uint32_t>(is);
  if (q.block_size < 1) throw format_error("quantized section has zero block size");
  const std::uint8_t flags = detail::read_le<std::uint8_t>(is);
  q.double_quantized = (flags & 1) != 0;
  q.codes = detail::read_bytes(is, (count + 1) / 2);
  const std::size_t nb = q.n_blocks();
  if (!q.double_quantized) {
    q.absmax.resize(nb);
    for (auto& a : q.absmax) a = detail::read_le<float>(is);
  } else {
    q.absmax_codes = detail::read_bytes(is, nb);
    const std::size_t nsb = q.n_superblocks();
    q.sb_min.resize(nsb);
    q.sb_scale.resize(nsb);
    for (std::size_t sb = 0; sb < nsb; ++sb) {
      q.sb_min[sb] = detail::read_le<float>(is);
      q.sb_scale[sb] = detail::read_le<float>(is);
    }
  }
  return q;
}

/// Serialized byte size of a quantized section (header + payload).
inline std::size_t quant_section_bytes(const QuantizedTensor& q) {
  std::size_t bytes = 8 + 4 + 1 + (q.numel() + 1) / 2;
  if (!q.double_quantized) {
    bytes += 4 * q.n_blocks();
  } else {
    bytes += q.n_blocks() + 8 * q.n_superblocks();
  }
  return bytes;
}

}  // namespace lql
