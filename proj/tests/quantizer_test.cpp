#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "lql/nf4.hpp"

using lql::build_nf4_codebook;
using lql::Nf4Codebook;
using lql::QuantizedTensor;
using lql::quantize_tensor;
using lql::Rng;
using lql::storage_report;

namespace {

// ---------------------------------------------------------------------------
// Independent quantile oracle: inverse normal CDF evaluated by bisection on
// the error function. Deliberately shares nothing with the library's
// rational-approximation route.
// ---------------------------------------------------------------------------

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

double quantile_by_bisection(double p) {
  double lo = -12.0, hi = 12.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (normal_cdf(mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// The same construction, computed entirely through the bisection oracle.
std::vector<double> oracle_codebook() {
  const double p0 = lql::kNf4QuantileOffset;
  std::vector<double> v;
  std::vector<double> neg(8), pos(7);
  for (int j = 0; j < 8; ++j) neg[j] = quantile_by_bisection(p0 + (0.5 - p0) * j / 8.0);
  for (int j = 0; j < 7; ++j) {
    pos[j] = quantile_by_bisection((1.0 - p0) - (0.5 - p0) * (6 - j) / 7.0);
  }
  for (int j = 0; j < 8; ++j) v.push_back(neg[j] / -neg[0]);
  v.push_back(0.0);
  for (int j = 0; j < 7; ++j) v.push_back(pos[j] / pos[6]);
  return v;
}

// Brute-force nearest-level assignment over all 16 levels, ties to the
// lower index. Oracle for quantize_tensor's code path.
std::uint8_t brute_force_code(double v, const Nf4Codebook& cb) {
  std::uint8_t best = 0;
  double best_d = std::fabs(v - double(cb.values[0]));
  for (std::uint8_t j = 1; j < 16; ++j) {
    const double d = std::fabs(v - double(cb.values[j]));
    if (d < best_d) {
      best = j;
      best_d = d;
    }
  }
  return best;
}

std::vector<float> random_values(std::size_t n, Rng& rng, double scl = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.normal() * scl);
  return v;
}

std::vector<float> dequant_to_floats(const QuantizedTensor& q) {
  auto t = lql::dequantize_tensor<float>(q);
  return {t.values().begin(), t.values().end()};
}

}  // namespace

TEST(Nf4Codebook, SixteenStrictlyIncreasingLevels) {
  const Nf4Codebook cb = build_nf4_codebook();
  ASSERT_EQ(cb.values.size(), 16u);
  for (int i = 0; i + 1 < 16; ++i) EXPECT_LT(cb.values[i], cb.values[i + 1]);
}

TEST(Nf4Codebook, ContainsExactEndpointsAndZero) {
  const Nf4Codebook cb = build_nf4_codebook();
  EXPECT_EQ(cb.values[0], -1.0f);
  EXPECT_EQ(cb.values[8], 0.0f);
  EXPECT_EQ(cb.values[15], 1.0f);
}

TEST(Nf4Codebook, MatchesBisectionQuantileOracle) {
  const Nf4Codebook cb = build_nf4_codebook();
  const std::vector<double> expect = oracle_codebook();
  ASSERT_EQ(expect.size(), 16u);
  for (int i = 0; i < 16; ++i) {
    EXPECT_NEAR(cb.values[i], expect[i], 1e-4) << "level " << i;
  }
}

TEST(Quantize, CodebookAlignedBlockRoundTripsExactly) {
  std::vector<float> data(64, 0.5f);
  auto q = quantize_tensor({64}, data, 64, false);
  EXPECT_EQ(q.absmax[0], 0.5f);
  auto codes = lql::unpack_nibbles(q.codes, 64);
  for (auto c : codes) EXPECT_EQ(c, 15);  // the +1.0 level
  auto back = dequant_to_floats(q);
  for (auto v : back) EXPECT_EQ(v, 0.5f);
}

TEST(Quantize, AllZeroBlockDequantizesToExactZero) {
  std::vector<float> data(64, 0.0f);
  auto q = quantize_tensor({64}, data, 64, false);
  EXPECT_EQ(q.absmax[0], 0.0f);
  for (auto v : dequant_to_floats(q)) EXPECT_EQ(v, 0.0f);
}

TEST(Quantize, NonFiniteInputThrows) {
  std::vector<float> data = {1.0f, std::numeric_limits<float>::quiet_NaN()};
  EXPECT_THROW(quantize_tensor({2}, data, 64, false), lql::numeric_error);
}

TEST(Quantize, MatchesBruteForceOracleOn10kNormals) {
  Rng rng(31);
  const Nf4Codebook& cb = lql::nf4_codebook();
  const float half_gap = cb.widest_gap() / 2.0f;
  auto data = random_values(10000, rng);
  auto q = quantize_tensor({10000}, data, 64, false);
  auto codes = lql::unpack_nibbles(q.codes, 10000);
  auto back = dequant_to_floats(q);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t b = i / 64;
    const float am = q.absmax[b];
    ASSERT_GT(am, 0.0f);
    EXPECT_EQ(codes[i], brute_force_code(double(data[i]) / double(am), cb));
    // Reconstruction equals the oracle's codebook[code] * absmax bit-exactly.
    EXPECT_EQ(back[i], cb.values[codes[i]] * am);
    EXPECT_LE(std::fabs(back[i] - data[i]), double(am) * half_gap * (1 + 1e-6));
  }
}

TEST(Quantize, ScaleEquivariantPerBlock) {
  Rng rng(37);
  auto data = random_values(256, rng);
  std::vector<float> scaled(data);
  for (auto& v : scaled) v *= 4.0f;  // power of two: exact float scaling
  auto q1 = quantize_tensor({256}, data, 64, false);
  auto q2 = quantize_tensor({256}, scaled, 64, false);
  EXPECT_EQ(q1.codes, q2.codes);
  auto b1 = dequant_to_floats(q1);
  auto b2 = dequant_to_floats(q2);
  for (std::size_t i = 0; i < b1.size(); ++i) EXPECT_EQ(b2[i], b1[i] * 4.0f);
}

TEST(Quantize, PartialFinalBlock) {
  Rng rng(41);
  auto data = random_values(100, rng);
  auto q = quantize_tensor({100}, data, 64, false);
  EXPECT_EQ(q.n_blocks(), 2u);
  EXPECT_EQ(q.codes.size(), 50u);
  auto back = dequant_to_floats(q);
  EXPECT_EQ(back.size(), 100u);
}

TEST(DoubleQuantize, NeverChangesCodes) {
  Rng rng(43);
  auto data = random_values(64 * 300, rng);
  auto plain = quantize_tensor({64 * 300}, data, 64, false);
  auto dq = quantize_tensor({64 * 300}, data, 64, true);
  EXPECT_EQ(plain.codes, dq.codes);
}

TEST(DoubleQuantize, ConstantAbsmaxReconstructsExactly) {
  // Every block sees the same absmax, so the affine superblock code is
  // degenerate (scale 0) and reconstruction is exact.
  std::vector<float> data(64 * 8);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = (i % 64 == 0) ? 0.75f : 0.1f;
  }
  auto dq = quantize_tensor({64 * 8}, data, 64, true);
  ASSERT_TRUE(dq.double_quantized);
  EXPECT_EQ(dq.sb_scale[0], 0.0f);
  for (std::size_t b = 0; b < dq.n_blocks(); ++b) {
    EXPECT_EQ(dq.block_absmax(b), 0.75f);
  }
}

TEST(DoubleQuantize, AbsmaxErrorBounded) {
  Rng rng(47);
  auto data = random_values(64 * 600, rng);
  auto plain = quantize_tensor({64 * 600}, data, 64, false);
  auto dq = quantize_tensor({64 * 600}, data, 64, true);
  for (std::size_t sb = 0; sb < dq.n_superblocks(); ++sb) {
    for (std::size_t b = sb * 256; b < std::min(dq.n_blocks(), (sb + 1) * 256); ++b) {
      // Reconstructed absmax within half an affine step of the exact value.
      EXPECT_LE(std::fabs(dq.block_absmax(b) - plain.absmax[b]),
                dq.sb_scale[sb] * 0.5f + 1e-7f);
    }
  }
}

TEST(Packing, RoundTripIsBitExact) {
  Rng rng(53);
  std::vector<std::uint8_t> codes(1001);
  for (auto& c : codes) c = std::uint8_t(rng.below(16));
  auto bytes = lql::pack_nibbles(codes);
  EXPECT_EQ(bytes.size(), 501u);
  auto codes2 = lql::unpack_nibbles(bytes, codes.size());
  EXPECT_EQ(codes, codes2);
  auto bytes2 = lql::pack_nibbles(codes2);
  EXPECT_EQ(bytes, bytes2);
}

TEST(Packing, LowNibbleIsEarlierElement) {
  std::vector<std::uint8_t> codes = {0x3, 0xA};
  auto bytes = lql::pack_nibbles(codes);
  ASSERT_EQ(bytes.size(), 1u);
  EXPECT_EQ(bytes[0], 0xA3);
}

TEST(Storage, PlainBlock64Is4Point5BitsPerParam) {
  std::vector<float> data(64 * 16, 0.25f);
  auto q = quantize_tensor({64 * 16}, data, 64, false);
  auto r = storage_report(q);
  EXPECT_DOUBLE_EQ(r.bits_per_parameter, 4.5);
  EXPECT_EQ(r.total_bits, r.code_bits + r.absmax_bits + r.superblock_bits);
}

TEST(Storage, DoubleQuantSavesAboutPointThreeSeven) {
  // 64 * 256 * 4 elements: several full superblocks.
  const std::size_t n = 64 * 256 * 4;
  std::vector<float> data(n, 0.25f);
  auto plain = quantize_tensor({n}, data, 64, false);
  auto dq = quantize_tensor({n}, data, 64, true);
  auto rp = storage_report(plain);
  auto rd = storage_report(dq);
  EXPECT_DOUBLE_EQ(rp.bits_per_parameter, 4.5);
  EXPECT_NEAR(rd.bits_per_parameter, 4.1289, 1e-3);
  EXPECT_NEAR(rp.bits_per_parameter - rd.bits_per_parameter, 0.371, 0.01);
}

TEST(Storage, SingleElementBoundary) {
  std::vector<float> data = {0.7f};
  auto q = quantize_tensor({1}, data, 64, false);
  auto r = storage_report(q);
  EXPECT_EQ(r.total_bits, 36u);  // 4 code bits + one 32-bit absmax
  EXPECT_DOUBLE_EQ(r.bits_per_parameter, 36.0);
}

TEST(SectionIo, RoundTripsBothLayouts) {
  Rng rng(59);
  for (bool dq : {false, true}) {
    auto data = random_values(64 * 300 + 17, rng);
    auto q = quantize_tensor({data.size()}, data, 64, dq);
    std::ostringstream os(std::ios::binary);
    lql::write_quant_section(os, q);
    const std::string payload = os.str();
    EXPECT_EQ(payload.size(), lql::quant_section_bytes(q));
    std::istringstream is(payload, std::ios::binary);
    auto q2 = lql::read_quant_section(is, q.shape);
    EXPECT_EQ(q2.codes, q.codes);
    EXPECT_EQ(q2.block_size, q.block_size);
    EXPECT_EQ(q2.double_quantized, q.double_quantized);
    EXPECT_EQ(dequant_to_floats(q2), dequant_to_floats(q));
    // Bit-exact re-serialization.
    std::ostringstream os2(std::ios::binary);
    lql::write_quant_section(os2, q2);
    EXPECT_EQ(os2.str(), payload);
  }
}

TEST(SectionIo, TruncatedStreamThrows) {
  std::vector<float> data(8, 0.5f);
  auto q = quantize_tensor({8}, data, 4, false);
  std::ostringstream os(std::ios::binary);
  lql::write_quant_section(os, q);
  std::string payload = os.str();
  payload.resize(payload.size() - 3);
  std::istringstream is(payload, std::ios::binary);
  EXPECT_THROW(lql::read_quant_section(is, q.shape), lql::format_error);
}

TEST(SectionIo, ElementCountMismatchThrows) {
  std::vector<float> data(8, 0.5f);
  auto q = quantize_tensor({8}, data, 4, false);
  std::ostringstream os(std::ios::binary);
  lql::write_quant_section(os, q);
  std::istringstream is(os.str(), std::ios::binary);
  EXPECT_THROW(lql::read_quant_section(is, lql::Shape{4}), lql::format_error);
}

// Round-trip bound |dequant(quant(x)) - x| <= absmax * widest_gap / 2,
// swept across block sizes and both absmax layouts.
TEST(Quantize, RoundTripBoundProperty) {
  const float half_gap = lql::nf4_codebook().widest_gap() / 2.0f;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t block = 1 + rng.below(128);
    const std::size_t n = 1 + rng.below(2000);
    const bool dq = seed % 2 == 0;
    auto data = random_values(n, rng, 0.1 + rng.uniform() * 10.0);
    auto q = quantize_tensor({n}, data, block, dq);
    auto back = dequant_to_floats(q);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t b = i / block;
      // DQ reconstruction may shift absmax by up to half an affine step.
      const float am_used = q.block_absmax(b);
      const float slack = dq ? (q.sb_scale[b / 256] * 0.5f + 1e-6f) : 0.0f;
      EXPECT_LE(std::fabs(back[i] - data[i]),
                am_used * half_gap + slack + 1e-6f)
          << "seed " << seed << " i " << i;
    }
  }
}
