// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/mxfmt.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "serq/binio.hpp"

namespace serq {

E2M1Code e2m1_nearest(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("e2m1_nearest: non-finite input");
  const double a = std::min(std::abs(v), kE2M1Magnitudes.back());
  std::uint8_t best = 0;
  double best_err = a;
  for (std::uint8_t c = 1; c < kE2M1Magnitudes.size(); ++c) {
    const double err = std::abs(a - kE2M1Magnitudes[c]);
    if (err < best_err || (err == best_err && (c & 1) == 0 && (best & 1) != 0)) {
      best = c;
      best_err = err;
    }
  }
  if (best == 0) return {0, 0.0};
  const bool neg = v < 0.0;
  return {static_cast<std::uint8_t>(best | (neg ? kE2M1SignBit : 0)),
          neg ? -kE2M1Magnitudes[best] : kE2M1Magnitudes[best]};
}

double e2m1_value(std::uint8_t code) noexcept {
  const double m = kE2M1Magnitudes[code & 0x7];
  return (code & kE2M1SignBit) && m != 0.0 ? -m : m;
}

int mx_block_exponent(double block_max) noexcept {
  if (!(block_max > 0.0)) return 0;
  int exp = 0;
  std::frexp(block_max, &exp);  // block_max = f · 2^exp, f ∈ [0.5, 1)
  return std::clamp(exp - 1 - 2, kMxExponentMin, kMxExponentMax);
}

std::size_t MxBlockTensor::blocks_along() const noexcept {
  const std::size_t dim = config.axis == GroupAxis::AlongRow ? cols : rows;
  return (dim + config.block_size - 1) / config.block_size;
}

std::size_t MxBlockTensor::n_blocks() const noexcept {
  return blocks_along() * (config.axis == GroupAxis::AlongRow ? rows : cols);
}

std::size_t MxBlockTensor::block_index(std::size_t r, std::size_t c) const noexcept {
  const std::size_t b = config.block_size;
  return config.axis == GroupAxis::AlongRow ? r * blocks_along() + c / b : (r / b) * cols + c;
}

void MxBlockTensor::validate() const {
  if (config.block_size == 0) throw std::invalid_argument("MxBlockTensor: block size must be positive");
  if (codes.size() != rows * cols) throw std::invalid_argument("MxBlockTensor: code count mismatch");
  if (exponents.size() != n_blocks()) throw std::invalid_argument("MxBlockTensor: exponent count mismatch");
  for (auto c : codes)
    if (c > 0xF) throw std::invalid_argument("MxBlockTensor: element code exceeds 4 bits");
  for (auto e : exponents)
    if (e < kMxExponentMin) throw std::invalid_argument("MxBlockTensor: exponent below -127");
}

MxBlockTensor mx_encode(const Tensor2D& x, const MxConfig& cfg) {
  if (cfg.block_size == 0) throw std::invalid_argument("mx_encode: block size must be positive");
  const std::size_t dim = cfg.axis == GroupAxis::AlongRow ? x.cols() : x.rows();
  if (dim % cfg.block_size != 0) {
    throw std::invalid_argument("mx_encode: blocked dimension " + std::to_string(dim) +
                                " is not a multiple of block size " + std::to_string(cfg.block_size));
  }
  require_finite(x, "mx_encode");
  MxBlockTensor t;
  t.rows = x.rows();
  t.cols = x.cols();
  t.config = cfg;
  t.codes.assign(x.size(), 0);
  std::vector<double> bmax(t.n_blocks(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      auto& m = bmax[t.block_index(i, j)];
      m = std::max(m, std::abs(x(i, j)));
    }
  t.exponents.resize(bmax.size());
  for (std::size_t b = 0; b < bmax.size(); ++b) t.exponents[b] = static_cast<std::int8_t>(mx_block_exponent(bmax[b]));
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const int e = t.exponents[t.block_index(i, j)];
      t.codes[i * x.cols() + j] = e2m1_nearest(std::ldexp(x(i, j), -e)).code;
    }
  return t;
}

Tensor2D mx_decode(const MxBlockTensor& t) {
  Tensor2D out(t.rows, t.cols);
  for (std::size_t i = 0; i < t.rows; ++i)
    for (std::size_t j = 0; j < t.cols; ++j) {
      out(i, j) = std::ldexp(e2m1_value(t.codes[i * t.cols + j]), t.exponents[t.block_index(i, j)]);
    }
  return out;
}

MxBlockTensor slice_columns(const MxBlockTensor& t, std::size_t count) {
  if (count > t.cols) throw std::out_of_range("slice_columns: count exceeds columns");
  MxBlockTensor out;
  out.rows = t.rows;
  out.cols = count;
  out.config = t.config;
  out.exponents.resize(out.n_blocks());
  out.codes.resize(t.rows * count);
  for (std::size_t i = 0; i < t.rows; ++i)
    for (std::size_t j = 0; j < count; ++j) {
      out.codes[i * count + j] = t.codes[i * t.cols + j];
      out.exponents[out.block_index(i, j)] = t.exponents[t.block_index(i, j)];
    }
  return out;
}

// Packed layout: magic, u32 rows, u32 cols, u32 block_size, u8 axis, then per
// block (in block_index order) a biased u8 exponent and ceil(block/2) bytes of
// nibbles, low nibble first. Elements of a block are taken along its axis.
void write_mx(std::ostream& os, const MxBlockTensor& t) {
  t.validate();
  binio::write_magic(os, kMxMagic);
  binio::write_le(os, static_cast<std::uint32_t>(t.rows));
  binio::write_le(os, static_cast<std::uint32_t>(t.cols));
  binio::write_le(os, static_cast<std::uint32_t>(t.config.block_size));
  binio::write_le(os, static_cast<std::uint8_t>(t.config.axis));
  const std::size_t bs = t.config.block_size;
  const bool along_row = t.config.axis == GroupAxis::AlongRow;
  const std::size_t outer = along_row ? t.rows : t.cols;
  const std::size_t dim = along_row ? t.cols : t.rows;
  std::vector<std::uint8_t> packed((bs + 1) / 2);
  // Blocks are emitted in block_index order, which is (outer, block) for
  // AlongRow and (block, outer) for AlongColumn.
  auto emit = [&](std::size_t o, std::size_t b) {
    std::fill(packed.begin(), packed.end(), 0);
    for (std::size_t e = 0; e < bs && b * bs + e < dim; ++e) {
      const std::size_t k = b * bs + e;
      const std::uint8_t c = along_row ? t.codes[o * t.cols + k] : t.codes[k * t.cols + o];
      packed[e / 2] |= static_cast<std::uint8_t>(e % 2 == 0 ? c : c << 4);
    }
    const std::size_t bi = along_row ? t.block_index(o, b * bs) : t.block_index(b * bs, o);
    binio::write_le(os, static_cast<std::uint8_t>(t.exponents[bi] + 127));
    os.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  };
  const std::size_t nb = t.blocks_along();
  if (along_row) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t b = 0; b < nb; ++b) emit(o, b);
  } else {
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < outer; ++o) emit(o, b);
  }
}

MxBlockTensor read_mx(std::istream& is) {
  binio::expect_magic(is, kMxMagic);
  MxBlockTensor t;
  t.rows = binio::read_le<std::uint32_t>(is, "mx header");
  t.cols = binio::read_le<std::uint32_t>(is, "mx header");
  t.config.block_size = binio::read_le<std::uint32_t>(is, "mx header");
  const auto axis = binio::read_le<std::uint8_t>(is, "mx header");
  if (axis > 1) throw FormatError("mx header: unknown block axis");
  if (t.config.block_size == 0) throw FormatError("mx header: zero block size");
  t.config.axis = static_cast<GroupAxis>(axis);
  const std::size_t bs = t.config.block_size;
  const bool along_row = t.config.axis == GroupAxis::AlongRow;
  const std::size_t outer = along_row ? t.rows : t.cols;
  const std::size_t dim = along_row ? t.cols : t.rows;
  t.codes.assign(t.rows * t.cols, 0);
  t.exponents.assign(t.n_blocks(), 0);
  std::vector<std::uint8_t> packed((bs + 1) / 2);
  auto take = [&](std::size_t o, std::size_t b) {
    const auto biased = binio::read_le<std::uint8_t>(is, "mx block");
    if (biased == 255) throw FormatError("mx block: exponent out of range");
    if (!is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()))) {
      throw FormatError("mx block: unexpected end of data");
    }
    const std::size_t bi = along_row ? t.block_index(o, b * bs) : t.block_index(b * bs, o);
    t.exponents[bi] = static_cast<std::int8_t>(static_cast<int>(biased) - 127);
    for (std::size_t e = 0; e < bs && b * bs + e < dim; ++e) {
      const std::size_t k = b * bs + e;
      const std::uint8_t c = e % 2 == 0 ? packed[e / 2] & 0xF : packed[e / 2] >> 4;
      (along_row ? t.codes[o * t.cols + k] : t.codes[k * t.cols + o]) = c;
    }
  };
  const std::size_t nb = t.blocks_along();
  if (along_row) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t b = 0; b < nb; ++b) take(o, b);
  } else {
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < outer; ++o) take(o, b);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Reference GEMMs

namespace {

// Number of consecutive inner-dimension indices sharing one scale.
std::size_t inner_extent_x(GroupAxis axis, std::size_t extent) { return axis == GroupAxis::AlongRow ? extent : 1; }
std::size_t inner_extent_w(GroupAxis axis, std::size_t extent) { return axis == GroupAxis::AlongColumn ? extent : 1; }

std::vector<std::size_t> inner_segments(std::size_t k, std::size_t ex, std::size_t ew) {
  if (ex > 1 && ew > 1 && ex % ew != 0 && ew % ex != 0) {
    throw GemmAlignmentError("group misalignment: inner groups of " + std::to_string(ex) + " and " +
                             std::to_string(ew) + " do not nest");
  }
  const std::size_t step = std::min(ex, ew);
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < k; s += step) starts.push_back(s);
  starts.push_back(k);
  return starts;
}

}  // namespace

Tensor2D int_gemm_reference(const QuantizedTensor& xq, const QuantizedTensor& wq, IntGemmTrace* trace) {
  if (xq.cols != wq.rows) {
    throw GemmAlignmentError("int_gemm_reference: inner dimensions " + std::to_string(xq.cols) + " and " +
                             std::to_string(wq.rows) + " differ");
  }
  if (!wq.config.symmetric) throw std::invalid_argument("int_gemm_reference: weight operand must be symmetric");
  const std::size_t m = xq.rows;
  const std::size_t k = xq.cols;
  const std::size_t n = wq.cols;
  const auto starts = inner_segments(k, inner_extent_x(xq.config.axis, xq.group_extent()),
                                     inner_extent_w(wq.config.axis, wq.group_extent()));
  const std::size_t ns = starts.size() - 1;

  std::vector<std::int64_t> sum_w(ns * n, 0);
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t kk = starts[s]; kk < starts[s + 1]; ++kk)
      for (std::size_t j = 0; j < n; ++j) sum_w[s * n + j] += wq.codes[kk * n + j];

  std::vector<double> sw(ns * n);
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t j = 0; j < n; ++j) sw[s * n + j] = wq.scales[wq.group_index(starts[s], j)];

  if (trace) {
    trace->segment_starts = starts;
    trace->sum_w = sum_w;
    trace->sum_xw.assign(m * ns * n, 0);
  }

  // 32-bit accumulators suffice when the worst-case segment sum fits.
  std::size_t longest = 0;
  for (std::size_t s = 0; s < ns; ++s) longest = std::max(longest, starts[s + 1] - starts[s]);
  const double bound = std::ldexp(1.0, xq.config.bits) * std::ldexp(1.0, wq.config.bits - 1) * static_cast<double>(longest);
  const bool narrow = bound < std::ldexp(1.0, 31);

  Tensor2D out(m, n);
  std::vector<std::int64_t> acc(n);
  std::vector<std::int32_t> acc32(narrow ? n : 0);
  for (std::size_t i = 0; i < m; ++i) {
    auto orow = out.row(i);
    for (std::size_t s = 0; s < ns; ++s) {
      if (narrow) {
        std::fill(acc32.begin(), acc32.end(), 0);
        for (std::size_t kk = starts[s]; kk < starts[s + 1]; ++kk) {
          const std::int32_t xv = xq.codes[i * k + kk];
          const std::int32_t* wrow = wq.codes.data() + kk * n;
          for (std::size_t j = 0; j < n; ++j) acc32[j] += xv * wrow[j];
        }
        std::copy(acc32.begin(), acc32.end(), acc.begin());
      } else {
        std::fill(acc.begin(), acc.end(), 0);
        for (std::size_t kk = starts[s]; kk < starts[s + 1]; ++kk) {
          const std::int64_t xv = xq.codes[i * k + kk];
          const std::int32_t* wrow = wq.codes.data() + kk * n;
          for (std::size_t j = 0; j < n; ++j) acc[j] += xv * wrow[j];
        }
      }
      const std::size_t gx = xq.group_index(i, starts[s]);
      const double sx = xq.scales[gx];
      const std::int64_t zp = xq.zero_point(gx);
      for (std::size_t j = 0; j < n; ++j) {
        const std::int64_t corrected = acc[j] - zp * sum_w[s * n + j];
        orow[j] += sx * sw[s * n + j] * static_cast<double>(corrected);
      }
      if (trace) std::copy(acc.begin(), acc.end(), trace->sum_xw.begin() + static_cast<std::ptrdiff_t>((i * ns + s) * n));
    }
  }
  return out;
}

Tensor2D mx_gemm_reference(const MxBlockTensor& x, const MxBlockTensor& w) {
  if (x.cols != w.rows) {
    throw GemmAlignmentError("mx_gemm_reference: inner dimensions " + std::to_string(x.cols) + " and " +
                             std::to_string(w.rows) + " differ");
  }
  const std::size_t m = x.rows;
  const std::size_t k = x.cols;
  const std::size_t n = w.cols;
  const std::size_t ex = inner_extent_x(x.config.axis, x.config.block_size);
  const std::size_t ew = inner_extent_w(w.config.axis, w.config.block_size);
  if (ex > 1 && ew > 1 && ex != ew) {
    throw GemmAlignmentError("block misalignment: inner blocks of " + std::to_string(ex) + " and " +
                             std::to_string(ew));
  }
  const auto starts = inner_segments(k, ex, ew);
  const std::size_t ns = starts.size() - 1;

  std::vector<double> wv(k * n);
  for (std::size_t i = 0; i < k * n; ++i) wv[i] = e2m1_value(w.codes[i]);

  Tensor2D out(m, n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    auto orow = out.row(i);
    for (std::size_t s = 0; s < ns; ++s) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t kk = starts[s]; kk < starts[s + 1]; ++kk) {
        const double xv = e2m1_value(x.codes[i * k + kk]);
        const double* wrow = wv.data() + kk * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += xv * wrow[j];
      }
      const int ex_i = x.exponents[x.block_index(i, starts[s])];
      for (std::size_t j = 0; j < n; ++j) {
        orow[j] += std::ldexp(acc[j], ex_i + w.exponents[w.block_index(starts[s], j)]);
      }
    }
  }
  return out;
}

}  // namespace serq
