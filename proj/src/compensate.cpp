// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/compensate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "serq/linalg.hpp"

namespace serq {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

EncodedMatrix encode(const Tensor2D& x, const Format& fmt) {
  return std::visit(Overloaded{
                        [&](const FullPrecision&) -> EncodedMatrix {
                          require_finite(x, "encode");
                          return x;
                        },
                        [&](const IntQuantConfig& c) -> EncodedMatrix { return quantize(x, c); },
                        [&](const MxConfig& c) -> EncodedMatrix { return mx_encode(x, c); },
                    },
                    fmt);
}

Tensor2D decode(const EncodedMatrix& m) {
  return std::visit(Overloaded{
                        [](const Tensor2D& t) { return t; },
                        [](const QuantizedTensor& q) { return dequantize(q); },
                        [](const MxBlockTensor& b) { return mx_decode(b); },
                    },
                    m);
}

std::size_t rows_of(const EncodedMatrix& m) noexcept {
  return std::visit(Overloaded{
                        [](const Tensor2D& t) { return t.rows(); },
                        [](const QuantizedTensor& q) { return q.rows; },
                        [](const MxBlockTensor& b) { return b.rows; },
                    },
                    m);
}

std::size_t cols_of(const EncodedMatrix& m) noexcept {
  return std::visit(Overloaded{
                        [](const Tensor2D& t) { return t.cols(); },
                        [](const QuantizedTensor& q) { return q.cols; },
                        [](const MxBlockTensor& b) { return b.cols; },
                    },
                    m);
}

EncodedMatrix slice_columns(const EncodedMatrix& m, std::size_t count) {
  return std::visit(Overloaded{
                        [&](const Tensor2D& t) -> EncodedMatrix { return first_cols(t, count); },
                        [&](const QuantizedTensor& q) -> EncodedMatrix { return slice_columns(q, count); },
                        [&](const MxBlockTensor& b) -> EncodedMatrix { return slice_columns(b, count); },
                    },
                    m);
}

Tensor2D encoded_gemm(const EncodedMatrix& x, const EncodedMatrix& w, IntGemmTrace* trace) {
  if (cols_of(x) != rows_of(w)) {
    throw std::invalid_argument("encoded_gemm: inner dimensions " + std::to_string(cols_of(x)) + " and " +
                                std::to_string(rows_of(w)) + " differ");
  }
  const auto* xq = std::get_if<QuantizedTensor>(&x);
  const auto* wq = std::get_if<QuantizedTensor>(&w);
  if (xq && wq) return int_gemm_reference(*xq, *wq, trace);
  const auto* xm = std::get_if<MxBlockTensor>(&x);
  const auto* wm = std::get_if<MxBlockTensor>(&w);
  if (xm && wm) return mx_gemm_reference(*xm, *wm);
  if (std::holds_alternative<Tensor2D>(x) || std::holds_alternative<Tensor2D>(w)) {
    return matmul(decode(x), decode(w));
  }
  throw std::invalid_argument("encoded_gemm: cannot mix integer and MX operands");
}

IntQuantConfig default_residual_config(std::size_t cols, const IntQuantConfig& wcfg) {
  const std::size_t g = wcfg.group_size == 0 ? cols : std::min(cols, wcfg.group_size);
  IntQuantConfig r{wcfg.bits, true, g, GroupAxis::AlongRow};
  if (cols % g != 0) r.group_size = 0;
  return r;
}

std::string_view to_string(CompensatorMode mode) noexcept {
  switch (mode) {
    case CompensatorMode::None: return "none";
    case CompensatorMode::RtnResidual: return "rtn_residual";
    case CompensatorMode::GptqSwapped: return "gptq_swapped";
    case CompensatorMode::SvdBaseline: return "svd_baseline";
  }
  return "unknown";
}

void Compensator::validate(std::size_t rows, std::size_t cols) const {
  if (rank > rows) throw std::invalid_argument("Compensator: rank exceeds rows");
  switch (mode) {
    case CompensatorMode::None:
      if (rank != 0 || r || !l1.empty() || !l2.empty()) throw std::invalid_argument("Compensator: empty mode with payload");
      return;
    case CompensatorMode::RtnResidual:
    case CompensatorMode::GptqSwapped:
      if (salient_idx.size() != rank) throw std::invalid_argument("Compensator: salient set size differs from rank");
      if (rank == 0) return;
      if (!r || rows_of(*r) != rank || cols_of(*r) != cols) {
        throw std::invalid_argument("Compensator: R must be rank × cols");
      }
      if (!l1.empty() || !l2.empty()) throw std::invalid_argument("Compensator: SERQ modes carry one matrix");
      return;
    case CompensatorMode::SvdBaseline:
      if (r) throw std::invalid_argument("Compensator: SVD mode carries two factors");
      if (rank == 0) return;
      if (l1.rows() != rows || l1.cols() != rank || l2.rows() != rank || l2.cols() != cols) {
        throw std::invalid_argument("Compensator: SVD factor shapes do not match rank");
      }
      return;
  }
}

namespace {

void check_plan(const Tensor2D& w, const SaliencyPlan& plan) {
  plan.validate();
  if (plan.rows() != w.rows()) {
    throw std::invalid_argument("plan covers " + std::to_string(plan.rows()) + " rows, weight has " +
                                std::to_string(w.rows()));
  }
}

}  // namespace

CompensatedWeight build_serq_rtn(const Tensor2D& w_folded, const SaliencyPlan& plan, const Format& wfmt,
                                 const Format& rfmt) {
  check_plan(w_folded, plan);
  const Tensor2D w_hat = select_rows(w_folded, plan.permutation);
  CompensatedWeight cw{encode(w_hat, wfmt), {}};
  cw.comp.mode = CompensatorMode::RtnResidual;
  cw.comp.rank = plan.rank;
  cw.comp.salient_idx = plan.salient_idx;
  if (plan.rank > 0) {
    const Tensor2D residual = first_rows(w_hat, plan.rank) - first_rows(decode(cw.main), plan.rank);
    cw.comp.r = encode(residual, rfmt);
  }
  return cw;
}

CompensatedWeight build_serq_gptq_swapped(const Tensor2D& w_folded, const SaliencyPlan& plan,
                                          const GptqConfig& wcfg, const Format& rfmt, const HessianState& hessian) {
  check_plan(w_folded, plan);
  Tensor2D w_hat = select_rows(w_folded, plan.permutation);
  Compensator comp;
  comp.mode = CompensatorMode::GptqSwapped;
  comp.rank = plan.rank;
  comp.salient_idx = plan.salient_idx;
  if (plan.rank > 0) {
    comp.r = encode(first_rows(w_hat, plan.rank), rfmt);
    const Tensor2D rq = decode(*comp.r);
    for (std::size_t i = 0; i < plan.rank; ++i)
      for (std::size_t j = 0; j < w_hat.cols(); ++j) w_hat(i, j) -= rq(i, j);
  }
  CompensatedWeight cw{gptq_quantize(w_hat, permute_hessian(hessian, plan.permutation), wcfg), std::move(comp)};
  return cw;
}

CompensatedWeight build_svd_baseline(const Tensor2D& w, const Format& wfmt, std::size_t rank,
                                     const Format& factor_fmt) {
  if (rank > std::min(w.rows(), w.cols())) {
    throw std::invalid_argument("build_svd_baseline: rank " + std::to_string(rank) + " exceeds min dimension");
  }
  CompensatedWeight cw{encode(w, wfmt), {}};
  cw.comp.mode = CompensatorMode::SvdBaseline;
  cw.comp.rank = rank;
  if (rank == 0) return cw;
  const Tensor2D err = w - decode(cw.main);
  const SvdResult svd = jacobi_svd(err);
  Tensor2D l1(w.rows(), rank);
  Tensor2D l2(rank, w.cols());
  for (std::size_t k = 0; k < rank; ++k) {
    const double root = std::sqrt(svd.sigma[k]);
    for (std::size_t i = 0; i < w.rows(); ++i) l1(i, k) = svd.u(i, k) * root;
    for (std::size_t j = 0; j < w.cols(); ++j) l2(k, j) = root * svd.v(j, k);
  }
  cw.comp.l1 = decode(encode(l1, factor_fmt));
  cw.comp.l2 = decode(encode(l2, factor_fmt));
  return cw;
}

CompensatedWeight build_plain(const Tensor2D& w, const Format& wfmt) { return CompensatedWeight{encode(w, wfmt), {}}; }

CompensatedWeight build_plain_gptq(const Tensor2D& w, const GptqConfig& cfg, const HessianState& hessian) {
  return CompensatedWeight{gptq_quantize(w, hessian, cfg), {}};
}

Tensor2D forward_reconstructed(const Tensor2D& x, const CompensatedWeight& cw, const ActivationConfig& act,
                               ForwardTrace* trace) {
  if (x.cols() != rows_of(cw.main)) {
    throw std::invalid_argument("forward_reconstructed: input width " + std::to_string(x.cols()) +
                                " vs weight rows " + std::to_string(rows_of(cw.main)));
  }
  cw.comp.validate(rows_of(cw.main), cols_of(cw.main));
  const EncodedMatrix xe = encode(x, act.main);
  if (trace) {
    *trace = ForwardTrace{};
    if (const auto* q = std::get_if<QuantizedTensor>(&xe)) trace->x_main = *q;
  }
  Tensor2D y = encoded_gemm(xe, cw.main, trace ? &trace->main : nullptr);
  if (cw.comp.empty()) return y;

  const std::size_t r = cw.comp.rank;
  switch (cw.comp.mode) {
    case CompensatorMode::RtnResidual:
    case CompensatorMode::GptqSwapped: {
      const EncodedMatrix xs = act.residual ? encode(first_cols(x, r), *act.residual) : slice_columns(xe, r);
      if (trace) {
        if (const auto* q = std::get_if<QuantizedTensor>(&xs)) trace->x_residual = *q;
        trace->aux_products = 1;
      }
      y = y + encoded_gemm(xs, *cw.comp.r, trace ? &trace->residual : nullptr);
      break;
    }
    case CompensatorMode::SvdBaseline: {
      const Tensor2D t = matmul(decode(xe), cw.comp.l1);
      y = y + matmul(t, cw.comp.l2);
      if (trace) trace->aux_products = 2;
      break;
    }
    case CompensatorMode::None: break;
  }
  return y;
}

Tensor2D effective_weight(const CompensatedWeight& cw) {
  Tensor2D w = decode(cw.main);
  if (cw.comp.empty()) return w;
  if (cw.comp.mode == CompensatorMode::SvdBaseline) return w + matmul(cw.comp.l1, cw.comp.l2);
  const Tensor2D rq = decode(*cw.comp.r);
  for (std::size_t i = 0; i < rq.rows(); ++i)
    for (std::size_t j = 0; j < rq.cols(); ++j) w(i, j) += rq(i, j);
  return w;
}

std::vector<RestrictedSvdPoint> restricted_svd_experiment(const Tensor2D& w, const CalibStats& act,
                                                          const Format& wfmt, std::size_t rank,
                                                          std::span<const std::size_t> row_counts) {
  if (act.channels() != w.rows()) throw std::invalid_argument("restricted_svd_experiment: channel mismatch");
  for (std::size_t m : row_counts) {
    if (m < rank || m > w.rows()) {
      throw std::invalid_argument("restricted_svd_experiment: row count " + std::to_string(m) +
                                  " outside [rank, rows]");
    }
  }
  const Tensor2D err = w - decode(encode(w, wfmt));
  std::vector<std::size_t> order(w.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return act.max_abs[a] > act.max_abs[b]; });

  std::vector<RestrictedSvdPoint> curve;
  for (std::size_t m : row_counts) {
    const std::span<const std::size_t> rows(order.data(), m);
    Tensor2D residual = err;
    const Tensor2D sub = select_rows(err, rows);
    const std::size_t k = std::min({rank, sub.rows(), sub.cols()});
    if (k > 0) {
      const Tensor2D approx = low_rank_reconstruct(jacobi_svd(sub), k);
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t j = 0; j < w.cols(); ++j) residual(rows[a], j) -= approx(a, j);
    }
    double e = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double rn = 0.0;
      for (double v : residual.row(i)) rn += v * v;
      e += act.max_abs[i] * act.max_abs[i] * rn;
    }
    curve.push_back({m, e});
  }
  return curve;
}

}  // namespace serq
