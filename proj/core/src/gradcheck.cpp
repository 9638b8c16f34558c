#include <algorithm>
#include <cmath>

#include "pdit/error.hpp"
#include "pdit/tensor.hpp"

namespace pdit {
namespace {

thread_local BranchTrace* active_trace = nullptr;

struct Evaluation {
  double value = 0.0;
  std::uint64_t branches = 0;
};

Evaluation evaluate(const TapeProgram& f, const std::vector<Tensor>& params) {
  const BranchTrace trace;
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.leaf(p, false));
  const Var out = f(tape, vars);
  if (out.value().size() != 1) throw InvalidArgument("grad_check: program must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: program produced a non-finite value");
  return {v, trace.signature()};
}

}  // namespace

BranchTrace::BranchTrace() {
  if (active_trace != nullptr) throw InvalidArgument("BranchTrace: traces do not nest");
  active_trace = this;
}

BranchTrace::~BranchTrace() { active_trace = nullptr; }

void BranchTrace::note(bool branch) noexcept {
  if (active_trace == nullptr) return;
  active_trace->signature_ = (active_trace->signature_ ^ (branch ? 0x9eu : 0x3cu)) * 0x100000001b3ULL;
}

GradCheckReport grad_check(const TapeProgram& f, std::span<const Tensor> params, float h) {
  for (const Tensor& p : params)
    if (!p.all_finite()) throw NumericError("grad_check: non-finite parameter");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.leaf(p, true));
    const Var loss = f(tape, vars);
    backward(loss);
    for (const Var& v : vars) analytic.push_back(tape.grad_of(v));
  }

  GradCheckReport report;
  std::vector<Tensor> work(params.begin(), params.end());
  const Evaluation base = evaluate(f, work);
  for (std::size_t pi = 0; pi < work.size(); ++pi) {
    for (std::size_t j = 0; j < work[pi].size(); ++j) {
      const float x0 = work[pi][j];
      const float xp = x0 + h;
      const float xm = x0 - h;
      work[pi][j] = xp;
      const Evaluation ep = evaluate(f, work);
      work[pi][j] = xm;
      const Evaluation em = evaluate(f, work);
      work[pi][j] = x0;
      ++report.coordinates;
      const bool plus_smooth = ep.branches == base.branches;
      const bool minus_smooth = em.branches == base.branches;
      if (!plus_smooth && !minus_smooth) {
        ++report.kink_crossings;
        continue;
      }
      if (!plus_smooth || !minus_smooth) ++report.one_sided;
      // divide by the step actually taken after float rounding
      const double numeric = !plus_smooth    ? (base.value - em.value) / (double(x0) - double(xm))
                             : !minus_smooth ? (ep.value - base.value) / (double(xp) - double(x0))
                                             : (ep.value - em.value) / (double(xp) - double(xm));
      const double a = analytic[pi][j];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > report.max_rel_error || report.coordinates - report.kink_crossings == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_param = pi;
        report.worst_index = j;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace pdit
