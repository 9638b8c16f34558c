#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "pdit/error.hpp"
#include "pdit/tensor.hpp"

namespace pdit {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// C[m, n] (+)= op(A) op(B), op(A) is [m, k]. A is stored [m, k] (or [k, m]
// when trans_a); B is stored [k, n] (or [n, k] when trans_b).
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a,
          bool trans_b, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap C(c, M, N);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  };
  if (!trans_a && !trans_b)
    run(CMap(a, M, K), CMap(b, K, N));
  else if (!trans_a && trans_b)
    run(CMap(a, M, K), CMap(b, N, K).transpose());
  else if (trans_a && !trans_b)
    run(CMap(a, K, M).transpose(), CMap(b, K, N));
  else
    run(CMap(a, K, M).transpose(), CMap(b, N, K).transpose());
}

Tape& tape_of(std::initializer_list<const Var*> vars) {
  Tape* t = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) throw InvalidArgument("operation on an empty Var");
    if (t == nullptr)
      t = &v->tape();
    else if (t != &v->tape())
      throw InvalidArgument("operands live on different tapes");
  }
  return *t;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

void accumulate(Tensor& dst, const Tensor& src) {
  float* d = dst.ptr();
  const float* s = src.ptr();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw InvalidArgument("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class F, class DF>
Var unary(const char* name, const Var& x, F f, DF df) {
  Tape& tape = tape_of({&x});
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return tape.record(name, std::move(out), {xi}, [xi, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("add", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) accumulate(t.grad(ai), g);
    if (t.requires_grad(bi)) accumulate(t.grad(bi), g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("sub", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) accumulate(t.grad(ai), g);
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("mul", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, float s) {
  return unary("scale", a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Var add_scalar(const Var& a, float s) {
  return unary("add_scalar", a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Var add_bias(const Var& x, const Var& b) {
  Tape& tape = tape_of({&x, &b});
  const Shape& xs = x.shape();
  if (b.value().rank() != 1 || b.value().dim(0) != xs.back())
    throw InvalidArgument("add_bias: bias " + shape_string(b.shape()) + " does not match " + shape_string(xs));
  const std::size_t n = xs.back();
  Tensor out = x.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < out.size(); r += n)
    for (std::size_t j = 0; j < n; ++j) out[r + j] += bv[j];
  const std::size_t xi = x.id(), bi = b.id();
  return tape.record("add_bias", std::move(out), {xi, bi}, [xi, bi, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(xi)) accumulate(t.grad(xi), g);
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t r = 0; r < g.size(); r += n)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r + j];
    }
  });
}

Var exp(const Var& x) {
  return unary("exp", x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Var log(const Var& x) {
  return unary("log", x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Var relu(const Var& x) {
  for (float v : x.value().data()) BranchTrace::note(v > 0.0f);
  return unary("relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
               [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Var gelu(const Var& x) {
  static constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  static constexpr float a = 0.044715f;
  Tape& tape = tape_of({&x});
  const Tensor& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  const Eigen::ArrayXf v = Eigen::Map<const Eigen::ArrayXf>(xv.ptr(), n);
  auto t = std::make_shared<Eigen::ArrayXf>((c * (v + a * v.cube())).tanh());
  Tensor out(xv.shape());
  Eigen::Map<Eigen::ArrayXf>(out.ptr(), n) = 0.5f * v * (1.0f + *t);
  const std::size_t xi = x.id();
  return tape.record("gelu", std::move(out), {xi}, [xi, t, n](Tape& tp, std::size_t self) {
    Eigen::Map<const Eigen::ArrayXf> g(tp.grad(self).ptr(), n);
    Eigen::Map<const Eigen::ArrayXf> v(tp.value(xi).ptr(), n);
    Eigen::Map<Eigen::ArrayXf> gx(tp.grad(xi).ptr(), n);
    gx += g * (0.5f * (1.0f + *t) + 0.5f * v * (1.0f - t->square()) * c * (1.0f + 3.0f * a * v.square()));
  });
}

Var square(const Var& x) {
  return unary("square", x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

Var clamp(const Var& x, float lo, float hi) {
  for (float v : x.value().data()) {
    BranchTrace::note(v >= lo);
    BranchTrace::note(v <= hi);
  }
  return unary("clamp", x, [lo, hi](float v) { return std::clamp(v, lo, hi); },
               [lo, hi](float v, float) { return (v >= lo && v <= hi) ? 1.0f : 0.0f; });
}

Var minimum(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "minimum");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::min(av[i], bv[i]);
    BranchTrace::note(av[i] <= bv[i]);
  }
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("minimum", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_a = av[i] <= bv[i];
      if (take_a && t.requires_grad(ai)) t.grad(ai)[i] += g[i];
      if (!take_a && t.requires_grad(bi)) t.grad(bi)[i] += g[i];
    }
  });
}

Var linear(const Var& x, const Var& w, std::optional<Var> bias) {
  Tape& tape = tape_of({&x, &w});
  const Shape& xs = x.shape();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xs.back() != wv.dim(0))
    throw InvalidArgument("linear: input " + shape_string(xs) + " incompatible with weight " + shape_string(wv.shape()));
  const std::size_t k = wv.dim(0), n = wv.dim(1), rows = x.value().size() / k;
  Shape os = xs;
  os.back() = n;
  Tensor out(os);
  gemm(x.value().ptr(), wv.ptr(), out.ptr(), rows, k, n, false, false, false);
  const std::size_t xi = x.id(), wi = w.id();
  Var y = tape.record("linear", std::move(out), {xi, wi}, [xi, wi, rows, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(xi)) gemm(g.ptr(), t.value(wi).ptr(), t.grad(xi).ptr(), rows, n, k, false, true, true);
    if (t.requires_grad(wi)) gemm(t.value(xi).ptr(), g.ptr(), t.grad(wi).ptr(), k, rows, n, true, false, true);
  });
  if (bias) return add_bias(y, *bias);
  return y;
}

Var matmul(const Var& a, const Var& b, bool trans_b) {
  if (a.value().rank() != 2 || b.value().rank() != 2) throw InvalidArgument("matmul expects rank-2 operands");
  Var a3 = reshape(a, {1, a.shape()[0], a.shape()[1]});
  Var b3 = reshape(b, {1, b.shape()[0], b.shape()[1]});
  Var c = bmm(a3, b3, trans_b);
  return reshape(c, {c.shape()[1], c.shape()[2]});
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
  Tape& tape = tape_of({&a, &b});
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0])
    throw InvalidArgument("bmm: incompatible " + shape_string(as) + " and " + shape_string(bs));
  const std::size_t batch = as[0], n = as[1], k = as[2];
  const std::size_t kb = trans_b ? bs[2] : bs[1];
  const std::size_t m = trans_b ? bs[1] : bs[2];
  if (kb != k) throw InvalidArgument("bmm: inner dims differ " + shape_string(as) + " and " + shape_string(bs));
  Tensor out({batch, n, m});
  const float* ap = a.value().ptr();
  const float* bp = b.value().ptr();
  for (std::size_t i = 0; i < batch; ++i)
    gemm(ap + i * n * k, bp + i * k * m, out.ptr() + i * n * m, n, k, m, false, trans_b, false);
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("bmm", std::move(out), {ai, bi}, [=](Tape& t, std::size_t self) {
    const float* g = t.grad(self).ptr();
    const float* av = t.value(ai).ptr();
    const float* bv = t.value(bi).ptr();
    float* ga = t.requires_grad(ai) ? t.grad(ai).ptr() : nullptr;
    float* gb = t.requires_grad(bi) ? t.grad(bi).ptr() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      const float* gi = g + i * n * m;
      if (ga) gemm(gi, bv + i * k * m, ga + i * n * k, n, m, k, false, !trans_b, true);
      if (gb) {
        if (trans_b)
          gemm(gi, av + i * n * k, gb + i * k * m, m, n, k, true, false, true);
        else
          gemm(av + i * n * k, gi, gb + i * k * m, k, n, m, true, false, true);
      }
    }
  });
}

Var softmax(const Var& x, std::size_t axis) {
  Tape& tape = tape_of({&x});
  const AxisSplit s = split_axis(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  Eigen::ArrayXf row(static_cast<Eigen::Index>(s.inner == 1 ? s.n : 0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      float mx = -INFINITY;
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      if (s.inner == 1) {
        const auto n = static_cast<Eigen::Index>(s.n);
        row = Eigen::Map<const Eigen::ArrayXf>(xv.ptr() + base, n);
        row = (row - mx).exp();
        for (Eigen::Index i = 0; i < n; ++i) z += row[i];
        std::copy_n(row.data(), n, out.ptr() + base);
      } else {
        for (std::size_t i = 0; i < s.n; ++i) {
          const float e = std::exp(xv[base + i * s.inner] - mx);
          out[base + i * s.inner] = e;
          z += e;
        }
      }
      const float inv = static_cast<float>(1.0 / z);
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] *= inv;
    }
  const std::size_t xi = x.id();
  return tape.record("softmax", std::move(out), {xi}, [xi, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) dot += double(g[base + i * s.inner]) * y[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t j = base + i * s.inner;
          gx[j] += y[j] * (g[j] - static_cast<float>(dot));
        }
      }
  });
}

Var log_softmax(const Var& x, std::size_t axis) {
  Tape& tape = tape_of({&x});
  const AxisSplit s = split_axis(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      float mx = -INFINITY;
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) z += std::exp(double(xv[base + i * s.inner]) - mx);
      const double lse = mx + std::log(z);
      for (std::size_t i = 0; i < s.n; ++i)
        out[base + i * s.inner] = static_cast<float>(double(xv[base + i * s.inner]) - lse);
    }
  const std::size_t xi = x.id();
  return tape.record("log_softmax", std::move(out), {xi}, [xi, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double gs = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) gs += g[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t j = base + i * s.inner;
          gx[j] += g[j] - std::exp(y[j]) * static_cast<float>(gs);
        }
      }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps) {
  Tape& tape = tape_of({&x, &gain, &bias});
  const std::size_t d = x.shape().back();
  if (gain.value().size() != d || bias.value().size() != d)
    throw InvalidArgument("layer_norm: gain/bias size must equal last dim " + std::to_string(d));
  const std::size_t rows = x.value().size() / d;
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xv.ptr() + r * d;
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= double(d);
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= double(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    float* yr = out.ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) yr[i] = static_cast<float>((xr[i] - mu) * rstd) * gv[i] + bv[i];
  }
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  return tape.record("layer_norm", std::move(out), {xi, gi, bi}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& gv = t.value(gi);
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* xr = xv.ptr() + r * d;
      const float* gr = g.ptr() + r * d;
      double mu = 0.0, var = 0.0;
      for (std::size_t i = 0; i < d; ++i) mu += xr[i];
      mu /= double(d);
      for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
      var /= double(d);
      const double rstd = 1.0 / std::sqrt(var + eps);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (xr[i] - mu) * rstd;
        dxhat[i] = double(gr[i]) * gv[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * xhat[i];
      }
      mean_dxhat /= double(d);
      mean_dxhat_xhat /= double(d);
      if (t.requires_grad(xi)) {
        float* gx = t.grad(xi).ptr() + r * d;
        for (std::size_t i = 0; i < d; ++i)
          gx[i] += static_cast<float>(rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat));
      }
      if (t.requires_grad(gi)) {
        Tensor& gg = t.grad(gi);
        for (std::size_t i = 0; i < d; ++i) gg[i] += static_cast<float>(gr[i] * xhat[i]);
      }
      if (t.requires_grad(bi)) {
        Tensor& gb = t.grad(bi);
        for (std::size_t i = 0; i < d; ++i) gb[i] += gr[i];
      }
    }
  });
}

Var l2_normalize(const Var& x) {
  Tape& tape = tape_of({&x});
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / d;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += double(xv[r * d + i]) * xv[r * d + i];
    if (ss == 0.0) throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
    (*norms)[r] = std::sqrt(ss);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = static_cast<float>(xv[r * d + i] / (*norms)[r]);
  }
  const std::size_t xi = x.id();
  return tape.record("l2_normalize", std::move(out), {xi}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += double(g[r * d + i]) * y[r * d + i];
      for (std::size_t i = 0; i < d; ++i)
        gx[r * d + i] += static_cast<float>((g[r * d + i] - y[r * d + i] * dot) / (*norms)[r]);
    }
  });
}

Var embedding(const Var& table, std::span<const int> ids) {
  Tape& tape = tape_of({&table});
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw InvalidArgument("embedding table must be rank 2");
  if (ids.empty()) throw InvalidArgument("embedding: empty id list");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw InvalidArgument("embedding id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  const std::size_t ti = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return tape.record("embedding", std::move(out), {ti}, [ti, d, idv = std::move(idv)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad(ti);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      float* row = gt.ptr() + static_cast<std::size_t>(idv[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tape& tape = tape_of({&x});
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return tape.record("reshape", std::move(out), {xi},
                     [xi](Tape& t, std::size_t self) { accumulate(t.grad(xi), t.grad(self)); });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat of nothing");
  Tape& tape = tape_of({&parts[0]});
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw InvalidArgument("concat axis out of range");
  std::vector<std::size_t> ids, widths;
  Shape os = s0;
  os[axis] = 0;
  for (const Var& p : parts) {
    tape_of({&parts[0], &p});
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw InvalidArgument("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw InvalidArgument("concat: " + shape_string(s) + " vs " + shape_string(s0));
    os[axis] += s[axis];
    ids.push_back(p.id());
  }
  AxisSplit sp = split_axis(os, axis);
  for (const Var& p : parts) widths.push_back(p.shape()[axis] * sp.inner);
  const std::size_t row = sp.n * sp.inner;
  Tensor out(os);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const float* src = parts[p].value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(src + o * widths[p], widths[p], out.ptr() + o * row + off);
    off += widths[p];
  }
  const std::size_t outer = sp.outer;
  return tape.record("concat", std::move(out), ids, [ids, widths, outer, row](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        float* dst = t.grad(ids[p]).ptr();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[p]; ++j) dst[o * widths[p] + j] += g[o * row + off + j];
      }
      off += widths[p];
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t count) {
  Tape& tape = tape_of({&x});
  const Shape& xs = x.shape();
  const AxisSplit sp = split_axis(xs, axis);
  if (count == 0 || start + count > sp.n)
    throw InvalidArgument("slice [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of range for " +
                          shape_string(xs));
  Shape os = xs;
  os[axis] = count;
  Tensor out(os);
  const std::size_t row = sp.n * sp.inner, width = count * sp.inner, off = start * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.value().ptr() + o * row + off, width, out.ptr() + o * width);
  const std::size_t xi = x.id(), outer = sp.outer;
  return tape.record("slice", std::move(out), {xi}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    float* dst = t.grad(xi).ptr();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < width; ++j) dst[o * row + off + j] += g[o * width + j];
  });
}

Var swap_axes_12(const Var& x) {
  Tape& tape = tape_of({&x});
  const Shape& s = x.shape();
  if (s.size() != 4) throw InvalidArgument("swap_axes_12 expects rank 4, got " + shape_string(s));
  const std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
  Tensor out({A, C, B, D});
  const float* src = x.value().ptr();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(src + ((a * B + b) * C + c) * D, D, out.ptr() + ((a * C + c) * B + b) * D);
  const std::size_t xi = x.id();
  return tape.record("swap_axes_12", std::move(out), {xi}, [=](Tape& t, std::size_t self) {
    const float* g = t.grad(self).ptr();
    float* dst = t.grad(xi).ptr();
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const float* gs = g + ((a * C + c) * B + b) * D;
          float* ds = dst + ((a * B + b) * C + c) * D;
          for (std::size_t d = 0; d < D; ++d) ds[d] += gs[d];
        }
  });
}

Var sum(const Var& x) {
  Tape& tape = tape_of({&x});
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  const std::size_t xi = x.id();
  return tape.record("sum", Tensor::scalar(static_cast<float>(acc)), {xi}, [xi](Tape& t, std::size_t self) {
    const float g = t.grad(self)[0];
    for (float& v : t.grad(xi).data()) v += g;
  });
}

Var mean(const Var& x) {
  Tape& tape = tape_of({&x});
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  const std::size_t n = x.value().size();
  const std::size_t xi = x.id();
  return tape.record("mean", Tensor::scalar(static_cast<float>(acc / double(n))), {xi},
                     [xi, n](Tape& t, std::size_t self) {
                       const float g = t.grad(self)[0] / static_cast<float>(n);
                       for (float& v : t.grad(xi).data()) v += g;
                     });
}

Var sum_axis(const Var& x, std::size_t axis) {
  Tape& tape = tape_of({&x});
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor out(drop_axis(x.shape(), axis));
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) acc += xv[(o * s.n + i) * s.inner + in];
      out[o * s.inner + in] = static_cast<float>(acc);
    }
  const std::size_t xi = x.id();
  return tape.record("sum_axis", std::move(out), {xi}, [xi, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t in = 0; in < s.inner; ++in) gx[(o * s.n + i) * s.inner + in] += g[o * s.inner + in];
  });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const std::size_t n = split_axis(x.shape(), axis).n;
  return scale(sum_axis(x, axis), 1.0f / static_cast<float>(n));
}

Var pick(const Var& x, std::span<const int> index) {
  Tape& tape = tape_of({&x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != index.size())
    throw InvalidArgument("pick: expected [" + std::to_string(index.size()) + ", C], got " + shape_string(xv.shape()));
  const std::size_t c = xv.dim(1);
  Tensor out({index.size()});
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] < 0 || static_cast<std::size_t>(index[b]) >= c) throw InvalidArgument("pick: index out of range");
    out[b] = xv[b * c + static_cast<std::size_t>(index[b])];
  }
  const std::size_t xi = x.id();
  std::vector<int> idx(index.begin(), index.end());
  return tape.record("pick", std::move(out), {xi}, [xi, c, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t b = 0; b < idx.size(); ++b) gx[b * c + static_cast<std::size_t>(idx[b])] += g[b];
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t kernel, std::size_t padding) {
  Tape& tape = tape_of({&x, &weight, &bias});
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw InvalidArgument("conv2d expects [B, H, W, C], got " + shape_string(xs));
  const std::size_t B = xs[0], H = xs[1], W = xs[2], C = xs[3];
  const Tensor& wv = weight.value();
  if (wv.rank() != 2 || wv.dim(0) != kernel * kernel * C)
    throw InvalidArgument("conv2d weight " + shape_string(wv.shape()) + " does not match kernel/channels");
  if (H + 2 * padding < kernel || W + 2 * padding < kernel) throw InvalidArgument("conv2d: kernel larger than input");
  const std::size_t Co = wv.dim(1);
  if (bias.value().size() != Co) throw InvalidArgument("conv2d bias size mismatch");
  const std::size_t Ho = H + 2 * padding - kernel + 1, Wo = W + 2 * padding - kernel + 1;
  const std::size_t patch = kernel * kernel * C, rows = B * Ho * Wo;

  auto cols = std::make_shared<std::vector<float>>(rows * patch, 0.0f);
  const float* xp = x.value().ptr();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        float* dst = cols->data() + ((b * Ho + oy) * Wo + ox) * patch;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(padding);
          if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(padding);
            if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
            std::copy_n(xp + ((b * H + std::size_t(iy)) * W + std::size_t(ix)) * C, C, dst + (ky * kernel + kx) * C);
          }
        }
      }
  Tensor out({B, Ho, Wo, Co});
  gemm(cols->data(), wv.ptr(), out.ptr(), rows, patch, Co, false, false, false);
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < Co; ++c) out[r * Co + c] += bv[c];

  const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
  return tape.record("conv2d", std::move(out), {xi, wi, bi}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(wi)) gemm(cols->data(), g.ptr(), t.grad(wi).ptr(), patch, rows, Co, true, false, true);
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < Co; ++c) gb[c] += g[r * Co + c];
    }
    if (t.requires_grad(xi)) {
      std::vector<float> dcols(rows * patch, 0.0f);
      gemm(g.ptr(), t.value(wi).ptr(), dcols.data(), rows, Co, patch, false, true, false);
      float* gx = t.grad(xi).ptr();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const float* src = dcols.data() + ((b * Ho + oy) * Wo + ox) * patch;
            for (std::size_t ky = 0; ky < kernel; ++ky) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(padding);
              if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
              for (std::size_t kx = 0; kx < kernel; ++kx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(padding);
                if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                float* d = gx + ((b * H + std::size_t(iy)) * W + std::size_t(ix)) * C;
                const float* s = src + (ky * kernel + kx) * C;
                for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
              }
            }
          }
    }
  });
}

Var detach(const Var& x) { return x.tape().constant(x.value()); }

AttentionResult attention(const Var& q, const Var& k, const Var& v, const std::vector<std::vector<bool>>* mask) {
  tape_of({&q, &k, &v});
  const std::size_t rank = q.value().rank();
  if (rank != k.value().rank() || rank != v.value().rank() || (rank != 2 && rank != 3))
    throw InvalidArgument("attention expects Q, K, V all rank 2 or all rank 3");
  if (rank == 2) {
    auto r = attention(reshape(q, {1, q.shape()[0], q.shape()[1]}), reshape(k, {1, k.shape()[0], k.shape()[1]}),
                       reshape(v, {1, v.shape()[0], v.shape()[1]}), mask);
    return {reshape(r.output, {r.output.shape()[1], r.output.shape()[2]}),
            reshape(r.weights, {r.weights.shape()[1], r.weights.shape()[2]})};
  }
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  const Shape& vs = v.shape();
  if (qs[2] != ks[2]) throw InvalidArgument("attention: Q and K inner dims differ");
  if (ks[1] != vs[1] || qs[0] != ks[0] || qs[0] != vs[0])
    throw InvalidArgument("attention: K and V must have the same number of rows");
  const std::size_t n = qs[1], m = ks[1];
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(qs[2]));
  Var scores = scale(bmm(q, k, /*trans_b=*/true), inv_sqrt_dk);
  if (mask != nullptr) {
    if (mask->size() != n) throw InvalidArgument("attention mask row count mismatch");
    Tensor bias({qs[0], n, m}, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& row = (*mask)[i];
      if (row.size() != m) throw InvalidArgument("attention mask column count mismatch");
      if (std::none_of(row.begin(), row.end(), [](bool b) { return b; }))
        throw InvalidArgument("attention mask row " + std::to_string(i) + " masks every key");
      for (std::size_t b = 0; b < qs[0]; ++b)
        for (std::size_t j = 0; j < m; ++j)
          if (!row[j]) bias[(b * n + i) * m + j] = -1e30f;
    }
    scores = add(scores, q.tape().constant(std::move(bias)));
  }
  Var weights = softmax(scores, 2);
  return {bmm(weights, v), weights};
}

}  // namespace pdit
