#include "fbdebias/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "fbdebias/error.hpp"

namespace fbd::ad {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::ShapeMismatch,
         std::string(op) + ": operand shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
             " differ");
  }
}

void accumulate(Tape& t, int id, std::span<const double> g) {
  if (!t.needs_grad(id)) return;
  Tensor& dst = t.grad_ref(id);
  double* d = dst.data();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

}  // namespace

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(const Tensor& value, Tensor* grad_sink) {
  if (grad_sink != nullptr && grad_sink->shape() != value.shape()) {
    fail(ErrorCode::ShapeMismatch, "leaf: gradient sink shape " + shape_string(grad_sink->shape()) +
                                       " differs from value shape " + shape_string(value.shape()));
  }
  Node n;
  n.borrowed = &value;
  n.sink = grad_sink;
  n.needs_grad = grad_sink != nullptr;
  nodes_.push_back(std::move(n));
  return Var(static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var(static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::vector<int> inputs, Backward backward) {
  Node n;
  n.owned = std::move(value);
  for (int i : inputs) n.needs_grad = n.needs_grad || needs_grad(i);
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(static_cast<int>(nodes_.size() - 1));
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  return n.borrowed != nullptr ? *n.borrowed : n.owned;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
  return n.sink != nullptr ? *n.sink : n.grad;
}

Tensor& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.sink != nullptr) return *n.sink;
  if (n.grad.empty()) n.grad = Tensor::zeros_like(value(id));
  return n.grad;
}

void Tape::backward(Var root) {
  if (!root.valid() || static_cast<std::size_t>(root.id()) >= nodes_.size())
    fail(ErrorCode::InvalidArgument, "backward: invalid root");
  if (!value(root).is_scalar())
    fail(ErrorCode::ShapeMismatch, "backward: root must be scalar, got shape " + shape_string(value(root).shape()));
  if (!needs_grad(root.id())) return;
  grad_ref(root.id())[0] += 1.0;
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    accumulate(tp, ai, g.values());
    accumulate(tp, bi, g.values());
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int self) {
    Tensor g = tp.grad_ref(self);
    accumulate(tp, ai, g.values());
    for (double& x : g.values()) x = -x;
    accumulate(tp, bi, g.values());
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    if (tp.needs_grad(ai)) {
      Tensor& ga = tp.grad_ref(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.needs_grad(bi)) {
      Tensor& gb = tp.grad_ref(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  Tensor out = t.value(a);
  for (double& x : out.values()) x *= c;
  const int ai = a.id();
  return t.record(std::move(out), {ai}, [ai, c](Tape& tp, int self) {
    if (!tp.needs_grad(ai)) return;
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

namespace {

// Unary op whose derivative is expressible from input and output values.
template <class Fwd, class Deriv>
Var unary(Tape& t, Var a, Fwd fwd, Deriv deriv) {
  Tensor out = t.value(a);
  for (double& x : out.values()) x = fwd(x);
  const int ai = a.id();
  return t.record(std::move(out), {ai}, [ai, deriv](Tape& tp, int self) {
    if (!tp.needs_grad(ai)) return;
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(ai);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_ref(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var exp(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sigmoid(Tape& t, Var a) {
  return unary(t, a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp_floor(Tape& t, Var a, double floor) {
  return unary(
      t, a, [floor](double x) { return std::max(std::exp(x), floor); },
      [floor](double x, double) {
        const double e = std::exp(x);
        return e > floor ? e : 0.0;
      });
}

namespace {

void check_matvec(const Tensor& W, const Tensor& x, const char* op) {
  if (W.rank() != 2 || x.size() != W.cols()) {
    fail(ErrorCode::ShapeMismatch,
         std::string(op) + ": matrix " + shape_string(W.shape()) + " incompatible with vector " + shape_string(x.shape()));
  }
}

void matvec_backward(Tape& tp, int wi, int xi, const Tensor& g) {
  const Tensor& W = tp.value(wi);
  const Tensor& x = tp.value(xi);
  const std::size_t rows = W.rows(), cols = W.cols();
  if (tp.needs_grad(wi)) {
    Tensor& gW = tp.grad_ref(wi);
    for (std::size_t r = 0; r < rows; ++r) {
      const double gr = g[r];
      if (gr == 0.0) continue;
      double* dst = gW.data() + r * cols;
      const double* xs = x.data();
      for (std::size_t c = 0; c < cols; ++c) dst[c] += gr * xs[c];
    }
  }
  if (tp.needs_grad(xi)) {
    Tensor& gx = tp.grad_ref(xi);
    double* dst = gx.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double gr = g[r];
      if (gr == 0.0) continue;
      const double* wr = W.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += gr * wr[c];
    }
  }
}

}  // namespace

Var matvec(Tape& t, Var W, Var x) {
  const Tensor& Wv = t.value(W);
  const Tensor& xv = t.value(x);
  check_matvec(Wv, xv, "matvec");
  const std::size_t rows = Wv.rows(), cols = Wv.cols();
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = Wv.data() + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * xv[c];
    out[r] = s;
  }
  const int wi = W.id(), xi = x.id();
  return t.record(std::move(out), {wi, xi},
                  [wi, xi](Tape& tp, int self) { matvec_backward(tp, wi, xi, tp.grad_ref(self)); });
}

Var affine(Tape& t, Var x, Var W, Var b) {
  const Tensor& Wv = t.value(W);
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(b);
  check_matvec(Wv, xv, "affine");
  if (bv.size() != Wv.rows()) {
    fail(ErrorCode::ShapeMismatch,
         "affine: bias " + shape_string(bv.shape()) + " incompatible with matrix " + shape_string(Wv.shape()));
  }
  const std::size_t rows = Wv.rows(), cols = Wv.cols();
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = Wv.data() + r * cols;
    double s = bv[r];
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * xv[c];
    out[r] = s;
  }
  const int wi = W.id(), xi = x.id(), bi = b.id();
  return t.record(std::move(out), {xi, wi, bi}, [wi, xi, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    matvec_backward(tp, wi, xi, g);
    accumulate(tp, bi, g.values());
  });
}

Var concat(Tape& t, std::span<const Var> parts) {
  std::size_t total = 0;
  for (Var p : parts) total += t.value(p).size();
  Tensor out(Shape{total});
  std::vector<int> ids;
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    std::copy(v.values().begin(), v.values().end(), out.data() + off);
    off += v.size();
    ids.push_back(p.id());
  }
  return t.record(std::move(out), ids, [ids](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    std::size_t o = 0;
    for (int id : ids) {
      const std::size_t n = tp.value(id).size();
      accumulate(tp, id, g.values().subspan(o, n));
      o += n;
    }
  });
}

Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double x : t.value(a).values()) s += x;
  const int ai = a.id();
  return t.record(Tensor::scalar(s), {ai}, [ai](Tape& tp, int self) {
    if (!tp.needs_grad(ai)) return;
    const double g = tp.grad_ref(self)[0];
    for (double& x : tp.grad_ref(ai).values()) x += g;
  });
}

Var row(Tape& t, Var matrix, std::size_t index) {
  const Tensor& m = t.value(matrix);
  if (m.rank() != 2 || index >= m.rows()) {
    fail(ErrorCode::ShapeMismatch, "row: index " + std::to_string(index) + " outside " + shape_string(m.shape()));
  }
  auto r = m.row(index);
  Tensor out(Shape{r.size()}, std::vector<double>(r.begin(), r.end()));
  const int mi = matrix.id();
  return t.record(std::move(out), {mi}, [mi, index](Tape& tp, int self) {
    if (!tp.needs_grad(mi)) return;
    const Tensor& g = tp.grad_ref(self);
    auto dst = tp.grad_ref(mi).row(index);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

void softmax_inplace(std::span<double> logits) {
  double m = -INFINITY;
  for (double x : logits) m = std::max(m, x);
  double z = 0.0;
  for (double& x : logits) {
    x = std::exp(x - m);
    z += x;
  }
  for (double& x : logits) x /= z;
}

Var softmax_logprob(Tape& t, Var logits, std::size_t index) {
  const Tensor& l = t.value(logits);
  if (index >= l.size()) {
    fail(ErrorCode::ShapeMismatch,
         "softmax_logprob: index " + std::to_string(index) + " outside logits " + shape_string(l.shape()));
  }
  double m = -INFINITY;
  for (double x : l.values()) m = std::max(m, x);
  double z = 0.0;
  for (double x : l.values()) z += std::exp(x - m);
  const double lse = m + std::log(z);
  const double out = l[index] - lse;
  const int li = logits.id();
  return t.record(Tensor::scalar(out), {li}, [li, index, lse](Tape& tp, int self) {
    if (!tp.needs_grad(li)) return;
    const double g = tp.grad_ref(self)[0];
    const Tensor& lv = tp.value(li);
    Tensor& gl = tp.grad_ref(li);
    for (std::size_t j = 0; j < lv.size(); ++j) gl[j] -= g * std::exp(lv[j] - lse);
    gl[index] += g;
  });
}

double gaussian_kl_value(std::span<const double> mu_q, std::span<const double> var_q, std::span<const double> mu_p,
                         std::span<const double> var_p) {
  double kl = 0.0;
  for (std::size_t d = 0; d < mu_q.size(); ++d) {
    if (!(var_q[d] > 0.0) || !(var_p[d] > 0.0))
      fail(ErrorCode::Numeric, "gaussian_kl: nonpositive variance at dimension " + std::to_string(d));
    const double diff = mu_q[d] - mu_p[d];
    kl += 0.5 * (std::log(var_p[d] / var_q[d]) + (var_q[d] + diff * diff) / var_p[d] - 1.0);
  }
  return kl;
}

Var gaussian_kl(Tape& t, Var mu_q, Var var_q, Var mu_p, Var var_p) {
  const Tensor& mq = t.value(mu_q);
  const Tensor& vq = t.value(var_q);
  const Tensor& mp = t.value(mu_p);
  const Tensor& vp = t.value(var_p);
  require_same_shape(mq, vq, "gaussian_kl");
  require_same_shape(mq, mp, "gaussian_kl");
  require_same_shape(mq, vp, "gaussian_kl");
  const double kl = gaussian_kl_value(mq.values(), vq.values(), mp.values(), vp.values());
  const int a = mu_q.id(), b = var_q.id(), c = mu_p.id(), d = var_p.id();
  return t.record(Tensor::scalar(kl), {a, b, c, d}, [a, b, c, d](Tape& tp, int self) {
    const double g = tp.grad_ref(self)[0];
    const Tensor& mq2 = tp.value(a);
    const Tensor& vq2 = tp.value(b);
    const Tensor& mp2 = tp.value(c);
    const Tensor& vp2 = tp.value(d);
    const std::size_t n = mq2.size();
    Tensor* gmq = tp.needs_grad(a) ? &tp.grad_ref(a) : nullptr;
    Tensor* gvq = tp.needs_grad(b) ? &tp.grad_ref(b) : nullptr;
    Tensor* gmp = tp.needs_grad(c) ? &tp.grad_ref(c) : nullptr;
    Tensor* gvp = tp.needs_grad(d) ? &tp.grad_ref(d) : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = mq2[i] - mp2[i];
      if (gmq) (*gmq)[i] += g * diff / vp2[i];
      if (gmp) (*gmp)[i] -= g * diff / vp2[i];
      if (gvq) (*gvq)[i] += g * 0.5 * (1.0 / vp2[i] - 1.0 / vq2[i]);
      if (gvp) (*gvp)[i] += g * 0.5 * (1.0 / vp2[i] - (vq2[i] + diff * diff) / (vp2[i] * vp2[i]));
    }
  });
}

Var reparam_sample(Tape& t, Var mu, Var var, const Tensor& noise) {
  const Tensor& m = t.value(mu);
  const Tensor& v = t.value(var);
  require_same_shape(m, v, "reparam_sample");
  if (noise.size() != m.size()) {
    fail(ErrorCode::ShapeMismatch, "reparam_sample: noise " + shape_string(noise.shape()) + " vs mean " +
                                       shape_string(m.shape()));
  }
  Tensor out = m;
  Tensor sd(m.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    sd[i] = std::sqrt(std::max(v[i], 0.0));
    out[i] += sd[i] * noise[i];
  }
  const int mi = mu.id(), vi = var.id();
  return t.record(std::move(out), {mi, vi}, [mi, vi, sd = std::move(sd), noise](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    accumulate(tp, mi, g.values());
    if (!tp.needs_grad(vi)) return;
    Tensor& gv = tp.grad_ref(vi);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (sd[i] > 0.0) gv[i] += g[i] * noise[i] * 0.5 / sd[i];
  });
}

Var gru_cell(Tape& t, Var x, Var h_prev, const GruWeights& w) {
  const Var z = sigmoid(t, add(t, affine(t, x, w.Wz, w.bz), matvec(t, w.Uz, h_prev)));
  const Var r = sigmoid(t, add(t, affine(t, x, w.Wr, w.br), matvec(t, w.Ur, h_prev)));
  const Var n = tanh(t, add(t, affine(t, x, w.Wn, w.bn), matvec(t, w.Un, mul(t, r, h_prev))));
  return add(t, n, mul(t, z, sub(t, h_prev, n)));
}

}  // namespace fbd::ad
