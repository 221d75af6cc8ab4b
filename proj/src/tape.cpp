#include "corrmoe/tape.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "corrmoe/errors.hpp"
#include "corrmoe/geometry.hpp"
#include "corrmoe/rng.hpp"

namespace corrmoe::nn {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check(bool ok, const std::string& msg) {
  if (!ok) throw PreconditionError(msg);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto pick = [](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    return -1;
  };
  const Shape out{pick(a.b, b.b), pick(a.c, b.c), pick(a.n, b.n),
                  pick(a.k, b.k)};
  if (out.b < 0 || out.c < 0 || out.n < 0 || out.k < 0)
    throw PreconditionError("broadcast mismatch: " + a.str() + " vs " +
                            b.str());
  return out;
}

struct Strides {
  long b, c, n, k;
};

// strides of `s` indexed by `out` coordinates; 0 on broadcast axes
Strides strides_in(const Shape& s, const Shape& out) {
  Strides st{static_cast<long>(s.c) * s.n * s.k, static_cast<long>(s.n) * s.k,
             static_cast<long>(s.k), 1};
  if (s.b == 1 && out.b > 1) st.b = 0;
  if (s.c == 1 && out.c > 1) st.c = 0;
  if (s.n == 1 && out.n > 1) st.n = 0;
  if (s.k == 1 && out.k > 1) st.k = 0;
  return st;
}

// Calls f(io, ia, ib) for every output element.
template <class F>
void bc_loop(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const Strides sa = strides_in(a, out);
  const Strides sb = strides_in(b, out);
  long io = 0;
  for (int bi = 0; bi < out.b; ++bi)
    for (int ci = 0; ci < out.c; ++ci)
      for (int ni = 0; ni < out.n; ++ni) {
        long ia = bi * sa.b + ci * sa.c + ni * sa.n;
        long ib = bi * sb.b + ci * sb.c + ni * sb.n;
        for (int ki = 0; ki < out.k; ++ki, ++io)
          f(io, ia + ki * sa.k, ib + ki * sb.k);
      }
}

// Calls f(io, ia) for every element of `out` against operand shape a.
template <class F>
void uc_loop(const Shape& out, const Shape& a, F&& f) {
  const Strides sa = strides_in(a, out);
  long io = 0;
  for (int bi = 0; bi < out.b; ++bi)
    for (int ci = 0; ci < out.c; ++ci)
      for (int ni = 0; ni < out.n; ++ni) {
        long ia = bi * sa.b + ci * sa.c + ni * sa.n;
        for (int ki = 0; ki < out.k; ++ki, ++io) f(io, ia + ki * sa.k);
      }
}

}  // namespace

// ---- ParamStore --------------------------------------------------------

Param& ParamStore::get_or_create(const std::string& name, const Shape& shape,
                                 Init init) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (!(it->second.value.shape() == shape))
      throw PreconditionError("param '" + name + "' shape mismatch: " +
                              it->second.value.shape().str() + " vs " +
                              shape.str());
    return it->second;
  }
  Param p;
  p.value = Tensor(shape);
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      p.value = Tensor::full(shape, 1.0);
      break;
    case Init::kHe: {
      RngStream rng(mix_seed(seed_, hash_tag(name)));
      const double std = std::sqrt(2.0 / (static_cast<double>(shape.c) *
                                          static_cast<double>(shape.k)));
      for (long i = 0; i < p.value.numel(); ++i)
        p.value[i] = rng.normal(0.0, std);
      break;
    }
  }
  return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end())
    throw PreconditionError("unknown param '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw PreconditionError("unknown param '" + name + "'");
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, p] : params_) p.grad = Tensor();
}

void ParamStore::adam_step(double lr, double beta1, double beta2, double eps) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1, steps_);
  const double bc2 = 1.0 - std::pow(beta2, steps_);
  for (auto& [name, p] : params_) {
    if (p.grad.empty()) continue;
    if (p.adam_m.empty()) {
      p.adam_m = Tensor(p.value.shape());
      p.adam_v = Tensor(p.value.shape());
    }
    for (long i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      p.adam_m[i] = beta1 * p.adam_m[i] + (1.0 - beta1) * g;
      p.adam_v[i] = beta2 * p.adam_v[i] + (1.0 - beta2) * g * g;
      const double mhat = p.adam_m[i] / bc1;
      const double vhat = p.adam_v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

long ParamStore::total_elems() const {
  long total = 0;
  for (const auto& [name, p] : params_) total += p.value.numel();
  return total;
}

// ---- Tape core ---------------------------------------------------------

Var Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&)> fn) {
  value_bytes_ += static_cast<std::size_t>(value.numel()) * sizeof(double);
  nodes_.push_back(Node{std::move(value), Tensor(), std::move(fn), needs_grad});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
  check(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid Var");
  return nodes_[v.id];
}
const Tape::Node& Tape::node(Var v) const {
  check(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid Var");
  return nodes_[v.id];
}

Var Tape::input(Tensor v) { return push(std::move(v), false, nullptr); }

Var Tape::param(ParamStore& store, const std::string& name, const Shape& shape,
                Init init) {
  Param* p = &store.get_or_create(name, shape, init);
  Var v = push(p->value, true, nullptr);
  const int id = v.id;
  nodes_[id].backprop = [id, p](Tape& t) {
    if (p->grad.empty()) p->grad = Tensor(t.nodes_[id].value.shape());
    const Tensor& g = t.nodes_[id].grad;
    for (long i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
  };
  return v;
}

const Tensor& Tape::val(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& nd = node(v);
  check(!nd.grad.empty(), "grad not computed for this Var");
  return nd.grad;
}

Tensor& Tape::grad_ref(int id) {
  Node& nd = nodes_[id];
  if (nd.grad.empty()) nd.grad = Tensor(nd.value.shape());
  return nd.grad;
}

void Tape::backward(Var loss) {
  Node& out = node(loss);
  check(out.value.numel() == 1, "backward: loss must be scalar");
  if (!out.needs_grad) return;  // loss independent of any parameter
  grad_ref(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& nd = nodes_[i];
    if (!nd.needs_grad || nd.grad.empty() || !nd.backprop) continue;
    nd.backprop(*this);
  }
}

// ---- elementwise -------------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  const Shape out_shape = broadcast_shape(va.shape(), vb.shape());
  Tensor out(out_shape);
  bc_loop(out_shape, va.shape(), vb.shape(),
          [&](long io, long ia, long ib) { out[io] = va[ia] + vb[ib]; });
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  const int ida = a.id, idb = b.id;
  Var v = push(std::move(out), ng, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, idb, ido](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Shape& os = g.shape();
    if (t.nodes_[ida].needs_grad) {
      Tensor& ga = t.grad_ref(ida);
      uc_loop(os, ga.shape(), [&](long io, long ia) { ga[ia] += g[io]; });
    }
    if (t.nodes_[idb].needs_grad) {
      Tensor& gb = t.grad_ref(idb);
      uc_loop(os, gb.shape(), [&](long io, long ib) { gb[ib] += g[io]; });
    }
  };
  return v;
}

Var Tape::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Tape::mul(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  const Shape out_shape = broadcast_shape(va.shape(), vb.shape());
  Tensor out(out_shape);
  bc_loop(out_shape, va.shape(), vb.shape(),
          [&](long io, long ia, long ib) { out[io] = va[ia] * vb[ib]; });
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  const int ida = a.id, idb = b.id;
  Var v = push(std::move(out), ng, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, idb, ido](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& va = t.nodes_[ida].value;
    const Tensor& vb = t.nodes_[idb].value;
    const Shape& os = g.shape();
    if (t.nodes_[ida].needs_grad) {
      Tensor& ga = t.grad_ref(ida);
      bc_loop(os, va.shape(), vb.shape(),
              [&](long io, long ia, long ib) { ga[ia] += g[io] * vb[ib]; });
    }
    if (t.nodes_[idb].needs_grad) {
      Tensor& gb = t.grad_ref(idb);
      bc_loop(os, va.shape(), vb.shape(),
              [&](long io, long ia, long ib) { gb[ib] += g[io] * va[ia]; });
    }
  };
  return v;
}

Var Tape::div(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  const Shape out_shape = broadcast_shape(va.shape(), vb.shape());
  Tensor out(out_shape);
  bc_loop(out_shape, va.shape(), vb.shape(),
          [&](long io, long ia, long ib) { out[io] = va[ia] / vb[ib]; });
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  const int ida = a.id, idb = b.id;
  Var v = push(std::move(out), ng, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, idb, ido](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& y = t.nodes_[ido].value;
    const Tensor& va = t.nodes_[ida].value;
    const Tensor& vb = t.nodes_[idb].value;
    const Shape& os = g.shape();
    if (t.nodes_[ida].needs_grad) {
      Tensor& ga = t.grad_ref(ida);
      bc_loop(os, va.shape(), vb.shape(),
              [&](long io, long ia, long ib) { ga[ia] += g[io] / vb[ib]; });
    }
    if (t.nodes_[idb].needs_grad) {
      Tensor& gb = t.grad_ref(idb);
      bc_loop(os, va.shape(), vb.shape(), [&](long io, long ia, long ib) {
        gb[ib] -= g[io] * y[io] / vb[ib];
      });
    }
  };
  return v;
}

Var Tape::scale(Var a, double s) {
  const Tensor& va = val(a);
  Tensor out(va.shape());
  for (long i = 0; i < va.numel(); ++i) out[i] = va[i] * s;
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, s](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    for (long i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  };
  return v;
}

Var Tape::add_const(Var a, double s) {
  const Tensor& va = val(a);
  Tensor out(va.shape());
  for (long i = 0; i < va.numel(); ++i) out[i] = va[i] + s;
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    for (long i = 0; i < g.numel(); ++i) ga[i] += g[i];
  };
  return v;
}

namespace {
enum class Un { kRelu, kSigmoid, kTanh, kSqrt, kExp, kLog };
}

// shared unary machinery: forward value and backward in terms of (x, y, dy)
static double un_fwd(Un op, double x) {
  switch (op) {
    case Un::kRelu: return x > 0.0 ? x : 0.0;
    case Un::kSigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Un::kTanh: return std::tanh(x);
    case Un::kSqrt: return std::sqrt(x);
    case Un::kExp: return std::exp(x);
    case Un::kLog: return std::log(x);
  }
  return 0.0;
}

static double un_bwd(Un op, double x, double y) {
  switch (op) {
    case Un::kRelu: return x > 0.0 ? 1.0 : 0.0;
    case Un::kSigmoid: return y * (1.0 - y);
    case Un::kTanh: return 1.0 - y * y;
    case Un::kSqrt: return 0.5 / y;
    case Un::kExp: return y;
    case Un::kLog: return 1.0 / x;
  }
  return 0.0;
}

Var Tape::relu(Var a) { return unary_impl(a, static_cast<int>(Un::kRelu)); }
Var Tape::sigmoid(Var a) {
  return unary_impl(a, static_cast<int>(Un::kSigmoid));
}
Var Tape::tanh_op(Var a) { return unary_impl(a, static_cast<int>(Un::kTanh)); }
Var Tape::sqrt_op(Var a) { return unary_impl(a, static_cast<int>(Un::kSqrt)); }
Var Tape::exp_op(Var a) { return unary_impl(a, static_cast<int>(Un::kExp)); }
Var Tape::log_op(Var a) { return unary_impl(a, static_cast<int>(Un::kLog)); }

Var Tape::unary_impl(Var a, int op_raw) {
  const Un op = static_cast<Un>(op_raw);
  const Tensor& va = val(a);
  Tensor out(va.shape());
  for (long i = 0; i < va.numel(); ++i) out[i] = un_fwd(op, va[i]);
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, op](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& x = t.nodes_[ida].value;
    const Tensor& y = t.nodes_[ido].value;
    Tensor& ga = t.grad_ref(ida);
    for (long i = 0; i < g.numel(); ++i)
      ga[i] += g[i] * un_bwd(op, x[i], y[i]);
  };
  return v;
}

// ---- shape / movement --------------------------------------------------

Var Tape::expand(Var a, const Shape& target) {
  const Tensor& va = val(a);
  check(broadcast_shape(va.shape(), target) == target,
        "expand: " + va.shape().str() + " does not broadcast to " +
            target.str());
  Tensor out(target);
  uc_loop(target, va.shape(), [&](long io, long ia) { out[io] = va[ia]; });
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    uc_loop(g.shape(), ga.shape(), [&](long io, long ia) { ga[ia] += g[io]; });
  };
  return v;
}

Var Tape::concat_channels(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  const Shape &sa = va.shape(), &sb = vb.shape();
  check(sa.b == sb.b && sa.n == sb.n && sa.k == sb.k,
        "concat_channels: shapes " + sa.str() + " vs " + sb.str());
  Shape os{sa.b, sa.c + sb.c, sa.n, sa.k};
  Tensor out(os);
  const long plane = static_cast<long>(sa.n) * sa.k;
  for (int bi = 0; bi < os.b; ++bi) {
    std::copy(va.data() + bi * sa.c * plane, va.data() + (bi + 1) * sa.c * plane,
              out.data() + bi * os.c * plane);
    std::copy(vb.data() + bi * sb.c * plane, vb.data() + (bi + 1) * sb.c * plane,
              out.data() + bi * os.c * plane + sa.c * plane);
  }
  const int ida = a.id, idb = b.id;
  Var v = push(std::move(out), node(a).needs_grad || node(b).needs_grad,
               nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, idb, ido, plane](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Shape& os = g.shape();
    const int ca = t.nodes_[ida].value.shape().c;
    const int cb = t.nodes_[idb].value.shape().c;
    if (t.nodes_[ida].needs_grad) {
      Tensor& ga = t.grad_ref(ida);
      for (int bi = 0; bi < os.b; ++bi)
        for (long i = 0; i < ca * plane; ++i)
          ga[bi * ca * plane + i] += g[bi * os.c * plane + i];
    }
    if (t.nodes_[idb].needs_grad) {
      Tensor& gb = t.grad_ref(idb);
      for (int bi = 0; bi < os.b; ++bi)
        for (long i = 0; i < cb * plane; ++i)
          gb[bi * cb * plane + i] += g[bi * os.c * plane + ca * plane + i];
    }
  };
  return v;
}

Var Tape::concat_items(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_items: no parts");
  const Shape& s0 = val(parts[0]).shape();
  int total_n = 0;
  for (Var p : parts) {
    const Shape& sp = val(p).shape();
    check(sp.b == s0.b && sp.c == s0.c && sp.k == s0.k,
          "concat_items: shapes " + s0.str() + " vs " + sp.str());
    total_n += sp.n;
  }
  Shape os{s0.b, s0.c, total_n, s0.k};
  Tensor out(os);
  std::vector<int> offsets(parts.size());
  {
    int off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      const Tensor& vp = val(parts[p]);
      const Shape& sp = vp.shape();
      for (int bi = 0; bi < sp.b; ++bi)
        for (int ci = 0; ci < sp.c; ++ci)
          for (int ni = 0; ni < sp.n; ++ni)
            for (int ki = 0; ki < sp.k; ++ki)
              out.at(bi, ci, off + ni, ki) = vp.at(bi, ci, ni, ki);
      off += sp.n;
    }
  }
  bool ng = false;
  std::vector<int> ids(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    ids[p] = parts[p].id;
    ng = ng || node(parts[p]).needs_grad;
  }
  Var v = push(std::move(out), ng, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ids, offsets, ido](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!t.nodes_[ids[p]].needs_grad) continue;
      Tensor& gp = t.grad_ref(ids[p]);
      const Shape& sp = gp.shape();
      for (int bi = 0; bi < sp.b; ++bi)
        for (int ci = 0; ci < sp.c; ++ci)
          for (int ni = 0; ni < sp.n; ++ni)
            for (int ki = 0; ki < sp.k; ++ki)
              gp.at(bi, ci, ni, ki) += g.at(bi, ci, offsets[p] + ni, ki);
    }
  };
  return v;
}

Var Tape::select_channels(Var a, const std::vector<std::vector<int>>& idx) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(sa.k == 1, "select_channels: needs k == 1");
  check(static_cast<int>(idx.size()) == sa.b,
        "select_channels: bad batch size");
  for (const auto& row : idx)
    check(static_cast<int>(row.size()) == sa.n,
          "select_channels: index list must have N entries");
  Shape os{sa.b, 1, sa.n, 1};
  Tensor out(os);
  for (int bi = 0; bi < sa.b; ++bi)
    for (int ni = 0; ni < sa.n; ++ni) {
      const int c = idx[bi][ni];
      check(c >= 0 && c < sa.c, "select_channels: channel out of range");
      out.at(bi, 0, ni, 0) = va.at(bi, c, ni, 0);
    }
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  const std::vector<std::vector<int>> ix = idx;
  nodes_[ido].backprop = [ida, ido, ix](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    const Shape& os = g.shape();
    for (int bi = 0; bi < os.b; ++bi)
      for (int ni = 0; ni < os.n; ++ni)
        ga.at(bi, ix[bi][ni], ni, 0) += g.at(bi, 0, ni, 0);
  };
  return v;
}

Var Tape::slice_channels(Var a, int start, int count) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(start >= 0 && count >= 1 && start + count <= sa.c,
        "slice_channels: bad range");
  Shape os{sa.b, count, sa.n, sa.k};
  Tensor out(os);
  const long plane = static_cast<long>(sa.n) * sa.k;
  for (int bi = 0; bi < os.b; ++bi)
    std::copy(va.data() + (bi * sa.c + start) * plane,
              va.data() + (bi * sa.c + start + count) * plane,
              out.data() + bi * count * plane);
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, start, count, plane](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    const int ca = ga.shape().c;
    for (int bi = 0; bi < g.shape().b; ++bi)
      for (long i = 0; i < count * plane; ++i)
        ga[(bi * ca + start) * plane + i] += g[bi * count * plane + i];
  };
  return v;
}

Var Tape::slice_batch(Var a, int b) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(b >= 0 && b < sa.b, "slice_batch: index out of range");
  Shape os{1, sa.c, sa.n, sa.k};
  Tensor out(os);
  const long chunk = os.numel();
  std::copy(va.data() + b * chunk, va.data() + (b + 1) * chunk, out.data());
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, b, chunk](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    for (long i = 0; i < chunk; ++i) ga[b * chunk + i] += g[i];
  };
  return v;
}

Var Tape::permute_batch(Var a, const std::vector<int>& perm) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(static_cast<int>(perm.size()) == sa.b, "permute_batch: bad length");
  Tensor out(sa);
  const long chunk = static_cast<long>(sa.c) * sa.n * sa.k;
  for (int bi = 0; bi < sa.b; ++bi) {
    check(perm[bi] >= 0 && perm[bi] < sa.b, "permute_batch: bad index");
    std::copy(va.data() + perm[bi] * chunk, va.data() + (perm[bi] + 1) * chunk,
              out.data() + bi * chunk);
  }
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  const std::vector<int> p = perm;
  nodes_[ido].backprop = [ida, ido, p, chunk](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    for (int bi = 0; bi < g.shape().b; ++bi)
      for (long i = 0; i < chunk; ++i) ga[p[bi] * chunk + i] += g[bi * chunk + i];
  };
  return v;
}

Var Tape::gather_items(Var a, const std::vector<std::vector<int>>& idx) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(sa.k == 1, "gather_items: needs k == 1");
  check(static_cast<int>(idx.size()) == sa.b, "gather_items: bad batch size");
  const int n2 = static_cast<int>(idx[0].size());
  for (const auto& row : idx)
    check(static_cast<int>(row.size()) == n2,
          "gather_items: ragged index lists");
  Shape os{sa.b, sa.c, n2, 1};
  Tensor out(os);
  for (int bi = 0; bi < sa.b; ++bi)
    for (int ci = 0; ci < sa.c; ++ci)
      for (int j = 0; j < n2; ++j) {
        const int src = idx[bi][j];
        check(src >= 0 && src < sa.n, "gather_items: index out of range");
        out.at(bi, ci, j, 0) = va.at(bi, ci, src, 0);
      }
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  const std::vector<std::vector<int>> ix = idx;
  nodes_[ido].backprop = [ida, ido, ix](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    const Shape& os = g.shape();
    for (int bi = 0; bi < os.b; ++bi)
      for (int ci = 0; ci < os.c; ++ci)
        for (int j = 0; j < os.n; ++j)
          ga.at(bi, ci, ix[bi][j], 0) += g.at(bi, ci, j, 0);
  };
  return v;
}

Var Tape::gather_neighbors(Var a, const std::vector<std::vector<int>>& idx,
                           int k) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(sa.k == 1, "gather_neighbors: needs k == 1");
  check(static_cast<int>(idx.size()) == sa.b && k >= 1,
        "gather_neighbors: bad arguments");
  for (const auto& row : idx)
    check(static_cast<int>(row.size()) == static_cast<long>(sa.n) * k,
          "gather_neighbors: index list must be N*k");
  Shape os{sa.b, sa.c, sa.n, k};
  Tensor out(os);
  for (int bi = 0; bi < sa.b; ++bi)
    for (int ci = 0; ci < sa.c; ++ci)
      for (int ni = 0; ni < sa.n; ++ni)
        for (int j = 0; j < k; ++j) {
          const int src = idx[bi][ni * k + j];
          check(src >= 0 && src < sa.n, "gather_neighbors: index range");
          out.at(bi, ci, ni, j) = va.at(bi, ci, src, 0);
        }
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  const std::vector<std::vector<int>> ix = idx;
  nodes_[ido].backprop = [ida, ido, ix](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    const Shape& os = g.shape();
    for (int bi = 0; bi < os.b; ++bi)
      for (int ci = 0; ci < os.c; ++ci)
        for (int ni = 0; ni < os.n; ++ni)
          for (int j = 0; j < os.k; ++j)
            ga.at(bi, ci, ix[bi][ni * os.k + j], 0) += g.at(bi, ci, ni, j);
  };
  return v;
}

// ---- reductions --------------------------------------------------------

Var Tape::reduce_items(Var a, bool over_n, bool over_k, Reduce mode) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  check(over_n || over_k, "reduce_items: nothing to reduce");
  Shape os{sa.b, sa.c, over_n ? 1 : sa.n, over_k ? 1 : sa.k};
  const long group = (over_n ? static_cast<long>(sa.n) : 1) *
                     (over_k ? static_cast<long>(sa.k) : 1);
  Tensor out(os);
  std::vector<long> argmax;
  if (mode == Reduce::kMax) argmax.assign(os.numel(), -1);

  long io = 0;
  for (int bi = 0; bi < os.b; ++bi)
    for (int ci = 0; ci < os.c; ++ci)
      for (int ni = 0; ni < os.n; ++ni)
        for (int ki = 0; ki < os.k; ++ki, ++io) {
          double acc = mode == Reduce::kMax
                           ? -std::numeric_limits<double>::infinity()
                           : 0.0;
          for (int nn = over_n ? 0 : ni; nn <= (over_n ? sa.n - 1 : ni); ++nn)
            for (int kk = over_k ? 0 : ki; kk <= (over_k ? sa.k - 1 : ki);
                 ++kk) {
              const double x = va.at(bi, ci, nn, kk);
              if (mode == Reduce::kMax) {
                if (x > acc) {
                  acc = x;
                  argmax[io] = va.index(bi, ci, nn, kk);
                }
              } else {
                acc += x;
              }
            }
          out[io] = mode == Reduce::kMean ? acc / static_cast<double>(group)
                                          : acc;
        }

  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, over_n, over_k, mode, group,
                          argmax = std::move(argmax)](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    const Shape& os = g.shape();
    const Shape& sa = ga.shape();
    if (mode == Reduce::kMax) {
      for (long io = 0; io < g.numel(); ++io)
        if (argmax[io] >= 0) ga[argmax[io]] += g[io];
      return;
    }
    const double w = mode == Reduce::kMean ? 1.0 / static_cast<double>(group)
                                           : 1.0;
    long io = 0;
    for (int bi = 0; bi < os.b; ++bi)
      for (int ci = 0; ci < os.c; ++ci)
        for (int ni = 0; ni < os.n; ++ni)
          for (int ki = 0; ki < os.k; ++ki, ++io)
            for (int nn = over_n ? 0 : ni; nn <= (over_n ? sa.n - 1 : ni);
                 ++nn)
              for (int kk = over_k ? 0 : ki; kk <= (over_k ? sa.k - 1 : ki);
                   ++kk)
                ga.at(bi, ci, nn, kk) += g[io] * w;
  };
  return v;
}

Var Tape::reduce_channels_sum(Var a) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  Shape os{sa.b, 1, sa.n, sa.k};
  Tensor out(os);
  for (int bi = 0; bi < sa.b; ++bi)
    for (int ci = 0; ci < sa.c; ++ci)
      for (int ni = 0; ni < sa.n; ++ni)
        for (int ki = 0; ki < sa.k; ++ki)
          out.at(bi, 0, ni, ki) += va.at(bi, ci, ni, ki);
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Tensor& ga = t.grad_ref(ida);
    const Shape& sa = ga.shape();
    for (int bi = 0; bi < sa.b; ++bi)
      for (int ci = 0; ci < sa.c; ++ci)
        for (int ni = 0; ni < sa.n; ++ni)
          for (int ki = 0; ki < sa.k; ++ki)
            ga.at(bi, ci, ni, ki) += g.at(bi, 0, ni, ki);
  };
  return v;
}

// ---- normalizations ----------------------------------------------------

namespace {
bool g_cn_degenerate_warned = false;
}

Var Tape::context_norm(Var a, double eps) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  const long group = static_cast<long>(sa.n) * sa.k;
  if (group == 1 && !g_cn_degenerate_warned) {
    g_cn_degenerate_warned = true;
    std::fprintf(stderr,
                 "corrmoe: context normalization over a single item is "
                 "degenerate; emitting zeros\n");
  }
  Tensor out(sa);
  std::vector<double> inv_sigma(static_cast<std::size_t>(sa.b) * sa.c);
  for (int bi = 0; bi < sa.b; ++bi)
    for (int ci = 0; ci < sa.c; ++ci) {
      const long base = (static_cast<long>(bi) * sa.c + ci) * group;
      double mu = 0.0;
      for (long i = 0; i < group; ++i) mu += va[base + i];
      mu /= static_cast<double>(group);
      double var = 0.0;
      for (long i = 0; i < group; ++i) {
        const double d = va[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(group);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[static_cast<std::size_t>(bi) * sa.c + ci] = is;
      for (long i = 0; i < group; ++i) out[base + i] = (va[base + i] - mu) * is;
    }
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, group,
                          inv_sigma = std::move(inv_sigma)](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& y = t.nodes_[ido].value;
    Tensor& ga = t.grad_ref(ida);
    const Shape& sa = ga.shape();
    for (int bi = 0; bi < sa.b; ++bi)
      for (int ci = 0; ci < sa.c; ++ci) {
        const long base = (static_cast<long>(bi) * sa.c + ci) * group;
        double mg = 0.0, mgy = 0.0;
        for (long i = 0; i < group; ++i) {
          mg += g[base + i];
          mgy += g[base + i] * y[base + i];
        }
        mg /= static_cast<double>(group);
        mgy /= static_cast<double>(group);
        const double is = inv_sigma[static_cast<std::size_t>(bi) * sa.c + ci];
        for (long i = 0; i < group; ++i)
          ga[base + i] += is * (g[base + i] - mg - y[base + i] * mgy);
      }
  };
  return v;
}

Var Tape::layer_norm_channels(Var a, double eps) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  const long cs = static_cast<long>(sa.n) * sa.k;  // channel stride
  Tensor out(sa);
  std::vector<double> inv_sigma(static_cast<std::size_t>(sa.b) * sa.n * sa.k);
  for (int bi = 0; bi < sa.b; ++bi)
    for (int ni = 0; ni < sa.n; ++ni)
      for (int ki = 0; ki < sa.k; ++ki) {
        const long base = va.index(bi, 0, ni, ki);
        double mu = 0.0;
        for (int ci = 0; ci < sa.c; ++ci) mu += va[base + ci * cs];
        mu /= sa.c;
        double var = 0.0;
        for (int ci = 0; ci < sa.c; ++ci) {
          const double d = va[base + ci * cs] - mu;
          var += d * d;
        }
        var /= sa.c;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[(static_cast<std::size_t>(bi) * sa.n + ni) * sa.k + ki] = is;
        for (int ci = 0; ci < sa.c; ++ci)
          out[base + ci * cs] = (va[base + ci * cs] - mu) * is;
      }
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, cs, inv_sigma = std::move(inv_sigma)](
                             Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& y = t.nodes_[ido].value;
    Tensor& ga = t.grad_ref(ida);
    const Shape& sa = ga.shape();
    for (int bi = 0; bi < sa.b; ++bi)
      for (int ni = 0; ni < sa.n; ++ni)
        for (int ki = 0; ki < sa.k; ++ki) {
          const long base = ga.index(bi, 0, ni, ki);
          double mg = 0.0, mgy = 0.0;
          for (int ci = 0; ci < sa.c; ++ci) {
            mg += g[base + ci * cs];
            mgy += g[base + ci * cs] * y[base + ci * cs];
          }
          mg /= sa.c;
          mgy /= sa.c;
          const double is =
              inv_sigma[(static_cast<std::size_t>(bi) * sa.n + ni) * sa.k + ki];
          for (int ci = 0; ci < sa.c; ++ci)
            ga[base + ci * cs] +=
                is * (g[base + ci * cs] - mg - y[base + ci * cs] * mgy);
        }
  };
  return v;
}

namespace {

// softmax over a strided group; shared by channel and item variants
void softmax_groups(const Tensor& x, Tensor& y, long n_groups, long group,
                    long stride, const std::function<long(long)>& base_of) {
  for (long gidx = 0; gidx < n_groups; ++gidx) {
    const long base = base_of(gidx);
    double mx = -std::numeric_limits<double>::infinity();
    for (long i = 0; i < group; ++i) mx = std::max(mx, x[base + i * stride]);
    double sum = 0.0;
    for (long i = 0; i < group; ++i) {
      const double e = std::exp(x[base + i * stride] - mx);
      y[base + i * stride] = e;
      sum += e;
    }
    for (long i = 0; i < group; ++i) y[base + i * stride] /= sum;
  }
}

void softmax_groups_bwd(const Tensor& g, const Tensor& y, Tensor& ga,
                        long n_groups, long group, long stride,
                        const std::function<long(long)>& base_of) {
  for (long gidx = 0; gidx < n_groups; ++gidx) {
    const long base = base_of(gidx);
    double dot = 0.0;
    for (long i = 0; i < group; ++i)
      dot += g[base + i * stride] * y[base + i * stride];
    for (long i = 0; i < group; ++i)
      ga[base + i * stride] +=
          y[base + i * stride] * (g[base + i * stride] - dot);
  }
}

}  // namespace

Var Tape::softmax_channels(Var a) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  const long cs = static_cast<long>(sa.n) * sa.k;
  const long n_groups = static_cast<long>(sa.b) * sa.n * sa.k;
  Tensor out(sa);
  auto base_of = [sa, cs](long gidx) {
    const long bi = gidx / (static_cast<long>(sa.n) * sa.k);
    const long rem = gidx % (static_cast<long>(sa.n) * sa.k);
    return bi * sa.c * cs + rem;
  };
  softmax_groups(va, out, n_groups, sa.c, cs, base_of);
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, cs, n_groups](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& y = t.nodes_[ido].value;
    Tensor& ga = t.grad_ref(ida);
    const Shape& sa = ga.shape();
    auto base_of = [sa, cs](long gidx) {
      const long bi = gidx / (static_cast<long>(sa.n) * sa.k);
      const long rem = gidx % (static_cast<long>(sa.n) * sa.k);
      return bi * sa.c * cs + rem;
    };
    softmax_groups_bwd(g, y, ga, n_groups, sa.c, cs, base_of);
  };
  return v;
}

Var Tape::softmax_items(Var a) {
  const Tensor& va = val(a);
  const Shape& sa = va.shape();
  const long n_groups = static_cast<long>(sa.b) * sa.c * sa.k;
  Tensor out(sa);
  auto base_of = [sa](long gidx) {
    const long bc = gidx / sa.k;
    const long ki = gidx % sa.k;
    return bc * sa.n * sa.k + ki;
  };
  softmax_groups(va, out, n_groups, sa.n, sa.k, base_of);
  const int ida = a.id;
  Var v = push(std::move(out), node(a).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [ida, ido, n_groups](Tape& t) {
    if (!t.nodes_[ida].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& y = t.nodes_[ido].value;
    Tensor& ga = t.grad_ref(ida);
    const Shape& sa = ga.shape();
    auto base_of = [sa](long gidx) {
      const long bc = gidx / sa.k;
      const long ki = gidx % sa.k;
      return bc * sa.n * sa.k + ki;
    };
    softmax_groups_bwd(g, y, ga, n_groups, sa.n, sa.k, base_of);
  };
  return v;
}

// ---- contractions ------------------------------------------------------

Var Tape::conv1x1(Var x, Var w, Var bias) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  const Shape& sx = vx.shape();
  const Shape& sw = vw.shape();
  check(sw.b == 1 && sw.k == 1, "conv1x1: weight must be (1,Cout,Cin,1)");
  check(sw.n == sx.c, "conv1x1: Cin mismatch: weight " + sw.str() +
                          " input " + sx.str());
  const int cout = sw.c, cin = sw.n;
  const long cols = static_cast<long>(sx.n) * sx.k;
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Shape& sb = val(bias).shape();
    check(sb.b == 1 && sb.c == cout && sb.n == 1 && sb.k == 1,
          "conv1x1: bias must be (1,Cout,1,1)");
  }
  Shape os{sx.b, cout, sx.n, sx.k};
  Tensor out(os);
  CMapMat W(vw.data(), cout, cin);
  for (int bi = 0; bi < sx.b; ++bi) {
    CMapMat X(vx.data() + static_cast<long>(bi) * cin * cols, cin, cols);
    MapMat O(out.data() + static_cast<long>(bi) * cout * cols, cout, cols);
    O.noalias() = W * X;
    if (has_bias) {
      const Tensor& vb = val(bias);
      for (int o = 0; o < cout; ++o) O.row(o).array() += vb[o];
    }
  }
  const int idx_ = x.id, idw = w.id, idb = has_bias ? bias.id : -1;
  const bool ng = node(x).needs_grad || node(w).needs_grad ||
                  (has_bias && node(bias).needs_grad);
  Var v = push(std::move(out), ng, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [idx_, idw, idb, ido, cout, cin, cols](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& vx = t.nodes_[idx_].value;
    const Tensor& vw = t.nodes_[idw].value;
    const int nb = g.shape().b;
    if (t.nodes_[idw].needs_grad) {
      MapMat dW(t.grad_ref(idw).data(), cout, cin);
      for (int bi = 0; bi < nb; ++bi) {
        CMapMat G(g.data() + static_cast<long>(bi) * cout * cols, cout, cols);
        CMapMat X(vx.data() + static_cast<long>(bi) * cin * cols, cin, cols);
        dW.noalias() += G * X.transpose();
      }
    }
    if (t.nodes_[idx_].needs_grad) {
      CMapMat W(vw.data(), cout, cin);
      Tensor& gx = t.grad_ref(idx_);
      for (int bi = 0; bi < nb; ++bi) {
        CMapMat G(g.data() + static_cast<long>(bi) * cout * cols, cout, cols);
        MapMat dX(gx.data() + static_cast<long>(bi) * cin * cols, cin, cols);
        dX.noalias() += W.transpose() * G;
      }
    }
    if (idb >= 0 && t.nodes_[idb].needs_grad) {
      Tensor& gb = t.grad_ref(idb);
      for (int bi = 0; bi < nb; ++bi) {
        CMapMat G(g.data() + static_cast<long>(bi) * cout * cols, cout, cols);
        for (int o = 0; o < cout; ++o) gb[o] += G.row(o).sum();
      }
    }
  };
  return v;
}

Var Tape::bmm_nt(Var x, Var y) {
  const Tensor& vx = val(x);
  const Tensor& vy = val(y);
  const Shape& sx = vx.shape();
  const Shape& sy = vy.shape();
  check(sx.k == 1 && sy.k == 1 && sx.b == sy.b && sx.n == sy.n,
        "bmm_nt: shapes " + sx.str() + " vs " + sy.str());
  Shape os{sx.b, sx.c, sy.c, 1};
  Tensor out(os);
  for (int bi = 0; bi < sx.b; ++bi) {
    CMapMat X(vx.data() + static_cast<long>(bi) * sx.c * sx.n, sx.c, sx.n);
    CMapMat Y(vy.data() + static_cast<long>(bi) * sy.c * sy.n, sy.c, sy.n);
    MapMat O(out.data() + static_cast<long>(bi) * sx.c * sy.c, sx.c, sy.c);
    O.noalias() = X * Y.transpose();
  }
  const int idx_ = x.id, idy = y.id;
  Var v = push(std::move(out), node(x).needs_grad || node(y).needs_grad,
               nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [idx_, idy, ido](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& vx = t.nodes_[idx_].value;
    const Tensor& vy = t.nodes_[idy].value;
    const Shape& sx = vx.shape();
    const Shape& sy = vy.shape();
    for (int bi = 0; bi < sx.b; ++bi) {
      CMapMat G(g.data() + static_cast<long>(bi) * sx.c * sy.c, sx.c, sy.c);
      CMapMat X(vx.data() + static_cast<long>(bi) * sx.c * sx.n, sx.c, sx.n);
      CMapMat Y(vy.data() + static_cast<long>(bi) * sy.c * sy.n, sy.c, sy.n);
      if (t.nodes_[idx_].needs_grad) {
        MapMat dX(t.grad_ref(idx_).data() + static_cast<long>(bi) * sx.c * sx.n,
                  sx.c, sx.n);
        dX.noalias() += G * Y;
      }
      if (t.nodes_[idy].needs_grad) {
        MapMat dY(t.grad_ref(idy).data() + static_cast<long>(bi) * sy.c * sy.n,
                  sy.c, sy.n);
        dY.noalias() += G.transpose() * X;
      }
    }
  };
  return v;
}

Var Tape::bmm_nn(Var g_in, Var y) {
  const Tensor& vg = val(g_in);
  const Tensor& vy = val(y);
  const Shape& sg = vg.shape();
  const Shape& sy = vy.shape();
  check(sg.k == 1 && sy.k == 1 && sg.b == sy.b && sg.n == sy.c,
        "bmm_nn: shapes " + sg.str() + " vs " + sy.str());
  Shape os{sg.b, sg.c, sy.n, 1};
  Tensor out(os);
  for (int bi = 0; bi < sg.b; ++bi) {
    CMapMat G(vg.data() + static_cast<long>(bi) * sg.c * sg.n, sg.c, sg.n);
    CMapMat Y(vy.data() + static_cast<long>(bi) * sy.c * sy.n, sy.c, sy.n);
    MapMat O(out.data() + static_cast<long>(bi) * sg.c * sy.n, sg.c, sy.n);
    O.noalias() = G * Y;
  }
  const int idg = g_in.id, idy = y.id;
  Var v = push(std::move(out), node(g_in).needs_grad || node(y).needs_grad,
               nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [idg, idy, ido](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& vg = t.nodes_[idg].value;
    const Tensor& vy = t.nodes_[idy].value;
    const Shape& sg = vg.shape();
    const Shape& sy = vy.shape();
    for (int bi = 0; bi < sg.b; ++bi) {
      CMapMat Gout(g.data() + static_cast<long>(bi) * sg.c * sy.n, sg.c, sy.n);
      CMapMat Gm(vg.data() + static_cast<long>(bi) * sg.c * sg.n, sg.c, sg.n);
      CMapMat Y(vy.data() + static_cast<long>(bi) * sy.c * sy.n, sy.c, sy.n);
      if (t.nodes_[idg].needs_grad) {
        MapMat dG(t.grad_ref(idg).data() + static_cast<long>(bi) * sg.c * sg.n,
                  sg.c, sg.n);
        dG.noalias() += Gout * Y.transpose();
      }
      if (t.nodes_[idy].needs_grad) {
        MapMat dY(t.grad_ref(idy).data() + static_cast<long>(bi) * sy.c * sy.n,
                  sy.c, sy.n);
        dY.noalias() += Gm.transpose() * Gout;
      }
    }
  };
  return v;
}

Var Tape::neighbor_group_conv(Var x, Var w, Var bias, int group) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  const Shape& sx = vx.shape();
  const Shape& sw = vw.shape();
  if (group < 1 || sx.k % group != 0)
    throw ConfigError("neighbor_group_conv: neighbor count " +
                      std::to_string(sx.k) + " not divisible by group " +
                      std::to_string(group));
  check(sw.b == 1 && sw.n == sx.c && sw.k == group,
        "neighbor_group_conv: weight must be (1,Cout,Cin,g)");
  const int cout = sw.c, cin = sw.n, jout = sx.k / group;
  const bool has_bias = bias.valid();
  if (has_bias)
    check(val(bias).shape() == Shape{1, cout, 1, 1},
          "neighbor_group_conv: bias must be (1,Cout,1,1)");

  Shape os{sx.b, cout, sx.n, jout};
  Tensor out(os);
  const long cols = static_cast<long>(sx.n) * jout;
  RowMat Xt(cin * group, cols);
  CMapMat W(vw.data(), cout, cin * group);
  for (int bi = 0; bi < sx.b; ++bi) {
    for (int ci = 0; ci < cin; ++ci)
      for (int tt = 0; tt < group; ++tt)
        for (int ni = 0; ni < sx.n; ++ni)
          for (int j = 0; j < jout; ++j)
            Xt(ci * group + tt, static_cast<long>(ni) * jout + j) =
                vx.at(bi, ci, ni, j * group + tt);
    MapMat O(out.data() + static_cast<long>(bi) * cout * cols, cout, cols);
    O.noalias() = W * Xt;
    if (has_bias) {
      const Tensor& vb = val(bias);
      for (int o = 0; o < cout; ++o) O.row(o).array() += vb[o];
    }
  }
  const int idx_ = x.id, idw = w.id, idb = has_bias ? bias.id : -1;
  const bool ng = node(x).needs_grad || node(w).needs_grad ||
                  (has_bias && node(bias).needs_grad);
  Var v = push(std::move(out), ng, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [idx_, idw, idb, ido, cout, cin, group, jout,
                          cols](Tape& t) {
    const Tensor& g = t.nodes_[ido].grad;
    const Tensor& vx = t.nodes_[idx_].value;
    const Tensor& vw = t.nodes_[idw].value;
    const Shape& sx = vx.shape();
    RowMat Xt(cin * group, cols);
    CMapMat W(vw.data(), cout, cin * group);
    for (int bi = 0; bi < sx.b; ++bi) {
      for (int ci = 0; ci < cin; ++ci)
        for (int tt = 0; tt < group; ++tt)
          for (int ni = 0; ni < sx.n; ++ni)
            for (int j = 0; j < jout; ++j)
              Xt(ci * group + tt, static_cast<long>(ni) * jout + j) =
                  vx.at(bi, ci, ni, j * group + tt);
      CMapMat G(g.data() + static_cast<long>(bi) * cout * cols, cout, cols);
      if (t.nodes_[idw].needs_grad) {
        MapMat dW(t.grad_ref(idw).data(), cout, cin * group);
        dW.noalias() += G * Xt.transpose();
      }
      if (t.nodes_[idx_].needs_grad) {
        RowMat dXt = W.transpose() * G;
        Tensor& gx = t.grad_ref(idx_);
        for (int ci = 0; ci < cin; ++ci)
          for (int tt = 0; tt < group; ++tt)
            for (int ni = 0; ni < sx.n; ++ni)
              for (int j = 0; j < jout; ++j)
                gx.at(bi, ci, ni, j * group + tt) +=
                    dXt(ci * group + tt, static_cast<long>(ni) * jout + j);
      }
      if (idb >= 0 && t.nodes_[idb].needs_grad) {
        Tensor& gb = t.grad_ref(idb);
        for (int o = 0; o < cout; ++o) gb[o] += G.row(o).sum();
      }
    }
  };
  return v;
}

// ---- task nodes --------------------------------------------------------

Var Tape::eight_point(Var w,
                      const Eigen::Matrix<double, Eigen::Dynamic, 4>& coords) {
  const Tensor& vw = val(w);
  const Shape& sw = vw.shape();
  const int n = static_cast<int>(coords.rows());
  check(sw == Shape{1, 1, n, 1} && n >= 8,
        "eight_point: weights must be (1,1,N,1) with N >= 8");
  int positive = 0;
  for (int i = 0; i < n; ++i) {
    if (vw[i] < 0.0)
      throw PreconditionError("eight_point: negative weight");
    if (vw[i] > 0.0) ++positive;
  }
  if (positive < 8)
    throw PreconditionError("eight_point: fewer than 8 positive weights");

  const Eigen::Matrix<double, Eigen::Dynamic, 9> design =
      geom::detail::epipolar_design(coords);
  Eigen::VectorXd wv(n);
  for (int i = 0; i < n; ++i) wv(i) = vw[i];
  const geom::detail::WeightedNormalEig eig =
      geom::detail::weighted_normal_eig(design, wv);
  const Eigen::Matrix<double, 9, 1>& lam = eig.eigvals;
  const Eigen::Matrix<double, 9, 9>& uvecs = eig.eigvecs;

  Eigen::Matrix3d graw;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) graw(r, c) = uvecs(3 * r + c, 0);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      graw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d U = svd.matrixU();
  const Eigen::Matrix3d V = svd.matrixV();
  const Eigen::Vector3d s = svd.singularValues();
  Eigen::Matrix3d e = U * Eigen::Vector3d(1, 1, 0).asDiagonal() *
                      V.transpose() / std::numbers::sqrt2;
  double flip = 1.0;
  const int pivot = geom::detail::sign_pivot_index(e);
  if (e(pivot / 3, pivot % 3) < 0.0) {
    e = -e;
    flip = -1.0;
  }

  Tensor out({1, 3, 3, 1});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.at(0, r, c, 0) = e(r, c);

  const int idw = w.id;
  Var v = push(std::move(out), node(w).needs_grad, nullptr);
  const int ido = v.id;
  nodes_[ido].backprop = [idw, ido, design, lam, uvecs, U, V, s,
                          flip](Tape& t) {
    if (!t.nodes_[idw].needs_grad) return;
    const Tensor& g = t.nodes_[ido].grad;
    Eigen::Matrix3d ebar;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) ebar(r, c) = flip * g.at(0, r, c, 0);

    // adjoint through E = U diag(1,1,0) V^T / sqrt(2): E ignores the
    // singular values, so only the U and V terms of the SVD adjoint remain
    Eigen::Matrix3d d = Eigen::Vector3d(1, 1, 0).asDiagonal();
    const Eigen::Matrix3d ubar = ebar * V * d / std::numbers::sqrt2;
    const Eigen::Matrix3d vbar = ebar.transpose() * U * d / std::numbers::sqrt2;

    Eigen::Matrix3d F = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        if (i == j) continue;
        double den = (s(j) - s(i)) * (s(j) + s(i));
        if (std::abs(den) < 1e-12) den = den < 0.0 ? -1e-12 : 1e-12;
        F(i, j) = 1.0 / den;
      }
    const Eigen::Matrix3d pu = U.transpose() * ubar;
    const Eigen::Matrix3d pv = V.transpose() * vbar;
    const Eigen::Matrix3d su = F.cwiseProduct(pu - pu.transpose());
    const Eigen::Matrix3d sv = F.cwiseProduct(pv - pv.transpose());
    const Eigen::Matrix3d gbar =
        U * (su * s.asDiagonal() + s.asDiagonal() * sv) * V.transpose();

    Eigen::Matrix<double, 9, 1> u0bar;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) u0bar(3 * r + c) = gbar(r, c);

    // adjoint through the smallest eigenvector of M = A^T diag(w^2) A
    const Eigen::Matrix<double, 9, 1> u0 = uvecs.col(0);
    Eigen::Matrix<double, 9, 1> z = Eigen::Matrix<double, 9, 1>::Zero();
    for (int j = 1; j < 9; ++j) {
      double den = lam(0) - lam(j);
      if (std::abs(den) < 1e-12) den = den < 0.0 ? -1e-12 : 1e-12;
      z += (u0bar.dot(uvecs.col(j)) / den) * uvecs.col(j);
    }
    const Tensor& vw = t.nodes_[idw].value;
    Tensor& gw = t.grad_ref(idw);
    for (int i = 0; i < design.rows(); ++i) {
      const double au = design.row(i).dot(u0);
      const double az = design.row(i).dot(z);
      gw[i] += 2.0 * vw[i] * au * az;
    }
  };
  return v;
}

Var Tape::epipolar_quotient_mean(
    Var e, const Eigen::Matrix<double, Eigen::Dynamic, 4>& pairs) {
  const Tensor& ve = val(e);
  check(ve.shape() == Shape{1, 3, 3, 1},
        "epipolar_quotient_mean: e must be (1,3,3,1)");
  const int p = static_cast<int>(pairs.rows());
  check(p >= 1, "epipolar_quotient_mean: no pairs");
  Eigen::Matrix3d em;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) em(r, c) = ve.at(0, r, c, 0);

  double total = 0.0;
  for (int i = 0; i < p; ++i)
    total += geom::symmetric_epipolar_distance(em, pairs.row(i));
  Tensor out = Tensor::scalar(total / p);

  const int ide = e.id;
  Var v = push(std::move(out), node(e).needs_grad, nullptr);
  const int ido = v.id;
  const Eigen::Matrix<double, Eigen::Dynamic, 4> pr = pairs;
  nodes_[ido].backprop = [ide, ido, pr](Tape& t) {
    if (!t.nodes_[ide].needs_grad) return;
    const double gout = t.nodes_[ido].grad[0] / pr.rows();
    const Tensor& ve = t.nodes_[ide].value;
    Eigen::Matrix3d em;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) em(r, c) = ve.at(0, r, c, 0);
    Eigen::Matrix3d acc = Eigen::Matrix3d::Zero();
    for (int i = 0; i < pr.rows(); ++i) {
      const Eigen::Vector3d pt(pr(i, 0), pr(i, 1), 1.0);
      const Eigen::Vector3d pp(pr(i, 2), pr(i, 3), 1.0);
      const Eigen::Vector3d u = em * pt;
      const Eigen::Vector3d w = em.transpose() * pp;
      const double sgn = pp.dot(u);
      const double den = u(0) * u(0) + u(1) * u(1) + w(0) * w(0) + w(1) * w(1);
      if (den < geom::kEpipoleDenomFloor) continue;  // sentinel: no gradient
      // d/dE of s^2/den with s = p'^T E p
      const Eigen::Matrix3d ds = pp * pt.transpose();
      Eigen::Matrix3d dden = Eigen::Matrix3d::Zero();
      for (int r = 0; r < 2; ++r) dden.row(r) += 2.0 * u(r) * pt.transpose();
      for (int c = 0; c < 2; ++c) dden.col(c) += 2.0 * w(c) * pp;
      acc += (2.0 * sgn / den) * ds - (sgn * sgn / (den * den)) * dden;
    }
    Tensor& ge = t.grad_ref(ide);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) ge.at(0, r, c, 0) += gout * acc(r, c);
  };
  return v;
}

Var Tape::bce_with_logits(Var z, const Tensor& labels, double cap) {
  const Tensor& vz = val(z);
  check(vz.shape() == labels.shape(),
        "bce_with_logits: logits " + vz.shape().str() + " vs labels " +
            labels.shape().str());
  const long count = vz.numel();
  double total = 0.0;
  for (long i = 0; i < count; ++i) {
    const double zz = std::clamp(vz[i], -cap, cap);
    const double y = labels[i];
    total += std::max(zz, 0.0) - zz * y + std::log1p(std::exp(-std::abs(zz)));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  const int idz = z.id;
  Var v = push(std::move(out), node(z).needs_grad, nullptr);
  const int ido = v.id;
  const Tensor lab = labels;
  nodes_[ido].backprop = [idz, ido, lab, cap](Tape& t) {
    if (!t.nodes_[idz].needs_grad) return;
    const Tensor& vz = t.nodes_[idz].value;
    const double gout = t.nodes_[ido].grad[0] / vz.numel();
    Tensor& gz = t.grad_ref(idz);
    for (long i = 0; i < vz.numel(); ++i) {
      if (vz[i] <= -cap || vz[i] >= cap) continue;  // clamped region
      const double sig = 1.0 / (1.0 + std::exp(-vz[i]));
      gz[i] += gout * (sig - lab[i]);
    }
  };
  return v;
}

}  // namespace corrmoe::nn
