#include "paine/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "paine/errors.hpp"

namespace paine {

namespace detail {

namespace {
thread_local bool g_recording = true;
}

bool grad_recording_enabled() { return g_recording; }
void set_grad_recording(bool on) { g_recording = on; }

std::vector<double>& ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

namespace {

std::shared_ptr<Node> make_node(std::vector<int> shape) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(n->numel()), 0.0);
  return n;
}

void record(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> parents,
            std::function<void(Node&)> bwd) {
  bool any = false;
  if (g_recording) {
    for (const auto& p : parents) {
      if (p->requires_grad) {
        any = true;
        break;
      }
    }
  }
  if (!any) return;  // constant result: no tape entry
  out->requires_grad = true;
  out->leaf = false;
  out->parents = std::move(parents);
  out->backward = std::move(bwd);
}

void check_defined(const Tensor& t, const char* what) {
  if (!t.node) throw_usage(std::string(what) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) throw_dim(std::string(what) + ": shape mismatch");
}

// ---- raw matrix kernels (accumulate into C) ----

void mm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    double* c = C + static_cast<size_t>(i) * N;
    const double* a = A + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const double* a = A + static_cast<size_t>(i) * K;
    double* c = C + static_cast<size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const double* b = B + static_cast<size_t>(j) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
void mm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int k = 0; k < K; ++k) {
    const double* a = A + static_cast<size_t>(k) * M;
    const double* b = B + static_cast<size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + static_cast<size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

}  // namespace detail

using detail::Node;

// ---- Tensor handle ----

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  for (int e : shape)
    if (e <= 0) throw_dim("tensor extents must be positive");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(n->numel()), v);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  for (int e : shape)
    if (e <= 0) throw_dim("tensor extents must be positive");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  const auto want = static_cast<size_t>(n->numel());
  if (data.empty()) {
    n->value.assign(want, 0.0);
  } else {
    if (data.size() != want) throw_dim("data length does not match shape");
    n->value = std::move(data);
  }
  n->requires_grad = requires_grad;
  return Tensor(n);
}

const std::vector<int>& Tensor::shape() const {
  if (!node) throw_usage("shape() on undefined tensor");
  return node->shape;
}

int64_t Tensor::numel() const { return node ? node->numel() : 0; }

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

const std::vector<double>& Tensor::values() const {
  if (!node) throw_usage("values() on undefined tensor");
  return node->value;
}

std::vector<double>& Tensor::values() {
  if (!node) throw_usage("values() on undefined tensor");
  return node->value;
}

double Tensor::item() const {
  if (numel() != 1) throw_usage("item() requires a scalar tensor");
  return node->value[0];
}

bool Tensor::requires_grad() const { return node && node->requires_grad; }

const std::vector<double>& Tensor::grad() const {
  if (!node) throw_usage("grad() on undefined tensor");
  return detail::ensure_grad(*node);
}

std::vector<double>& Tensor::grad() {
  if (!node) throw_usage("grad() on undefined tensor");
  return detail::ensure_grad(*node);
}

void Tensor::zero_grad() {
  if (node) node->grad.assign(node->value.size(), 0.0);
}

Tensor& Tensor::set_name(std::string n) {
  if (node) node->name = std::move(n);
  return *this;
}

const std::string& Tensor::name() const {
  static const std::string empty;
  return node ? node->name : empty;
}

Tensor Tensor::clone_detached() const {
  if (!node) return Tensor();
  auto out = Tensor::from(node->shape, node->value, node->requires_grad);
  out.node->name = node->name;
  return out;
}

// ---- elementwise ----

namespace {

using detail::ensure_grad;
using detail::make_node;
using detail::record;

Tensor elementwise2(const Tensor& a, const Tensor& b, const char* what,
                    double (*fwd)(double, double),
                    void (*bwd)(const Node& self, Node& pa, Node& pb)) {
  detail::check_defined(a, what);
  detail::check_defined(b, what);
  detail::check_same_shape(a, b, what);
  auto out = make_node(a.shape());
  const auto& av = a.node->value;
  const auto& bv = b.node->value;
  auto& y = out->value;
  for (size_t i = 0; i < y.size(); ++i) y[i] = fwd(av[i], bv[i]);
  Node* pa = a.node.get();
  Node* pb = b.node.get();
  record(out, {a.node, b.node}, [pa, pb, bwd](Node& self) { bwd(self, *pa, *pb); });
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise2(
      a, b, "add", [](double x, double y) { return x + y; },
      [](const Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          auto& g = ensure_grad(pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = ensure_grad(pb);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise2(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](const Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          auto& g = ensure_grad(pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = ensure_grad(pb);
          for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise2(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](const Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          auto& g = ensure_grad(pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          auto& g = ensure_grad(pb);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise2(
      a, b, "div", [](double x, double y) { return x / y; },
      [](const Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          auto& g = ensure_grad(pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.value[i];
        }
        if (pb.requires_grad) {
          auto& g = ensure_grad(pb);
          for (size_t i = 0; i < g.size(); ++i)
            g[i] -= self.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
        }
      });
}

Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

Tensor scale(const Tensor& a, double c) { return affine(a, c, 0.0); }

Tensor affine(const Tensor& a, double m, double c) {
  detail::check_defined(a, "affine");
  auto out = make_node(a.shape());
  const auto& x = a.node->value;
  auto& y = out->value;
  for (size_t i = 0; i < y.size(); ++i) y[i] = m * x[i] + c;
  Node* pa = a.node.get();
  record(out, {a.node}, [pa, m](Node& self) {
    auto& g = ensure_grad(*pa);
    for (size_t i = 0; i < g.size(); ++i) g[i] += m * self.grad[i];
  });
  return Tensor(out);
}

Tensor relu(const Tensor& a) {
  detail::check_defined(a, "relu");
  auto out = make_node(a.shape());
  const auto& x = a.node->value;
  auto& y = out->value;
  for (size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  Node* pa = a.node.get();
  record(out, {a.node}, [pa](Node& self) {
    auto& g = ensure_grad(*pa);
    for (size_t i = 0; i < g.size(); ++i)
      if (pa->value[i] > 0.0) g[i] += self.grad[i];
  });
  return Tensor(out);
}

Tensor abs_op(const Tensor& a) {
  detail::check_defined(a, "abs");
  auto out = make_node(a.shape());
  const auto& x = a.node->value;
  auto& y = out->value;
  for (size_t i = 0; i < y.size(); ++i) y[i] = std::fabs(x[i]);
  Node* pa = a.node.get();
  record(out, {a.node}, [pa](Node& self) {
    auto& g = ensure_grad(*pa);
    for (size_t i = 0; i < g.size(); ++i) {
      const double x = pa->value[i];
      if (x > 0.0)
        g[i] += self.grad[i];
      else if (x < 0.0)
        g[i] -= self.grad[i];
      // subgradient 0 at x == 0
    }
  });
  return Tensor(out);
}

Tensor sqrt_op(const Tensor& a) {
  detail::check_defined(a, "sqrt");
  auto out = make_node(a.shape());
  const auto& x = a.node->value;
  auto& y = out->value;
  for (size_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(x[i]);
  Node* pa = a.node.get();
  Node* on = out.get();
  record(out, {a.node}, [pa, on](Node& self) {
    auto& g = ensure_grad(*pa);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 0.5 / on->value[i];
  });
  return Tensor(out);
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  detail::check_defined(a, "reshape");
  auto out = make_node(std::move(shape));
  if (out->numel() != a.numel()) throw_dim("reshape: element count mismatch");
  out->value = a.node->value;
  Node* pa = a.node.get();
  record(out, {a.node}, [pa](Node& self) {
    auto& g = ensure_grad(*pa);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
  return Tensor(out);
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  detail::check_defined(a, "sum");
  auto out = make_node({1});
  double s = 0.0;
  for (double v : a.node->value) s += v;
  out->value[0] = s;
  Node* pa = a.node.get();
  record(out, {a.node}, [pa](Node& self) {
    auto& g = ensure_grad(*pa);
    const double gs = self.grad[0];
    for (auto& gi : g) gi += gs;
  });
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  detail::check_defined(a, "mean");
  const double inv = 1.0 / static_cast<double>(a.numel());
  return scale(sum(a), inv);
}

Tensor sub_scalar_node(const Tensor& v, const Tensor& s) {
  detail::check_defined(v, "sub_scalar_node");
  if (s.numel() != 1) throw_dim("sub_scalar_node: subtrahend must be scalar");
  auto out = make_node(v.shape());
  const double sv = s.node->value[0];
  const auto& x = v.node->value;
  auto& y = out->value;
  for (size_t i = 0; i < y.size(); ++i) y[i] = x[i] - sv;
  Node* pv = v.node.get();
  Node* ps = s.node.get();
  record(out, {v.node, s.node}, [pv, ps](Node& self) {
    if (pv->requires_grad) {
      auto& g = ensure_grad(*pv);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (ps->requires_grad) {
      auto& g = ensure_grad(*ps);
      double acc = 0.0;
      for (double gi : self.grad) acc += gi;
      g[0] -= acc;
    }
  });
  return Tensor(out);
}

// ---- matrix ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_defined(a, "matmul");
  detail::check_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2) throw_dim("matmul: rank-2 tensors required");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw_dim("matmul: inner extents disagree");
  auto out = make_node({m, n});
  detail::mm_nn(a.node->value.data(), b.node->value.data(), out->value.data(), m, k, n);
  Node* pa = a.node.get();
  Node* pb = b.node.get();
  record(out, {a.node, b.node}, [pa, pb, m, k, n](Node& self) {
    if (pa->requires_grad) {
      auto& ga = ensure_grad(*pa);
      detail::mm_nt(self.grad.data(), pb->value.data(), ga.data(), m, n, k);
    }
    if (pb->requires_grad) {
      auto& gb = ensure_grad(*pb);
      detail::mm_tn(pa->value.data(), self.grad.data(), gb.data(), k, m, n);
    }
  });
  return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::check_defined(a, "matmul_nt");
  detail::check_defined(b, "matmul_nt");
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw_dim("matmul_nt: rank-2 tensors required");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) throw_dim("matmul_nt: inner extents disagree");
  auto out = make_node({m, n});
  detail::mm_nt(a.node->value.data(), b.node->value.data(), out->value.data(), m, k, n);
  Node* pa = a.node.get();
  Node* pb = b.node.get();
  record(out, {a.node, b.node}, [pa, pb, m, k, n](Node& self) {
    if (pa->requires_grad) {
      auto& ga = ensure_grad(*pa);
      detail::mm_nn(self.grad.data(), pb->value.data(), ga.data(), m, n, k);
    }
    if (pb->requires_grad) {
      auto& gb = ensure_grad(*pb);
      detail::mm_tn(self.grad.data(), pa->value.data(), gb.data(), n, m, k);
    }
  });
  return Tensor(out);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  detail::check_defined(m, "add_rowvec");
  detail::check_defined(v, "add_rowvec");
  if (m.shape().size() != 2 || v.shape().size() != 1 || v.dim(0) != m.dim(1))
    throw_dim("add_rowvec: need [r,c] and {c}");
  const int r = m.dim(0), c = m.dim(1);
  auto out = make_node({r, c});
  const auto& mv = m.node->value;
  const auto& vv = v.node->value;
  auto& y = out->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[static_cast<size_t>(i) * c + j] = mv[static_cast<size_t>(i) * c + j] + vv[j];
  Node* pm = m.node.get();
  Node* pv = v.node.get();
  record(out, {m.node, v.node}, [pm, pv, r, c](Node& self) {
    if (pm->requires_grad) {
      auto& g = ensure_grad(*pm);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      auto& g = ensure_grad(*pv);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) g[j] += self.grad[static_cast<size_t>(i) * c + j];
    }
  });
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& a) {
  detail::check_defined(a, "softmax_rows");
  if (a.shape().size() != 2) throw_dim("softmax_rows: rank-2 tensor required");
  const int r = a.dim(0), c = a.dim(1);
  auto out = make_node({r, c});
  const auto& x = a.node->value;
  auto& y = out->value;
  for (int i = 0; i < r; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * c;
    double* yr = y.data() + static_cast<size_t>(i) * c;
    double mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < c; ++j) yr[j] *= inv;
  }
  Node* pa = a.node.get();
  Node* on = out.get();
  record(out, {a.node}, [pa, on, r, c](Node& self) {
    auto& g = ensure_grad(*pa);
    for (int i = 0; i < r; ++i) {
      const double* yr = on->value.data() + static_cast<size_t>(i) * c;
      const double* gr = self.grad.data() + static_cast<size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
      double* gx = g.data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) gx[j] += yr[j] * (gr[j] - dot);
    }
  });
  return Tensor(out);
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  detail::check_defined(x, "layer_norm_rows");
  if (x.shape().size() != 2) throw_dim("layer_norm_rows: rank-2 tensor required");
  const int r = x.dim(0), c = x.dim(1);
  if (gamma.shape() != std::vector<int>{c} || beta.shape() != std::vector<int>{c})
    throw_dim("layer_norm_rows: gamma/beta must be {cols}");
  constexpr double kEps = 1e-5;
  auto out = make_node({r, c});
  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  const auto& xv = x.node->value;
  const auto& gv = gamma.node->value;
  const auto& bv = beta.node->value;
  auto& y = out->value;
  for (int i = 0; i < r; ++i) {
    const double* xr = xv.data() + static_cast<size_t>(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += xr[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xr[j] - m;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + kEps);
    (*mu)[static_cast<size_t>(i)] = m;
    (*istd)[static_cast<size_t>(i)] = is;
    double* yr = y.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) yr[j] = gv[j] * (xr[j] - m) * is + bv[j];
  }
  Node* px = x.node.get();
  Node* pg = gamma.node.get();
  Node* pb = beta.node.get();
  record(out, {x.node, gamma.node, beta.node}, [px, pg, pb, mu, istd, r, c](Node& self) {
    for (int i = 0; i < r; ++i) {
      const double m = (*mu)[static_cast<size_t>(i)];
      const double is = (*istd)[static_cast<size_t>(i)];
      const double* xr = px->value.data() + static_cast<size_t>(i) * c;
      const double* gr = self.grad.data() + static_cast<size_t>(i) * c;
      if (pg->requires_grad || pb->requires_grad) {
        auto& gg = ensure_grad(*pg);
        auto& gb = ensure_grad(*pb);
        for (int j = 0; j < c; ++j) {
          const double xhat = (xr[j] - m) * is;
          if (pg->requires_grad) gg[j] += gr[j] * xhat;
          if (pb->requires_grad) gb[j] += gr[j];
        }
      }
      if (px->requires_grad) {
        auto& gx = ensure_grad(*px);
        // dxhat_j = g_j * gamma_j; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        const auto& gammav = pg->value;
        for (int j = 0; j < c; ++j) {
          const double dxh = gr[j] * gammav[j];
          const double xhat = (xr[j] - m) * is;
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat;
        }
        mean_dxhat /= c;
        mean_dxhat_xhat /= c;
        double* gxr = gx.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          const double dxh = gr[j] * gammav[j];
          const double xhat = (xr[j] - m) * is;
          gxr[j] += is * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
    }
  });
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  detail::check_defined(a, "slice_cols");
  if (a.shape().size() != 2) throw_dim("slice_cols: rank-2 tensor required");
  const int r = a.dim(0), c = a.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1) throw_dim("slice_cols: bad column range");
  const int w = c1 - c0;
  auto out = make_node({r, w});
  const auto& x = a.node->value;
  auto& y = out->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      y[static_cast<size_t>(i) * w + j] = x[static_cast<size_t>(i) * c + c0 + j];
  Node* pa = a.node.get();
  record(out, {a.node}, [pa, r, c, c0, w](Node& self) {
    auto& g = ensure_grad(*pa);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        g[static_cast<size_t>(i) * c + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
  });
  return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw_usage("concat_cols: empty input");
  const int r = xs[0].dim(0);
  int total = 0;
  for (const auto& t : xs) {
    if (t.shape().size() != 2 || t.dim(0) != r) throw_dim("concat_cols: row mismatch");
    total += t.dim(1);
  }
  auto out = make_node({r, total});
  auto& y = out->value;
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  int off = 0;
  std::vector<std::pair<Node*, std::pair<int, int>>> spans;  // node -> (offset, width)
  for (const auto& t : xs) {
    const int w = t.dim(1);
    const auto& x = t.node->value;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        y[static_cast<size_t>(i) * total + off + j] = x[static_cast<size_t>(i) * w + j];
    parents.push_back(t.node);
    spans.push_back({t.node.get(), {off, w}});
    off += w;
  }
  record(out, std::move(parents), [spans, r, total](Node& self) {
    for (const auto& [p, span] : spans) {
      if (!p->requires_grad) continue;
      const auto [o, w] = span;
      auto& g = ensure_grad(*p);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          g[static_cast<size_t>(i) * w + j] += self.grad[static_cast<size_t>(i) * total + o + j];
    }
  });
  return Tensor(out);
}

Tensor take_row(const Tensor& a, int rIdx) {
  detail::check_defined(a, "take_row");
  if (a.shape().size() != 2) throw_dim("take_row: rank-2 tensor required");
  const int r = a.dim(0), c = a.dim(1);
  if (rIdx < 0 || rIdx >= r) throw_dim("take_row: row out of range");
  auto out = make_node({c});
  const auto& x = a.node->value;
  for (int j = 0; j < c; ++j) out->value[j] = x[static_cast<size_t>(rIdx) * c + j];
  Node* pa = a.node.get();
  record(out, {a.node}, [pa, rIdx, c](Node& self) {
    auto& g = ensure_grad(*pa);
    for (int j = 0; j < c; ++j) g[static_cast<size_t>(rIdx) * c + j] += self.grad[j];
  });
  return Tensor(out);
}

Tensor append_row(const Tensor& a, const Tensor& v) {
  detail::check_defined(a, "append_row");
  detail::check_defined(v, "append_row");
  if (a.shape().size() != 2 || v.shape().size() != 1 || v.dim(0) != a.dim(1))
    throw_dim("append_row: need [r,c] and {c}");
  const int r = a.dim(0), c = a.dim(1);
  auto out = make_node({r + 1, c});
  auto& y = out->value;
  std::copy(a.node->value.begin(), a.node->value.end(), y.begin());
  std::copy(v.node->value.begin(), v.node->value.end(), y.begin() + static_cast<size_t>(r) * c);
  Node* pa = a.node.get();
  Node* pv = v.node.get();
  record(out, {a.node, v.node}, [pa, pv, r, c](Node& self) {
    if (pa->requires_grad) {
      auto& g = ensure_grad(*pa);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      auto& g = ensure_grad(*pv);
      for (int j = 0; j < c; ++j) g[j] += self.grad[static_cast<size_t>(r) * c + j];
    }
  });
  return Tensor(out);
}

Tensor concat_vecs(const std::vector<Tensor>& vs) {
  if (vs.empty()) throw_usage("concat_vecs: empty input");
  int total = 0;
  for (const auto& t : vs) {
    if (t.shape().size() != 1) throw_dim("concat_vecs: rank-1 tensors required");
    total += t.dim(0);
  }
  auto out = make_node({total});
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::pair<Node*, std::pair<int, int>>> spans;
  int off = 0;
  for (const auto& t : vs) {
    const int w = t.dim(0);
    std::copy(t.node->value.begin(), t.node->value.end(), out->value.begin() + off);
    parents.push_back(t.node);
    spans.push_back({t.node.get(), {off, w}});
    off += w;
  }
  record(out, std::move(parents), [spans](Node& self) {
    for (const auto& [p, span] : spans) {
      if (!p->requires_grad) continue;
      const auto [o, w] = span;
      auto& g = ensure_grad(*p);
      for (int j = 0; j < w; ++j) g[j] += self.grad[static_cast<size_t>(o) + j];
    }
  });
  return Tensor(out);
}

Tensor stack_scalars(const std::vector<Tensor>& ss) {
  if (ss.empty()) throw_usage("stack_scalars: empty input");
  const int n = static_cast<int>(ss.size());
  auto out = make_node({n});
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(ss.size());
  std::vector<Node*> raw(ss.size());
  for (int i = 0; i < n; ++i) {
    if (ss[static_cast<size_t>(i)].numel() != 1) throw_dim("stack_scalars: scalar tensors required");
    out->value[static_cast<size_t>(i)] = ss[static_cast<size_t>(i)].node->value[0];
    parents.push_back(ss[static_cast<size_t>(i)].node);
    raw[static_cast<size_t>(i)] = ss[static_cast<size_t>(i)].node.get();
  }
  record(out, std::move(parents), [raw](Node& self) {
    for (size_t i = 0; i < raw.size(); ++i) {
      if (!raw[i]->requires_grad) continue;
      ensure_grad(*raw[i])[0] += self.grad[i];
    }
  });
  return Tensor(out);
}

Tensor take_elem(const Tensor& v, int i) {
  detail::check_defined(v, "take_elem");
  if (v.shape().size() != 1) throw_dim("take_elem: rank-1 tensor required");
  if (i < 0 || i >= v.dim(0)) throw_dim("take_elem: index out of range");
  auto out = make_node({1});
  out->value[0] = v.node->value[static_cast<size_t>(i)];
  Node* pv = v.node.get();
  record(out, {v.node}, [pv, i](Node& self) {
    ensure_grad(*pv)[static_cast<size_t>(i)] += self.grad[0];
  });
  return Tensor(out);
}

// ---- conv / pool ----

namespace {

void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, double* patches) {
  const int cols = OH * OW;
  for (int ci = 0; ci < C; ++ci) {
    for (int a = 0; a < kh; ++a) {
      for (int b = 0; b < kw; ++b) {
        double* row = patches + (static_cast<size_t>(ci) * kh * kw + static_cast<size_t>(a) * kw + b) * cols;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + a;
          double* dst = row + static_cast<size_t>(oh) * OW;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + OW, 0.0);
            continue;
          }
          const double* src = x + (static_cast<size_t>(ci) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + b;
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* patches, int C, int H, int W, int kh, int kw, int stride, int pad,
                int OH, int OW, double* dx) {
  const int cols = OH * OW;
  for (int ci = 0; ci < C; ++ci) {
    for (int a = 0; a < kh; ++a) {
      for (int b = 0; b < kw; ++b) {
        const double* row =
            patches + (static_cast<size_t>(ci) * kh * kw + static_cast<size_t>(a) * kw + b) * cols;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + a;
          if (ih < 0 || ih >= H) continue;
          const double* src = row + static_cast<size_t>(oh) * OW;
          double* dst = dx + (static_cast<size_t>(ci) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + b;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  detail::check_defined(x, "conv2d");
  detail::check_defined(w, "conv2d");
  detail::check_defined(b, "conv2d");
  if (x.shape().size() != 3 || w.shape().size() != 4 || b.shape().size() != 1)
    throw_dim("conv2d: need x[C,H,W], w[Co,Ci,kh,kw], b{Co}");
  if (stride <= 0) throw_config("conv2d: stride must be positive");
  if (pad < 0) throw_config("conv2d: pad must be nonnegative");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Co = w.dim(0), Ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (Ci != C) throw_dim("conv2d: input channel mismatch");
  if (b.dim(0) != Co) throw_dim("conv2d: bias extent mismatch");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw || OH < 1 || OW < 1)
    throw_dim("conv2d: non-positive output extent");

  const int K = C * kh * kw;
  const int cols = OH * OW;
  std::vector<double> patches(static_cast<size_t>(K) * cols);
  im2col(x.node->value.data(), C, H, W, kh, kw, stride, pad, OH, OW, patches.data());

  auto out = make_node({Co, OH, OW});
  detail::mm_nn(w.node->value.data(), patches.data(), out->value.data(), Co, K, cols);
  {
    auto& y = out->value;
    const auto& bias = b.node->value;
    for (int co = 0; co < Co; ++co) {
      double* yr = y.data() + static_cast<size_t>(co) * cols;
      const double bv = bias[static_cast<size_t>(co)];
      for (int j = 0; j < cols; ++j) yr[j] += bv;
    }
  }

  Node* px = x.node.get();
  Node* pw = w.node.get();
  Node* pb = b.node.get();
  record(out, {x.node, w.node, b.node},
         [px, pw, pb, C, H, W, kh, kw, stride, pad, OH, OW, Co, K, cols](Node& self) {
           if (pb->requires_grad) {
             auto& gb = ensure_grad(*pb);
             for (int co = 0; co < Co; ++co) {
               const double* gr = self.grad.data() + static_cast<size_t>(co) * cols;
               double acc = 0.0;
               for (int j = 0; j < cols; ++j) acc += gr[j];
               gb[static_cast<size_t>(co)] += acc;
             }
           }
           if (pw->requires_grad) {
             std::vector<double> patches(static_cast<size_t>(K) * cols);
             im2col(px->value.data(), C, H, W, kh, kw, stride, pad, OH, OW, patches.data());
             auto& gw = ensure_grad(*pw);
             detail::mm_nt(self.grad.data(), patches.data(), gw.data(), Co, cols, K);
           }
           if (px->requires_grad) {
             std::vector<double> dpatches(static_cast<size_t>(K) * cols, 0.0);
             detail::mm_tn(pw->value.data(), self.grad.data(), dpatches.data(), K, Co, cols);
             auto& gx = ensure_grad(*px);
             col2im_acc(dpatches.data(), C, H, W, kh, kw, stride, pad, OH, OW, gx.data());
           }
         });
  return Tensor(out);
}

Tensor adaptive_max_pool_to_1(const Tensor& x) {
  detail::check_defined(x, "adaptive_max_pool_to_1");
  if (x.shape().size() != 3) throw_dim("adaptive_max_pool_to_1: rank-3 tensor required");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H < 1 || W < 1) throw_dim("adaptive_max_pool_to_1: empty spatial extent");
  auto out = make_node({C});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C));
  const auto& xv = x.node->value;
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    const double* xc = xv.data() + static_cast<size_t>(c) * hw;
    double best = xc[0];
    int64_t bi = 0;
    for (int64_t i = 1; i < hw; ++i) {
      if (xc[i] > best) {  // first occurrence wins on ties
        best = xc[i];
        bi = i;
      }
    }
    out->value[static_cast<size_t>(c)] = best;
    (*argmax)[static_cast<size_t>(c)] = bi;
  }
  Node* px = x.node.get();
  record(out, {x.node}, [px, argmax, C, hw](Node& self) {
    auto& g = ensure_grad(*px);
    for (int c = 0; c < C; ++c)
      g[static_cast<size_t>(c) * hw + static_cast<size_t>((*argmax)[static_cast<size_t>(c)])] +=
          self.grad[static_cast<size_t>(c)];
  });
  return Tensor(out);
}

// ---- attention block ----

std::vector<std::pair<std::string, Tensor>> BlockParams::named(const std::string& prefix) const {
  return {
      {prefix + ".ln1.gamma", ln1_gamma}, {prefix + ".ln1.beta", ln1_beta},
      {prefix + ".wq", wq},               {prefix + ".bq", bq},
      {prefix + ".wk", wk},               {prefix + ".bk", bk},
      {prefix + ".wv", wv},               {prefix + ".bv", bv},
      {prefix + ".wo", wo},               {prefix + ".bo", bo},
      {prefix + ".ln2.gamma", ln2_gamma}, {prefix + ".ln2.beta", ln2_beta},
      {prefix + ".ff.w1", ff_w1},         {prefix + ".ff.b1", ff_b1},
      {prefix + ".ff.w2", ff_w2},         {prefix + ".ff.b2", ff_b2},
  };
}

Tensor attention_block(const Tensor& seq, const BlockParams& p, int heads) {
  detail::check_defined(seq, "attention_block");
  if (seq.shape().size() != 2) throw_dim("attention_block: rank-2 sequence required");
  const int d = seq.dim(1);
  if (heads < 1 || d % heads != 0) throw_config("attention_block: heads must divide model dim");
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor x1 = layer_norm_rows(seq, p.ln1_gamma, p.ln1_beta);
  Tensor q = add_rowvec(matmul(x1, p.wq), p.bq);
  Tensor k = add_rowvec(matmul(x1, p.wk), p.bk);
  Tensor v = add_rowvec(matmul(x1, p.wv), p.bv);

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh, c1 = (h + 1) * dh;
    Tensor qh = slice_cols(q, c0, c1);
    Tensor kh = slice_cols(k, c0, c1);
    Tensor vh = slice_cols(v, c0, c1);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
    Tensor attn = softmax_rows(scores);
    head_outs.push_back(matmul(attn, vh));
  }
  Tensor ctx = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  Tensor attn_out = add_rowvec(matmul(ctx, p.wo), p.bo);
  Tensor x2 = add(seq, attn_out);

  Tensor x3 = layer_norm_rows(x2, p.ln2_gamma, p.ln2_beta);
  Tensor h1 = relu(add_rowvec(matmul(x3, p.ff_w1), p.ff_b1));
  Tensor ff = add_rowvec(matmul(h1, p.ff_w2), p.ff_b2);
  return add(x2, ff);
}

// ---- backward ----

void backward(const Tensor& loss) {
  if (!loss.node) throw_usage("backward: undefined tensor");
  Node* root = loss.node.get();
  if (root->numel() != 1) throw_usage("backward: loss must be scalar");
  if (!root->requires_grad)
    throw_usage("backward: no graph recorded for this value");

  // Post-order DFS over requires_grad ancestors: parents precede children.
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* p = n->parents[top.second++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }

  // Intermediate grads restart at zero each call; leaf grads accumulate.
  for (Node* n : topo) {
    if (!n->leaf)
      n->grad.assign(n->value.size(), 0.0);
    else
      detail::ensure_grad(*n);
  }
  root->grad[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

double grad_check(const std::function<double(const std::vector<double>&)>& f,
                  const std::function<std::vector<double>(const std::vector<double>&)>& grad_f,
                  const std::vector<double>& x0, double h) {
  const std::vector<double> g = grad_f(x0);
  if (g.size() != x0.size()) throw_usage("grad_check: gradient size mismatch");
  std::vector<double> x = x0;
  double max_rel = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw_numeric("grad_check: non-finite function value");
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::fabs(fd), std::fabs(g[i]), 1e-8});
    max_rel = std::max(max_rel, std::fabs(fd - g[i]) / denom);
  }
  return max_rel;
}

void ensure_all_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw_numeric(std::string(what) + ": non-finite value");
}

}  // namespace paine
