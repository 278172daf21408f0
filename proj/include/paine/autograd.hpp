#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace paine {

class Tensor;

namespace detail {

// One node of the recorded tape. Nodes own their parents, so releasing the
// root releases the whole graph. Backward closures capture raw parent
// pointers, which stay valid for the node's lifetime through `parents`.
struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily; persistent across backward() for leaves
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::string name;

  int64_t numel() const {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
  }
};

std::vector<double>& ensure_grad(Node& n);

// Thread-local tape switch. When recording is off, ops produce constant nodes.
bool grad_recording_enabled();
void set_grad_recording(bool on);

}  // namespace detail

// Suspends tape recording for the current thread (inference paths).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_recording_enabled()) { detail::set_grad_recording(false); }
  ~NoGradGuard() { detail::set_grad_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major f64 tensor participating in reverse-mode differentiation.
// Value-semantics handle over a shared graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> n) : node(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);

  bool defined() const { return node != nullptr; }
  const std::vector<int>& shape() const;
  int64_t numel() const;
  int dim(int i) const;

  const std::vector<double>& values() const;
  std::vector<double>& values();
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  const std::vector<double>& grad() const;  // sized-on-demand leaf gradient
  std::vector<double>& grad();
  void zero_grad();

  Tensor& set_name(std::string n);
  const std::string& name() const;

  // Deep copy of values into a fresh leaf (same requires_grad flag).
  Tensor clone_detached() const;

  detail::Node* raw() const { return node.get(); }

  std::shared_ptr<detail::Node> node;
};

// ---- elementwise / structural ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor affine(const Tensor& a, double mul, double add);  // mul*a + add
Tensor relu(const Tensor& a);
Tensor abs_op(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);

// ---- reductions ----
Tensor sum(const Tensor& a);   // -> {1}
Tensor mean(const Tensor& a);  // -> {1}

// v - s broadcast of a {1} scalar node over a vector node.
Tensor sub_scalar_node(const Tensor& v, const Tensor& s);

// ---- matrix ops ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor take_row(const Tensor& a, int r);              // -> {cols}
Tensor append_row(const Tensor& a, const Tensor& v);  // v: {cols} -> {rows+1, cols}
Tensor concat_vecs(const std::vector<Tensor>& vs);
Tensor stack_scalars(const std::vector<Tensor>& ss);  // n x {1} -> {n}
Tensor take_elem(const Tensor& v, int i);             // {n} -> {1}

// ---- network building blocks ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor adaptive_max_pool_to_1(const Tensor& x);  // [C,H,W] -> {C}

// Parameters of one pre-norm self-attention block (attention + feed-forward,
// both with residual connections; feed-forward hidden width is 4*d).
struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const;
};

Tensor attention_block(const Tensor& seq, const BlockParams& p, int heads);

// ---- differentiation ----
void backward(const Tensor& loss);

// Central finite differences vs a caller-supplied reverse-mode gradient.
// Returns max relative error with denominator max(|a|,|b|,1e-8).
double grad_check(const std::function<double(const std::vector<double>&)>& f,
                  const std::function<std::vector<double>(const std::vector<double>&)>& grad_f,
                  const std::vector<double>& x0, double h);

void ensure_all_finite(const std::vector<double>& v, const char* what);

}  // namespace paine
