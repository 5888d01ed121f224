#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pgseg/tensor.hpp"

namespace pgseg {

// Trainable (or frozen) tensor with a persistent gradient buffer. Gradients
// accumulate across a backward pass and are zeroed by the optimizer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {
    grad = Tensor::zeros(value.shape());
  }
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // lazily allocated in backward; leaves bound to a Parameter alias its grad
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

// Define-by-run graph. Nodes are recorded in creation order, which is a valid
// topological order, so backward is a single reverse sweep.
class Tape {
 public:
  Var leaf(Tensor v, bool requires_grad = false);
  Var param(Parameter& p);  // value and grad alias the parameter's storage
  Var make(Tensor v, std::vector<Var> parents, std::function<void(Node&)> bw);
  void backward(const Var& root);
  size_t size() const { return order_.size(); }

 private:
  std::vector<Var> order_;
};

// Accumulate src into the (lazily allocated) grad of node.
void accumulate_grad(Node& n, const double* g);

namespace ops {

// elementwise / reductions
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_scaled(Tape& t, Var m, Var delta, Var lambda);  // m + lambda*delta, lambda scalar
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
Var weighted_sum(Tape& t, Var a, Tensor w);  // scalar readout sum(w*a)
Var sigmoid(Tape& t, Var a);
Var gelu(Tape& t, Var a);
Var log_eps(Tape& t, Var a, double eps);
Var clip01(Tape& t, Var a);

// shape movement
Var reshape(Tape& t, Var a, std::vector<i64> shape);
Var transpose_12(Tape& t, Var a);   // (B,X,Y) -> (B,Y,X)
Var permute_0213(Tape& t, Var a);   // (A,B,C,D) -> (A,C,B,D)
Var concat_channels(Tape& t, Var a, Var b);  // NCHW, along C

// linear algebra
Var linear(Tape& t, Var x, Var W, Var b);  // x (...,in) * W(out,in)^T + b
Var matmul(Tape& t, Var a, Var b);         // (m,k)(k,n)
Var bmm(Tape& t, Var a, Var b);            // (B,m,k)(B,k,n)
Var bmm_nt(Tape& t, Var a, Var b);         // (B,m,k)(B,n,k)^T

// normalization / attention pieces
Var layernorm(Tape& t, Var x, double eps, Var gamma = nullptr, Var beta = nullptr);
Var softmax_last(Tape& t, Var x);
Var add_rows(Tape& t, Var x, Var rows);  // x (B,L,D) + rows (L,D)

// conv family
Var conv2d(Tape& t, Var x, Var w, Var b, i64 stride, i64 pad);  // w (Cout,Cin,K,K)
Var deconv2x2(Tape& t, Var x, Var w, Var b);                    // w (Cin,Cout,2,2)
Var bilinear(Tape& t, Var x, i64 OH, i64 OW);
Var deform_conv3x3(Tape& t, Var x, Var off, Var w, Var b, double max_off);
Var channel_affine(Tape& t, Var x, Var s, Var shift);  // NCHW per-channel scale/shift

// aligner pieces
Var gap_hw(Tape& t, Var x);                            // (B,C,H,W) -> (B,C)
Var cosine_rows(Tape& t, Var a, Var b);                // (B,d)x(B,d) -> (B)
Var affine_broadcast(Tape& t, Var c, Var w, Var bias); // (B),(L),(L) -> (B,L)
Var row_gate(Tape& t, Var x, Var g);                   // (B,L,C) * g(B,L)
Var add_bias_rows(Tape& t, Var x, Var bias);           // x (B,N,L) + bias (B,N)

// hypernetwork kernel assembly: gate (N,Cin), base (Cin,Co,K,K) -> (N*Co,Cin,K,K)
Var kernel_from_gate(Tape& t, Var gate, Var base);

// losses (target: row-major (B,H,W) class ids)
Var ce_loss(Tape& t, Var logits, const std::vector<int>& target);
Var dice_loss(Tape& t, Var probs, const std::vector<int>& target, double eps);
Var softmax_channels(Tape& t, Var x);  // per-pixel softmax over C of NCHW

}  // namespace ops

}  // namespace pgseg
