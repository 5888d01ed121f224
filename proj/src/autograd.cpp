#include "pgseg/autograd.hpp"

namespace pgseg {

Var Tape::leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  order_.push_back(n);
  return n;
}

Var Tape::param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->value = p.value;  // shared storage
  n->grad = p.grad;
  n->requires_grad = p.trainable;
  order_.push_back(n);
  return n;
}

Var Tape::make(Tensor v, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  for (const auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  order_.push_back(n);
  return n;
}

void Tape::backward(const Var& root) {
  if (root->value.numel() != 1) throw ArgumentError("backward() expects a scalar root");
  if (!root->requires_grad) throw ArgumentError("backward() root does not require grad");
  root->ensure_grad().fill_(1.0);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node& n = **it;
    if (!n.requires_grad || !n.grad.defined() || !n.backward_fn) continue;
    n.backward_fn(n);
  }
}

void accumulate_grad(Node& n, const double* g) {
  Tensor& dst = n.ensure_grad();
  double* d = dst.data();
  const i64 m = dst.numel();
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) d[i] += g[i];
}

}  // namespace pgseg
