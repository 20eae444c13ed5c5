#include "airseg/tensor.hpp"

#include <unordered_map>

namespace airseg::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));

  // Iterative post-order DFS; `order` ends up with inputs before their consumers.
  enum class Mark { active, done };
  std::unordered_map<const TensorImpl<T>*, Mark> marks;
  std::vector<TensorImpl<T>*> order;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  marks[impl_.get()] = Mark::active;
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const std::size_t n_inputs = t->node ? t->node->inputs.size() : 0;
    if (next < n_inputs) {
      TensorImpl<T>* child = t->node->inputs[next++].get();
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks[child] = Mark::active;
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::active) {
        throw std::logic_error("internal error: cycle in autograd graph");
      }
    } else {
      marks[t] = Mark::done;
      order.push_back(t);
      stack.pop_back();
    }
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* t = *it;
    if (t->node && !t->grad.empty()) t->node->backward(*t);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace airseg::nn
