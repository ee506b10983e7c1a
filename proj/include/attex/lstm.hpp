#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "attex/tensor.hpp"

namespace attex {

// Single LSTM cell. Gate pre-activations are packed into one {4*hidden}
// vector ordered [input | forget | candidate | output].
template <typename S>
struct LstmParams {
  Tensor<S> w_x;   // {input_dim, 4*hidden}
  Tensor<S> w_h;   // {hidden, 4*hidden}
  Tensor<S> bias;  // {4*hidden}
  int input_dim = 0;
  int hidden_dim = 0;

  static LstmParams init(int input_dim, int hidden_dim, Rng& rng) {
    LstmParams p;
    p.input_dim = input_dim;
    p.hidden_dim = hidden_dim;
    const S r = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    p.w_x = Tensor<S>::uniform({input_dim, 4 * hidden_dim}, -r, r, rng, true);
    p.w_h = Tensor<S>::uniform({hidden_dim, 4 * hidden_dim}, -r, r, rng, true);
    p.bias = Tensor<S>::zeros({4 * hidden_dim}, true);
    return p;
  }

  static LstmParams zeros(int input_dim, int hidden_dim) {
    LstmParams p;
    p.input_dim = input_dim;
    p.hidden_dim = hidden_dim;
    p.w_x = Tensor<S>::zeros({input_dim, 4 * hidden_dim}, true);
    p.w_h = Tensor<S>::zeros({hidden_dim, 4 * hidden_dim}, true);
    p.bias = Tensor<S>::zeros({4 * hidden_dim}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named(const std::string& prefix) const {
    return {{prefix + ".w_x", w_x}, {prefix + ".w_h", w_h}, {prefix + ".bias", bias}};
  }
};

template <typename S>
struct LstmState {
  Tensor<S> h;  // {hidden}
  Tensor<S> c;  // {hidden}
};

// c' = f*c + i*g, h' = o*tanh(c') with logistic gates i,f,o and tanh
// candidate g.
template <typename S>
LstmState<S> lstm_step(const Tensor<S>& x, const Tensor<S>& h, const Tensor<S>& c,
                       const LstmParams<S>& p) {
  if (x.size() != p.input_dim)
    throw ShapeError("lstm_step: input " + shape_str(x.shape()) + " vs input_dim " +
                     std::to_string(p.input_dim));
  if (h.size() != p.hidden_dim || c.size() != p.hidden_dim)
    throw ShapeError("lstm_step: state " + shape_str(h.shape()) + "/" + shape_str(c.shape()) +
                     " vs hidden_dim " + std::to_string(p.hidden_dim));
  const int d = p.hidden_dim;
  Tensor<S> z = add(add(matmul(x, p.w_x), matmul(h, p.w_h)), p.bias);
  Tensor<S> i = sigmoid_t(slice(z, 0, d));
  Tensor<S> f = sigmoid_t(slice(z, d, d));
  Tensor<S> g = tanh_t(slice(z, 2 * d, d));
  Tensor<S> o = sigmoid_t(slice(z, 3 * d, d));
  Tensor<S> c_next = add(mul(f, c), mul(i, g));
  Tensor<S> h_next = mul(o, tanh_t(c_next));
  return {h_next, c_next};
}

}  // namespace attex
