#pragma once

#include <string>
#include <utility>
#include <vector>

#include "attex/explainer.hpp"

namespace attex {

// Bidirectional encoding of a token sequence with the model's alignment-only
// embedding and LSTMs. Each direction has hidden size D/2; output t is
// concat(fwd_t, bwd_t) of dimension D, where fwd_t has consumed tokens 1..t
// and bwd_t has consumed tokens T..t.
template <typename S>
std::vector<Tensor<S>> encode_bidirectional(const std::vector<int>& tokens,
                                            const ExplainerModel<S>& model) {
  if (tokens.empty()) throw ContractError("encode_bidirectional: empty token sequence");
  const int t_len = static_cast<int>(tokens.size());
  const int half = model.hidden_dim / 2;

  std::vector<Tensor<S>> fwd(t_len), bwd(t_len);
  LstmState<S> st;
  st.h = Tensor<S>::zeros({half});
  st.c = Tensor<S>::zeros({half});
  for (int t = 0; t < t_len; ++t) {
    Tensor<S> x = embedding_row(model.align_embedding, tokens[t]);
    st = lstm_step(x, st.h, st.c, model.align_fwd);
    fwd[t] = st.h;
  }
  st.h = Tensor<S>::zeros({half});
  st.c = Tensor<S>::zeros({half});
  for (int t = t_len - 1; t >= 0; --t) {
    Tensor<S> x = embedding_row(model.align_embedding, tokens[t]);
    st = lstm_step(x, st.h, st.c, model.align_bwd);
    bwd[t] = st.h;
  }

  std::vector<Tensor<S>> out(t_len);
  for (int t = 0; t < t_len; ++t) out[t] = concat<S>({fwd[t], bwd[t]});
  return out;
}

template <typename S>
struct RealignResult {
  std::vector<Tensor<S>> alphas;    // one {K} map per step
  std::vector<Tensor<S>> contexts;  // matching weighted contexts, unused downstream
};

// Re-grounds each bidirectional state through the decoder's own attention
// parameters. The contexts are exposed for inspection but nothing consumes
// them.
template <typename S>
RealignResult<S> realign(const std::vector<Tensor<S>>& bi_states, const FeatureGrid<S>& features,
                         const ExplainerModel<S>& model) {
  RealignResult<S> res;
  res.alphas.reserve(bi_states.size());
  res.contexts.reserve(bi_states.size());
  for (const Tensor<S>& h_bar : bi_states) {
    Tensor<S> alpha = attend(h_bar, features, model.att);
    res.contexts.push_back(weighted_context(alpha, features.locations, model.context_scale));
    res.alphas.push_back(std::move(alpha));
  }
  return res;
}

// Sum over steps of entrywise |alpha_t - realigned_t|; the absolute value
// uses subgradient 0 at exact ties. Scalar tensor on the active tape.
template <typename S>
Tensor<S> alignment_loss(const std::vector<Tensor<S>>& alphas,
                         const std::vector<Tensor<S>>& realigned) {
  if (alphas.size() != realigned.size())
    throw ContractError("alignment_loss: " + std::to_string(alphas.size()) + " maps vs " +
                        std::to_string(realigned.size()) + " realigned maps");
  Tensor<S> total = Tensor<S>::zeros({1});
  for (size_t t = 0; t < alphas.size(); ++t)
    total = add(total, sum(abs_t(sub(alphas[t], realigned[t]))));
  return total;
}

}  // namespace attex
