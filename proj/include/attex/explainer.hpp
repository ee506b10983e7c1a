#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attex/attention.hpp"
#include "attex/lstm.hpp"
#include "attex/vocab.hpp"

namespace attex {

// Which map drove enforced steps, and at which 1-based steps it was active.
struct EnforcementDescriptor {
  bool active = false;
  std::string source;
  std::vector<int> steps;
};

// One generated explanation: the unit handed to metrics and serialized by the
// CLI. Holds word tokens only (no BOS/EOS/PAD) and one attention map per
// emitted token.
struct ExplanationRecord {
  std::string image_id;
  int predicted_class = -1;
  std::vector<int> tokens;
  std::vector<std::vector<float>> attention;  // per step, K weights
  EnforcementDescriptor enforcement;
  double score = 0.0;  // length-normalized log-probability of the hypothesis

  void validate() const {
    if (attention.size() != tokens.size())
      throw ContractError("explanation record: " + std::to_string(attention.size()) +
                          " attention maps for " + std::to_string(tokens.size()) + " tokens");
  }

  nlohmann::json to_json() const {
    validate();
    nlohmann::json j;
    j["image_id"] = image_id;
    j["predicted_class"] = predicted_class;
    j["tokens"] = tokens;
    j["attention"] = attention;
    j["score"] = score;
    if (enforcement.active)
      j["enforcement"] = {{"source", enforcement.source}, {"steps", enforcement.steps}};
    else
      j["enforcement"] = nullptr;
    return j;
  }

  static ExplanationRecord from_json(const nlohmann::json& j) {
    ExplanationRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.predicted_class = j.at("predicted_class").get<int>();
    r.tokens = j.at("tokens").get<std::vector<int>>();
    r.attention = j.at("attention").get<std::vector<std::vector<float>>>();
    r.score = j.value("score", 0.0);
    if (j.contains("enforcement") && !j.at("enforcement").is_null()) {
      r.enforcement.active = true;
      r.enforcement.source = j.at("enforcement").value("source", "custom");
      r.enforcement.steps = j.at("enforcement").at("steps").get<std::vector<int>>();
    }
    r.validate();
    return r;
  }
};

struct GenerateOptions {
  int beam_width = 1;  // 1 = greedy
  int t_max = 20;
};

// Attention-guided LSTM decoder over frozen encoder features, plus the
// alignment-side BiLSTM that shares its f_Att parameters with the decoder.
template <typename S>
struct ExplainerModel {
  int vocab_size = 0;
  int embed_dim = 0;
  int hidden_dim = 0;
  int feature_dim = 0;
  int attn_dim = 0;
  ContextScale context_scale = ContextScale::per_paper;

  Tensor<S> embedding;  // {N, E}
  AttentionParams<S> att;
  LstmParams<S> lstm;            // input E + feature_dim
  Tensor<S> out_w, out_b;        // {D, N}, {N}
  Tensor<S> init_h_w, init_h_b;  // {feature_dim, D}, {D}
  Tensor<S> init_c_w, init_c_b;

  Tensor<S> align_embedding;         // {N, E}, alignment-only
  LstmParams<S> align_fwd, align_bwd;  // hidden D/2 each

  static ExplainerModel init(int vocab_size, int embed_dim, int hidden_dim, int feature_dim,
                             int attn_dim, ContextScale scale_mode, Rng& rng) {
    if (hidden_dim % 2 != 0)
      throw ContractError("hidden_dim must be even to split across the two alignment directions, got " +
                          std::to_string(hidden_dim));
    ExplainerModel m;
    m.vocab_size = vocab_size;
    m.embed_dim = embed_dim;
    m.hidden_dim = hidden_dim;
    m.feature_dim = feature_dim;
    m.attn_dim = attn_dim;
    m.context_scale = scale_mode;
    const S re = static_cast<S>(1.0 / std::sqrt(static_cast<double>(embed_dim)));
    const S rd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    const S rf = static_cast<S>(1.0 / std::sqrt(static_cast<double>(feature_dim)));
    m.embedding = Tensor<S>::uniform({vocab_size, embed_dim}, -re, re, rng, true);
    m.att = AttentionParams<S>::init(hidden_dim, feature_dim, attn_dim, rng);
    m.lstm = LstmParams<S>::init(embed_dim + feature_dim, hidden_dim, rng);
    m.out_w = Tensor<S>::uniform({hidden_dim, vocab_size}, -rd, rd, rng, true);
    m.out_b = Tensor<S>::zeros({vocab_size}, true);
    m.init_h_w = Tensor<S>::uniform({feature_dim, hidden_dim}, -rf, rf, rng, true);
    m.init_h_b = Tensor<S>::zeros({hidden_dim}, true);
    m.init_c_w = Tensor<S>::uniform({feature_dim, hidden_dim}, -rf, rf, rng, true);
    m.init_c_b = Tensor<S>::zeros({hidden_dim}, true);
    m.align_embedding = Tensor<S>::uniform({vocab_size, embed_dim}, -re, re, rng, true);
    m.align_fwd = LstmParams<S>::init(embed_dim, hidden_dim / 2, rng);
    m.align_bwd = LstmParams<S>::init(embed_dim, hidden_dim / 2, rng);
    return m;
  }

  static ExplainerModel zeros_like_dims(int vocab_size, int embed_dim, int hidden_dim,
                                        int feature_dim, int attn_dim, ContextScale scale_mode) {
    if (hidden_dim % 2 != 0)
      throw ContractError("hidden_dim must be even to split across the two alignment directions, got " +
                          std::to_string(hidden_dim));
    ExplainerModel m;
    m.vocab_size = vocab_size;
    m.embed_dim = embed_dim;
    m.hidden_dim = hidden_dim;
    m.feature_dim = feature_dim;
    m.attn_dim = attn_dim;
    m.context_scale = scale_mode;
    m.embedding = Tensor<S>::zeros({vocab_size, embed_dim}, true);
    m.att = AttentionParams<S>::zeros(hidden_dim, feature_dim, attn_dim);
    m.lstm = LstmParams<S>::zeros(embed_dim + feature_dim, hidden_dim);
    m.out_w = Tensor<S>::zeros({hidden_dim, vocab_size}, true);
    m.out_b = Tensor<S>::zeros({vocab_size}, true);
    m.init_h_w = Tensor<S>::zeros({feature_dim, hidden_dim}, true);
    m.init_h_b = Tensor<S>::zeros({hidden_dim}, true);
    m.init_c_w = Tensor<S>::zeros({feature_dim, hidden_dim}, true);
    m.init_c_b = Tensor<S>::zeros({hidden_dim}, true);
    m.align_embedding = Tensor<S>::zeros({vocab_size, embed_dim}, true);
    m.align_fwd = LstmParams<S>::zeros(embed_dim, hidden_dim / 2);
    m.align_bwd = LstmParams<S>::zeros(embed_dim, hidden_dim / 2);
    return m;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out = {{"embed.w", embedding}};
    for (auto& p : att.named("att")) out.push_back(p);
    for (auto& p : lstm.named("lstm")) out.push_back(p);
    out.emplace_back("out.w", out_w);
    out.emplace_back("out.b", out_b);
    out.emplace_back("init_h.w", init_h_w);
    out.emplace_back("init_h.b", init_h_b);
    out.emplace_back("init_c.w", init_c_w);
    out.emplace_back("init_c.b", init_c_b);
    out.emplace_back("align.embed.w", align_embedding);
    for (auto& p : align_fwd.named("align.fwd")) out.push_back(p);
    for (auto& p : align_bwd.named("align.bwd")) out.push_back(p);
    return out;
  }

  // h0, c0 from tanh maps of the mean focus feature.
  LstmState<S> init_state(const FeatureGrid<S>& features) const {
    const int k = features.num_locations();
    Tensor<S> mean_vf =
        matmul(Tensor<S>::full({k}, S(1) / static_cast<S>(k)), features.locations);
    LstmState<S> st;
    st.h = tanh_t(add(matmul(mean_vf, init_h_w), init_h_b));
    st.c = tanh_t(add(matmul(mean_vf, init_c_w), init_c_b));
    return st;
  }

  struct StepResult {
    Tensor<S> logits;  // {N}
    Tensor<S> alpha;   // {K}
    LstmState<S> state;
  };

  // One decoder step with the context supplied by the caller (enforcement or
  // alignment paths reuse this with their own contexts).
  StepResult decode_step_with_context(int y_prev, const LstmState<S>& state,
                                      const Tensor<S>& context, const Tensor<S>& alpha) const {
    if (y_prev < 0 || y_prev >= vocab_size)
      throw ContractError("decode token " + std::to_string(y_prev) + " out of vocabulary range [0," +
                          std::to_string(vocab_size) + ")");
    StepResult r;
    Tensor<S> x = concat<S>({embedding_row(embedding, y_prev), context});
    r.state = lstm_step(x, state.h, state.c, lstm);
    r.logits = add(matmul(r.state.h, out_w), out_b);
    r.alpha = alpha;
    return r;
  }

  StepResult decode_step(int y_prev, const LstmState<S>& state,
                         const FeatureGrid<S>& features) const {
    Tensor<S> alpha = attend(state.h, features, att);
    Tensor<S> context = weighted_context(alpha, features.locations, context_scale);
    return decode_step_with_context(y_prev, state, context, alpha);
  }

  ExplanationRecord generate(const FeatureGrid<S>& features, const GenerateOptions& opt) const {
    return run_decode(features, opt, nullptr, {});
  }

  // Identical to generate except that steps in active_steps consume the
  // enforced context; those steps record Softmax(eps) as their attention.
  ExplanationRecord generate_enforced(const FeatureGrid<S>& features, const SaliencyMap& eps,
                                      const std::set<int>& active_steps,
                                      const GenerateOptions& opt) const {
    for (int s : active_steps)
      if (s < 1 || s > opt.t_max)
        throw ContractError("enforcement step " + std::to_string(s) + " outside [1," +
                            std::to_string(opt.t_max) + "]");
    if (active_steps.empty()) return run_decode(features, opt, nullptr, {});
    return run_decode(features, opt, &eps, active_steps);
  }

 private:
  struct Hypothesis {
    std::vector<int> tokens;
    std::vector<std::vector<float>> attn;
    LstmState<S> state;
    int prev = kBos;
    double logprob = 0.0;
    int decisions = 0;
    bool done = false;

    double normalized() const { return logprob / std::max(1, decisions); }
  };

  static std::vector<float> to_floats(const Tensor<S>& t) {
    std::vector<float> out(t.size());
    for (int i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t.at(i));
    return out;
  }

  // Advances one hypothesis a single step; returns per-token log-probs and
  // the attention map recorded for this step.
  StepResult step_for(const Hypothesis& hyp, int t, const FeatureGrid<S>& features,
                      const SaliencyMap* eps, const std::set<int>& active,
                      const Tensor<S>& enforced_alpha) const {
    if (eps != nullptr && active.count(t)) {
      Tensor<S> ctx = weighted_context(enforced_alpha, features.locations, context_scale);
      return decode_step_with_context(hyp.prev, hyp.state, ctx, enforced_alpha);
    }
    return decode_step(hyp.prev, hyp.state, features);
  }

  ExplanationRecord run_decode(const FeatureGrid<S>& features, const GenerateOptions& opt,
                               const SaliencyMap* eps, const std::set<int>& active) const {
    if (opt.beam_width < 1) throw ContractError("beam width must be >= 1");
    Tensor<S> enforced_alpha;
    if (eps != nullptr) enforced_alpha = enforced_attention(*eps, features);

    Hypothesis greedy = rollout_greedy(features, opt, eps, active, enforced_alpha);
    Hypothesis best = greedy;
    if (opt.beam_width > 1) {
      Hypothesis beam = rollout_beam(features, opt, eps, active, enforced_alpha);
      // The greedy rollout is always a valid hypothesis, so beam search never
      // returns anything scored below it.
      if (beam.normalized() > greedy.normalized()) best = beam;
    }

    ExplanationRecord rec;
    rec.tokens = best.tokens;
    rec.attention = best.attn;
    rec.score = best.normalized();
    if (eps != nullptr) {
      rec.enforcement.active = true;
      rec.enforcement.source = eps->source;
      rec.enforcement.steps.assign(active.begin(), active.end());
    }
    rec.validate();
    return rec;
  }

  Hypothesis rollout_greedy(const FeatureGrid<S>& features, const GenerateOptions& opt,
                            const SaliencyMap* eps, const std::set<int>& active,
                            const Tensor<S>& enforced_alpha) const {
    Hypothesis hyp;
    hyp.state = init_state(features);
    for (int t = 1; t <= opt.t_max; ++t) {
      StepResult r = step_for(hyp, t, features, eps, active, enforced_alpha);
      Tensor<S> logp = log_softmax(r.logits);
      // PAD and BOS are never emitted; beam expansion skips them the same way
      // so greedy stays token-identical to beam(1).
      int next = kEos;
      for (int i = 0; i < vocab_size; ++i) {
        if (i == kPad || i == kBos) continue;
        if (logp.at(i) > logp.at(next)) next = i;
      }
      hyp.logprob += static_cast<double>(logp.at(next));
      hyp.decisions += 1;
      hyp.state = r.state;
      if (next == kEos) {
        hyp.done = true;
        break;
      }
      hyp.tokens.push_back(next);
      hyp.attn.push_back(to_floats(r.alpha));
      hyp.prev = next;
    }
    return hyp;
  }

  Hypothesis rollout_beam(const FeatureGrid<S>& features, const GenerateOptions& opt,
                          const SaliencyMap* eps, const std::set<int>& active,
                          const Tensor<S>& enforced_alpha) const {
    Hypothesis seed;
    seed.state = init_state(features);
    std::vector<Hypothesis> live = {seed};
    std::vector<Hypothesis> finished;
    for (int t = 1; t <= opt.t_max && !live.empty(); ++t) {
      std::vector<Hypothesis> candidates = finished;
      for (const Hypothesis& hyp : live) {
        StepResult r = step_for(hyp, t, features, eps, active, enforced_alpha);
        Tensor<S> logp = log_softmax(r.logits);
        std::vector<float> alpha_f = to_floats(r.alpha);
        for (int tok = 0; tok < vocab_size; ++tok) {
          if (tok == kPad || tok == kBos) continue;
          Hypothesis next = hyp;
          next.logprob += static_cast<double>(logp.at(tok));
          next.decisions += 1;
          next.state = r.state;
          if (tok == kEos) {
            next.done = true;
          } else {
            next.tokens.push_back(tok);
            next.attn.push_back(alpha_f);
            next.prev = tok;
          }
          candidates.push_back(std::move(next));
        }
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Hypothesis& a, const Hypothesis& b) {
                         return a.normalized() > b.normalized();
                       });
      if (static_cast<int>(candidates.size()) > opt.beam_width)
        candidates.resize(opt.beam_width);
      live.clear();
      finished.clear();
      for (auto& c : candidates) (c.done ? finished : live).push_back(std::move(c));
    }
    for (auto& h : live) finished.push_back(std::move(h));
    Hypothesis best = finished.front();
    for (const auto& h : finished)
      if (h.normalized() > best.normalized()) best = h;
    return best;
  }
};

}  // namespace attex
