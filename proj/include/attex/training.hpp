#pragma once

#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attex/alignment.hpp"
#include "attex/encoder.hpp"
#include "attex/explainer.hpp"

namespace attex {

struct TrainConfig {
  double lr = 1.0;
  int epochs = 300;
  int batch_size = 16;
  double lambda_align = 1.0;
  double lambda_ds = 1.0;
  ContextScale context_scale = ContextScale::per_paper;
  uint32_t seed = 7;
  std::string precision = "f32";  // f32 | f64
  int t_max = 20;
  int embed_dim = 32;
  int hidden_dim = 64;
  int attn_dim = 64;
  std::string align_input = "teacher_forced";  // teacher_forced | two_pass
  bool stop_grad_realign = false;
  double clip_norm = 5.0;

  void validate() const {
    if (lr < 0) throw ConfigError("lr must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lambda_align < 0 || lambda_ds < 0) throw ConfigError("lambda weights must be >= 0");
    if (t_max < 1) throw ConfigError("t_max must be >= 1");
    if (hidden_dim < 2 || hidden_dim % 2 != 0)
      throw ConfigError("hidden_dim must be even and >= 2 (split across alignment directions)");
    if (embed_dim < 1 || attn_dim < 1) throw ConfigError("model dimensions must be >= 1");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
    if (align_input != "teacher_forced" && align_input != "two_pass")
      throw ConfigError("align_input must be teacher_forced or two_pass, got '" + align_input + "'");
    if (clip_norm <= 0) throw ConfigError("clip_norm must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lambda_align", lambda_align},
            {"lambda_ds", lambda_ds},
            {"context_scale", to_string(context_scale)},
            {"seed", seed},
            {"precision", precision},
            {"t_max", t_max},
            {"embed_dim", embed_dim},
            {"hidden_dim", hidden_dim},
            {"attn_dim", attn_dim},
            {"align_input", align_input},
            {"stop_grad_realign", stop_grad_realign},
            {"clip_norm", clip_norm}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lambda_align = j.value("lambda_align", c.lambda_align);
    c.lambda_ds = j.value("lambda_ds", c.lambda_ds);
    if (j.contains("context_scale"))
      c.context_scale = context_scale_from_string(j.at("context_scale").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.precision = j.value("precision", c.precision);
    c.t_max = j.value("t_max", c.t_max);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.attn_dim = j.value("attn_dim", c.attn_dim);
    c.align_input = j.value("align_input", c.align_input);
    c.stop_grad_realign = j.value("stop_grad_realign", c.stop_grad_realign);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.validate();
    return c;
  }
};

template <typename S>
struct ClassifierExample {
  Tensor<S> image;
  int label = 0;
};

// One explainer training item: frozen encoder features plus the tokenized
// reference captions (word ids, no BOS/EOS/PAD).
template <typename S>
struct ExplainerExample {
  FeatureGrid<S> features;
  std::vector<std::vector<int>> captions;
};

template <typename S>
struct LossBreakdown {
  Tensor<S> total, ce, align, ds;
};

struct EpochStats {
  int epoch = 0;
  double ce = 0, align = 0, ds = 0, total = 0, accuracy = 0;
};

namespace train_detail {

// Strips trailing PAD, validates the sequence contract, returns the
// supervised step count (words plus the EOS step).
inline std::vector<int> supervised_targets(std::vector<int> target, int vocab_size) {
  validate_token_sequence(target, vocab_size);
  while (!target.empty() && target.back() == kPad) target.pop_back();
  return target;
}

}  // namespace train_detail

// Teacher-forced batch loss. Targets are per-item token sequences ending in
// EOS (trailing PAD tolerated and masked). total = CE + λ_align L_α + λ_ds
// Σ_j (1 − Σ_t α_{t,j})²; CE is averaged over all non-PAD target tokens in
// the batch, the align and doubly-stochastic terms over batch items.
template <typename S>
LossBreakdown<S> explainer_loss(const ExplainerModel<S>& model,
                                const std::vector<const FeatureGrid<S>*>& features,
                                const std::vector<std::vector<int>>& targets,
                                const TrainConfig& cfg) {
  if (features.size() != targets.size())
    throw ContractError("explainer_loss: " + std::to_string(features.size()) + " feature grids vs " +
                        std::to_string(targets.size()) + " targets");
  if (features.empty()) throw ContractError("explainer_loss: empty batch");

  std::vector<std::vector<int>> sup(targets.size());
  int non_pad = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    sup[i] = train_detail::supervised_targets(targets[i], model.vocab_size);
    non_pad += static_cast<int>(sup[i].size());
  }
  if (non_pad == 0) throw ContractError("explainer_loss: all-PAD batch");

  const bool want_align = cfg.lambda_align > 0;
  const bool want_ds = cfg.lambda_ds > 0;
  Tensor<S> ce_sum = Tensor<S>::zeros({1});
  Tensor<S> align_sum = Tensor<S>::zeros({1});
  Tensor<S> ds_sum = Tensor<S>::zeros({1});

  for (size_t i = 0; i < sup.size(); ++i) {
    if (sup[i].empty()) continue;
    const FeatureGrid<S>& g = *features[i];
    std::vector<Tensor<S>> alphas;
    alphas.reserve(sup[i].size());
    LstmState<S> st = model.init_state(g);
    int prev = kBos;
    for (int tok : sup[i]) {
      auto r = model.decode_step(prev, st, g);
      ce_sum = sub(ce_sum, pick(log_softmax(r.logits), tok));
      alphas.push_back(r.alpha);
      st = r.state;
      prev = tok;
    }

    if (want_align) {
      std::vector<Tensor<S>> decode_alphas = alphas;
      std::vector<int> align_tokens = sup[i];
      if (cfg.align_input == "two_pass") {
        // Align against the model's own greedy rollout instead of the
        // teacher-forced path: re-decode freely, collecting the attention it
        // actually produced for the words it actually emitted.
        decode_alphas.clear();
        align_tokens.clear();
        LstmState<S> fst = model.init_state(g);
        int fprev = kBos;
        for (int t = 1; t <= cfg.t_max; ++t) {
          auto r = model.decode_step(fprev, fst, g);
          int next = kEos;
          for (int v = 0; v < model.vocab_size; ++v) {
            if (v == kPad || v == kBos) continue;
            if (r.logits.at(v) > r.logits.at(next)) next = v;
          }
          decode_alphas.push_back(r.alpha);
          align_tokens.push_back(next);
          fst = r.state;
          fprev = next;
          if (next == kEos) break;
        }
      }
      auto bi = encode_bidirectional(align_tokens, model);
      auto re = realign(bi, g, model);
      if (cfg.stop_grad_realign)
        for (auto& a : re.alphas) a = a.detach_copy();
      align_sum = add(align_sum, alignment_loss(decode_alphas, re.alphas));
    }

    if (want_ds) {
      Tensor<S> col_sums = alphas[0];
      for (size_t t = 1; t < alphas.size(); ++t) col_sums = add(col_sums, alphas[t]);
      Tensor<S> gap = sub(Tensor<S>::full({col_sums.extent(0)}, S(1)), col_sums);
      ds_sum = add(ds_sum, sum(mul(gap, gap)));
    }
  }

  const S batch = static_cast<S>(sup.size());
  LossBreakdown<S> out;
  out.ce = scale(ce_sum, S(1) / static_cast<S>(non_pad));
  out.align = scale(align_sum, S(1) / batch);
  out.ds = scale(ds_sum, S(1) / batch);
  out.total = add(out.ce, add(scale(out.align, static_cast<S>(cfg.lambda_align)),
                              scale(out.ds, static_cast<S>(cfg.lambda_ds))));
  return out;
}

// Clips the global gradient norm at clip_norm, then applies one SGD update.
// Returns the pre-clip norm. Gradients are left for the caller to zero.
template <typename S>
double sgd_step(const std::vector<std::pair<std::string, Tensor<S>>>& params, double lr,
                double clip_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params)
    for (S gv : p.grad()) sq += static_cast<double>(gv) * static_cast<double>(gv);
  const double norm = std::sqrt(sq);
  const double factor = norm > clip_norm ? clip_norm / norm : 1.0;
  const S step = static_cast<S>(lr * factor);
  for (const auto& [name, p] : params) {
    Tensor<S> t = p;  // shares storage
    auto& vals = t.values();
    const auto& g = t.grad();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] -= step * g[i];
  }
  return norm;
}

template <typename S>
void zero_all_grads(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
  for (const auto& [name, p] : params) {
    Tensor<S> t = p;
    t.zero_grad();
  }
}

inline void write_log_line(std::ostream* log, const nlohmann::json& j) {
  if (log != nullptr) *log << j.dump() << "\n";
}

// SGD over the explainer parameters with the encoder frozen. One JSONL line
// per epoch. Reference captions rotate per epoch as (epoch + index) mod the
// caption count, so every reference supervises in turn.
template <typename S>
std::vector<EpochStats> train_explainer(ExplainerModel<S>& model,
                                        const std::vector<ExplainerExample<S>>& data,
                                        const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_explainer: empty dataset");
  for (const auto& ex : data)
    if (ex.captions.empty()) throw ContractError("train_explainer: example without captions");

  auto params = model.named_params();
  Rng rng(cfg.seed);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> stats;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats es;
    es.epoch = epoch;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const FeatureGrid<S>*> feats;
      std::vector<std::vector<int>> targets;
      for (size_t k = start; k < stop; ++k) {
        const auto& ex = data[order[k]];
        std::vector<int> t = ex.captions[(epoch + order[k]) % ex.captions.size()];
        t.push_back(kEos);
        feats.push_back(&ex.features);
        targets.push_back(std::move(t));
      }
      Tape<S> tape;
      LossBreakdown<S> loss;
      try {
        {
          TapeScope<S> scope(tape);
          loss = explainer_loss(model, feats, targets, cfg);
        }
        if (!std::isfinite(static_cast<double>(loss.total.item())))
          throw NumericError("non-finite loss");
        backward(tape, loss.total);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batches + 1) + ": " + e.what());
      }
      sgd_step(params, cfg.lr, cfg.clip_norm);
      zero_all_grads(params);
      es.ce += static_cast<double>(loss.ce.item());
      es.align += static_cast<double>(loss.align.item());
      es.ds += static_cast<double>(loss.ds.item());
      es.total += static_cast<double>(loss.total.item());
      ++batches;
    }
    es.ce /= batches;
    es.align /= batches;
    es.ds /= batches;
    es.total /= batches;
    stats.push_back(es);
    write_log_line(log, {{"epoch", es.epoch},
                         {"ce", es.ce},
                         {"align", es.align},
                         {"ds", es.ds},
                         {"total", es.total}});
  }
  return stats;
}

template <typename S>
double classifier_accuracy(const CnnClassifier<S>& clf,
                           const std::vector<ClassifierExample<S>>& data) {
  if (data.empty()) throw ContractError("classifier_accuracy: empty dataset");
  int hits = 0;
  for (const auto& ex : data)
    if (clf.forward(ex.image).predicted_class == ex.label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

struct ClassifierTrainConfig {
  double lr = 0.4;
  int epochs = 30;
  int batch_size = 16;
  uint32_t seed = 7;
  double clip_norm = 5.0;

  void validate() const {
    if (lr < 0) throw ConfigError("lr must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (clip_norm <= 0) throw ConfigError("clip_norm must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"seed", seed},
            {"clip_norm", clip_norm}};
  }

  static ClassifierTrainConfig from_json(const nlohmann::json& j) {
    ClassifierTrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.validate();
    return c;
  }
};

// Cross-entropy SGD for the decision model being explained.
template <typename S>
std::vector<EpochStats> train_classifier(CnnClassifier<S>& clf,
                                         const std::vector<ClassifierExample<S>>& data,
                                         const ClassifierTrainConfig& cfg,
                                         std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_classifier: empty dataset");
  for (const auto& ex : data)
    if (ex.label < 0 || ex.label >= clf.num_classes())
      throw ContractError("train_classifier: label " + std::to_string(ex.label) +
                          " out of range [0," + std::to_string(clf.num_classes()) + ")");

  auto params = clf.named_params();
  Rng rng(cfg.seed);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> stats;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats es;
    es.epoch = epoch;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t stop = std::min(order.size(), start + cfg.batch_size);
      Tape<S> tape;
      Tensor<S> loss;
      try {
        {
          TapeScope<S> scope(tape);
          Tensor<S> nll = Tensor<S>::zeros({1});
          for (size_t k = start; k < stop; ++k) {
            const auto& ex = data[order[k]];
            nll = sub(nll, pick(log_softmax(clf.forward(ex.image).logits), ex.label));
          }
          loss = scale(nll, S(1) / static_cast<S>(stop - start));
        }
        if (!std::isfinite(static_cast<double>(loss.item())))
          throw NumericError("non-finite loss");
        backward(tape, loss);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batches + 1) + ": " + e.what());
      }
      sgd_step(params, cfg.lr, cfg.clip_norm);
      zero_all_grads(params);
      es.ce += static_cast<double>(loss.item());
      ++batches;
    }
    es.ce /= batches;
    es.total = es.ce;
    es.accuracy = classifier_accuracy(clf, data);
    stats.push_back(es);
    write_log_line(log, {{"epoch", es.epoch}, {"ce", es.ce}, {"accuracy", es.accuracy}});
  }
  return stats;
}

// Feature extraction against the frozen classifier, used to build explainer
// training sets and at inference.
template <typename S>
FeatureGrid<S> extract_features(const CnnClassifier<S>& clf, const Tensor<S>& image) {
  return clf.forward(image).features;
}

}  // namespace attex
