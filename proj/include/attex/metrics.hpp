#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attex/errors.hpp"
#include "attex/image.hpp"

namespace attex {

using TokenList = std::vector<std::string>;

enum class BleuSmoothing { none, add_one };

namespace metric_detail {

// n-gram -> count map; the key joins words with an unprintable separator.
inline std::map<std::string, int> ngram_counts(const TokenList& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int k = 1; k < n; ++k) {
      key += '\x1f';
      key += tokens[i + k];
    }
    ++counts[key];
  }
  return counts;
}

// Reference length closest to the candidate length; ties go to the shorter.
inline int closest_ref_len(int cand_len, const std::vector<TokenList>& refs) {
  int best = static_cast<int>(refs[0].size());
  for (const auto& r : refs) {
    const int len = static_cast<int>(r.size());
    const int da = std::abs(len - cand_len), db = std::abs(best - cand_len);
    if (da < db || (da == db && len < best)) best = len;
  }
  return best;
}

struct BleuTally {
  long long matches[4] = {0, 0, 0, 0};
  long long totals[4] = {0, 0, 0, 0};
  long long cand_len = 0;
  long long ref_len = 0;

  void add(const TokenList& candidate, const std::vector<TokenList>& references) {
    if (references.empty()) throw ContractError("bleu4: at least one reference required");
    cand_len += static_cast<long long>(candidate.size());
    ref_len += closest_ref_len(static_cast<int>(candidate.size()), references);
    for (int n = 1; n <= 4; ++n) {
      auto cand = ngram_counts(candidate, n);
      std::map<std::string, int> best;
      for (const auto& r : references)
        for (const auto& [key, cnt] : ngram_counts(r, n))
          best[key] = std::max(best[key], cnt);
      for (const auto& [key, cnt] : cand) {
        totals[n - 1] += cnt;
        auto it = best.find(key);
        if (it != best.end()) matches[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  double score(BleuSmoothing smoothing) const {
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
      double m = static_cast<double>(matches[n]);
      double t = static_cast<double>(totals[n]);
      if (t == 0) return 0.0;
      if (m == 0) {
        if (smoothing == BleuSmoothing::none) return 0.0;
        m = 1.0;
        t += 1.0;
      }
      log_sum += std::log(m / t);
    }
    const double bp =
        cand_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_sum / 4.0);
  }
};

}  // namespace metric_detail

// Geometric mean of clipped 1..4-gram precisions times the brevity penalty.
// Candidates shorter than 4 tokens have no 4-grams and score 0. With
// smoothing `none` any zero precision zeroes the score; `add_one` replaces a
// zero match count with (1)/(total+1).
inline double bleu4(const TokenList& candidate, const std::vector<TokenList>& references,
                    BleuSmoothing smoothing = BleuSmoothing::none) {
  metric_detail::BleuTally tally;
  tally.add(candidate, references);
  return tally.score(smoothing);
}

// Corpus-level BLEU-4: n-gram counts and lengths pool over all sentences
// before the ratio, the standard aggregation for a test-set headline number.
inline double corpus_bleu4(const std::vector<TokenList>& candidates,
                           const std::vector<std::vector<TokenList>>& references,
                           BleuSmoothing smoothing = BleuSmoothing::none) {
  if (candidates.size() != references.size())
    throw ContractError("corpus_bleu4: candidate/reference count mismatch");
  if (candidates.empty()) throw ContractError("corpus_bleu4: empty corpus");
  metric_detail::BleuTally tally;
  for (size_t i = 0; i < candidates.size(); ++i) tally.add(candidates[i], references[i]);
  return tally.score(smoothing);
}

// LCS F-measure with beta = 1.2, best over references.
inline double rouge_l(const TokenList& candidate, const std::vector<TokenList>& references) {
  if (references.empty()) throw ContractError("rouge_l: at least one reference required");
  if (candidate.empty()) return 0.0;
  constexpr double kBeta = 1.2;
  double best = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) continue;
    const size_t n = candidate.size(), m = ref.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
      for (size_t j = 1; j <= m; ++j)
        cur[j] = candidate[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
      std::swap(prev, cur);
    }
    const double lcs = prev[m];
    if (lcs == 0) continue;
    const double p = lcs / static_cast<double>(n);
    const double r = lcs / static_cast<double>(m);
    const double f = (1.0 + kBeta * kBeta) * p * r / (r + kBeta * kBeta * p);
    best = std::max(best, f);
  }
  return best;
}

// Document frequencies over per-image reference sets: an n-gram counts once
// per image whose references contain it anywhere.
struct CiderIdf {
  std::map<std::string, int> df;
  int num_docs = 0;

  static CiderIdf from_references(const std::vector<std::vector<TokenList>>& references) {
    CiderIdf idf;
    idf.num_docs = static_cast<int>(references.size());
    if (idf.num_docs < 2)
      throw ContractError("cider_d: document frequency needs at least 2 images");
    for (const auto& refs : references) {
      std::set<std::string> seen;
      for (const auto& r : refs)
        for (int n = 1; n <= 4; ++n)
          for (const auto& [key, cnt] : metric_detail::ngram_counts(r, n)) seen.insert(key);
      for (const auto& key : seen) ++idf.df[key];
    }
    return idf;
  }

  double weight(const std::string& key, int tf) const {
    auto it = df.find(key);
    const double d = it == df.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
    return static_cast<double>(tf) * (std::log(static_cast<double>(num_docs)) - std::log(d));
  }
};

// CIDEr-D: per n in 1..4, cosine similarity of TF-IDF n-gram vectors with the
// candidate side clipped to the reference count, a Gaussian length penalty
// (sigma = 6), mean over n and references, scaled by 10.
inline std::vector<double> cider_d(const std::vector<TokenList>& candidates,
                                   const std::vector<std::vector<TokenList>>& references,
                                   const CiderIdf& idf) {
  if (candidates.size() != references.size())
    throw ContractError("cider_d: candidate/reference count mismatch");
  constexpr double kSigma = 6.0;

  struct Vec {
    std::map<std::string, double> w[4];
    double norm[4] = {0, 0, 0, 0};
    int len = 0;
  };
  auto vectorize = [&](const TokenList& tokens) {
    Vec v;
    v.len = static_cast<int>(tokens.size());
    for (int n = 1; n <= 4; ++n) {
      for (const auto& [key, cnt] : metric_detail::ngram_counts(tokens, n)) {
        const double w = idf.weight(key, cnt);
        v.w[n - 1][key] = w;
        v.norm[n - 1] += w * w;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) throw ContractError("cider_d: image without references");
    const Vec hyp = vectorize(candidates[i]);
    double sum_over_refs = 0.0;
    for (const auto& r : references[i]) {
      const Vec ref = vectorize(r);
      const double delta = static_cast<double>(hyp.len - ref.len);
      const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
      double val = 0.0;
      for (int n = 0; n < 4; ++n) {
        if (hyp.norm[n] == 0.0 || ref.norm[n] == 0.0) continue;
        double dot = 0.0;
        for (const auto& [key, hw] : hyp.w[n]) {
          auto it = ref.w[n].find(key);
          if (it != ref.w[n].end()) dot += std::min(hw, it->second) * it->second;
        }
        val += dot / (hyp.norm[n] * ref.norm[n]) * penalty;
      }
      sum_over_refs += val;
    }
    scores.push_back(sum_over_refs / static_cast<double>(references[i].size()) / 4.0 * 10.0);
  }
  return scores;
}

inline std::vector<double> cider_d(const std::vector<TokenList>& candidates,
                                   const std::vector<std::vector<TokenList>>& references) {
  return cider_d(candidates, references, CiderIdf::from_references(references));
}

// Maximal run of immediately preceding adjectives plus the head noun, taken
// at the head noun's first occurrence; empty optional when the head is absent.
inline std::optional<TokenList> extract_noun_phrase(
    const TokenList& tokens, const std::string& head_noun,
    const std::map<std::string, std::string>& lexicon) {
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] != head_noun) continue;
    size_t start = i;
    while (start > 0) {
      auto it = lexicon.find(tokens[start - 1]);
      if (it == lexicon.end() || it->second != "adjective") break;
      --start;
    }
    return TokenList(tokens.begin() + start, tokens.begin() + i + 1);
  }
  return std::nullopt;
}

struct PartAnnotation {
  std::string name;  // "<adjectives...> <head noun>"
  int cx = 0, cy = 0;
};

struct FERRecord {
  std::string image_id;
  std::string part;                    // y_o, nearest part to the saliency peak
  TokenList phrase;                    // generated phrase, empty when absent
  std::vector<double> per_reference;   // hit rate against each reference phrase
  double score = 0.0;
  bool skipped = false;

  nlohmann::json to_json() const {
    return {{"image_id", image_id}, {"part", part},     {"phrase", phrase},
            {"per_reference", per_reference}, {"score", score}, {"skipped", skipped}};
  }
};

struct FerImageInput {
  std::string image_id;
  TokenList generated;
  std::vector<PartAnnotation> parts;
  std::vector<TokenList> references;
  const SaliencyMap* map = nullptr;  // null marks a missing map (skipped)
  int image_w = 32, image_h = 32;
};

struct FerResult {
  double mean = 0.0;  // over scored images, in [0,1]
  int scored = 0;
  int skipped = 0;
  std::vector<FERRecord> records;
};

namespace metric_detail {

// Argmax of the map (ties to the lowest flat index) projected to pixel
// coordinates, treating the map as spanning the image.
inline std::pair<int, int> peak_pixel(const SaliencyMap& map, int image_w, int image_h) {
  size_t best = 0;
  for (size_t i = 1; i < map.values.size(); ++i)
    if (map.values[i] > map.values[best]) best = i;
  const int my = static_cast<int>(best) / map.width;
  const int mx = static_cast<int>(best) % map.width;
  const double sx = static_cast<double>(image_w) / map.width;
  const double sy = static_cast<double>(image_h) / map.height;
  return {static_cast<int>(std::lround((mx + 0.5) * sx - 0.5)),
          static_cast<int>(std::lround((my + 0.5) * sy - 0.5))};
}

inline std::string head_noun_of(const std::string& part_name) {
  const auto space = part_name.rfind(' ');
  return space == std::string::npos ? part_name : part_name.substr(space + 1);
}

}  // namespace metric_detail

// Faithful explanation rate. Per image: the part nearest the saliency peak is
// the decision part y_o; if the generated sentence lacks its head noun the
// image scores 0, otherwise the generated phrase is compared against each
// reference's phrase for y_o as |gen ∩ ref| / |ref| over word sets, best
// reference wins. Images without a map are tallied as skipped, never dropped
// silently, and excluded from the mean.
inline FerResult fer_score(const std::vector<FerImageInput>& inputs,
                           const std::map<std::string, std::string>& lexicon) {
  FerResult out;
  double total = 0.0;
  for (const auto& in : inputs) {
    FERRecord rec;
    rec.image_id = in.image_id;
    if (in.map == nullptr) {
      rec.skipped = true;
      ++out.skipped;
      out.records.push_back(std::move(rec));
      continue;
    }
    if (in.parts.empty()) throw ContractError("fer_score: image without part annotations: " + in.image_id);
    if (in.references.empty()) throw ContractError("fer_score: image without references: " + in.image_id);

    const auto [px, py] = metric_detail::peak_pixel(*in.map, in.image_w, in.image_h);
    const PartAnnotation* nearest = &in.parts[0];
    long long best_d2 = -1;
    for (const auto& p : in.parts) {
      const long long dx = p.cx - px, dy = p.cy - py;
      const long long d2 = dx * dx + dy * dy;
      if (best_d2 < 0 || d2 < best_d2) {
        best_d2 = d2;
        nearest = &p;
      }
    }
    rec.part = nearest->name;
    const std::string head = metric_detail::head_noun_of(nearest->name);

    auto gen_phrase = extract_noun_phrase(in.generated, head, lexicon);
    if (gen_phrase.has_value()) {
      rec.phrase = *gen_phrase;
      const std::set<std::string> gen_set(gen_phrase->begin(), gen_phrase->end());
      for (const auto& ref : in.references) {
        auto ref_phrase = extract_noun_phrase(ref, head, lexicon);
        if (!ref_phrase.has_value()) continue;
        const std::set<std::string> ref_set(ref_phrase->begin(), ref_phrase->end());
        int hits = 0;
        for (const auto& w : ref_set)
          if (gen_set.count(w)) ++hits;
        const double rate = static_cast<double>(hits) / static_cast<double>(ref_set.size());
        rec.per_reference.push_back(rate);
        rec.score = std::max(rec.score, rate);
      }
    }
    total += rec.score;
    ++out.scored;
    out.records.push_back(std::move(rec));
  }
  out.mean = out.scored > 0 ? total / static_cast<double>(out.scored) : 0.0;
  return out;
}

// Evaluation report: corpus BLEU-4 as the headline, mean ROUGE-L and CIDEr-D,
// FER as a percentage, plus a per-image breakdown (sentence BLEU uses add-one
// smoothing so short near-misses stay comparable).
inline nlohmann::json make_report(const std::vector<std::string>& image_ids,
                                  const std::vector<TokenList>& candidates,
                                  const std::vector<std::vector<TokenList>>& references,
                                  const FerResult& fer) {
  if (image_ids.size() != candidates.size() || candidates.size() != references.size())
    throw ContractError("make_report: per-image arrays differ in length");
  if (fer.records.size() != image_ids.size())
    throw ContractError("make_report: FER records do not cover the image set");

  const auto cider = cider_d(candidates, references);
  double rouge_sum = 0.0, cider_sum = 0.0;
  nlohmann::json per_image = nlohmann::json::array();
  for (size_t i = 0; i < candidates.size(); ++i) {
    const double r = rouge_l(candidates[i], references[i]);
    rouge_sum += r;
    cider_sum += cider[i];
    per_image.push_back({{"id", image_ids[i]},
                         {"bleu4", bleu4(candidates[i], references[i], BleuSmoothing::add_one)},
                         {"rougeL", r},
                         {"ciderD", cider[i]},
                         {"fer", fer.records[i].skipped ? nlohmann::json() : nlohmann::json(fer.records[i].score)}});
  }
  const double n = static_cast<double>(candidates.size());
  return {{"bleu4", corpus_bleu4(candidates, references)},
          {"rougeL", rouge_sum / n},
          {"ciderD", cider_sum / n},
          {"fer", fer.mean * 100.0},
          {"per_image", per_image},
          {"skipped", fer.skipped}};
}

}  // namespace attex
