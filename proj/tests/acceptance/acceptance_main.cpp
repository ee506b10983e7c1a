#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attex/cli.hpp"
#include "attex/gradcheck.hpp"

// Release gates, one per process invocation (argv[1] in 1..8):
//   1 gradient integrity        2 attention normalization
//   3 enforcement laws          4 alignment law
//   5 metric oracles            6 end-to-end synthetic run
//   7 directional claims        8 reproducibility
// Each prints one [PASS]/[FAIL] line and exits 0 or 1.

namespace {

using namespace attex;
namespace fs = std::filesystem;
using cli::cli_detail::SplitData;
using cli::cli_detail::load_split;
using cli::cli_detail::to_classifier_examples;

int g_failed = 0;

void expect(bool ok, const std::string& what) {
  if (!ok) {
    ++g_failed;
    std::cout << "  unmet: " << what << "\n";
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path fresh_dir(const std::string& stem) {
  fs::path dir = fs::temp_directory_path() / stem;
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  expect(in.good(), "readable " + path.string());
  if (!in.good()) return nlohmann::json();
  return nlohmann::json::parse(in);
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  expect(in.good(), "readable " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  if (code != 0) std::cout << err.str();
  return code;
}

template <typename S>
FeatureGrid<S> random_grid(int h, int w, int channels, Rng& rng) {
  FeatureGrid<S> g;
  g.grid_h = h;
  g.grid_w = w;
  g.channels = channels;
  g.locations = Tensor<S>::uniform({h * w, channels}, S(-1), S(1), rng);
  return g;
}

// ---------------------------------------------------------------- check 1

// Full loss (CE + lambda_align * L_align + lambda_ds * L_ds) on a toy model
// against central differences over every parameter, in 64-bit mode.
bool check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(7);
  auto model = ExplainerModel<double>::init(12, 4, 8, 6, 5, ContextScale::per_paper, rng);

  FeatureGrid<double> ga = random_grid<double>(2, 2, 6, rng);
  FeatureGrid<double> gb = random_grid<double>(2, 2, 6, rng);
  std::vector<const FeatureGrid<double>*> feats = {&ga, &gb};
  std::vector<std::vector<int>> targets = {{4, 6, 8, kEos}, {5, 7, kEos}};

  TrainConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 8;
  cfg.attn_dim = 5;

  std::vector<Tensor<double>> params;
  size_t scalar_count = 0;
  for (auto& [name, p] : model.named_params()) {
    scalar_count += p.values().size();
    params.push_back(p);
  }

  const double err = grad_check<double>(
      [&] { return explainer_loss<double>(model, feats, targets, cfg).total; }, params, 1e-5);
  const double secs = seconds_since(t0);
  std::cout << "  max relative error " << err << " over " << scalar_count << " parameters in "
            << secs << "s\n";
  expect(err < 1e-4, "max relative error < 1e-4");
  expect(secs < 30.0, "runtime < 30s");
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 2

// Both attention sources produce a distribution: entrywise nonnegative,
// summing to 1 within 1e-6, at every fuzzed shape.
bool check_attention_normalization() {
  Rng rng(11);
  int vectors = 0;

  auto check_distribution = [&](const Tensor<float>& alpha, int k) {
    ++vectors;
    expect(alpha.rank() == 1 && alpha.extent(0) == k, "attention shape {K}");
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      if (alpha.at(j) < 0.0f) expect(false, "nonnegative attention weight");
      sum += static_cast<double>(alpha.at(j));
    }
    if (std::abs(sum - 1.0) > 1e-6) expect(false, "attention sums to 1 +- 1e-6");
  };

  for (int it = 0; it < 1000 && g_failed == 0; ++it) {
    const int gh = 1 + static_cast<int>(rng.below(4));
    const int gw = 1 + static_cast<int>(rng.below(4));
    const int f = 2 + static_cast<int>(rng.below(7));
    const int d = 2 + static_cast<int>(rng.below(7));
    const int a = 2 + static_cast<int>(rng.below(7));
    const int k = gh * gw;

    FeatureGrid<float> grid = random_grid<float>(gh, gw, f, rng);
    AttentionParams<float> p;
    p.w_h = Tensor<float>::uniform({d, a}, -2.0f, 2.0f, rng);
    p.w_v = Tensor<float>::uniform({f, a}, -2.0f, 2.0f, rng);
    p.w_s = Tensor<float>::uniform({a}, -2.0f, 2.0f, rng);
    auto h = Tensor<float>::uniform({d}, -3.0f, 3.0f, rng);
    check_distribution(attend(h, grid, p), k);

    SaliencyMap eps;
    eps.height = 1 + static_cast<int>(rng.below(9));
    eps.width = 1 + static_cast<int>(rng.below(9));
    eps.values.resize(static_cast<size_t>(eps.height) * eps.width);
    for (auto& v : eps.values) v = rng.uniform(-5.0f, 5.0f);
    check_distribution(enforced_attention<float>(eps, grid), k);

    const auto mode = it % 2 == 0 ? ContextScale::per_paper : ContextScale::sat;
    auto ctx = enforce_context<float>(eps, grid, mode);
    expect(ctx.rank() == 1 && ctx.extent(0) == f, "context shape {F}");
  }
  std::cout << "  " << vectors << " attention vectors normalized\n";
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 3

SaliencyMap constant_map(int h, int w, float value) {
  SaliencyMap m;
  m.height = h;
  m.width = w;
  m.values.assign(static_cast<size_t>(h) * w, value);
  return m;
}

bool check_enforcement_laws() {
  Rng rng(13);

  // (a) A constant map is the uniform context, bitwise, grid-sized or not.
  for (const auto mode : {ContextScale::per_paper, ContextScale::sat}) {
    auto grid = random_grid<double>(4, 4, 5, rng);
    const int k = grid.num_locations();
    auto uniform = Tensor<double>::from({k}, std::vector<double>(k, 1.0 / k));
    auto want = weighted_context(uniform, grid.locations, mode);
    for (const auto& eps : {constant_map(4, 4, 0.7f), constant_map(8, 8, -2.5f)}) {
      auto got = enforce_context(eps, grid, mode);
      for (int c = 0; c < 5; ++c)
        expect(got.at(c) == want.at(c), "constant map context == uniform context");
    }
  }

  // (b) A one-hot(+50) map pins the context to that cell's features over K.
  {
    auto grid = random_grid<double>(4, 4, 6, rng);
    const int row = 2, col = 1, j = row * 4 + col;
    SaliencyMap eps = constant_map(4, 4, 0.0f);
    eps.at(row, col) = 50.0f;
    auto ctx = enforce_context(eps, grid, ContextScale::per_paper);
    for (int c = 0; c < 6; ++c)
      expect(std::abs(ctx.at(c) - grid.locations.at(j, c) / 16.0) < 1e-6,
             "one-hot(+50) context within 1e-6 of the peak cell / K");
  }

  // (c) Empty active steps leave generation untouched.
  {
    Rng mrng(17);
    auto model = ExplainerModel<float>::init(10, 4, 6, 5, 5, ContextScale::per_paper, mrng);
    auto grid = random_grid<float>(3, 3, 5, mrng);
    SaliencyMap eps = constant_map(3, 3, 0.0f);
    eps.at(1, 2) = 50.0f;
    GenerateOptions opt{1, 12};
    auto plain = model.generate(grid, opt);
    auto enforced = model.generate_enforced(grid, eps, {}, opt);
    expect(enforced.tokens == plain.tokens, "empty active_steps: tokens identical");
    expect(enforced.attention == plain.attention, "empty active_steps: attention identical");
    expect(!enforced.enforcement.active, "empty active_steps: descriptor inactive");
  }
  std::cout << "  constant, one-hot, and empty-step laws hold\n";
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 4

bool check_alignment_law() {
  Rng rng(19);
  int positive = 0;
  for (int it = 0; it < 200; ++it) {
    const int t = 1 + static_cast<int>(rng.below(8));
    const int k = 2 + static_cast<int>(rng.below(8));
    std::vector<Tensor<double>> a, r;
    bool differ = false;
    for (int s = 0; s < t; ++s) {
      a.push_back(softmax(Tensor<double>::uniform({k}, -3.0, 3.0, rng)));
      r.push_back(softmax(Tensor<double>::uniform({k}, -3.0, 3.0, rng)));
      for (int j = 0; j < k; ++j) differ |= a.back().at(j) != r.back().at(j);
    }
    const double loss = alignment_loss(a, r).item();
    expect(loss >= 0.0, "alignment loss nonnegative");
    expect(loss <= 2.0 * t + 1e-12, "alignment loss <= 2T");
    if (differ) {
      expect(loss > 0.0, "differing sequences give positive loss");
      ++positive;
    }
    expect(alignment_loss(a, a).item() == 0.0, "identical sequences give zero loss");
  }
  std::cout << "  200 randomized pairs bounded, " << positive
            << " differing pairs strictly positive, identical pairs exactly zero\n";
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 5

// LCS via the full table, assembled independently of the library kernel.
double oracle_rouge(const TokenList& cand, const std::vector<TokenList>& refs) {
  double best = 0.0;
  for (const auto& ref : refs) {
    std::vector<std::vector<int>> dp(cand.size() + 1, std::vector<int>(ref.size() + 1, 0));
    for (size_t i = 1; i <= cand.size(); ++i)
      for (size_t j = 1; j <= ref.size(); ++j)
        dp[i][j] = cand[i - 1] == ref[j - 1] ? dp[i - 1][j - 1] + 1
                                             : std::max(dp[i - 1][j], dp[i][j - 1]);
    const double lcs = dp[cand.size()][ref.size()];
    if (lcs == 0) continue;
    const double p = lcs / static_cast<double>(cand.size());
    const double r = lcs / static_cast<double>(ref.size());
    best = std::max(best, (1.0 + 1.2 * 1.2) * p * r / (r + 1.2 * 1.2 * p));
  }
  return best;
}

// Step-by-step TF-IDF cosine recomputation with n-grams kept as raw token
// slices rather than joined keys.
std::vector<double> oracle_cider(const std::vector<TokenList>& cands,
                                 const std::vector<std::vector<TokenList>>& refs) {
  using Ngram = std::vector<std::string>;
  auto grams = [](const TokenList& s, int n) {
    std::map<Ngram, int> out;
    for (size_t i = 0; i + n <= s.size(); ++i)
      ++out[Ngram(s.begin() + i, s.begin() + i + n)];
    return out;
  };

  std::map<Ngram, int> df;
  for (const auto& rs : refs) {
    std::set<Ngram> seen;
    for (const auto& r : rs)
      for (int n = 1; n <= 4; ++n)
        for (const auto& [g, c] : grams(r, n)) seen.insert(g);
    for (const auto& g : seen) ++df[g];
  }
  const double logm = std::log(static_cast<double>(refs.size()));
  auto idf = [&](const Ngram& g) {
    auto it = df.find(g);
    return logm - std::log(it == df.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second)));
  };

  std::vector<double> scores;
  for (size_t i = 0; i < cands.size(); ++i) {
    double over_refs = 0.0;
    for (const auto& r : refs[i]) {
      const double delta = static_cast<double>(cands[i].size()) - static_cast<double>(r.size());
      const double penalty = std::exp(-delta * delta / 72.0);
      double val = 0.0;
      for (int n = 1; n <= 4; ++n) {
        auto cg = grams(cands[i], n), rg = grams(r, n);
        double dot = 0.0, cn = 0.0, rn = 0.0;
        for (const auto& [g, c] : cg) cn += idf(g) * c * idf(g) * c;
        for (const auto& [g, c] : rg) rn += idf(g) * c * idf(g) * c;
        for (const auto& [g, c] : cg) {
          auto it = rg.find(g);
          if (it != rg.end())
            dot += std::min(idf(g) * c, idf(g) * it->second) * idf(g) * it->second;
        }
        if (cn > 0.0 && rn > 0.0) val += dot / (std::sqrt(cn) * std::sqrt(rn)) * penalty;
      }
      over_refs += val;
    }
    scores.push_back(over_refs / static_cast<double>(refs[i].size()) / 4.0 * 10.0);
  }
  return scores;
}

bool check_metric_oracles() {
  // Hand-counted BLEU-4: p1..p4 = 4/5, 3/4, 2/3, 1/2 and BP 1.
  const double hand = bleu4({"a", "b", "c", "d", "e"}, {{"a", "b", "c", "d", "f"}});
  expect(std::abs(hand - std::pow(0.2, 0.25)) < 1e-6, "hand BLEU-4 == 0.2^(1/4)");

  // Hand-counted ROUGE-L: LCS 3, P 1, R 3/5 under beta 1.2.
  const double rl = rouge_l({"a", "c", "e"}, {{"a", "b", "c", "d", "e"}});
  expect(std::abs(rl - (1.0 + 1.44) * 0.6 / (0.6 + 1.44)) < 1e-12, "hand ROUGE-L value");

  // Randomized sentences against the independent LCS oracle.
  Rng rng(23);
  const std::vector<std::string> alpha = {"a", "b", "c", "d", "e", "f"};
  auto sentence = [&](int len) {
    TokenList s;
    for (int i = 0; i < len; ++i) s.push_back(alpha[rng.below(6)]);
    return s;
  };
  for (int it = 0; it < 200; ++it) {
    TokenList cand = sentence(1 + static_cast<int>(rng.below(10)));
    std::vector<TokenList> refs;
    for (uint32_t r = 0; r <= rng.below(3); ++r)
      refs.push_back(sentence(1 + static_cast<int>(rng.below(10))));
    if (std::abs(rouge_l(cand, refs) - oracle_rouge(cand, refs)) > 1e-6)
      expect(false, "ROUGE-L matches the brute-force oracle");
  }

  // Three-image toy corpus against the independent TF-IDF recomputation.
  const std::vector<TokenList> cands = {
      {"a", "red", "square", "sits", "here"},
      {"a", "blue", "circle"},
      {"green", "triangle", "near", "the", "edge"}};
  const std::vector<std::vector<TokenList>> refs = {
      {{"a", "red", "square", "sits", "here", "alone"}, {"the", "red", "square", "sits", "here"}},
      {{"a", "blue", "circle", "floats"}, {"blue", "circle", "drifting"}},
      {{"a", "green", "triangle", "near", "the", "edge"}}};
  const auto got = cider_d(cands, refs);
  const auto want = oracle_cider(cands, refs);
  for (size_t i = 0; i < got.size(); ++i)
    expect(std::abs(got[i] - want[i]) < 1e-6, "CIDEr-D matches the brute-force oracle");

  // Part-grounding semantics: absent head noun, exact phrase, half overlap.
  const std::map<std::string, std::string> lexicon = {
      {"white", "adjective"}, {"large", "adjective"}, {"belly", "noun"},
      {"bird", "noun"},       {"this", "other"},      {"has", "other"},
      {"a", "other"},         {"wing", "noun"}};
  SaliencyMap peak = constant_map(4, 4, 0.0f);
  peak.at(0, 0) = 1.0f;
  FerImageInput in;
  in.image_id = "img";
  in.parts = {{"white belly", 3, 3}};
  in.references = {{"this", "bird", "has", "a", "white", "belly"}};
  in.map = &peak;

  in.generated = {"this", "bird", "has", "a", "wing"};
  expect(fer_score({in}, lexicon).mean == 0.0, "absent head noun scores 0");
  in.generated = {"this", "bird", "has", "a", "white", "belly"};
  expect(fer_score({in}, lexicon).mean == 1.0, "exact phrase scores 1");
  in.generated = {"this", "bird", "has", "a", "large", "belly"};
  expect(fer_score({in}, lexicon).mean == 0.5, "large belly vs white belly scores 0.5");

  std::cout << "  BLEU, ROUGE-L, CIDEr-D, and grounding oracles agree\n";
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 6

bool check_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = fresh_dir("attex_accept_e2e");
  const auto p = [&](const char* leaf) { return (root / leaf).string(); };

  expect(run_cli({"gen-data", "--out", p("ds"), "--seed", "7"}) == 0, "gen-data succeeds");
  expect(run_cli({"train-classifier", "--data", p("ds"), "--out", p("clf")}) == 0,
         "train-classifier succeeds");

  const auto clf_manifest = read_json(root / "clf" / "manifest.json");
  const double test_acc =
      clf_manifest["config"]["results"]["test_accuracy"].get<double>();
  std::cout << "  classifier test accuracy " << test_acc << "\n";
  expect(test_acc >= 0.95, "classifier test accuracy >= 0.95");

  expect(run_cli({"train-explainer", "--data", p("ds"), "--classifier",
                  (root / "clf" / "classifier.fae").string(), "--out", p("exp")}) == 0,
         "train-explainer succeeds");
  expect(run_cli({"explain", "--ckpt", (root / "exp" / "explainer.fae").string(), "--data",
                  p("ds"), "--split", "test", "--out", p("preds")}) == 0,
         "explain succeeds");
  expect(run_cli({"eval", "--preds", (root / "preds" / "records.json").string(), "--refs",
                  (root / "ds" / "test" / "data.jsonl").string(), "--metrics", "bleu4",
                  "--out", p("evald")}) == 0,
         "eval succeeds");

  const auto report = read_json(root / "evald" / "report.json");
  const double bleu = report["bleu4"].get<double>();
  const double secs = seconds_since(t0);
  std::cout << "  test BLEU-4 " << bleu << ", wall clock " << secs << "s\n";
  expect(bleu >= 0.5, "test BLEU-4 >= 0.5");
  expect(secs <= 900.0, "wall clock <= 15 minutes");
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 7

// One-hot(+50) map at the class-deciding cell: the softmax pins attention
// onto it, the stand-in for an annotator-supplied saliency map.
SaliencyMap deciding_cell_map(const SynthExample& ex) {
  SaliencyMap m = constant_map(4, 4, 0.0f);
  m.source = "ground_truth";
  const PartSpec& p = ex.spec.parts[ex.spec.disc_index];
  m.at(p.row, p.col) = 50.0f;
  return m;
}

bool check_directional_claims() {
  const fs::path root = fresh_dir("attex_accept_claims");
  SynthConfig dscfg;
  dscfg.num_classes = 4;
  dscfg.train_size = 160;
  dscfg.test_size = 120;
  dscfg.seed = 7;
  generate_dataset(dscfg, root.string());
  const SplitData train = load_split(root, "train");
  const SplitData test = load_split(root, "test");
  const Vocabulary vocab = build_vocabulary(train.examples);

  std::map<std::string, std::string> lexicon;
  const auto lexj = lexicon_json();
  for (auto it = lexj.begin(); it != lexj.end(); ++it)
    lexicon[it.key()] = it.value().get<std::string>();

  for (const uint32_t seed : {7u, 8u, 9u}) {
    ClassifierTrainConfig ccfg;
    ccfg.seed = seed;
    Rng crng(seed);
    CnnClassifier<float> clf(32, dscfg.num_classes, crng);
    train_classifier(clf, to_classifier_examples<float>(train), ccfg);

    std::vector<ExplainerExample<float>> edata;
    for (size_t i = 0; i < train.examples.size(); ++i) {
      ExplainerExample<float> e;
      e.features = extract_features(clf, image_to_tensor<float>(train.images[i]));
      for (const auto& c : train.examples[i].captions)
        e.captions.push_back(vocab.encode(tokenize(c)));
      edata.push_back(std::move(e));
    }
    std::vector<FeatureGrid<float>> tfeat;
    for (const auto& img : test.images)
      tfeat.push_back(extract_features(clf, image_to_tensor<float>(img)));

    TrainConfig aligned_cfg;
    aligned_cfg.seed = seed;
    aligned_cfg.epochs = 80;
    TrainConfig unaligned_cfg = aligned_cfg;
    unaligned_cfg.lambda_align = 0;

    Rng r1(seed), r0(seed);
    auto aligned = ExplainerModel<float>::init(vocab.size(), aligned_cfg.embed_dim,
                                               aligned_cfg.hidden_dim, 64, aligned_cfg.attn_dim,
                                               aligned_cfg.context_scale, r1);
    auto unaligned = ExplainerModel<float>::init(vocab.size(), unaligned_cfg.embed_dim,
                                                 unaligned_cfg.hidden_dim, 64,
                                                 unaligned_cfg.attn_dim,
                                                 unaligned_cfg.context_scale, r0);
    train_explainer(aligned, edata, aligned_cfg);
    train_explainer(unaligned, edata, unaligned_cfg);

    // (a) Enforcing the deciding cell over the opening steps must raise the
    // mean grounding score on the same checkpoint and test set.
    GenerateOptions opt;
    std::set<int> steps;
    for (int s = 1; s <= 8; ++s) steps.insert(s);

    std::vector<SaliencyMap> maps;
    maps.reserve(test.examples.size());
    for (const auto& ex : test.examples) maps.push_back(deciding_cell_map(ex));

    std::vector<FerImageInput> plain_in, enforced_in;
    for (size_t i = 0; i < test.examples.size(); ++i) {
      FerImageInput in;
      in.image_id = test.examples[i].id;
      for (const auto& part : test.examples[i].spec.parts) {
        const auto [cx, cy] = part_center(part.row, part.col);
        in.parts.push_back({part.name(), cx, cy});
      }
      for (const auto& c : test.examples[i].captions) in.references.push_back(tokenize(c));
      in.map = &maps[i];
      in.generated = vocab.decode(aligned.generate(tfeat[i], opt).tokens);
      plain_in.push_back(in);
      in.generated = vocab.decode(aligned.generate_enforced(tfeat[i], maps[i], steps, opt).tokens);
      enforced_in.push_back(in);
    }
    const double fer_plain = fer_score(plain_in, lexicon).mean;
    const double fer_enforced = fer_score(enforced_in, lexicon).mean;

    // (b) Training with the alignment term must tighten the held-out gap
    // between decoding attention and its re-grounded counterpart.
    auto heldout_l1 = [&](const ExplainerModel<float>& m) {
      double acc = 0.0;
      for (size_t i = 0; i < test.examples.size(); ++i) {
        const auto toks = vocab.encode(tokenize(test.examples[i].captions[0]));
        std::vector<const FeatureGrid<float>*> f = {&tfeat[i]};
        std::vector<std::vector<int>> tg = {toks};
        Tape<float> tape;
        Tensor<float> align;
        {
          TapeScope<float> scope(tape);
          align = explainer_loss(m, f, tg, aligned_cfg).align;
        }
        acc += align.item() / static_cast<double>(toks.size() + 1);
      }
      return acc / static_cast<double>(test.examples.size());
    };
    const double l1_aligned = heldout_l1(aligned);
    const double l1_unaligned = heldout_l1(unaligned);

    std::cout << "  seed " << seed << ": grounding plain " << fer_plain << " enforced "
              << fer_enforced << ", held-out L1 aligned " << l1_aligned << " unaligned "
              << l1_unaligned << "\n";
    expect(fer_enforced > fer_plain, "enforcement raises mean grounding score");
    expect(l1_aligned < l1_unaligned, "alignment term lowers held-out L1");
  }
  return g_failed == 0;
}

// ---------------------------------------------------------------- check 8

// Every subcommand once, fixed seeds, small budgets.
void run_all_subcommands(const fs::path& root) {
  const auto p = [&](const char* leaf) { return (root / leaf).string(); };
  const std::string ds = p("ds");
  expect(run_cli({"gen-data", "--out", ds, "--classes", "4", "--train", "16", "--test", "6",
                  "--seed", "7"}) == 0,
         "gen-data succeeds");
  expect(run_cli({"train-classifier", "--data", ds, "--out", p("clf"), "--epochs", "4"}) == 0,
         "train-classifier succeeds");
  const std::string clf = (root / "clf" / "classifier.fae").string();
  expect(run_cli({"train-explainer", "--data", ds, "--classifier", clf, "--out", p("exp"),
                  "--epochs", "3"}) == 0,
         "train-explainer succeeds");
  const std::string ckpt = (root / "exp" / "explainer.fae").string();
  const std::string image = (root / "ds" / "test" / "images" / "test_0000.ppm").string();
  expect(run_cli({"explain", "--ckpt", ckpt, "--data", ds, "--split", "test", "--out",
                  p("preds")}) == 0,
         "explain succeeds");
  expect(run_cli({"dump-attn", "--ckpt", ckpt, "--image", image, "--out", p("attn")}) == 0,
         "dump-attn succeeds");
  expect(run_cli({"gradcam", "--ckpt", clf, "--data", ds, "--split", "test", "--out",
                  p("maps")}) == 0,
         "gradcam succeeds");
  expect(run_cli({"eval", "--preds", (root / "preds" / "records.json").string(), "--refs",
                  (root / "ds" / "test" / "data.jsonl").string(), "--maps", p("maps"),
                  "--lexicon", (root / "ds" / "lexicon.json").string(), "--out",
                  p("evald")}) == 0,
         "eval succeeds");
}

bool check_reproducibility() {
  const fs::path root = fresh_dir("attex_accept_repro");
  auto snapshot = [&] {
    std::map<std::string, std::string> bytes;
    for (const auto& entry : fs::recursive_directory_iterator(root))
      if (entry.is_regular_file())
        bytes[fs::relative(entry.path(), root).string()] = read_bytes(entry.path());
    return bytes;
  };

  run_all_subcommands(root);
  const auto first = snapshot();
  fs::remove_all(root);
  fs::create_directories(root);
  run_all_subcommands(root);
  const auto second = snapshot();

  // Byte-identical trees; manifests may differ only in their timestamp.
  expect(first.size() == second.size(), "re-run yields the same artifact set");
  for (const auto& [rel, bytes] : first) {
    const auto it = second.find(rel);
    expect(it != second.end(), "artifact present in both runs: " + rel);
    if (it == second.end()) continue;
    if (fs::path(rel).filename() == "manifest.json") {
      auto ma = nlohmann::json::parse(bytes), mb = nlohmann::json::parse(it->second);
      ma.erase("created");
      mb.erase("created");
      expect(ma == mb, "manifest matches up to the timestamp: " + rel);
    } else {
      expect(bytes == it->second, "byte-identical: " + rel);
    }
  }
  std::cout << "  " << first.size() << " artifacts compared across re-runs\n";

  // Checkpoint round trip is bit-exact for both kinds.
  const fs::path a = root;
  const fs::path clf_path = a / "clf" / "classifier.fae";
  const fs::path exp_path = a / "exp" / "explainer.fae";
  {
    const auto raw = read_checkpoint(clf_path.string());
    auto clf = load_classifier_checkpoint<float>(clf_path.string());
    const fs::path again = a / "clf_again.fae";
    save_classifier_checkpoint(again.string(),
                               clf, ClassifierTrainConfig::from_json(raw.meta.at("config")));
    expect(read_bytes(clf_path) == read_bytes(again), "classifier checkpoint round trip");
  }
  auto bundle = load_explainer_checkpoint<float>(exp_path.string());
  {
    const fs::path again = a / "exp_again.fae";
    save_explainer_checkpoint(again.string(), bundle.model, bundle.classifier, bundle.vocab,
                              bundle.config);
    expect(read_bytes(exp_path) == read_bytes(again), "explainer checkpoint round trip");
  }

  // Post-load generation reproduces the tokens the explain run wrote.
  const auto records = read_json(a / "preds" / "records.json");
  const Image img = read_ppm((a / "ds" / "test" / "images" / "test_0000.ppm").string());
  const auto features = extract_features(bundle.classifier, image_to_tensor<float>(img));
  GenerateOptions opt{1, bundle.config.t_max};
  const auto rec = bundle.model.generate(features, opt);
  bool found = false;
  for (const auto& row : records) {
    if (row.at("image_id").get<std::string>() != "test_0000") continue;
    found = true;
    expect(row.at("tokens").get<std::vector<int>>() == rec.tokens,
           "post-load generation is token-identical");
  }
  expect(found, "explain output covers test_0000");
  return g_failed == 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: attex_acceptance <check 1..8>\n";
    return 2;
  }
  const int n = std::atoi(argv[1]);
  const char* names[] = {"gradient integrity",  "attention normalization", "enforcement laws",
                         "alignment law",       "metric oracles",          "end-to-end run",
                         "directional claims",  "reproducibility"};
  bool ok = false;
  switch (n) {
    case 1: ok = check_gradients(); break;
    case 2: ok = check_attention_normalization(); break;
    case 3: ok = check_enforcement_laws(); break;
    case 4: ok = check_alignment_law(); break;
    case 5: ok = check_metric_oracles(); break;
    case 6: ok = check_end_to_end(); break;
    case 7: ok = check_directional_claims(); break;
    case 8: ok = check_reproducibility(); break;
    default:
      std::cerr << "usage: attex_acceptance <check 1..8>\n";
      return 2;
  }
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << n << " " << names[n - 1] << "\n";
  return ok ? 0 : 1;
}
