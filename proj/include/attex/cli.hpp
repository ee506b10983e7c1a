#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attex/checkpoint.hpp"
#include "attex/encoder.hpp"
#include "attex/errors.hpp"
#include "attex/explainer.hpp"
#include "attex/image.hpp"
#include "attex/metrics.hpp"
#include "attex/synthdata.hpp"
#include "attex/training.hpp"

namespace attex::cli {

// Exit codes: 0 success, 2 configuration rejected, 3 runtime failure.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

namespace cli_detail {

namespace fs = std::filesystem;

// Step spec grammar: comma-separated items, each "n" or "a..b", 1-based
// inclusive. Returns the union as a sorted set.
inline std::set<int> parse_steps(const std::string& spec) {
  std::set<int> steps;
  if (spec.empty()) throw ConfigError("step spec is empty");
  size_t pos = 0;
  while (pos <= spec.size()) {
    const size_t comma = std::min(spec.find(',', pos), spec.size());
    const std::string item = spec.substr(pos, comma - pos);
    const auto bad = [&] { return ConfigError("bad step spec item '" + item + "'"); };
    const auto number = [&](const std::string& s) {
      if (s.empty() || s.size() > 6 ||
          !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
        throw bad();
      return std::stoi(s);
    };
    const size_t dots = item.find("..");
    int lo = 0, hi = 0;
    if (dots == std::string::npos) {
      lo = hi = number(item);
    } else {
      lo = number(item.substr(0, dots));
      hi = number(item.substr(dots + 2));
    }
    if (lo < 1 || hi < lo) throw bad();
    for (int s = lo; s <= hi; ++s) steps.insert(s);
    pos = comma + 1;
  }
  return steps;
}

inline std::string iso8601_utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Every subcommand ends by naming its outputs here. The timestamp is the only
// field allowed to differ between re-runs with identical config.
inline void write_manifest(const fs::path& out_dir, const std::string& command,
                           const nlohmann::json& config, std::vector<std::string> artifacts) {
  std::sort(artifacts.begin(), artifacts.end());
  nlohmann::json j;
  j["command"] = command;
  j["config"] = config;
  j["artifacts"] = artifacts;
  j["created"] = iso8601_utc_now();
  const fs::path path = out_dir / "manifest.json";
  std::ofstream out(path);
  if (!out) throw PathError("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

struct SplitData {
  std::vector<SynthExample> examples;
  std::vector<Image> images;  // parallel to examples
};

inline SplitData load_split(const fs::path& data_root, const std::string& split) {
  SplitData d;
  d.examples = load_examples((data_root / split / "data.jsonl").string());
  d.images.reserve(d.examples.size());
  for (const auto& ex : d.examples)
    d.images.push_back(read_ppm((data_root / split / "images" / (ex.id + ".ppm")).string()));
  return d;
}

template <typename S>
std::vector<ClassifierExample<S>> to_classifier_examples(const SplitData& d) {
  std::vector<ClassifierExample<S>> out;
  out.reserve(d.examples.size());
  for (size_t i = 0; i < d.examples.size(); ++i)
    out.push_back({image_to_tensor<S>(d.images[i]), d.examples[i].label});
  return out;
}

inline int num_classes_of(const SplitData& a, const SplitData& b) {
  int c = 0;
  for (const auto& ex : a.examples) c = std::max(c, ex.label + 1);
  for (const auto& ex : b.examples) c = std::max(c, ex.label + 1);
  return c;
}

inline std::map<std::string, std::string> read_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open lexicon: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  std::map<std::string, std::string> lex;
  for (auto it = j.begin(); it != j.end(); ++it) lex[it.key()] = it.value().get<std::string>();
  return lex;
}

inline std::string step_file(const std::string& prefix, int step, const std::string& ext) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "_%02d", step);
  return prefix + buf + ext;
}

// Per-step attention as a saliency map on the feature grid; K must factor as
// grid_h * grid_w of the checkpointed encoder.
inline SaliencyMap attention_map(const std::vector<float>& weights, int grid_h, int grid_w) {
  SaliencyMap m;
  m.height = grid_h;
  m.width = grid_w;
  m.source = "custom";
  m.values = weights;
  if (static_cast<int>(weights.size()) != grid_h * grid_w)
    throw ContractError("attention length " + std::to_string(weights.size()) +
                        " does not cover a " + std::to_string(grid_h) + "x" +
                        std::to_string(grid_w) + " grid");
  return m;
}

// Brightness modulation of the input by the normalized per-step attention,
// nearest-upsampled to pixel resolution. Cells with the peak weight keep full
// brightness; zero-weight cells drop to the floor factor.
inline Image attention_overlay(const Image& img, const SaliencyMap& attn) {
  const SaliencyMap up = upsample_nearest(attn, img.height, img.width);
  float mx = 0.0f;
  for (float v : up.values) mx = std::max(mx, v);
  Image out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const float a = mx > 0.0f ? std::max(up.at(y, x), 0.0f) / mx : 0.0f;
      const float f = 0.25f + 0.75f * a;
      for (int c = 0; c < img.channels; ++c) out.at(c, y, x) = img.at(c, y, x) * f;
    }
  }
  return out;
}

struct GenDataArgs {
  std::string out;
  SynthConfig cfg;
};

inline void cmd_gen_data(const GenDataArgs& a, std::ostream& log) {
  try {
    a.cfg.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  generate_dataset(a.cfg, a.out);
  std::vector<std::string> artifacts = {"lexicon.json", "train/data.jsonl", "test/data.jsonl"};
  for (const auto& [split, count] :
       {std::pair{"train", a.cfg.train_size}, std::pair{"test", a.cfg.test_size}}) {
    for (int i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s/images/%s_%04d.ppm", split, split, i);
      artifacts.emplace_back(buf);
    }
  }
  write_manifest(a.out, "gen-data", a.cfg.to_json(), std::move(artifacts));
  log << "gen-data: " << a.cfg.train_size << " train / " << a.cfg.test_size << " test, "
      << a.cfg.num_classes << " classes -> " << a.out << "\n";
}

struct TrainClassifierArgs {
  std::string data, out;
  ClassifierTrainConfig cfg;
};

inline void cmd_train_classifier(const TrainClassifierArgs& a, std::ostream& log) {
  const SplitData train = load_split(a.data, "train");
  const SplitData test = load_split(a.data, "test");
  const int num_classes = num_classes_of(train, test);
  const auto train_ex = to_classifier_examples<float>(train);
  const auto test_ex = to_classifier_examples<float>(test);

  Rng rng(a.cfg.seed);
  CnnClassifier<float> clf(kImagePx, num_classes, rng);
  fs::create_directories(a.out);
  std::ofstream log_file(fs::path(a.out) / "train_log.jsonl");
  if (!log_file) throw PathError("cannot write log: " + (fs::path(a.out) / "train_log.jsonl").string());
  const auto stats = train_classifier(clf, train_ex, a.cfg, &log_file);
  const double test_acc = classifier_accuracy(clf, test_ex);
  save_classifier_checkpoint((fs::path(a.out) / "classifier.fae").string(), clf, a.cfg);

  nlohmann::json config = a.cfg.to_json();
  config["data"] = a.data;
  config["num_classes"] = num_classes;
  nlohmann::json manifest_cfg = {{"train", config},
                                 {"results",
                                  {{"train_accuracy", stats.empty() ? 0.0 : stats.back().accuracy},
                                   {"test_accuracy", test_acc}}}};
  write_manifest(a.out, "train-classifier", manifest_cfg,
                 {"classifier.fae", "train_log.jsonl"});
  log << "train-classifier: train acc " << (stats.empty() ? 0.0 : stats.back().accuracy)
      << ", test acc " << test_acc << " -> " << a.out << "/classifier.fae\n";
}

struct TrainExplainerArgs {
  std::string data, classifier, out;
  TrainConfig cfg;
};

template <typename S>
void run_train_explainer(const TrainExplainerArgs& a, std::ostream& log) {
  const auto clf = load_classifier_checkpoint<S>(a.classifier);
  const SplitData train = load_split(a.data, "train");
  const Vocabulary vocab = build_vocabulary(train.examples);

  std::vector<ExplainerExample<S>> data;
  data.reserve(train.examples.size());
  for (size_t i = 0; i < train.examples.size(); ++i) {
    ExplainerExample<S> ex;
    ex.features = extract_features(clf, image_to_tensor<S>(train.images[i]));
    for (const auto& cap : train.examples[i].captions) ex.captions.push_back(vocab.encode(tokenize(cap)));
    data.push_back(std::move(ex));
  }
  const int feature_dim = data.front().features.channels;

  Rng rng(a.cfg.seed);
  auto model = ExplainerModel<S>::init(vocab.size(), a.cfg.embed_dim, a.cfg.hidden_dim,
                                       feature_dim, a.cfg.attn_dim, a.cfg.context_scale, rng);
  fs::create_directories(a.out);
  std::ofstream log_file(fs::path(a.out) / "train_log.jsonl");
  if (!log_file) throw PathError("cannot write log: " + (fs::path(a.out) / "train_log.jsonl").string());
  const auto stats = train_explainer(model, data, a.cfg, &log_file);
  save_explainer_checkpoint((fs::path(a.out) / "explainer.fae").string(), model, clf, vocab,
                            a.cfg);

  nlohmann::json config = a.cfg.to_json();
  config["data"] = a.data;
  config["classifier"] = a.classifier;
  nlohmann::json manifest_cfg = {{"train", config}};
  if (!stats.empty())
    manifest_cfg["results"] = {{"ce", stats.back().ce},
                               {"align", stats.back().align},
                               {"ds", stats.back().ds},
                               {"total", stats.back().total}};
  write_manifest(a.out, "train-explainer", manifest_cfg, {"explainer.fae", "train_log.jsonl"});
  log << "train-explainer: final ce " << (stats.empty() ? 0.0 : stats.back().ce) << ", total "
      << (stats.empty() ? 0.0 : stats.back().total) << " -> " << a.out << "/explainer.fae\n";
}

inline void cmd_train_explainer(const TrainExplainerArgs& a, std::ostream& log) {
  a.cfg.validate();
  if (a.cfg.precision == "f64")
    run_train_explainer<double>(a, log);
  else
    run_train_explainer<float>(a, log);
}

// Shared by explain and dump-attn: generation options plus the optional
// enforcement inputs. Steps require a map; a map with no steps runs plain
// generation and records an inactive descriptor.
struct GenerateArgs {
  std::string ckpt, image, data, split = "test", out;
  int beam = 1;
  int t_max = 0;  // 0 means the checkpointed training value
  std::string enforce, steps;
};

inline GenerateOptions make_options(const GenerateArgs& a, const TrainConfig& cfg) {
  if (a.beam < 1) throw ConfigError("beam width must be >= 1");
  if (a.t_max < 0) throw ConfigError("t-max must be >= 0");
  GenerateOptions opt;
  opt.beam_width = a.beam;
  opt.t_max = a.t_max > 0 ? a.t_max : cfg.t_max;
  return opt;
}

struct EnforcePlan {
  std::optional<SaliencyMap> map;
  std::set<int> steps;
};

inline EnforcePlan make_enforce_plan(const GenerateArgs& a) {
  if (!a.steps.empty() && a.enforce.empty())
    throw ConfigError("--steps requires --enforce");
  EnforcePlan plan;
  if (!a.steps.empty()) plan.steps = parse_steps(a.steps);
  if (!a.enforce.empty()) plan.map = read_map_any(a.enforce);
  return plan;
}

template <typename S>
ExplanationRecord explain_one(const ExplainerBundle<S>& b, const Image& img,
                              const std::string& image_id, const EnforcePlan& plan,
                              const GenerateOptions& opt) {
  const auto fr = b.classifier.forward(image_to_tensor<S>(img));
  ExplanationRecord rec =
      plan.map ? b.model.generate_enforced(fr.features, *plan.map, plan.steps, opt)
               : b.model.generate(fr.features, opt);
  rec.image_id = image_id;
  rec.predicted_class = fr.predicted_class;
  return rec;
}

inline nlohmann::json record_json(const ExplanationRecord& rec, const Vocabulary& vocab) {
  nlohmann::json j = rec.to_json();
  j["words"] = vocab.decode(rec.tokens);
  return j;
}

inline nlohmann::json generate_config_json(const GenerateArgs& a, const GenerateOptions& opt) {
  nlohmann::json j = {{"ckpt", a.ckpt}, {"beam", opt.beam_width}, {"t_max", opt.t_max}};
  if (!a.image.empty()) j["image"] = a.image;
  if (!a.data.empty()) {
    j["data"] = a.data;
    j["split"] = a.split;
  }
  if (!a.enforce.empty()) j["enforce"] = a.enforce;
  if (!a.steps.empty()) j["steps"] = a.steps;
  return j;
}

inline void require_one_input(const GenerateArgs& a, bool allow_bulk) {
  if (!allow_bulk) {
    if (a.image.empty()) throw ConfigError("--image is required");
    return;
  }
  if (a.image.empty() == a.data.empty())
    throw ConfigError("exactly one of --image and --data is required");
}

inline void cmd_explain(const GenerateArgs& a, std::ostream& log) {
  require_one_input(a, true);
  const EnforcePlan plan = make_enforce_plan(a);
  const auto bundle = load_explainer_checkpoint<float>(a.ckpt);
  const GenerateOptions opt = make_options(a, bundle.config);
  const int grid = bundle.classifier.feature_grid();
  fs::create_directories(a.out);
  std::vector<std::string> artifacts;

  if (!a.image.empty()) {
    const Image img = read_ppm(a.image);
    const std::string id = fs::path(a.image).stem().string();
    const ExplanationRecord rec = explain_one(bundle, img, id, plan, opt);
    std::ofstream rf(fs::path(a.out) / "record.json");
    if (!rf) throw PathError("cannot write record: " + (fs::path(a.out) / "record.json").string());
    rf << record_json(rec, bundle.vocab).dump(2) << "\n";
    artifacts.emplace_back("record.json");
    for (size_t t = 0; t < rec.attention.size(); ++t) {
      const SaliencyMap m = attention_map(rec.attention[t], grid, grid);
      const std::string name = step_file("attn_step", static_cast<int>(t) + 1, ".pgm");
      write_pgm((fs::path(a.out) / name).string(), upsample_nearest(m, kImagePx, kImagePx));
      artifacts.push_back(name);
    }
    log << "explain: " << id << " -> " << rec.tokens.size() << " tokens, score " << rec.score
        << "\n";
  } else {
    const SplitData split = load_split(a.data, a.split);
    nlohmann::json records = nlohmann::json::array();
    for (size_t i = 0; i < split.examples.size(); ++i) {
      const ExplanationRecord rec =
          explain_one(bundle, split.images[i], split.examples[i].id, plan, opt);
      records.push_back(record_json(rec, bundle.vocab));
    }
    std::ofstream rf(fs::path(a.out) / "records.json");
    if (!rf) throw PathError("cannot write records: " + (fs::path(a.out) / "records.json").string());
    rf << records.dump(2) << "\n";
    artifacts.emplace_back("records.json");
    log << "explain: " << split.examples.size() << " records -> " << a.out << "/records.json\n";
  }
  write_manifest(a.out, "explain", generate_config_json(a, opt), std::move(artifacts));
}

inline void cmd_dump_attn(const GenerateArgs& a, std::ostream& log) {
  require_one_input(a, false);
  const EnforcePlan plan = make_enforce_plan(a);
  const auto bundle = load_explainer_checkpoint<float>(a.ckpt);
  const GenerateOptions opt = make_options(a, bundle.config);
  const int grid = bundle.classifier.feature_grid();

  const Image img = read_ppm(a.image);
  const std::string id = fs::path(a.image).stem().string();
  const ExplanationRecord rec = explain_one(bundle, img, id, plan, opt);
  const auto words = bundle.vocab.decode(rec.tokens);

  fs::create_directories(a.out);
  std::vector<std::string> artifacts = {"tokens.txt"};
  std::ofstream tf(fs::path(a.out) / "tokens.txt");
  if (!tf) throw PathError("cannot write tokens: " + (fs::path(a.out) / "tokens.txt").string());
  for (const auto& w : words) tf << w << "\n";
  for (size_t t = 0; t < rec.attention.size(); ++t) {
    const SaliencyMap m = attention_map(rec.attention[t], grid, grid);
    const std::string attn_name = step_file("attn_step", static_cast<int>(t) + 1, ".pgm");
    const std::string over_name = step_file("overlay_step", static_cast<int>(t) + 1, ".ppm");
    write_pgm((fs::path(a.out) / attn_name).string(), upsample_nearest(m, img.height, img.width));
    write_ppm((fs::path(a.out) / over_name).string(), attention_overlay(img, m));
    artifacts.push_back(attn_name);
    artifacts.push_back(over_name);
  }
  write_manifest(a.out, "dump-attn", generate_config_json(a, opt), std::move(artifacts));
  log << "dump-attn: " << rec.attention.size() << " steps -> " << a.out << "\n";
}

struct GradcamArgs {
  std::string ckpt, image, data, split = "test", out;
  int class_index = -1;  // -1 means the predicted class
};

// Accepts either checkpoint kind; an explainer checkpoint contributes its
// embedded classifier.
inline CnnClassifier<float> load_any_classifier(const std::string& path) {
  const RawCheckpoint raw = read_checkpoint(path);
  if (raw.kind == "classifier") return load_classifier_checkpoint<float>(path);
  if (raw.kind == "explainer") return load_explainer_checkpoint<float>(path).classifier;
  throw FormatError(path + ": unknown checkpoint kind '" + raw.kind + "'");
}

inline void cmd_gradcam(const GradcamArgs& a, std::ostream& log) {
  if (a.image.empty() == a.data.empty())
    throw ConfigError("exactly one of --image and --data is required");
  const auto clf = load_any_classifier(a.ckpt);
  fs::create_directories(a.out);
  std::vector<std::string> artifacts;
  nlohmann::json config = {{"ckpt", a.ckpt}, {"class", a.class_index}};

  const auto map_for = [&](const Image& img) {
    const auto t = image_to_tensor<float>(img);
    const int cls = a.class_index >= 0 ? a.class_index : clf.forward(t).predicted_class;
    return gradcam(clf, t, cls);
  };

  if (!a.image.empty()) {
    config["image"] = a.image;
    const SaliencyMap map = map_for(read_ppm(a.image));
    write_map_json((fs::path(a.out) / "map.json").string(), map);
    write_pgm((fs::path(a.out) / "map.pgm").string(), upsample_nearest(map, kImagePx, kImagePx));
    artifacts = {"map.json", "map.pgm"};
    const auto [py, px] = map_argmax(map);
    log << "gradcam: peak cell (" << py << "," << px << ") -> " << a.out << "/map.json\n";
  } else {
    config["data"] = a.data;
    config["split"] = a.split;
    const SplitData split = load_split(a.data, a.split);
    for (size_t i = 0; i < split.examples.size(); ++i) {
      const std::string name = split.examples[i].id + ".json";
      write_map_json((fs::path(a.out) / name).string(), map_for(split.images[i]));
      artifacts.push_back(name);
    }
    log << "gradcam: " << split.examples.size() << " maps -> " << a.out << "\n";
  }
  write_manifest(a.out, "gradcam", config, std::move(artifacts));
}

struct EvalArgs {
  std::string preds, refs, maps, lexicon, annotations, metrics, out;
};

inline std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    const size_t comma = std::min(csv.find(',', pos), csv.size());
    if (comma > pos) out.push_back(csv.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return j;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline void cmd_eval(const EvalArgs& a, std::ostream& log) {
  std::vector<std::string> metrics = split_csv(
      a.metrics.empty() ? (a.maps.empty() ? "bleu4,rougeL,ciderD" : "bleu4,rougeL,ciderD,fer")
                        : a.metrics);
  const std::set<std::string> known = {"bleu4", "rougeL", "ciderD", "fer"};
  for (const auto& m : metrics)
    if (!known.count(m)) throw ConfigError("unknown metric '" + m + "'");
  const auto want = [&](const std::string& m) {
    return std::find(metrics.begin(), metrics.end(), m) != metrics.end();
  };
  if (metrics.empty()) throw ConfigError("no metrics selected");

  const bool refs_jsonl = ends_with(a.refs, ".jsonl");
  const std::string annotations = !a.annotations.empty() ? a.annotations
                                  : refs_jsonl            ? a.refs
                                                          : "";
  if (want("fer")) {
    if (a.maps.empty()) throw ConfigError("fer requires --maps");
    if (a.lexicon.empty()) throw ConfigError("fer requires --lexicon");
    if (annotations.empty()) throw ConfigError("fer requires part annotations (--annotations or a .jsonl --refs)");
  }

  // Predictions: array of {image_id, words}.
  const nlohmann::json preds = read_json_file(a.preds);
  if (!preds.is_array()) throw FormatError(a.preds + ": expected an array of records");
  std::vector<std::string> ids;
  std::vector<TokenList> candidates;
  for (const auto& p : preds) {
    ids.push_back(p.at("image_id").get<std::string>());
    candidates.push_back(p.at("words").get<std::vector<std::string>>());
  }
  if (ids.empty()) throw ContractError("no predictions in " + a.preds);

  // References: dataset jsonl (captions per id) or a plain {id: [strings]} object.
  std::map<std::string, std::vector<TokenList>> ref_map;
  std::map<std::string, std::vector<PartAnnotation>> part_map;
  if (refs_jsonl) {
    for (const auto& ex : load_examples(a.refs)) {
      auto& refs = ref_map[ex.id];
      for (const auto& cap : ex.captions) refs.push_back(tokenize(cap));
    }
  } else {
    const nlohmann::json j = read_json_file(a.refs);
    if (!j.is_object()) throw FormatError(a.refs + ": expected {image_id: [captions]}");
    for (auto it = j.begin(); it != j.end(); ++it)
      for (const auto& cap : it.value()) ref_map[it.key()].push_back(tokenize(cap.get<std::string>()));
  }
  if (!annotations.empty()) {
    for (const auto& ex : load_examples(annotations)) {
      auto& parts = part_map[ex.id];
      for (const auto& p : ex.spec.parts) {
        const auto [cx, cy] = part_center(p.row, p.col);
        parts.push_back({p.name(), cx, cy});
      }
    }
  }

  std::vector<std::vector<TokenList>> references;
  for (const auto& id : ids) {
    const auto it = ref_map.find(id);
    if (it == ref_map.end() || it->second.empty())
      throw ContractError("no references for image '" + id + "'");
    references.push_back(it->second);
  }

  FerResult fer;
  if (want("fer")) {
    const auto lexicon = read_lexicon(a.lexicon);
    std::vector<SaliencyMap> maps(ids.size());
    std::vector<bool> has_map(ids.size(), false);
    std::vector<FerImageInput> inputs;
    for (size_t i = 0; i < ids.size(); ++i) {
      FerImageInput in;
      in.image_id = ids[i];
      in.generated = candidates[i];
      const auto pit = part_map.find(ids[i]);
      if (pit == part_map.end() || pit->second.empty())
        throw ContractError("no part annotations for image '" + ids[i] + "'");
      in.parts = pit->second;
      in.references = references[i];
      for (const auto& ext : {".json", ".pgm"}) {
        const fs::path mp = fs::path(a.maps) / (ids[i] + ext);
        if (fs::exists(mp)) {
          maps[i] = read_map_any(mp.string());
          has_map[i] = true;
          break;
        }
      }
      in.image_w = kImagePx;
      in.image_h = kImagePx;
      inputs.push_back(std::move(in));
    }
    for (size_t i = 0; i < ids.size(); ++i)
      if (has_map[i]) inputs[i].map = &maps[i];
    fer = fer_score(inputs, lexicon);
  }

  // Per-metric assembly; ciderD needs at least two images by contract.
  nlohmann::json report;
  std::vector<double> cider;
  if (want("bleu4")) report["bleu4"] = corpus_bleu4(candidates, references);
  if (want("rougeL")) {
    double acc = 0;
    for (size_t i = 0; i < ids.size(); ++i) acc += rouge_l(candidates[i], references[i]);
    report["rougeL"] = acc / static_cast<double>(ids.size());
  }
  if (want("ciderD")) {
    cider = cider_d(candidates, references);
    double acc = 0;
    for (double v : cider) acc += v;
    report["ciderD"] = acc / static_cast<double>(cider.size());
  }
  if (want("fer")) {
    report["fer"] = 100.0 * fer.mean;
    report["skipped"] = fer.skipped;
  }
  nlohmann::json per_image = nlohmann::json::array();
  for (size_t i = 0; i < ids.size(); ++i) {
    nlohmann::json row = {{"image_id", ids[i]}};
    if (want("bleu4")) row["bleu4"] = bleu4(candidates[i], references[i], BleuSmoothing::add_one);
    if (want("rougeL")) row["rougeL"] = rouge_l(candidates[i], references[i]);
    if (want("ciderD")) row["ciderD"] = cider[i];
    if (want("fer"))
      row["fer"] = fer.records[i].skipped ? nlohmann::json(nullptr)
                                          : nlohmann::json(100.0 * fer.records[i].score);
    per_image.push_back(row);
  }
  report["per_image"] = per_image;

  fs::create_directories(a.out);
  std::ofstream rf(fs::path(a.out) / "report.json");
  if (!rf) throw PathError("cannot write report: " + (fs::path(a.out) / "report.json").string());
  rf << report.dump(2) << "\n";

  nlohmann::json config = {{"preds", a.preds}, {"refs", a.refs}, {"metrics", metrics}};
  if (!a.maps.empty()) config["maps"] = a.maps;
  if (!a.lexicon.empty()) config["lexicon"] = a.lexicon;
  if (!annotations.empty()) config["annotations"] = annotations;
  write_manifest(a.out, "eval", config, {"report.json"});

  log << "eval:";
  for (const auto& m : metrics)
    if (report.contains(m)) log << " " << m << " " << report[m].dump();
  log << " -> " << a.out << "/report.json\n";
}

}  // namespace cli_detail

// Single entry point used by both main() and the tests. Streams capture what
// a terminal user would see; nothing below writes outside each --out path.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  using namespace cli_detail;

  CLI::App app{"attention-driven explanation toolkit for grid classifiers"};
  app.name("attex");
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic parts dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--classes", gen.cfg.num_classes, "number of classes (1..16)");
  gen_cmd->add_option("--train", gen.cfg.train_size, "training image count");
  gen_cmd->add_option("--test", gen.cfg.test_size, "test image count");
  gen_cmd->add_option("--seed", gen.cfg.seed, "generation seed");

  TrainClassifierArgs tc;
  auto* tc_cmd = app.add_subcommand("train-classifier", "train the decision model");
  tc_cmd->add_option("--data", tc.data, "dataset root (gen-data output)")->required();
  tc_cmd->add_option("--out", tc.out, "output directory")->required();
  tc_cmd->add_option("--epochs", tc.cfg.epochs, "training epochs");
  tc_cmd->add_option("--lr", tc.cfg.lr, "learning rate");
  tc_cmd->add_option("--batch", tc.cfg.batch_size, "batch size");
  tc_cmd->add_option("--seed", tc.cfg.seed, "training seed");
  tc_cmd->add_option("--clip", tc.cfg.clip_norm, "gradient clipping norm");

  TrainExplainerArgs te;
  std::string te_scale = "per_paper";
  auto* te_cmd = app.add_subcommand("train-explainer", "train the explanation decoder");
  te_cmd->add_option("--data", te.data, "dataset root (gen-data output)")->required();
  te_cmd->add_option("--classifier", te.classifier, "classifier checkpoint")->required();
  te_cmd->add_option("--out", te.out, "output directory")->required();
  te_cmd->add_option("--epochs", te.cfg.epochs, "training epochs");
  te_cmd->add_option("--lr", te.cfg.lr, "learning rate");
  te_cmd->add_option("--batch", te.cfg.batch_size, "batch size");
  te_cmd->add_option("--seed", te.cfg.seed, "training seed");
  te_cmd->add_option("--lambda-align", te.cfg.lambda_align, "alignment loss weight");
  te_cmd->add_option("--lambda-ds", te.cfg.lambda_ds, "doubly stochastic loss weight");
  te_cmd->add_option("--context-scale", te_scale, "context scaling: per_paper or sat");
  te_cmd->add_option("--align-input", te.cfg.align_input,
                     "alignment token source: teacher_forced or two_pass");
  te_cmd->add_flag("--stop-grad-realign", te.cfg.stop_grad_realign,
                   "detach decoder attention inside the alignment loss");
  te_cmd->add_option("--precision", te.cfg.precision, "training precision: f32 or f64");
  te_cmd->add_option("--t-max", te.cfg.t_max, "decoding budget incl. the EOS step");
  te_cmd->add_option("--embed", te.cfg.embed_dim, "embedding dimension");
  te_cmd->add_option("--hidden", te.cfg.hidden_dim, "decoder hidden dimension");
  te_cmd->add_option("--attn", te.cfg.attn_dim, "attention hidden dimension");
  te_cmd->add_option("--clip", te.cfg.clip_norm, "gradient clipping norm");

  GenerateArgs ex;
  auto* ex_cmd = app.add_subcommand("explain", "generate explanations from a checkpoint");
  ex_cmd->add_option("--ckpt", ex.ckpt, "explainer checkpoint")->required();
  ex_cmd->add_option("--image", ex.image, "single input image (ppm)");
  ex_cmd->add_option("--data", ex.data, "dataset root for bulk explanation");
  ex_cmd->add_option("--split", ex.split, "dataset split for --data");
  ex_cmd->add_option("--out", ex.out, "output directory")->required();
  ex_cmd->add_option("--beam", ex.beam, "beam width, 1 = greedy");
  ex_cmd->add_option("--t-max", ex.t_max, "decoding budget, 0 = checkpointed value");
  ex_cmd->add_option("--enforce", ex.enforce, "saliency map steering the enforced steps");
  ex_cmd->add_option("--steps", ex.steps, "enforced steps, e.g. 1..5,7");

  GenerateArgs da;
  auto* da_cmd = app.add_subcommand("dump-attn", "dump per-step attention maps and overlays");
  da_cmd->add_option("--ckpt", da.ckpt, "explainer checkpoint")->required();
  da_cmd->add_option("--image", da.image, "input image (ppm)")->required();
  da_cmd->add_option("--out", da.out, "output directory")->required();
  da_cmd->add_option("--beam", da.beam, "beam width, 1 = greedy");
  da_cmd->add_option("--t-max", da.t_max, "decoding budget, 0 = checkpointed value");
  da_cmd->add_option("--enforce", da.enforce, "saliency map steering the enforced steps");
  da_cmd->add_option("--steps", da.steps, "enforced steps, e.g. 1..5,7");

  GradcamArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcam", "class activation maps from a checkpoint");
  gc_cmd->add_option("--ckpt", gc.ckpt, "classifier or explainer checkpoint")->required();
  gc_cmd->add_option("--image", gc.image, "single input image (ppm)");
  gc_cmd->add_option("--data", gc.data, "dataset root for bulk maps");
  gc_cmd->add_option("--split", gc.split, "dataset split for --data");
  gc_cmd->add_option("--out", gc.out, "output directory")->required();
  gc_cmd->add_option("--class", gc.class_index, "class index, -1 = predicted");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "score predictions against references");
  ev_cmd->add_option("--preds", ev.preds, "predictions JSON (explain output)")->required();
  ev_cmd->add_option("--refs", ev.refs, "references: dataset .jsonl or {id: [captions]} JSON")
      ->required();
  ev_cmd->add_option("--maps", ev.maps, "directory of per-image saliency maps (for fer)");
  ev_cmd->add_option("--lexicon", ev.lexicon, "lexicon JSON (for fer)");
  ev_cmd->add_option("--annotations", ev.annotations, "part annotations .jsonl (for fer)");
  ev_cmd->add_option("--metrics", ev.metrics, "comma list of bleu4,rougeL,ciderD,fer");
  ev_cmd->add_option("--out", ev.out, "output directory")->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    te.cfg.context_scale = context_scale_from_string(te_scale);
    if (gen_cmd->parsed()) cmd_gen_data(gen, out);
    if (tc_cmd->parsed()) cmd_train_classifier(tc, out);
    if (te_cmd->parsed()) cmd_train_explainer(te, out);
    if (ex_cmd->parsed()) cmd_explain(ex, out);
    if (da_cmd->parsed()) cmd_dump_attn(da, out);
    if (gc_cmd->parsed()) cmd_gradcam(gc, out);
    if (ev_cmd->parsed()) cmd_eval(ev, out);
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return kExitConfig;
  } catch (const std::runtime_error& e) {
    err << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace attex::cli
