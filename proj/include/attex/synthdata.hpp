#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attex/image.hpp"
#include "attex/rng.hpp"
#include "attex/vocab.hpp"

namespace attex {

// Parts-on-a-grid corpus: 32x32 images carry 2-4 colored shapes in distinct
// cells of a 4x4 grid (one cell per encoder attention location). Exactly one
// part is class-discriminative; the label is a function of its (shape, color).
// Rasterization is integer scanline rules on a flat background, so identical
// configs render byte-identical files.

inline constexpr int kCellPx = 8;
inline constexpr int kGridCells = 4;
inline constexpr int kImagePx = kCellPx * kGridCells;

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"circle", "triangle", "square", "bar"};
  return names;
}

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names = {"red", "green", "blue", "yellow", "white"};
  return names;
}

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};

inline Rgb color_rgb(const std::string& name) {
  if (name == "red") return {230, 40, 40};
  if (name == "green") return {40, 200, 60};
  if (name == "blue") return {50, 90, 230};
  if (name == "yellow") return {235, 220, 50};
  if (name == "white") return {240, 240, 240};
  throw ContractError("unknown color: " + name);
}

inline constexpr Rgb kBackground = {28, 28, 28};

// Injective label -> (shape, color) key covering up to 16 classes while
// leaving every shape one non-key color for distractors.
inline std::pair<std::string, std::string> class_key(int label) {
  if (label < 0 || label >= 16)
    throw ContractError("class label " + std::to_string(label) + " outside [0,16)");
  const int s = label % 4;
  const int c = (label % 4 + label / 4) % 5;
  return {shape_names()[s], color_names()[c]};
}

struct PartSpec {
  std::string shape, color;
  int row = 0, col = 0;  // grid cell

  std::string name() const { return color + " " + shape; }
};

struct ExampleSpec {
  std::vector<PartSpec> parts;
  int disc_index = 0;
};

// Annotated center of a part rendered in the given cell, in pixel coordinates.
inline std::pair<int, int> part_center(int row, int col) {
  return {col * kCellPx + 3, row * kCellPx + 3};
}

// In-cell coverage tests, dx/dy in [0, 8). All shapes stay inside rows and
// columns 1..6 of their cell so parts never touch cell borders.
inline bool shape_covers(const std::string& shape, int dy, int dx) {
  if (shape == "square") return dy >= 1 && dy <= 6 && dx >= 1 && dx <= 6;
  if (shape == "circle") {
    const int ry = 2 * dy - 7, rx = 2 * dx - 7;
    return rx * rx + ry * ry <= 49;
  }
  if (shape == "triangle") {
    if (dy < 1 || dy > 6) return false;
    const int half = (dy - 1) / 2;
    return dx >= 3 - half && dx <= 4 + half;
  }
  if (shape == "bar") return dy >= 3 && dy <= 4 && dx >= 1 && dx <= 6;
  throw ContractError("unknown shape: " + shape);
}

inline Image render_example(const ExampleSpec& spec) {
  Image img;
  img.height = kImagePx;
  img.width = kImagePx;
  img.channels = 3;
  img.pixels.assign(static_cast<size_t>(3) * kImagePx * kImagePx, 0.0f);
  auto put = [&](int y, int x, Rgb c) {
    img.at(0, y, x) = static_cast<float>(c.r) / 255.0f;
    img.at(1, y, x) = static_cast<float>(c.g) / 255.0f;
    img.at(2, y, x) = static_cast<float>(c.b) / 255.0f;
  };
  for (int y = 0; y < kImagePx; ++y)
    for (int x = 0; x < kImagePx; ++x) put(y, x, kBackground);
  for (const auto& p : spec.parts) {
    const Rgb c = color_rgb(p.color);
    for (int dy = 0; dy < kCellPx; ++dy)
      for (int dx = 0; dx < kCellPx; ++dx)
        if (shape_covers(p.shape, dy, dx)) put(p.row * kCellPx + dy, p.col * kCellPx + dx, c);
  }
  return img;
}

struct SynthConfig {
  int num_classes = 4;
  int train_size = 240;
  int test_size = 60;
  uint32_t seed = 7;

  void validate() const {
    if (num_classes < 1 || num_classes > 16)
      throw ContractError("num_classes must be in [1,16]: the key map needs a free distractor "
                          "color per shape");
    if (train_size < num_classes || test_size < num_classes)
      throw ContractError("each split needs at least one example per class");
  }

  nlohmann::json to_json() const {
    return {{"num_classes", num_classes},
            {"train_size", train_size},
            {"test_size", test_size},
            {"seed", seed}};
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.num_classes = j.value("num_classes", c.num_classes);
    c.train_size = j.value("train_size", c.train_size);
    c.test_size = j.value("test_size", c.test_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

struct SynthExample {
  std::string id;
  int label = 0;
  ExampleSpec spec;
  std::vector<std::string> captions;

  nlohmann::json to_json() const {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : spec.parts) {
      auto [cx, cy] = part_center(p.row, p.col);
      parts.push_back({{"name", p.name()}, {"cx", cx}, {"cy", cy}});
    }
    return {{"id", id},
            {"class", label},
            {"parts", parts},
            {"discriminative_part", spec.parts[spec.disc_index].name()},
            {"captions", captions}};
  }

  static SynthExample from_json(const nlohmann::json& j) {
    SynthExample ex;
    ex.id = j.at("id").get<std::string>();
    ex.label = j.at("class").get<int>();
    ex.captions = j.at("captions").get<std::vector<std::string>>();
    const std::string disc = j.at("discriminative_part").get<std::string>();
    ex.spec.disc_index = -1;
    for (const auto& jp : j.at("parts")) {
      PartSpec p;
      const std::string name = jp.at("name").get<std::string>();
      const auto space = name.rfind(' ');
      if (space == std::string::npos) throw FormatError("part name is not '<color> <shape>': " + name);
      p.color = name.substr(0, space);
      p.shape = name.substr(space + 1);
      const int cx = jp.at("cx").get<int>();
      const int cy = jp.at("cy").get<int>();
      p.col = cx / kCellPx;
      p.row = cy / kCellPx;
      if (name == disc) ex.spec.disc_index = static_cast<int>(ex.spec.parts.size());
      ex.spec.parts.push_back(std::move(p));
    }
    if (ex.spec.disc_index < 0)
      throw FormatError("discriminative part '" + disc + "' is not among the parts of " + ex.id);
    return ex;
  }
};

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == ' ') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace synth_detail {

inline const std::vector<std::vector<std::string>>& caption_frames() {
  static const std::vector<std::vector<std::string>> frames = {
      {"it", "has"}, {"we", "see"}, {"there", "is"}, {"this", "object", "has"}};
  return frames;
}

inline std::vector<std::string> position_words(int row, int col) {
  return {"at", "the", row < kGridCells / 2 ? "top" : "bottom",
          col < kGridCells / 2 ? "left" : "right"};
}

}  // namespace synth_detail

// Three templated captions. Each mentions every part exactly once as
// "a <color> <shape>"; the frame, mention order, and connectives vary by rng,
// while each part's noun phrase stays constant across the three. The first
// mentioned part carries a position clause when the caption has room
// (supervised length must stay within the decoder's 20-step budget).
inline std::vector<std::string> captions_for(const ExampleSpec& spec, Rng& rng) {
  std::vector<std::string> captions;
  std::vector<int> order(spec.parts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  const bool with_position = spec.parts.size() <= 3;
  for (int k = 0; k < 3; ++k) {
    const auto& frame = synth_detail::caption_frames()[rng.below(
        static_cast<uint32_t>(synth_detail::caption_frames().size()))];
    rng.shuffle(order);
    std::vector<std::string> words = frame;
    for (size_t m = 0; m < order.size(); ++m) {
      const PartSpec& p = spec.parts[order[m]];
      if (m > 0) words.push_back(rng.below(2) == 0 ? "and" : "with");
      words.push_back("a");
      words.push_back(p.color);
      words.push_back(p.shape);
      if (m == 0 && with_position)
        for (const auto& w : synth_detail::position_words(p.row, p.col)) words.push_back(w);
    }
    std::string text;
    for (size_t i = 0; i < words.size(); ++i) {
      if (i > 0) text += ' ';
      text += words[i];
    }
    captions.push_back(std::move(text));
  }
  return captions;
}

// Samples one example: the discriminative part is the class key; distractors
// take distinct non-key (shape, color) combinations in distinct cells.
inline SynthExample make_example(int label, int num_classes, Rng& rng) {
  const auto [disc_shape, disc_color] = class_key(label);

  std::set<std::pair<int, int>> keys;
  for (int k = 0; k < num_classes; ++k) {
    const auto [s, c] = class_key(k);
    for (int si = 0; si < 4; ++si)
      for (int ci = 0; ci < 5; ++ci)
        if (shape_names()[si] == s && color_names()[ci] == c) keys.insert({si, ci});
  }

  SynthExample ex;
  ex.label = label;
  const int num_parts = 2 + static_cast<int>(rng.below(3));

  std::vector<int> cells(kGridCells * kGridCells);
  for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  rng.shuffle(cells);

  PartSpec disc;
  disc.shape = disc_shape;
  disc.color = disc_color;
  disc.row = cells[0] / kGridCells;
  disc.col = cells[0] % kGridCells;
  ex.spec.parts.push_back(disc);
  ex.spec.disc_index = 0;

  std::vector<int> other_shapes;
  for (int si = 0; si < 4; ++si)
    if (shape_names()[si] != disc_shape) other_shapes.push_back(si);
  rng.shuffle(other_shapes);

  for (int m = 1; m < num_parts; ++m) {
    const int si = other_shapes[m - 1];
    std::vector<int> free_colors;
    for (int ci = 0; ci < 5; ++ci)
      if (!keys.count({si, ci})) free_colors.push_back(ci);
    PartSpec p;
    p.shape = shape_names()[si];
    p.color = color_names()[free_colors[rng.below(static_cast<uint32_t>(free_colors.size()))]];
    p.row = cells[m] / kGridCells;
    p.col = cells[m] % kGridCells;
    ex.spec.parts.push_back(std::move(p));
  }

  ex.captions = captions_for(ex.spec, rng);
  return ex;
}

// Part-of-speech tags for every word the generator can emit: colors are the
// adjectives, shapes the nouns, everything else filler.
inline nlohmann::json lexicon_json() {
  nlohmann::json lex = nlohmann::json::object();
  std::set<std::string> other = {"a", "and", "with", "at", "the", "top", "bottom", "left", "right"};
  for (const auto& frame : synth_detail::caption_frames())
    for (const auto& w : frame) other.insert(w);
  for (const auto& w : other) lex[w] = "other";
  for (const auto& w : color_names()) lex[w] = "adjective";
  for (const auto& w : shape_names()) lex[w] = "noun";
  return lex;
}

inline std::vector<SynthExample> load_examples(const std::string& jsonl_path) {
  std::ifstream in(jsonl_path);
  if (!in) throw PathError("cannot open dataset file: " + jsonl_path);
  std::vector<SynthExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(SynthExample::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(jsonl_path + " line " + std::to_string(out.size() + 1) + ": " + e.what());
    }
  }
  return out;
}

// Vocabulary over every caption word in the corpus; construction sorts, so
// the result is independent of example order.
inline Vocabulary build_vocabulary(const std::vector<SynthExample>& examples) {
  std::vector<std::string> words;
  for (const auto& ex : examples)
    for (const auto& cap : ex.captions)
      for (auto& w : tokenize(cap)) words.push_back(std::move(w));
  return Vocabulary(words);
}

// Writes OUT/{train,test}/images/*.ppm, OUT/{train,test}/data.jsonl, and
// OUT/lexicon.json. Labels cycle round-robin so every class appears in both
// splits. Single-threaded, fixed draw order: identical config and seed yield
// byte-identical trees. The config is validated before any file is touched.
inline void generate_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  Rng rng(cfg.seed);
  for (const auto& [split, size] :
       {std::pair<std::string, int>{"train", cfg.train_size}, {"test", cfg.test_size}}) {
    const fs::path dir = fs::path(out_dir) / split;
    fs::create_directories(dir / "images");
    std::ofstream jsonl(dir / "data.jsonl");
    if (!jsonl) throw PathError("cannot write " + (dir / "data.jsonl").string());
    for (int i = 0; i < size; ++i) {
      SynthExample ex = make_example(i % cfg.num_classes, cfg.num_classes, rng);
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%s_%04d", split.c_str(), i);
      ex.id = buf;
      write_ppm((dir / "images" / (ex.id + ".ppm")).string(), render_example(ex.spec));
      jsonl << ex.to_json().dump() << "\n";
    }
  }
  std::ofstream lex(fs::path(out_dir) / "lexicon.json");
  if (!lex) throw PathError("cannot write " + (fs::path(out_dir) / "lexicon.json").string());
  lex << lexicon_json().dump(2) << "\n";
}

}  // namespace attex
