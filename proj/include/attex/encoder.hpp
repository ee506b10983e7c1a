#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "attex/image.hpp"
#include "attex/tensor.hpp"

namespace attex {

// Encoder output: the final conv stage flattened to K = h*w location vectors
// of dimension c (row-major over the grid), plus optional coarser
// intermediate grids. The intermediate features are exposed for downstream
// consumers but unused by the default explainer.
template <typename S>
struct FeatureGrid {
  int grid_h = 0;
  int grid_w = 0;
  int channels = 0;
  Tensor<S> locations;                // {K, c}
  std::vector<Tensor<S>> intermediate;  // each {C_i, h_i, w_i}

  int num_locations() const { return grid_h * grid_w; }
};

// Converts a {C,h,w} activation to a {h*w, C} location matrix. Plain copy,
// never on tape: the explainer treats encoder features as frozen inputs.
template <typename S>
Tensor<S> to_location_matrix(const Tensor<S>& chw) {
  if (chw.rank() != 3)
    throw ShapeError("to_location_matrix: expected {C,h,w}, got " + shape_str(chw.shape()));
  const int c = chw.extent(0), h = chw.extent(1), w = chw.extent(2);
  Tensor<S> out = Tensor<S>::zeros({h * w, c});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data()[(y * w + x) * c + ch] = chw.data()[(ch * h + y) * w + x];
  return out;
}

// Three stride-2 conv stages (16/32/64 channels), global average pooling and
// a linear head. On 32x32 input the final stage is 4x4x64, so K = 16
// attention cells map one-to-one onto the dataset's placement grid.
template <typename S>
class CnnClassifier {
 public:
  struct ForwardResult {
    Tensor<S> logits;       // {num_classes}
    Tensor<S> stage3;       // {64, h, w} activation used for GradCAM
    FeatureGrid<S> features;
    int predicted_class = -1;
  };

  CnnClassifier() = default;

  CnnClassifier(int image_size, int num_classes, Rng& rng)
      : image_size_(image_size), num_classes_(num_classes) {
    // Uniform Kaiming init: variance 2/fan_in keeps ReLU activations from
    // shrinking across the three stages.
    auto conv_init = [&rng](int co, int ci, int k) {
      const S r = static_cast<S>(std::sqrt(6.0 / static_cast<double>(ci * k * k)));
      return Tensor<S>::uniform({co, ci, k, k}, -r, r, rng, true);
    };
    w1_ = conv_init(16, 3, 3);
    b1_ = Tensor<S>::zeros({16}, true);
    w2_ = conv_init(32, 16, 3);
    b2_ = Tensor<S>::zeros({32}, true);
    w3_ = conv_init(64, 32, 3);
    b3_ = Tensor<S>::zeros({64}, true);
    const S rf = static_cast<S>(1.0 / std::sqrt(64.0));
    fc_w_ = Tensor<S>::uniform({64, num_classes}, -rf, rf, rng, true);
    fc_b_ = Tensor<S>::zeros({num_classes}, true);
  }

  int image_size() const { return image_size_; }
  int num_classes() const { return num_classes_; }
  int feature_channels() const { return 64; }
  int feature_grid() const { return image_size_ / 8; }

  ForwardResult forward(const Tensor<S>& image, bool want_intermediate = false) const {
    if (image.rank() != 3 || image.extent(0) != 3 || image.extent(1) != image_size_ ||
        image.extent(2) != image_size_)
      throw ShapeError("classifier_forward: expected {3," + std::to_string(image_size_) + "," +
                       std::to_string(image_size_) + "}, got " + shape_str(image.shape()));
    ForwardResult res;
    Tensor<S> a1 = relu_t(conv2d(image, w1_, b1_, 2, 1));
    Tensor<S> a2 = relu_t(conv2d(a1, w2_, b2_, 2, 1));
    Tensor<S> a3 = relu_t(conv2d(a2, w3_, b3_, 2, 1));
    res.stage3 = a3;
    const int c = a3.extent(0), gh = a3.extent(1), gw = a3.extent(2);
    // Global average pool via a constant averaging vector.
    Tensor<S> flat = reshape(a3, {c, gh * gw});
    Tensor<S> pooled = matmul(flat, Tensor<S>::full({gh * gw}, S(1) / static_cast<S>(gh * gw)));
    res.logits = add(matmul(pooled, fc_w_), fc_b_);

    res.features.grid_h = gh;
    res.features.grid_w = gw;
    res.features.channels = c;
    res.features.locations = to_location_matrix(a3.detach_copy());
    if (want_intermediate) res.features.intermediate.push_back(a2.detach_copy());

    res.predicted_class = 0;
    for (int i = 1; i < num_classes_; ++i)
      if (res.logits.at(i) > res.logits.at(res.predicted_class)) res.predicted_class = i;
    return res;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_params() const {
    return {{"encoder.conv1.w", w1_}, {"encoder.conv1.b", b1_}, {"encoder.conv2.w", w2_},
            {"encoder.conv2.b", b2_}, {"encoder.conv3.w", w3_}, {"encoder.conv3.b", b3_},
            {"encoder.fc.w", fc_w_},  {"encoder.fc.b", fc_b_}};
  }

  // Rebuilds parameter holders with given shapes (checkpoint loading).
  static CnnClassifier from_params(int image_size, int num_classes) {
    CnnClassifier c;
    c.image_size_ = image_size;
    c.num_classes_ = num_classes;
    c.w1_ = Tensor<S>::zeros({16, 3, 3, 3}, true);
    c.b1_ = Tensor<S>::zeros({16}, true);
    c.w2_ = Tensor<S>::zeros({32, 16, 3, 3}, true);
    c.b2_ = Tensor<S>::zeros({32}, true);
    c.w3_ = Tensor<S>::zeros({64, 32, 3, 3}, true);
    c.b3_ = Tensor<S>::zeros({64}, true);
    c.fc_w_ = Tensor<S>::zeros({64, num_classes}, true);
    c.fc_b_ = Tensor<S>::zeros({num_classes}, true);
    return c;
  }

 private:
  int image_size_ = 32;
  int num_classes_ = 0;
  Tensor<S> w1_, b1_, w2_, b2_, w3_, b3_, fc_w_, fc_b_;
};

// Class activation map: channel weights are the spatial means of
// d(logit_class)/d(stage3); the map is ReLU of the weighted channel sum,
// max-normalized to [0,1] when the max is positive.
template <typename S>
SaliencyMap gradcam(const CnnClassifier<S>& classifier, const Tensor<S>& image, int class_index) {
  if (class_index < 0 || class_index >= classifier.num_classes())
    throw ContractError("gradcam: class index " + std::to_string(class_index) +
                        " out of range [0," + std::to_string(classifier.num_classes()) + ")");
  Tape<S> tape;
  typename CnnClassifier<S>::ForwardResult res;
  Tensor<S> score;
  {
    TapeScope<S> scope(tape);
    res = classifier.forward(image);
    score = pick(res.logits, class_index);
  }
  backward(tape, score);

  const int c = res.stage3.extent(0), h = res.stage3.extent(1), w = res.stage3.extent(2);
  const auto& g = res.stage3.grad();
  const auto& act = res.stage3.values();
  std::vector<S> channel_w(c, S(0));
  for (int ch = 0; ch < c; ++ch) {
    S acc = S(0);
    for (int i = 0; i < h * w; ++i) acc += g[ch * h * w + i];
    channel_w[ch] = acc / static_cast<S>(h * w);
  }
  SaliencyMap map;
  map.height = h;
  map.width = w;
  map.source = "gradcam";
  map.values.assign(static_cast<size_t>(h) * w, 0.0f);
  float mx = 0.0f;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      S acc = S(0);
      for (int ch = 0; ch < c; ++ch) acc += channel_w[ch] * act[(ch * h + y) * w + x];
      const float v = std::max(0.0f, static_cast<float>(acc));
      map.at(y, x) = v;
      mx = std::max(mx, v);
    }
  }
  if (mx > 0.0f)
    for (auto& v : map.values) v /= mx;
  return map;
}

// Deterministic argmax over a map, ties broken by lowest flattened index.
inline std::pair<int, int> map_argmax(const SaliencyMap& map) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(map.values.size()); ++i)
    if (map.values[i] > map.values[best]) best = i;
  return {best / map.width, best % map.width};  // (row, col)
}

}  // namespace attex
