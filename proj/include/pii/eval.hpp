#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pii/config.hpp"
#include "pii/models.hpp"
#include "pii/tensor.hpp"

namespace pii::eval {

struct InceptionScore {
  double mean = 0.0;
  double stddev = 0.0;  // population stddev over splits; 0 for a single split
};

// exp(mean_i KL(p_i || split marginal)) per contiguous split.
InceptionScore inception_score_from_probs(const Tensor& probs, int n_splits = 1);
InceptionScore inception_score(const models::ClassifierHandle& judge, const Tensor& images_nchw,
                               int n_splits = 1);

struct AccuracyReport {
  double top1 = 0.0;
  double topk = 0.0;
  int k = 5;  // min(5, judge classes)
};

// Fraction of images the judge assigns to the intended target class.
AccuracyReport cross_model_accuracy(const models::ClassifierHandle& judge,
                                    const Tensor& images_nchw, const std::vector<int>& targets);

// clamp to [0,1], then round(v * 255); interleaved RGB row-major.
std::vector<uint8_t> quantize(const Tensor& chw);

void write_png(const std::string& path, const std::vector<uint8_t>& rgb, int64_t width,
               int64_t height);
Tensor load_png(const std::string& path);  // [3,H,W], values k/255

// PNG plus a JSON sidecar at <path with .png -> .json> recording the full
// config, seed, final loss values and judge scores. No wall-clock fields:
// re-running the same config must reproduce both files byte for byte.
void export_image(const ImageState& image, const InversionConfig& cfg, const LossRecord& losses,
                  const std::map<std::string, double>& judge_scores, const std::string& path);

// Tiles images (all [3,R,R]) row-major into ceil(n/cols) x cols; writes PNG
// and a manifest sidecar listing each tile in input order.
void export_grid(const std::vector<Tensor>& images, int cols,
                 const std::vector<std::string>& labels, const std::string& path);

}  // namespace pii::eval
