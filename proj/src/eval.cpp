#include "pii/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <png.h>

#include <nlohmann/json.hpp>

#include "pii/errors.hpp"

namespace pii::eval {

namespace {

using nlohmann::json;

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  int64_t n = logits.shape[0], k = logits.shape[1];
  for (int64_t i = 0; i < n; ++i) {
    double* row = out.data.data() + i * k;
    double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int64_t j = 0; j < k; ++j) row[j] /= sum;
  }
  return out;
}

Tensor judge_probs(const models::ClassifierHandle& judge, const Tensor& images) {
  if (images.rank() != 4 || images.shape[1] != 3) {
    throw ShapeError("expected an [N,3,H,W] image batch, got " + images.shape_str());
  }
  constexpr int64_t kBatch = 64;
  int64_t n = images.shape[0];
  int64_t per = images.numel() / n;
  Tensor probs;
  for (int64_t at = 0; at < n; at += kBatch) {
    int64_t b = std::min(kBatch, n - at);
    Tensor xb({b, images.shape[1], images.shape[2], images.shape[3]});
    std::copy(images.data.begin() + at * per, images.data.begin() + (at + b) * per,
              xb.data.begin());
    Tensor logits = softmax_rows(models::forward_scores(judge, xb));
    if (at == 0) probs = Tensor({n, logits.shape[1]});
    std::copy(logits.data.begin(), logits.data.end(), probs.data.begin() + at * logits.shape[1]);
  }
  return probs;
}

}  // namespace

InceptionScore inception_score_from_probs(const Tensor& probs, int n_splits) {
  if (probs.rank() != 2) throw ShapeError("probabilities must be [N,K], got " + probs.shape_str());
  int64_t n = probs.shape[0], k = probs.shape[1];
  if (n < 1 || k < 1) throw ParameterError("empty probability table");
  if (n_splits < 1 || n_splits > n) {
    throw ParameterError("n_splits must lie in [1, N]");
  }
  for (int64_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      double p = probs.at(i, j);
      if (p < 0.0 || !std::isfinite(p)) throw ParameterError("probabilities must be nonnegative");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-3) {
      throw ParameterError("row " + std::to_string(i) + " does not sum to 1");
    }
  }

  std::vector<double> scores;
  for (int s = 0; s < n_splits; ++s) {
    int64_t lo = n * s / n_splits;
    int64_t hi = n * (s + 1) / n_splits;
    std::vector<double> marginal(static_cast<size_t>(k), 0.0);
    for (int64_t i = lo; i < hi; ++i)
      for (int64_t j = 0; j < k; ++j) marginal[static_cast<size_t>(j)] += probs.at(i, j);
    for (double& m : marginal) m /= static_cast<double>(hi - lo);
    double mean_kl = 0.0;
    for (int64_t i = lo; i < hi; ++i) {
      double kl = 0.0;
      for (int64_t j = 0; j < k; ++j) {
        double p = probs.at(i, j);
        if (p > 0.0) kl += p * std::log(p / marginal[static_cast<size_t>(j)]);
      }
      mean_kl += kl;
    }
    mean_kl /= static_cast<double>(hi - lo);
    scores.push_back(std::exp(mean_kl));
  }

  InceptionScore out;
  for (double s : scores) out.mean += s;
  out.mean /= static_cast<double>(scores.size());
  double var = 0.0;
  for (double s : scores) var += (s - out.mean) * (s - out.mean);
  out.stddev = std::sqrt(var / static_cast<double>(scores.size()));
  return out;
}

InceptionScore inception_score(const models::ClassifierHandle& judge, const Tensor& images_nchw,
                               int n_splits) {
  return inception_score_from_probs(judge_probs(judge, images_nchw), n_splits);
}

AccuracyReport cross_model_accuracy(const models::ClassifierHandle& judge,
                                    const Tensor& images_nchw, const std::vector<int>& targets) {
  if (images_nchw.rank() != 4 || images_nchw.shape[0] != static_cast<int64_t>(targets.size())) {
    throw ShapeError("image count does not match target count");
  }
  Tensor probs = judge_probs(judge, images_nchw);
  int64_t n = probs.shape[0], k = probs.shape[1];
  AccuracyReport rep;
  rep.k = static_cast<int>(std::min<int64_t>(5, k));
  int64_t hit1 = 0, hitk = 0;
  for (int64_t i = 0; i < n; ++i) {
    int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= k) throw ParameterError("target class out of range for judge");
    const double* row = probs.data.data() + i * k;
    int64_t best = static_cast<int64_t>(std::max_element(row, row + k) - row);
    if (best == t) ++hit1;
    int64_t greater = 0;
    for (int64_t j = 0; j < k; ++j) {
      if (row[j] > row[t]) ++greater;
    }
    if (greater < rep.k) ++hitk;
  }
  rep.top1 = static_cast<double>(hit1) / static_cast<double>(n);
  rep.topk = static_cast<double>(hitk) / static_cast<double>(n);
  return rep;
}

std::vector<uint8_t> quantize(const Tensor& chw) {
  if (chw.rank() != 3 || chw.shape[0] != 3) {
    throw ShapeError("quantize expects [3,H,W], got " + chw.shape_str());
  }
  int64_t h = chw.shape[1], w = chw.shape[2];
  std::vector<uint8_t> out(static_cast<size_t>(3 * h * w));
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t c = 0; c < 3; ++c) {
        double v = std::clamp(chw.at(c, i, j), 0.0, 1.0);
        out[static_cast<size_t>((i * w + j) * 3 + c)] =
            static_cast<uint8_t>(std::llround(v * 255.0));
      }
  return out;
}

void write_png(const std::string& path, const std::vector<uint8_t>& rgb, int64_t width,
               int64_t height) {
  if (static_cast<int64_t>(rgb.size()) != 3 * width * height) {
    throw ShapeError("pixel buffer size does not match dimensions");
  }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("libpng failed while writing '" + path + "'");
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 6);  // pinned: output bytes are part of the contract
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Tensor load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("libpng failed while reading '" + path + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  int64_t w = png_get_image_width(png, info);
  int64_t h = png_get_image_height(png, info);
  std::vector<uint8_t> row(static_cast<size_t>(png_get_rowbytes(png, info)));
  Tensor out({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        out.at(c, y, x) = static_cast<double>(row[static_cast<size_t>(x * 3 + c)]) / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

namespace {

std::string sidecar_path(const std::string& png_path) {
  if (png_path.size() >= 4 && png_path.substr(png_path.size() - 4) == ".png") {
    return png_path.substr(0, png_path.size() - 4) + ".json";
  }
  return png_path + ".json";
}

}  // namespace

void export_image(const ImageState& image, const InversionConfig& cfg, const LossRecord& losses,
                  const std::map<std::string, double>& judge_scores, const std::string& path) {
  validate_image(image.pixels);
  std::vector<uint8_t> rgb = quantize(image.pixels);
  write_png(path, rgb, image.pixels.shape[2], image.pixels.shape[1]);

  json side;
  side["config"] = config_to_json(cfg);
  side["seed"] = cfg.seed;
  side["losses"] = {{"nll", losses.nll},
                    {"tv", losses.tv},
                    {"l2", losses.l2},
                    {"feat", losses.feat},
                    {"total", losses.total}};
  side["judge_scores"] = json::object();
  for (const auto& [name, v] : judge_scores) side["judge_scores"][name] = v;
  std::ofstream out(sidecar_path(path));
  if (!out) throw IoError("cannot write sidecar for '" + path + "'");
  out << side.dump(2) << "\n";
}

void export_grid(const std::vector<Tensor>& images, int cols,
                 const std::vector<std::string>& labels, const std::string& path) {
  if (images.empty()) throw ParameterError("export_grid needs at least one image");
  if (cols < 1) throw ParameterError("cols must be >= 1");
  if (!labels.empty() && labels.size() != images.size()) {
    throw ParameterError("label count must match image count");
  }
  int64_t r = images[0].shape.size() == 3 ? images[0].shape[1] : 0;
  for (const Tensor& t : images) {
    validate_image(t);
    if (t.shape[1] != r) throw ShapeError("grid tiles must share one resolution");
  }
  int64_t n = static_cast<int64_t>(images.size());
  int64_t rows = (n + cols - 1) / cols;
  Tensor canvas = Tensor::zeros({3, rows * r, static_cast<int64_t>(cols) * r});
  for (int64_t i = 0; i < n; ++i) {
    int64_t row = i / cols, col = i % cols;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < r; ++y)
        for (int64_t x = 0; x < r; ++x) {
          double v = std::clamp(images[static_cast<size_t>(i)].at(c, y, x), 0.0, 1.0);
          canvas.at(c, row * r + y, col * r + x) = v;
        }
  }
  std::vector<uint8_t> rgb = quantize(canvas);
  write_png(path, rgb, canvas.shape[2], canvas.shape[1]);

  json manifest;
  manifest["rows"] = rows;
  manifest["cols"] = cols;
  manifest["tile_resolution"] = r;
  manifest["count"] = n;
  manifest["entries"] = json::array();
  for (int64_t i = 0; i < n; ++i) {
    json e;
    e["index"] = i;
    e["row"] = i / cols;
    e["col"] = i % cols;
    if (!labels.empty()) e["label"] = labels[static_cast<size_t>(i)];
    manifest["entries"].push_back(e);
  }
  std::ofstream out(sidecar_path(path));
  if (!out) throw IoError("cannot write grid manifest for '" + path + "'");
  out << manifest.dump(2) << "\n";
}

}  // namespace pii::eval
