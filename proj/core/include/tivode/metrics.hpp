// Pixel-space evaluation metrics: MSE, PSNR, SSIM (uniform window).
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tivode/tensor.hpp"

namespace tivode {

double mse_value(const Tensor& a, const Tensor& b);

// 10*log10(max_val^2 / MSE). Identical images have no finite PSNR; the
// infinite case is reported as nullopt.
std::optional<double> psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);

struct SsimOptions {
  std::size_t window = 7;
  double c1 = 0.01 * 0.01;  // (0.01*max_val)^2
  double c2 = 0.03 * 0.03;
  static SsimOptions for_range(double max_val, std::size_t window = 7);
};

// Mean local SSIM of two [H x W] images over a sliding uniform window.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {});

struct MetricReport {
  std::vector<double> frame_mse;
  std::vector<std::optional<double>> frame_psnr;  // nullopt = infinite
  std::vector<double> frame_ssim;

  std::size_t frames() const { return frame_mse.size(); }
  double mean_mse() const;
  double mean_ssim() const;
  // Mean over finite per-frame values; nullopt when every frame is infinite.
  std::optional<double> mean_psnr() const;
  bool any_infinite_psnr() const;

  // Line-oriented key=value text.
  std::string to_text() const;
};

// Frame-by-frame comparison of two equally sized sequences of [H x W] images.
MetricReport evaluate_frames(const std::vector<Tensor>& pred, const std::vector<Tensor>& truth,
                             double max_val = 1.0);

}  // namespace tivode
