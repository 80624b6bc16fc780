#include "tivode/metrics.hpp"

#include <cmath>
#include <sstream>

namespace tivode {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

}  // namespace

double mse_value(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw ContractError("mse of empty tensors");
  const auto& av = a.values();
  const auto& bv = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double d = av[i] - bv[i];
    acc += d * d;
  }
  return acc / static_cast<double>(av.size());
}

std::optional<double> psnr(const Tensor& a, const Tensor& b, double max_val) {
  double m = mse_value(a, b);
  if (m == 0.0) return std::nullopt;
  return 10.0 * std::log10(max_val * max_val / m);
}

SsimOptions SsimOptions::for_range(double max_val, std::size_t window) {
  SsimOptions opt;
  opt.window = window;
  opt.c1 = (0.01 * max_val) * (0.01 * max_val);
  opt.c2 = (0.03 * max_val) * (0.03 * max_val);
  return opt;
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt) {
  require_same_shape(a, b, "ssim");
  if (a.rank() != 2) {
    throw DimensionError("ssim expects [H x W] images, got " + shape_str(a.shape()));
  }
  const std::size_t h = a.dim(0), w = a.dim(1), win = opt.window;
  if (win == 0) throw ContractError("ssim window must be positive");
  if (h < win || w < win) {
    throw InputError("image " + shape_str(a.shape()) + " smaller than the " +
                     std::to_string(win) + "x" + std::to_string(win) + " ssim window");
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  const double n = static_cast<double>(win * win);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + win <= h; ++i) {
    for (std::size_t j = 0; j + win <= w; ++j) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t wi = 0; wi < win; ++wi) {
        const double* ra = av.data() + (i + wi) * w + j;
        const double* rb = bv.data() + (i + wi) * w + j;
        for (std::size_t wj = 0; wj < win; ++wj) {
          sa += ra[wj];
          sb += rb[wj];
          saa += ra[wj] * ra[wj];
          sbb += rb[wj] * rb[wj];
          sab += ra[wj] * rb[wj];
        }
      }
      const double mu_a = sa / n, mu_b = sb / n;
      const double var_a = saa / n - mu_a * mu_a;
      const double var_b = sbb / n - mu_b * mu_b;
      const double cov = sab / n - mu_a * mu_b;
      const double num = (2 * mu_a * mu_b + opt.c1) * (2 * cov + opt.c2);
      const double den = (mu_a * mu_a + mu_b * mu_b + opt.c1) * (var_a + var_b + opt.c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double MetricReport::mean_mse() const {
  if (frame_mse.empty()) throw ContractError("empty metric report");
  double acc = 0;
  for (double v : frame_mse) acc += v;
  return acc / static_cast<double>(frame_mse.size());
}

double MetricReport::mean_ssim() const {
  if (frame_ssim.empty()) throw ContractError("empty metric report");
  double acc = 0;
  for (double v : frame_ssim) acc += v;
  return acc / static_cast<double>(frame_ssim.size());
}

std::optional<double> MetricReport::mean_psnr() const {
  double acc = 0;
  std::size_t n = 0;
  for (const auto& v : frame_psnr) {
    if (v) {
      acc += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / static_cast<double>(n);
}

bool MetricReport::any_infinite_psnr() const {
  for (const auto& v : frame_psnr) {
    if (!v) return true;
  }
  return false;
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "frames=" << frames() << "\n";
  os << "mse=" << mean_mse() << "\n";
  auto p = mean_psnr();
  os << "psnr=" << (p ? std::to_string(*p) : std::string("inf")) << "\n";
  os << "psnr_infinite_frames=" << (any_infinite_psnr() ? 1 : 0) << "\n";
  os << "ssim=" << mean_ssim() << "\n";
  for (std::size_t i = 0; i < frames(); ++i) {
    os << "frame." << i << ".mse=" << frame_mse[i] << "\n";
    os << "frame." << i << ".psnr="
       << (frame_psnr[i] ? std::to_string(*frame_psnr[i]) : std::string("inf")) << "\n";
    os << "frame." << i << ".ssim=" << frame_ssim[i] << "\n";
  }
  return os.str();
}

MetricReport evaluate_frames(const std::vector<Tensor>& pred, const std::vector<Tensor>& truth,
                             double max_val) {
  if (pred.size() != truth.size()) {
    throw DimensionError("evaluate_frames: " + std::to_string(pred.size()) +
                         " predictions vs " + std::to_string(truth.size()) + " references");
  }
  if (pred.empty()) throw ContractError("evaluate_frames: no frames");
  MetricReport r;
  SsimOptions opt = SsimOptions::for_range(max_val);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    r.frame_mse.push_back(mse_value(pred[i], truth[i]));
    r.frame_psnr.push_back(psnr(pred[i], truth[i], max_val));
    r.frame_ssim.push_back(ssim(pred[i], truth[i], opt));
  }
  return r;
}

}  // namespace tivode
