#include "kpd/tps.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace kpd {
namespace {

double radial_basis(double r2) { return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0; }

}  // namespace

Eigen::MatrixX2d regular_control_grid(int grid_size) {
  if (grid_size < 2) throw std::invalid_argument("regular_control_grid: grid_size must be >= 2");
  Eigen::MatrixX2d grid(grid_size * grid_size, 2);
  const double step = 1.0 / (grid_size - 1);
  for (int r = 0; r < grid_size; ++r) {
    for (int c = 0; c < grid_size; ++c) {
      grid(r * grid_size + c, 0) = c * step;
      grid(r * grid_size + c, 1) = r * step;
    }
  }
  return grid;
}

TpsWarp TpsWarp::fit(const Eigen::MatrixX2d& control_src, const Eigen::MatrixX2d& control_dst,
                     int64_t height, int64_t width) {
  const Eigen::Index n = control_src.rows();
  if (n < 3 || control_dst.rows() != n) {
    throw std::invalid_argument("TpsWarp::fit: need >= 3 matching control points");
  }
  if (height <= 0 || width <= 0) throw std::invalid_argument("TpsWarp::fit: empty field");

  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(n + 3, n + 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      system(i, j) = radial_basis((control_src.row(i) - control_src.row(j)).squaredNorm());
    }
    system(i, n) = 1.0;
    system(i, n + 1) = control_src(i, 0);
    system(i, n + 2) = control_src(i, 1);
    system(n, i) = 1.0;
    system(n + 1, i) = control_src(i, 0);
    system(n + 2, i) = control_src(i, 1);
  }
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
  rhs.topRows(n) = control_dst;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (lu.rank() < n + 3) {
    std::ostringstream msg;
    msg << "TpsWarp::fit: singular system (rank " << lu.rank() << " of " << n + 3
        << "); control points are degenerate";
    throw std::invalid_argument(msg.str());
  }
  Eigen::MatrixXd solution = lu.solve(rhs);

  TpsWarp warp;
  warp.control_src_ = control_src;
  warp.control_dst_ = control_dst;
  warp.weights_ = solution.topRows(n);
  warp.affine_ = solution.bottomRows(3).transpose();

  warp.field_ = torch::empty({height, width, 2}, torch::kFloat64);
  auto field = warp.field_.accessor<double, 3>();
  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      const Eigen::Vector2d x((j + 0.5) / width, (i + 0.5) / height);
      const Eigen::Vector2d d = warp.map(x) - x;
      field[i][j][0] = d.x();
      field[i][j][1] = d.y();
    }
  }
  return warp;
}

Eigen::Vector2d TpsWarp::map(const Eigen::Vector2d& p) const {
  Eigen::Vector2d out = affine_.col(0) + affine_.col(1) * p.x() + affine_.col(2) * p.y();
  for (Eigen::Index i = 0; i < control_src_.rows(); ++i) {
    const double r2 = (p - control_src_.row(i).transpose()).squaredNorm();
    out += weights_.row(i).transpose() * radial_basis(r2);
  }
  return out;
}

Eigen::Vector2d TpsWarp::inverse_map(const Eigen::Vector2d& p) const {
  Eigen::Vector2d x = p - (map(p) - p);
  constexpr double h = 1e-6;
  for (int iter = 0; iter < 50; ++iter) {
    const Eigen::Vector2d residual = map(x) - p;
    if (residual.norm() < 1e-12) break;
    Eigen::Matrix2d jac;
    jac.col(0) = (map(x + Eigen::Vector2d(h, 0)) - map(x - Eigen::Vector2d(h, 0))) / (2 * h);
    jac.col(1) = (map(x + Eigen::Vector2d(0, h)) - map(x - Eigen::Vector2d(0, h))) / (2 * h);
    x -= jac.partialPivLu().solve(residual);
  }
  return x;
}

TpsWarp make_tps(int grid_size, double scale, std::mt19937_64& rng, int64_t height,
                 int64_t width) {
  if (grid_size < 2) throw std::invalid_argument("make_tps: grid_size must be >= 2");
  const double spacing = 1.0 / (grid_size - 1);
  if (!(scale >= 0.0) || scale >= 0.5 * spacing) {
    std::ostringstream msg;
    msg << "make_tps: scale " << scale << " outside [0, " << 0.5 * spacing << ")";
    throw std::invalid_argument(msg.str());
  }
  Eigen::MatrixX2d src = regular_control_grid(grid_size);
  Eigen::MatrixX2d dst = src;
  if (scale > 0.0) {
    std::uniform_real_distribution<double> jitter(-scale, scale);
    for (Eigen::Index i = 0; i < dst.rows(); ++i) {
      dst(i, 0) += jitter(rng);
      dst(i, 1) += jitter(rng);
    }
  }
  return TpsWarp::fit(src, dst, height, width);
}

torch::Tensor apply_warp(const torch::Tensor& image, const TpsWarp& warp) {
  if (image.dim() != 3) throw std::invalid_argument("apply_warp: expected a [C, H, W] image");
  const int64_t channels = image.size(0);
  const int64_t height = image.size(1);
  const int64_t width = image.size(2);
  if (height != warp.height() || width != warp.width()) {
    std::ostringstream msg;
    msg << "apply_warp: image is " << height << "x" << width << " but warp field is "
        << warp.height() << "x" << warp.width();
    throw std::invalid_argument(msg.str());
  }
  auto src = image.to(torch::kFloat32).contiguous();
  auto out = torch::empty_like(src);
  auto in_acc = src.accessor<float, 3>();
  auto out_acc = out.accessor<float, 3>();
  auto field = warp.field().accessor<double, 3>();

  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      // Pixel-space position; the cell-center offsets cancel exactly.
      const double px = std::clamp(j + field[i][j][0] * width, 0.0, double(width - 1));
      const double py = std::clamp(i + field[i][j][1] * height, 0.0, double(height - 1));
      const auto x0 = static_cast<int64_t>(std::floor(px));
      const auto y0 = static_cast<int64_t>(std::floor(py));
      const int64_t x1 = std::min(x0 + 1, width - 1);
      const int64_t y1 = std::min(y0 + 1, height - 1);
      const double fx = px - x0;
      const double fy = py - y0;
      for (int64_t c = 0; c < channels; ++c) {
        const double top = in_acc[c][y0][x0] * (1.0 - fx) + in_acc[c][y0][x1] * fx;
        const double bottom = in_acc[c][y1][x0] * (1.0 - fx) + in_acc[c][y1][x1] * fx;
        out_acc[c][i][j] = static_cast<float>(top * (1.0 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

}  // namespace kpd
