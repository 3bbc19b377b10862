#pragma once

// Thin-plate-spline deformations used to build structurally transformed
// target images.
//
// A warp T maps normalized output coordinates to normalized source
// coordinates: warped(x) = source(T(x)). T interpolates its control points
// exactly, T(control_src[i]) == control_dst[i].

#include <cstdint>
#include <random>

#include <Eigen/Dense>
#include <torch/torch.h>

namespace kpd {

class TpsWarp {
 public:
  /// Fits the interpolating spline through (src[i] -> dst[i]) and samples its
  /// displacement on a height x width grid of cell centers.
  static TpsWarp fit(const Eigen::MatrixX2d& control_src, const Eigen::MatrixX2d& control_dst,
                     int64_t height, int64_t width);

  Eigen::Vector2d map(const Eigen::Vector2d& p) const;

  /// Solves T(x) = p by Newton iteration; accurate for the mild deformations
  /// produced by make_tps.
  Eigen::Vector2d inverse_map(const Eigen::Vector2d& p) const;

  const Eigen::MatrixX2d& control_src() const { return control_src_; }
  const Eigen::MatrixX2d& control_dst() const { return control_dst_; }
  const Eigen::MatrixX2d& radial_weights() const { return weights_; }
  /// Rows: [a_u0, a_uu, a_uv; a_v0, a_vu, a_vv], so T(p) = A * (1, u, v) + radial part.
  const Eigen::Matrix<double, 2, 3>& affine() const { return affine_; }
  /// [H, W, 2] float64 displacement T(x) - x at cell centers.
  const torch::Tensor& field() const { return field_; }
  int64_t height() const { return field_.size(0); }
  int64_t width() const { return field_.size(1); }

 private:
  Eigen::MatrixX2d control_src_;
  Eigen::MatrixX2d control_dst_;
  Eigen::MatrixX2d weights_;
  Eigen::Matrix<double, 2, 3> affine_;
  torch::Tensor field_;
};

/// Regular grid_size x grid_size lattice spanning [0,1]^2, row-major in v.
Eigen::MatrixX2d regular_control_grid(int grid_size);

/// Random warp: every lattice point is displaced by iid offsets uniform in
/// [-scale, scale]^2. Requires grid_size >= 2 and scale below half the
/// lattice spacing.
TpsWarp make_tps(int grid_size, double scale, std::mt19937_64& rng, int64_t height, int64_t width);

/// Bilinear resampling of a [C, H, W] image at T(x); samples outside the
/// image clamp to the border.
torch::Tensor apply_warp(const torch::Tensor& image, const TpsWarp& warp);

}  // namespace kpd
