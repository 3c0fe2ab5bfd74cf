#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>
#include <string>

#include "stylefield/core/errors.hpp"

namespace stylefield {

/// Pinhole camera. `pose` maps world to camera: x_cam = R * x_world + t.
/// Camera axes are x right, y down, z forward; integer pixel coordinates
/// address pixel centres.
struct Camera {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix<double, 3, 4> pose = Eigen::Matrix<double, 3, 4>::Zero();
  int width = 0;
  int height = 0;
  double near = 0.1;
  double far = 10.0;

  Eigen::Matrix3d rotation() const { return pose.block<3, 3>(0, 0); }
  Eigen::Vector3d translation() const { return pose.col(3); }
  Eigen::Vector3d center() const { return -rotation().transpose() * translation(); }
  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }

  /// Throws ValidationError describing the first violated invariant.
  void validate(double tol = 1e-6) const {
    const Eigen::Matrix3d R = rotation();
    if (!pose.allFinite() || !intrinsics.allFinite()) throw ValidationError("camera has non-finite entries");
    if ((R * R.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol)
      throw ValidationError("camera rotation is not orthonormal");
    if (std::abs(R.determinant() - 1.0) > tol) throw ValidationError("camera rotation has determinant != +1");
    if (width <= 0 || height <= 0) throw ValidationError("camera size must be positive");
    if (!(fx() > 0 && fy() > 0)) throw ValidationError("camera focal lengths must be positive");
    if (!(cx() >= 0 && cx() < width && cy() >= 0 && cy() < height))
      throw ValidationError("camera principal point outside the image");
    if (!(near > 0 && near < far)) throw ValidationError("camera requires 0 < near < far");
  }

  /// Unit world-space direction of the ray through pixel (u, v).
  Eigen::Vector3d pixel_direction(double u, double v) const {
    const Eigen::Vector3d d_cam = intrinsics.inverse() * Eigen::Vector3d(u, v, 1.0);
    return (rotation().transpose() * d_cam).normalized();
  }

  /// Camera-space depth (z) of a world point.
  double depth_of(const Eigen::Vector3d& p) const { return (rotation() * p + translation()).z(); }

  /// Pixel coordinates of a world point (undefined for depth <= 0).
  Eigen::Vector2d project(const Eigen::Vector3d& p) const {
    const Eigen::Vector3d pc = rotation() * p + translation();
    const Eigen::Vector3d h = intrinsics * pc;
    return {h.x() / h.z(), h.y() / h.z()};
  }
};

inline Eigen::Matrix3d make_intrinsics(double focal, int width, int height) {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  K(0, 0) = focal;
  K(1, 1) = focal;
  K(0, 2) = (width - 1) / 2.0;
  K(1, 2) = (height - 1) / 2.0;
  return K;
}

/// Camera at `eye` looking at `target`; world +y maps to camera "down".
inline Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Matrix3d& K, int width,
                      int height, double near, double far) {
  const Eigen::Vector3d fwd = target - eye;
  if (fwd.norm() < 1e-9) throw ValidationError("degenerate camera: look-at target coincides with position");
  const Eigen::Vector3d z = fwd.normalized();
  Eigen::Vector3d down(0, 1, 0);
  if (std::abs(z.dot(down)) > 0.999) down = Eigen::Vector3d(0, 0, 1);
  const Eigen::Vector3d x = down.cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Camera cam;
  Eigen::Matrix3d R;
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = z.transpose();
  cam.pose.block<3, 3>(0, 0) = R;
  cam.pose.col(3) = -R * eye;
  cam.intrinsics = K;
  cam.width = width;
  cam.height = height;
  cam.near = near;
  cam.far = far;
  return cam;
}

/// Intrinsics after integer area downsampling, keeping pixel centres aligned.
inline Camera downsample_camera(Camera cam, int factor) {
  if (factor == 1) return cam;
  const double s = factor;
  cam.intrinsics(0, 0) /= s;
  cam.intrinsics(1, 1) /= s;
  cam.intrinsics(0, 2) = (cam.intrinsics(0, 2) + 0.5) / s - 0.5;
  cam.intrinsics(1, 2) = (cam.intrinsics(1, 2) + 0.5) / s - 0.5;
  cam.width /= factor;
  cam.height /= factor;
  return cam;
}

}  // namespace stylefield
