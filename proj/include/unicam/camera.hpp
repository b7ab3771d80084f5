#pragma once

#include <json.hpp>

#include <Eigen/Core>
#include <Eigen/LU>

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

#include "unicam/geometry.hpp"
#include "unicam/image.hpp"

namespace unicam {

enum class ModelKind { Pinhole, UCM, EUCM, DS };

/// Intrinsic parameter count: Pinhole 4, UCM 5, EUCM 6, DS 6.
inline int param_count(ModelKind kind) {
  switch (kind) {
    case ModelKind::Pinhole: return 4;
    case ModelKind::UCM: return 5;
    default: return 6;
  }
}

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Pinhole: return "Pinhole";
    case ModelKind::UCM: return "UCM";
    case ModelKind::EUCM: return "EUCM";
    case ModelKind::DS: return "DS";
  }
  return "?";
}

inline ModelKind model_kind_from_string(std::string name) {
  for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (name == "pinhole") return ModelKind::Pinhole;
  if (name == "ucm") return ModelKind::UCM;
  if (name == "eucm") return ModelKind::EUCM;
  if (name == "ds") return ModelKind::DS;
  throw std::invalid_argument("unknown camera model kind: " + name);
}

/// Intrinsic parameter vector, ordered [fx, fy, cx, cy, alpha, beta|xi].
using ParamVec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, 6, 1>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
/// 2 x k Jacobian w.r.t. intrinsics (k = param_count of the kind).
using Mat2K = Eigen::Matrix<double, 2, Eigen::Dynamic, Eigen::ColMajor, 2, 6>;
/// 3 x k Jacobian of an unprojected point w.r.t. intrinsics.
using Mat3K = Eigen::Matrix<double, 3, Eigen::Dynamic, Eigen::ColMajor, 3, 6>;

struct ProjectionJacobians {
  Mat23 d_point;  // d(pixel)/d(point)
  Mat2K d_params; // d(pixel)/d(intrinsics)
};

/// Unified camera model family container. Immutable value type; all
/// projection operations are free functions.
///
/// Parameter layout is [fx, fy, cx, cy] plus alpha for UCM/EUCM/DS, beta for
/// EUCM and xi for DS. Validity bounds are enforced on construction.
class CameraModel {
 public:
  CameraModel(ModelKind kind, int width, int height, const ParamVec& params)
      : kind_(kind), width_(width), height_(height), params_(params) {
    validate();
  }

  /// Default initialization from image shape only:
  /// fx = fy = max(w,h)/2, principal point at the image center, alpha = 0.5,
  /// beta = 1, xi = 0.
  static CameraModel default_init(ModelKind kind, int width, int height) {
    if (width <= 0 || height <= 0) {
      throw std::invalid_argument("default_init: image size must be positive");
    }
    ParamVec p(param_count(kind));
    p[0] = p[1] = 0.5 * std::max(width, height);
    p[2] = 0.5 * width;
    p[3] = 0.5 * height;
    if (kind != ModelKind::Pinhole) p[4] = 0.5;
    if (kind == ModelKind::EUCM) p[5] = 1.0;
    if (kind == ModelKind::DS) p[5] = 0.0;
    return CameraModel(kind, width, height, p);
  }

  ModelKind kind() const { return kind_; }
  int width() const { return width_; }
  int height() const { return height_; }
  const ParamVec& params() const { return params_; }

  double fx() const { return params_[0]; }
  double fy() const { return params_[1]; }
  double cx() const { return params_[2]; }
  double cy() const { return params_[3]; }
  /// Sphere-offset parameter; 0 for Pinhole.
  double alpha() const { return kind_ == ModelKind::Pinhole ? 0.0 : params_[4]; }
  /// EUCM ellipse parameter; 1 otherwise.
  double beta() const { return kind_ == ModelKind::EUCM ? params_[5] : 1.0; }
  /// DS sphere-separation parameter; 0 otherwise.
  double xi() const { return kind_ == ModelKind::DS ? params_[5] : 0.0; }

  CameraModel with_params(const ParamVec& p) const {
    return CameraModel(kind_, width_, height_, p);
  }

  /// Projects a parameter vector onto the model's validity set. Applied after
  /// optimizer steps: alpha into [0, 1-1e-6], DS xi into (-1, 1), beta > 0.
  static void clamp_params(ModelKind kind, int width, int height, ParamVec& p) {
    p[0] = std::max(p[0], 1e-3);
    p[1] = std::max(p[1], 1e-3);
    p[2] = std::clamp(p[2], 0.0, width - 1e-6);
    p[3] = std::clamp(p[3], 0.0, height - 1e-6);
    if (kind != ModelKind::Pinhole) p[4] = std::clamp(p[4], 0.0, 1.0 - 1e-6);
    if (kind == ModelKind::EUCM) p[5] = std::max(p[5], 1e-6);
    if (kind == ModelKind::DS) p[5] = std::clamp(p[5], -1.0 + 1e-6, 1.0 - 1e-6);
  }

 private:
  void validate() const {
    if (width_ <= 0 || height_ <= 0) {
      throw std::invalid_argument("CameraModel: image size must be positive");
    }
    if (params_.size() != param_count(kind_)) {
      throw std::invalid_argument("CameraModel: expected " +
                                  std::to_string(param_count(kind_)) + " parameters for " +
                                  to_string(kind_) + ", got " + std::to_string(params_.size()));
    }
    if (!params_.allFinite()) throw std::invalid_argument("CameraModel: non-finite parameters");
    if (!(params_[0] > 0) || !(params_[1] > 0)) {
      throw std::invalid_argument("CameraModel: focal lengths must be positive");
    }
    if (params_[2] < 0 || params_[2] >= width_ || params_[3] < 0 || params_[3] >= height_) {
      throw std::invalid_argument("CameraModel: principal point outside the image");
    }
    if (kind_ == ModelKind::UCM || kind_ == ModelKind::EUCM) {
      if (params_[4] < 0 || params_[4] >= 1.0) {
        throw std::invalid_argument("CameraModel: alpha must be in [0, 1)");
      }
    }
    if (kind_ == ModelKind::DS) {
      if (params_[4] < 0 || params_[4] > 1.0) {
        throw std::invalid_argument("CameraModel: DS alpha must be in [0, 1]");
      }
      if (params_[5] <= -1.0 || params_[5] >= 1.0) {
        throw std::invalid_argument("CameraModel: DS xi must be in (-1, 1)");
      }
    }
    if (kind_ == ModelKind::EUCM && !(params_[5] > 0)) {
      throw std::invalid_argument("CameraModel: EUCM beta must be positive");
    }
  }

  ModelKind kind_;
  int width_;
  int height_;
  ParamVec params_;
};

namespace detail {

constexpr double kProjEps = 1e-8;       // denominator floor
constexpr double kUnprojMargin = 1.0 - 1e-9;  // keeps unprojected rays strictly inside the FoV

// All four models project as u = fx*x/D + cx, v = fy*y/D + cy for a
// model-specific denominator D(P). This evaluates D, its point gradient and
// its gradient w.r.t. the distortion parameters (slots 4, 5), plus the
// field-of-view validity of P.
struct Denominator {
  double value = 0;
  Vec3 d_point = Vec3::Zero();
  double d_alpha = 0;
  double d_extra = 0;  // beta (EUCM) or xi (DS)
  bool valid = false;
};

inline double fov_w(double alpha) {
  return alpha <= 0.5 ? alpha / (1.0 - alpha) : (1.0 - alpha) / alpha;
}

inline Denominator denominator(const CameraModel& model, const Vec3& p, bool with_jacobians) {
  Denominator den;
  const double x = p.x(), y = p.y(), z = p.z();
  const double r2 = x * x + y * y;
  switch (model.kind()) {
    case ModelKind::Pinhole: {
      den.value = z;
      den.valid = z > kProjEps;
      if (with_jacobians) den.d_point = Vec3(0, 0, 1);
      return den;
    }
    case ModelKind::UCM: {
      const double a = model.alpha();
      const double d = std::sqrt(r2 + z * z);
      den.value = a * d + (1.0 - a) * z;
      den.valid = den.value > kProjEps && d > kProjEps && z > -fov_w(a) * d;
      if (with_jacobians && den.valid) {
        den.d_point = a / d * p + Vec3(0, 0, 1.0 - a);
        den.d_alpha = d - z;
      }
      return den;
    }
    case ModelKind::EUCM: {
      const double a = model.alpha();
      const double b = model.beta();
      const double rho = std::sqrt(b * r2 + z * z);
      den.value = a * rho + (1.0 - a) * z;
      den.valid = den.value > kProjEps && rho > kProjEps && z > -fov_w(a) * rho;
      if (with_jacobians && den.valid) {
        den.d_point = Vec3(a * b * x / rho, a * b * y / rho, a * z / rho + (1.0 - a));
        den.d_alpha = rho - z;
        den.d_extra = a * r2 / (2.0 * rho);
      }
      return den;
    }
    case ModelKind::DS: {
      const double a = model.alpha();
      const double xi = model.xi();
      const double d1 = std::sqrt(r2 + z * z);
      const double s = xi * d1 + z;
      const double d2 = std::sqrt(r2 + s * s);
      den.value = a * d2 + (1.0 - a) * s;
      const double w1 = fov_w(a);
      const double w2 = (w1 + xi) / std::sqrt(2.0 * w1 * xi + xi * xi + 1.0);
      den.valid = den.value > kProjEps && d1 > kProjEps && d2 > kProjEps && z > -w2 * d1;
      if (with_jacobians && den.valid) {
        const Vec3 ds_dp = xi / d1 * p + Vec3(0, 0, 1);
        const Vec3 dd2_dp = (Vec3(x, y, 0) + s * ds_dp) / d2;
        den.d_point = a * dd2_dp + (1.0 - a) * ds_dp;
        den.d_alpha = d2 - s;
        den.d_extra = a * s * d1 / d2 + (1.0 - a) * d1;
      }
      return den;
    }
  }
  return den;
}

}  // namespace detail

/// Projection per the unified model family. Returns false (and leaves `pixel`
/// unspecified) when the point lies outside the model's validity domain.
inline bool try_project(const CameraModel& model, const Vec3& point, Pixel& pixel,
                        ProjectionJacobians* jacobians = nullptr) {
  if (!point.allFinite()) return false;
  const auto den = detail::denominator(model, point, jacobians != nullptr);
  if (!den.valid) return false;
  const double inv = 1.0 / den.value;
  const double mx = point.x() * inv;
  const double my = point.y() * inv;
  pixel = Pixel(model.fx() * mx + model.cx(), model.fy() * my + model.cy());
  if (jacobians) {
    const int k = param_count(model.kind());
    const double fx = model.fx(), fy = model.fy();
    jacobians->d_point.row(0) =
        fx * inv * (Vec3(1, 0, 0) - mx * den.d_point).transpose();
    jacobians->d_point.row(1) =
        fy * inv * (Vec3(0, 1, 0) - my * den.d_point).transpose();
    jacobians->d_params.resize(2, k);
    jacobians->d_params.setZero();
    jacobians->d_params(0, 0) = mx;
    jacobians->d_params(1, 1) = my;
    jacobians->d_params(0, 2) = 1.0;
    jacobians->d_params(1, 3) = 1.0;
    if (k > 4) {
      jacobians->d_params(0, 4) = -fx * mx * inv * den.d_alpha;
      jacobians->d_params(1, 4) = -fy * my * inv * den.d_alpha;
    }
    if (k > 5) {
      jacobians->d_params(0, 5) = -fx * mx * inv * den.d_extra;
      jacobians->d_params(1, 5) = -fy * my * inv * den.d_extra;
    }
  }
  return true;
}

/// Throwing variant of try_project; the error identifies the offending point.
inline Pixel project(const CameraModel& model, const Vec3& point) {
  Pixel pixel;
  if (!try_project(model, point, pixel)) {
    std::ostringstream msg;
    msg << "project: point (" << point.x() << ", " << point.y() << ", " << point.z()
        << ") outside the " << to_string(model.kind()) << " validity domain";
    throw std::domain_error(msg.str());
  }
  return pixel;
}

inline std::pair<Pixel, ProjectionJacobians> project_with_jacobians(const CameraModel& model,
                                                                    const Vec3& point) {
  Pixel pixel;
  ProjectionJacobians jac;
  if (!try_project(model, point, pixel, &jac)) {
    std::ostringstream msg;
    msg << "project: point (" << point.x() << ", " << point.y() << ", " << point.z()
        << ") outside the " << to_string(model.kind()) << " validity domain";
    throw std::domain_error(msg.str());
  }
  return {pixel, jac};
}

/// Unprojection. The returned point has Euclidean norm equal to `depth`
/// (distance along the ray), which stays meaningful for rays with z <= 0.
inline bool try_unproject(const CameraModel& model, const Pixel& pixel, double depth,
                          Vec3& point) {
  if (!(depth > 0) || !pixel.allFinite()) return false;
  const double u = pixel.x(), v = pixel.y();
  Vec3 dir;
  switch (model.kind()) {
    case ModelKind::Pinhole: {
      dir = Vec3((u - model.cx()) / model.fx(), (v - model.cy()) / model.fy(), 1.0);
      break;
    }
    case ModelKind::UCM: {
      // Unprojection of the sphere model, with the offset xi equal to
      // zeta = alpha/(1-alpha).
      const double a = model.alpha();
      const double mx = (u - model.cx()) * (1.0 - a) / model.fx();
      const double my = (v - model.cy()) * (1.0 - a) / model.fy();
      const double r2 = mx * mx + my * my;
      if (a > 0.5) {
        const double bound = (1.0 - a) * (1.0 - a) / (2.0 * a - 1.0);
        if (r2 > bound * detail::kUnprojMargin) return false;
      }
      const double zeta = a / (1.0 - a);
      const double m = (zeta + std::sqrt(1.0 + (1.0 - zeta * zeta) * r2)) / (1.0 + r2);
      dir = Vec3(m * mx, m * my, m - zeta);
      break;
    }
    case ModelKind::EUCM: {
      const double a = model.alpha();
      const double b = model.beta();
      const double mx = (u - model.cx()) / model.fx();
      const double my = (v - model.cy()) / model.fy();
      const double r2 = mx * mx + my * my;
      const double sq = 1.0 - (2.0 * a - 1.0) * b * r2;
      if (a > 0.5) {
        const double bound = 1.0 / (b * (2.0 * a - 1.0));
        if (r2 > bound * detail::kUnprojMargin) return false;
      }
      const double mz = (1.0 - b * a * a * r2) / (a * std::sqrt(sq) + 1.0 - a);
      dir = Vec3(mx, my, mz);
      break;
    }
    case ModelKind::DS: {
      const double a = model.alpha();
      const double xi = model.xi();
      const double mx = (u - model.cx()) / model.fx();
      const double my = (v - model.cy()) / model.fy();
      const double r2 = mx * mx + my * my;
      const double sq = 1.0 - (2.0 * a - 1.0) * r2;
      if (a > 0.5) {
        const double bound = 1.0 / (2.0 * a - 1.0);
        if (r2 > bound * detail::kUnprojMargin) return false;
      }
      const double mz = (1.0 - a * a * r2) / (a * std::sqrt(sq) + 1.0 - a);
      const double k =
          (mz * xi + std::sqrt(mz * mz + (1.0 - xi * xi) * r2)) / (mz * mz + r2);
      dir = Vec3(k * mx, k * my, k * mz - xi);
      break;
    }
  }
  const double n = dir.norm();
  if (!(n > 0) || !dir.allFinite()) return false;
  point = (depth / n) * dir;
  return true;
}

inline Vec3 unproject(const CameraModel& model, const Pixel& pixel, double depth) {
  if (!(depth > 0)) {
    throw std::invalid_argument("unproject: depth must be positive, got " +
                                std::to_string(depth));
  }
  Vec3 point;
  if (!try_unproject(model, pixel, depth, point)) {
    std::ostringstream msg;
    msg << "unproject: pixel (" << pixel.x() << ", " << pixel.y() << ") outside the "
        << to_string(model.kind()) << " invertibility domain";
    throw std::domain_error(msg.str());
  }
  return point;
}

/// Jacobian of unproject(model, pixel, depth) w.r.t. the intrinsic parameters,
/// obtained implicitly from the projection Jacobians: differentiating
/// pi(P(i), i) = pixel under the constraint |P| = depth gives the 3x3 system
/// [d_pixel/d_point; (P/|P|)^T] * dP/di = [-d_pixel/d_params; 0].
inline Mat3K unproject_param_jacobian(const CameraModel& model, const Pixel& pixel,
                                      double depth) {
  const Vec3 point = unproject(model, pixel, depth);
  const auto [reproj, jac] = project_with_jacobians(model, point);
  (void)reproj;
  Mat3 m;
  m.topRows<2>() = jac.d_point;
  m.row(2) = (point / point.norm()).transpose();
  const int k = param_count(model.kind());
  Eigen::Matrix<double, 3, Eigen::Dynamic, Eigen::ColMajor, 3, 6> rhs(3, k);
  rhs.topRows<2>() = -jac.d_params;
  rhs.row(2).setZero();
  return m.partialPivLu().solve(rhs);
}

/// True exactly where unprojection succeeds at depth 1. Pixel (row, col) is
/// evaluated at continuous coordinates (u, v) = (col, row).
inline MaskGrid valid_fov_mask(const CameraModel& model) {
  MaskGrid mask(model.width(), model.height());
  Vec3 p;
  for (int r = 0; r < model.height(); ++r) {
    for (int c = 0; c < model.width(); ++c) {
      mask.set(r, c, try_unproject(model, Pixel(c, r), 1.0, p));
    }
  }
  return mask;
}

// --------------------------------------------------------------------------
// JSON serialization: {kind, fx, fy, cx, cy, alpha, beta?, xi?, width, height}
// --------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const CameraModel& model) {
  j = nlohmann::json{{"kind", to_string(model.kind())}, {"fx", model.fx()},
                     {"fy", model.fy()},                {"cx", model.cx()},
                     {"cy", model.cy()},                {"alpha", model.alpha()},
                     {"width", model.width()},          {"height", model.height()}};
  if (model.kind() == ModelKind::EUCM) j["beta"] = model.beta();
  if (model.kind() == ModelKind::DS) j["xi"] = model.xi();
}

inline CameraModel camera_model_from_json(const nlohmann::json& j) {
  const ModelKind kind = model_kind_from_string(j.at("kind").get<std::string>());
  ParamVec p(param_count(kind));
  p[0] = j.at("fx").get<double>();
  p[1] = j.at("fy").get<double>();
  p[2] = j.at("cx").get<double>();
  p[3] = j.at("cy").get<double>();
  if (kind != ModelKind::Pinhole) p[4] = j.at("alpha").get<double>();
  if (kind == ModelKind::EUCM) p[5] = j.at("beta").get<double>();
  if (kind == ModelKind::DS) p[5] = j.at("xi").get<double>();
  return CameraModel(kind, j.at("width").get<int>(), j.at("height").get<int>(), p);
}

}  // namespace unicam
