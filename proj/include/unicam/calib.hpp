#pragma once

#include <json.hpp>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unicam/camera.hpp"
#include "unicam/geometry.hpp"
#include "unicam/optim.hpp"

namespace unicam {

/// Pre-detected target observations: known 3D board geometry plus per-frame
/// (corner id -> pixel) correspondences.
struct TargetDataset {
  struct Frame {
    int id = 0;
    std::vector<std::pair<int, Pixel>> observations;
  };

  std::vector<Vec3> board;  // corner id -> board-frame point, meters
  std::vector<Frame> frames;
  int width = 0;
  int height = 0;

  /// Checks the dataset invariants: observed ids exist in the board, at least
  /// 6 observations per frame, and (for a full calibration) at least 3 frames.
  void validate(bool full_calibration = true) const {
    if (width <= 0 || height <= 0) {
      throw std::invalid_argument("TargetDataset: image size must be positive");
    }
    if (full_calibration && frames.size() < 3) {
      throw std::invalid_argument("TargetDataset: a full calibration needs at least 3 frames");
    }
    for (const auto& frame : frames) {
      if (frame.observations.size() < 6) {
        throw std::invalid_argument("TargetDataset: frame " + std::to_string(frame.id) +
                                    " has fewer than 6 observations");
      }
      for (const auto& [corner, px] : frame.observations) {
        if (corner < 0 || corner >= static_cast<int>(board.size())) {
          throw std::invalid_argument("TargetDataset: frame " + std::to_string(frame.id) +
                                      " references unknown corner id " + std::to_string(corner));
        }
        if (!px.allFinite()) {
          throw std::invalid_argument("TargetDataset: non-finite observation in frame " +
                                      std::to_string(frame.id));
        }
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const TargetDataset& data) {
  nlohmann::json board = nlohmann::json::array();
  for (const auto& p : data.board) board.push_back({p.x(), p.y(), p.z()});
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : data.frames) {
    nlohmann::json obs = nlohmann::json::array();
    for (const auto& [corner, px] : f.observations) obs.push_back({corner, px.x(), px.y()});
    frames.push_back({{"id", f.id}, {"obs", obs}});
  }
  j = nlohmann::json{
      {"board", board}, {"image_size", {data.width, data.height}}, {"frames", frames}};
}

inline void from_json(const nlohmann::json& j, TargetDataset& data) {
  data.board.clear();
  data.frames.clear();
  for (const auto& p : j.at("board")) {
    data.board.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
  }
  data.width = j.at("image_size").at(0).get<int>();
  data.height = j.at("image_size").at(1).get<int>();
  for (const auto& f : j.at("frames")) {
    TargetDataset::Frame frame;
    frame.id = f.at("id").get<int>();
    for (const auto& o : f.at("obs")) {
      frame.observations.emplace_back(o.at(0).get<int>(),
                                      Pixel(o.at(1).get<double>(), o.at(2).get<double>()));
    }
    data.frames.push_back(std::move(frame));
  }
}

struct FrameResidualStats {
  int frame_id = 0;
  int used_observations = 0;
  double mean_px = 0;
  double rms_px = 0;
  double max_px = 0;
};

struct CalibrationReport {
  CameraModel model;
  std::vector<int> frame_ids;
  std::vector<SE3> poses;  // board-to-camera, aligned with frame_ids
  double mre = 0;          // mean Euclidean pixel error over all observations
  std::vector<FrameResidualStats> per_frame;
  SolveTrace trace;
  std::string mode;  // "full" | "pose-only"
  int excluded_observations = 0;
  std::vector<std::pair<int, int>> excluded;  // (frame id, corner id)
};

struct PerturbationResult {
  double scale = 1.0;
  ParamVec initial_params;
  ParamVec converged_params;
  /// |converged - reference| / |reference| per parameter (absolute deviation
  /// when the reference entry is ~0).
  Eigen::VectorXd relative_deviation;
  double mre = 0;
  bool ok = false;
  std::string error;
};

/// Mean reprojection error of (model, poses) against the dataset, in pixels.
/// Observations that cannot be projected are excluded and counted through
/// `excluded`. Deterministic and invariant to frame/observation order.
inline double mean_reprojection_error(const TargetDataset& data, const CameraModel& model,
                                      const std::vector<SE3>& poses, int* excluded = nullptr) {
  if (poses.size() != data.frames.size()) {
    throw std::invalid_argument("mean_reprojection_error: pose count != frame count");
  }
  long double sum = 0;
  std::size_t used = 0;
  int skipped = 0;
  for (size_t f = 0; f < data.frames.size(); ++f) {
    for (const auto& [corner, px] : data.frames[f].observations) {
      const Vec3 point = poses[f] * data.board[corner];
      Pixel proj;
      if (!try_project(model, point, proj)) {
        ++skipped;
        continue;
      }
      sum += (proj - px).norm();
      ++used;
    }
  }
  if (excluded) *excluded = skipped;
  if (used == 0) throw std::domain_error("mean_reprojection_error: no usable observations");
  return static_cast<double>(sum / used);
}

namespace detail {

// Pose bootstrap: unproject observations at unit depth, align the board
// points to those rays with a scaled orthogonal Procrustes fit (the scale
// absorbs the unknown ray lengths), then polish with a few pose-only LM
// iterations on the single frame.
inline std::optional<SE3> bootstrap_pose(const CameraModel& model,
                                         const std::vector<Vec3>& board,
                                         const TargetDataset::Frame& frame) {
  std::vector<Vec3> rays, points;
  rays.reserve(frame.observations.size());
  for (const auto& [corner, px] : frame.observations) {
    Vec3 ray;
    if (!try_unproject(model, px, 1.0, ray)) continue;
    rays.push_back(ray);
    points.push_back(board[corner]);
  }
  if (rays.size() < 6) return std::nullopt;

  Eigen::MatrixXd src(3, points.size()), dst(3, rays.size());
  for (size_t i = 0; i < points.size(); ++i) {
    src.col(i) = points[i];
    dst.col(i) = rays[i];
  }
  const Eigen::Matrix4d t = Eigen::umeyama(src, dst, true);
  const double scale = std::cbrt(t.topLeftCorner<3, 3>().determinant());
  if (!(scale > 0) || !t.allFinite()) return std::nullopt;
  Mat3 rotation = t.topLeftCorner<3, 3>() / scale;
  // Guard against numerical drift before constructing the pose.
  Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  rotation = svd.matrixU() * svd.matrixV().transpose();
  if (rotation.determinant() < 0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1;
    rotation = u * svd.matrixV().transpose();
  }
  SE3 pose(rotation, t.topRightCorner<3, 1>() / scale);

  // Frame-only polish: 10 LM iterations with the intrinsics held fixed.
  ResidualProblem problem;
  problem.blocks.push_back(ParamBlock::pose_block("pose", pose));
  problem.evaluate = [&](const std::vector<ParamBlock>& blocks,
                         std::vector<ResidualChunk>& chunks, bool with_jacobians) {
    chunks.clear();
    ResidualChunk chunk;
    chunk.residual.resize(2 * static_cast<Eigen::Index>(frame.observations.size()));
    Eigen::MatrixXd jac(chunk.residual.size(), 6);
    Eigen::Index row = 0;
    for (const auto& [corner, px] : frame.observations) {
      const Vec3 point = blocks[0].pose * board[corner];
      Pixel proj;
      ProjectionJacobians pj;
      if (!try_project(model, point, proj, with_jacobians ? &pj : nullptr)) return false;
      chunk.residual.segment<2>(row) = proj - px;
      if (with_jacobians) {
        jac.block<2, 3>(row, 0) = -pj.d_point * skew(point);
        jac.block<2, 3>(row, 3) = pj.d_point;
      }
      row += 2;
    }
    if (with_jacobians) chunk.jacobians.emplace_back(0, std::move(jac));
    chunks.push_back(std::move(chunk));
    return true;
  };
  LmConfig config;
  config.max_iters = 10;
  try {
    auto [blocks, trace] = lm_solve(problem, config);
    return blocks[0].pose;
  } catch (const SolveError&) {
    return std::nullopt;
  }
}

struct PreparedProblem {
  std::vector<int> frame_ids;
  std::vector<TargetDataset::Frame> frames;  // usable observations only
  std::vector<SE3> poses;
  int excluded_count = 0;
  std::vector<std::pair<int, int>> excluded;
};

// Drops observations that cannot be unprojected with the initial intrinsics
// and bootstraps a pose for every frame that keeps >= 6 usable observations.
inline PreparedProblem prepare_frames(const TargetDataset& data, const CameraModel& init) {
  PreparedProblem prep;
  for (const auto& frame : data.frames) {
    TargetDataset::Frame usable;
    usable.id = frame.id;
    for (const auto& [corner, px] : frame.observations) {
      Vec3 ray;
      if (try_unproject(init, px, 1.0, ray)) {
        usable.observations.emplace_back(corner, px);
      } else {
        ++prep.excluded_count;
        prep.excluded.emplace_back(frame.id, corner);
      }
    }
    if (usable.observations.size() < 6) {
      for (const auto& [corner, px] : usable.observations) {
        ++prep.excluded_count;
        prep.excluded.emplace_back(frame.id, corner);
      }
      continue;
    }
    const auto pose = bootstrap_pose(init, data.board, usable);
    if (!pose) {
      for (const auto& [corner, px] : usable.observations) {
        ++prep.excluded_count;
        prep.excluded.emplace_back(frame.id, corner);
      }
      continue;
    }
    prep.frame_ids.push_back(usable.id);
    prep.frames.push_back(std::move(usable));
    prep.poses.push_back(*pose);
  }
  return prep;
}

inline CalibrationReport run_calibration(const TargetDataset& data, const CameraModel& init,
                                         bool fix_intrinsics, const LmConfig& config) {
  data.validate(!fix_intrinsics);
  if (init.width() != data.width || init.height() != data.height) {
    throw std::invalid_argument("calibrate: model image size does not match the dataset");
  }
  PreparedProblem prep = prepare_frames(data, init);
  if (prep.frames.empty()) {
    throw std::domain_error("calibrate: no usable frames after initialization");
  }

  const ModelKind kind = init.kind();
  const int width = data.width, height = data.height;

  ResidualProblem problem;
  ParamBlock intrinsics = ParamBlock::vector("intrinsics", init.params());
  intrinsics.frozen = fix_intrinsics;
  intrinsics.freeze_during_warm_start = true;
  intrinsics.clamp = [kind, width, height](Eigen::VectorXd& v) {
    ParamVec p = v;
    CameraModel::clamp_params(kind, width, height, p);
    v = p;
  };
  problem.blocks.push_back(std::move(intrinsics));
  for (size_t f = 0; f < prep.frames.size(); ++f) {
    problem.blocks.push_back(
        ParamBlock::pose_block("pose_" + std::to_string(prep.frame_ids[f]), prep.poses[f]));
  }

  const auto& frames = prep.frames;
  const auto& board = data.board;
  problem.evaluate = [&frames, &board, kind, width, height](
                         const std::vector<ParamBlock>& blocks,
                         std::vector<ResidualChunk>& chunks, bool with_jacobians) {
    ParamVec params = blocks[0].value;
    CameraModel model(kind, width, height, params);  // clamp hook keeps this valid
    chunks.clear();
    chunks.reserve(frames.size());
    const int k = param_count(kind);
    for (size_t f = 0; f < frames.size(); ++f) {
      const SE3& pose = blocks[1 + f].pose;
      const auto& obs = frames[f].observations;
      ResidualChunk chunk;
      chunk.residual.resize(2 * static_cast<Eigen::Index>(obs.size()));
      Eigen::MatrixXd j_intr, j_pose;
      if (with_jacobians) {
        j_intr.resize(chunk.residual.size(), k);
        j_pose.resize(chunk.residual.size(), 6);
      }
      Eigen::Index row = 0;
      for (const auto& [corner, px] : obs) {
        const Vec3 point = pose * board[corner];
        Pixel proj;
        ProjectionJacobians pj;
        if (!try_project(model, point, proj, with_jacobians ? &pj : nullptr)) return false;
        chunk.residual.segment<2>(row) = proj - px;
        if (with_jacobians) {
          j_intr.block(row, 0, 2, k) = pj.d_params;
          j_pose.block<2, 3>(row, 0) = -pj.d_point * skew(point);
          j_pose.block<2, 3>(row, 3) = pj.d_point;
        }
        row += 2;
      }
      if (with_jacobians) {
        chunk.jacobians.emplace_back(0, std::move(j_intr));
        chunk.jacobians.emplace_back(static_cast<int>(1 + f), std::move(j_pose));
      }
      chunks.push_back(std::move(chunk));
    }
    return true;
  };

  auto [blocks, trace] = lm_solve(problem, config);

  CalibrationReport report{
      CameraModel(kind, width, height, ParamVec(blocks[0].value)), {}, {}, 0, {}, {}, "", 0, {}};
  report.frame_ids = prep.frame_ids;
  for (size_t f = 0; f < frames.size(); ++f) report.poses.push_back(blocks[1 + f].pose);
  report.trace = std::move(trace);
  report.mode = fix_intrinsics ? "pose-only" : "full";
  report.excluded_observations = prep.excluded_count;
  report.excluded = std::move(prep.excluded);

  long double total = 0;
  std::size_t used = 0;
  for (size_t f = 0; f < frames.size(); ++f) {
    FrameResidualStats stats;
    stats.frame_id = prep.frame_ids[f];
    long double frame_sum = 0, frame_sq = 0;
    for (const auto& [corner, px] : frames[f].observations) {
      const Pixel proj = project(report.model, report.poses[f] * board[corner]);
      const double err = (proj - px).norm();
      frame_sum += err;
      frame_sq += err * err;
      stats.max_px = std::max(stats.max_px, err);
      ++stats.used_observations;
    }
    stats.mean_px = static_cast<double>(frame_sum / stats.used_observations);
    stats.rms_px = std::sqrt(static_cast<double>(frame_sq / stats.used_observations));
    report.per_frame.push_back(stats);
    total += frame_sum;
    used += stats.used_observations;
  }
  report.mre = static_cast<double>(total / used);
  return report;
}

}  // namespace detail

/// Joint intrinsics + per-frame pose estimation by LM on reprojection
/// residuals. Poses are bootstrapped per frame; observations that cannot be
/// unprojected at the initial intrinsics are excluded and counted.
inline CalibrationReport calibrate(const TargetDataset& data, ModelKind kind,
                                   std::optional<CameraModel> init = std::nullopt,
                                   const LmConfig& config = {}) {
  const CameraModel start =
      init ? *init : CameraModel::default_init(kind, data.width, data.height);
  if (start.kind() != kind) {
    throw std::invalid_argument("calibrate: init model kind does not match requested kind");
  }
  return detail::run_calibration(data, start, /*fix_intrinsics=*/false, config);
}

/// Pose-only refit with fixed intrinsics (the protocol used to score learned
/// intrinsics against target observations).
inline CalibrationReport refit_poses(const TargetDataset& data, const CameraModel& fixed,
                                     const LmConfig& config = {}) {
  return detail::run_calibration(data, fixed, /*fix_intrinsics=*/true, config);
}

/// Scales every reference parameter by each factor, re-runs calibrate from
/// that initialization (poses re-bootstrapped, intrinsics frozen for the
/// first 10 LM iterations) and reports per-parameter deviations from the
/// reference model.
inline std::vector<PerturbationResult> perturb_and_recalibrate(
    const TargetDataset& data, const CameraModel& reference,
    const std::vector<double>& scales = {1.10, 1.05, 0.95, 0.90}, LmConfig config = {}) {
  config.warm_start_iters = 10;
  std::vector<PerturbationResult> results;
  for (double scale : scales) {
    PerturbationResult res;
    res.scale = scale;
    res.initial_params = reference.params() * scale;
    if (!(scale > 0)) {
      res.error = "scale must be positive";
      results.push_back(std::move(res));
      continue;
    }
    try {
      const CameraModel init = reference.with_params(res.initial_params);
      CalibrationReport report = calibrate(data, reference.kind(), init, config);
      res.converged_params = report.model.params();
      res.mre = report.mre;
      res.relative_deviation.resize(res.converged_params.size());
      for (Eigen::Index i = 0; i < res.converged_params.size(); ++i) {
        const double ref = reference.params()[i];
        const double dev = std::abs(res.converged_params[i] - ref);
        res.relative_deviation[i] = std::abs(ref) > 1e-9 ? dev / std::abs(ref) : dev;
      }
      res.ok = true;
    } catch (const std::exception& e) {
      res.error = e.what();
    }
    results.push_back(std::move(res));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Synthetic target data (its own oracle for the calibration tests).
// ---------------------------------------------------------------------------

struct TargetSimConfig {
  int frames = 30;
  double noise_sigma = 0.0;  // Gaussian pixel noise
  std::uint64_t seed = 0;
  int board_rows = 6;
  int board_cols = 6;
  double spacing = 0.09;  // meters between corners
};

/// Planar grid board, corner ids row-major, centered at the board origin.
inline std::vector<Vec3> make_board(int rows, int cols, double spacing) {
  std::vector<Vec3> board;
  board.reserve(static_cast<size_t>(rows) * cols);
  const double x0 = -0.5 * (cols - 1) * spacing;
  const double y0 = -0.5 * (rows - 1) * spacing;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      board.emplace_back(x0 + c * spacing, y0 + r * spacing, 0.0);
    }
  }
  return board;
}

/// Renders noiseless-or-noisy observations of the board through the ground
/// truth model, with deterministic per-seed poses that keep every corner
/// inside the image. Well-spread tilts and distances keep all intrinsics
/// observable.
inline TargetDataset make_synthetic_target_dataset(const CameraModel& truth,
                                                   const TargetSimConfig& sim,
                                                   std::vector<SE3>* true_poses = nullptr) {
  TargetDataset data;
  data.width = truth.width();
  data.height = truth.height();
  data.board = make_board(sim.board_rows, sim.board_cols, sim.spacing);

  std::mt19937_64 rng(sim.seed * 0x9e3779b97f4a7c15ULL + 1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double margin = 4.0;
  int made = 0;
  int attempts = 0;
  while (made < sim.frames) {
    if (++attempts > 10000 * sim.frames) {
      throw std::runtime_error("make_synthetic_target_dataset: could not place frames");
    }
    const double tilt_x = 0.55 * unit(rng);
    const double tilt_y = 0.55 * unit(rng);
    const double roll = 0.6 * unit(rng);
    const Mat3 rotation(Eigen::AngleAxisd(tilt_x, Vec3::UnitX()) *
                        Eigen::AngleAxisd(tilt_y, Vec3::UnitY()) *
                        Eigen::AngleAxisd(roll, Vec3::UnitZ()));
    const Vec3 translation(0.30 * unit(rng), 0.25 * unit(rng),
                           0.85 + 0.45 * unit(rng));
    SE3 pose(rotation, translation);

    TargetDataset::Frame frame;
    frame.id = made;
    bool all_visible = true;
    for (size_t corner = 0; corner < data.board.size(); ++corner) {
      Pixel px;
      if (!try_project(truth, pose * data.board[corner], px) || px.x() < margin ||
          px.y() < margin || px.x() > data.width - 1 - margin ||
          px.y() > data.height - 1 - margin) {
        all_visible = false;
        break;
      }
      if (sim.noise_sigma > 0) {
        px.x() += sim.noise_sigma * gauss(rng);
        px.y() += sim.noise_sigma * gauss(rng);
      }
      frame.observations.emplace_back(static_cast<int>(corner), px);
    }
    if (!all_visible) continue;
    data.frames.push_back(std::move(frame));
    if (true_poses) true_poses->push_back(pose);
    ++made;
  }
  return data;
}

// --------------------------- report serialization --------------------------

inline nlohmann::json pose_to_json(const SE3& pose) {
  nlohmann::json r = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) {
    r.push_back({pose.rotation()(i, 0), pose.rotation()(i, 1), pose.rotation()(i, 2)});
  }
  return {{"rotation", r},
          {"translation",
           {pose.translation().x(), pose.translation().y(), pose.translation().z()}}};
}

inline SE3 pose_from_json(const nlohmann::json& j) {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) r(i, k) = j.at("rotation").at(i).at(k).get<double>();
  }
  const auto& t = j.at("translation");
  return SE3(r, Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()));
}

inline void to_json(nlohmann::json& j, const CalibrationReport& report) {
  nlohmann::json poses = nlohmann::json::array();
  for (const auto& p : report.poses) poses.push_back(pose_to_json(p));
  nlohmann::json per_frame = nlohmann::json::array();
  for (const auto& s : report.per_frame) {
    per_frame.push_back({{"frame_id", s.frame_id},
                         {"used_observations", s.used_observations},
                         {"mean_px", s.mean_px},
                         {"rms_px", s.rms_px},
                         {"max_px", s.max_px}});
  }
  j = nlohmann::json{{"model", report.model},
                     {"frame_ids", report.frame_ids},
                     {"poses", poses},
                     {"mre", report.mre},
                     {"per_frame", per_frame},
                     {"trace", report.trace},
                     {"mode", report.mode},
                     {"excluded_observations", report.excluded_observations}};
}

inline void to_json(nlohmann::json& j, const PerturbationResult& res) {
  j = nlohmann::json{{"scale", res.scale}, {"ok", res.ok}};
  if (res.ok) {
    j["initial_params"] = std::vector<double>(res.initial_params.begin(),
                                              res.initial_params.end());
    j["converged_params"] = std::vector<double>(res.converged_params.begin(),
                                                res.converged_params.end());
    j["relative_deviation"] = std::vector<double>(res.relative_deviation.begin(),
                                                  res.relative_deviation.end());
    j["mre"] = res.mre;
  } else {
    j["error"] = res.error;
  }
}

}  // namespace unicam
