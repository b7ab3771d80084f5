#pragma once

#include <json.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unicam/geometry.hpp"

namespace unicam {

/// Numerical failure inside a solver (non-finite values, unsolvable systems).
class SolveError : public std::runtime_error {
 public:
  explicit SolveError(const std::string& what) : std::runtime_error(what) {}
};

/// One optimizable parameter block. Either a generic vector or an SE(3) pose;
/// poses are updated left-multiplicatively, pose <- se3_exp(delta) * pose, and
/// their tangent dimension is 6.
struct ParamBlock {
  std::string name;
  Eigen::VectorXd value;
  SE3 pose;
  bool is_pose = false;
  bool frozen = false;
  bool freeze_during_warm_start = false;
  double lr_scale = 1.0;  // per-block multiplier on the schedule learning rate
  /// Optional projection of a generic block back onto its validity set,
  /// applied after every update.
  std::function<void(Eigen::VectorXd&)> clamp;

  int dim() const { return is_pose ? 6 : static_cast<int>(value.size()); }

  static ParamBlock vector(std::string name, Eigen::VectorXd v) {
    ParamBlock b;
    b.name = std::move(name);
    b.value = std::move(v);
    return b;
  }
  static ParamBlock pose_block(std::string name, const SE3& pose) {
    ParamBlock b;
    b.name = std::move(name);
    b.pose = pose;
    b.is_pose = true;
    return b;
  }
};

/// One group of residuals together with its Jacobians. `jacobians[i]` pairs a
/// block index with the dense d(residual)/d(block tangent) matrix. Blocks not
/// listed do not influence this chunk; the solver exploits that sparsity.
struct ResidualChunk {
  Eigen::VectorXd residual;
  std::vector<std::pair<int, Eigen::MatrixXd>> jacobians;
};

/// Evaluates all residual chunks at the given block values. Returns false if
/// the state is not evaluable (e.g. a trial point left a validity domain);
/// the solver then rejects the step.
using ChunkEvaluator = std::function<bool(const std::vector<ParamBlock>&,
                                          std::vector<ResidualChunk>&, bool with_jacobians)>;

struct ResidualProblem {
  std::vector<ParamBlock> blocks;
  ChunkEvaluator evaluate;
};

struct IterationRecord {
  int iteration = 0;
  double cost = 0;       // cost of the accepted state after this iteration
  double lambda = 0;     // LM damping (unused by gd_solve)
  double lr = 0;         // gd learning rate (unused by lm_solve)
  double step_norm = 0;
  bool accepted = false;
};

struct SolveTrace {
  std::vector<IterationRecord> iterations;
  std::string termination;
  double final_cost = 0;
  /// Snapshots of block 0 (by convention the intrinsics): row 0 is the initial
  /// state, then one row per accepted LM iteration / per gd epoch.
  Eigen::MatrixXd block0_history;
};

inline void to_json(nlohmann::json& j, const SolveTrace& trace) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& it : trace.iterations) {
    iters.push_back({{"iteration", it.iteration},
                     {"cost", it.cost},
                     {"lambda", it.lambda},
                     {"lr", it.lr},
                     {"step_norm", it.step_norm},
                     {"accepted", it.accepted}});
  }
  j = nlohmann::json{{"iterations", iters},
                     {"termination", trace.termination},
                     {"final_cost", trace.final_cost}};
}

enum class LinearSolverChoice {
  Auto,   // Schur when more than 20 pose blocks, dense otherwise
  Dense,
  Schur,
};

struct LmConfig {
  int max_iters = 100;
  double cost_tol = 1e-10;   // relative cost change on accepted steps
  double step_tol = 1e-10;
  double lambda_init = 1e-4;
  /// Blocks flagged freeze_during_warm_start stay fixed for this many
  /// leading iterations (poses adapt first).
  int warm_start_iters = 0;
  LinearSolverChoice linear_solver = LinearSolverChoice::Auto;
};

namespace detail {

inline void apply_step(std::vector<ParamBlock>& blocks, const std::vector<int>& active,
                       const std::vector<int>& offsets, const Eigen::VectorXd& delta,
                       int accepted_count) {
  for (size_t i = 0; i < active.size(); ++i) {
    ParamBlock& b = blocks[active[i]];
    const auto seg = delta.segment(offsets[i], b.dim());
    if (b.is_pose) {
      b.pose = se3_exp(seg) * b.pose;
      // Re-project the rotation every 50 accepted updates to stop drift.
      if ((accepted_count + 1) % 50 == 0) b.pose = b.pose.orthonormalized();
    } else {
      b.value += seg;
      if (b.clamp) b.clamp(b.value);
    }
  }
}

inline bool chunks_finite(const std::vector<ResidualChunk>& chunks, bool with_jacobians) {
  for (const auto& ch : chunks) {
    if (!ch.residual.allFinite()) return false;
    if (with_jacobians) {
      for (const auto& [idx, jac] : ch.jacobians) {
        if (!jac.allFinite()) return false;
      }
    }
  }
  return true;
}

inline double chunk_cost(const std::vector<ResidualChunk>& chunks) {
  double c = 0;
  for (const auto& ch : chunks) c += ch.residual.squaredNorm();
  return 0.5 * c;
}

}  // namespace detail

/// Damped Gauss-Newton (Levenberg-Marquardt). Accepted costs are
/// non-increasing; lambda doubles on rejected steps and is divided by 3 on
/// accepted ones. Normal equations are solved by dense Cholesky, with a Schur
/// complement over the pose blocks when there are more than 20 of them.
inline std::pair<std::vector<ParamBlock>, SolveTrace> lm_solve(const ResidualProblem& problem,
                                                               const LmConfig& config = {}) {
  std::vector<ParamBlock> blocks = problem.blocks;
  SolveTrace trace;

  std::vector<ResidualChunk> chunks;
  if (!problem.evaluate(blocks, chunks, true) || !detail::chunks_finite(chunks, true)) {
    throw SolveError("lm_solve: non-finite residual or Jacobian at iteration 0");
  }
  double cost = detail::chunk_cost(chunks);
  double lambda = config.lambda_init;
  int accepted_count = 0;

  const int dim0 = blocks.empty() ? 0 : blocks[0].dim();
  Eigen::MatrixXd history(1, dim0);
  if (!blocks.empty() && !blocks[0].is_pose) history.row(0) = blocks[0].value.transpose();

  for (int iter = 0; iter < config.max_iters; ++iter) {
    // Active = unfrozen blocks at this iteration (warm start may freeze more).
    std::vector<int> active;
    std::vector<int> offsets;
    std::vector<int> pose_active;  // indices into `active`
    int total_dim = 0;
    for (size_t i = 0; i < blocks.size(); ++i) {
      const bool warm_frozen =
          blocks[i].freeze_during_warm_start && iter < config.warm_start_iters;
      if (blocks[i].frozen || warm_frozen) continue;
      if (blocks[i].is_pose) pose_active.push_back(static_cast<int>(active.size()));
      active.push_back(static_cast<int>(i));
      offsets.push_back(total_dim);
      total_dim += blocks[i].dim();
    }
    if (total_dim == 0) {
      trace.termination = "all blocks frozen";
      break;
    }

    // Map block index -> slot in `active` (or -1 when frozen).
    std::vector<int> slot(blocks.size(), -1);
    for (size_t i = 0; i < active.size(); ++i) slot[active[i]] = static_cast<int>(i);

    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(total_dim, total_dim);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(total_dim);
    bool schur_ok = true;  // no chunk may couple two pose blocks
    for (const auto& ch : chunks) {
      int poses_touched = 0;
      for (const auto& [bi, ji] : ch.jacobians) {
        if (slot[bi] < 0) continue;
        if (blocks[bi].is_pose) ++poses_touched;
        const int oi = offsets[slot[bi]];
        g.segment(oi, ji.cols()).noalias() -= ji.transpose() * ch.residual;
        for (const auto& [bj, jj] : ch.jacobians) {
          if (slot[bj] < 0) continue;
          const int oj = offsets[slot[bj]];
          h.block(oi, oj, ji.cols(), jj.cols()).noalias() += ji.transpose() * jj;
        }
      }
      if (poses_touched > 1) schur_ok = false;
    }

    const bool use_schur =
        config.linear_solver == LinearSolverChoice::Schur ||
        (config.linear_solver == LinearSolverChoice::Auto && pose_active.size() > 20);

    Eigen::VectorXd delta(total_dim);
    bool solved = false;
    if (use_schur && schur_ok && !pose_active.empty()) {
      // Eliminate the (block-diagonal) pose part of the damped system.
      std::vector<bool> is_pose_slot(active.size(), false);
      for (int s : pose_active) is_pose_slot[s] = true;
      std::vector<int> dense_slots;
      int dense_dim = 0;
      for (size_t s = 0; s < active.size(); ++s) {
        if (!is_pose_slot[s]) {
          dense_slots.push_back(static_cast<int>(s));
          dense_dim += blocks[active[s]].dim();
        }
      }
      std::vector<int> dense_off(dense_slots.size());
      int off = 0;
      for (size_t i = 0; i < dense_slots.size(); ++i) {
        dense_off[i] = off;
        off += blocks[active[dense_slots[i]]].dim();
      }
      Eigen::MatrixXd s_mat = Eigen::MatrixXd::Zero(dense_dim, dense_dim);
      Eigen::VectorXd s_rhs = Eigen::VectorXd::Zero(dense_dim);
      for (size_t i = 0; i < dense_slots.size(); ++i) {
        const int oi = offsets[dense_slots[i]];
        const int di = blocks[active[dense_slots[i]]].dim();
        s_rhs.segment(dense_off[i], di) = g.segment(oi, di);
        for (size_t j = 0; j < dense_slots.size(); ++j) {
          const int oj = offsets[dense_slots[j]];
          const int dj = blocks[active[dense_slots[j]]].dim();
          s_mat.block(dense_off[i], dense_off[j], di, dj) = h.block(oi, oj, di, dj);
        }
      }
      s_mat.diagonal().array() += lambda;
      bool pose_ok = true;
      std::vector<Eigen::Matrix<double, 6, 6>> hpp_inv(pose_active.size());
      for (size_t pi = 0; pi < pose_active.size(); ++pi) {
        const int op = offsets[pose_active[pi]];
        Eigen::Matrix<double, 6, 6> hpp = h.block<6, 6>(op, op);
        hpp.diagonal().array() += lambda;
        const Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(hpp);
        if (ldlt.info() != Eigen::Success) {
          pose_ok = false;
          break;
        }
        hpp_inv[pi] = ldlt.solve(Eigen::Matrix<double, 6, 6>::Identity());
        for (size_t i = 0; i < dense_slots.size(); ++i) {
          const int oi = offsets[dense_slots[i]];
          const int di = blocks[active[dense_slots[i]]].dim();
          const Eigen::MatrixXd hdp = h.block(oi, op, di, 6);
          s_rhs.segment(dense_off[i], di).noalias() -= hdp * (hpp_inv[pi] * g.segment<6>(op));
          for (size_t j = 0; j < dense_slots.size(); ++j) {
            const int oj = offsets[dense_slots[j]];
            const int dj = blocks[active[dense_slots[j]]].dim();
            const Eigen::MatrixXd hdp_j = h.block(oj, op, dj, 6);
            s_mat.block(dense_off[i], dense_off[j], di, dj).noalias() -=
                hdp * hpp_inv[pi] * hdp_j.transpose();
          }
        }
      }
      if (pose_ok) {
        const Eigen::LDLT<Eigen::MatrixXd> ldlt(s_mat);
        if (ldlt.info() == Eigen::Success) {
          const Eigen::VectorXd delta_dense = ldlt.solve(s_rhs);
          if (delta_dense.allFinite()) {
            for (size_t i = 0; i < dense_slots.size(); ++i) {
              const int oi = offsets[dense_slots[i]];
              const int di = blocks[active[dense_slots[i]]].dim();
              delta.segment(oi, di) = delta_dense.segment(dense_off[i], di);
            }
            for (size_t pi = 0; pi < pose_active.size(); ++pi) {
              const int op = offsets[pose_active[pi]];
              Eigen::Matrix<double, 6, 1> rhs_p = g.segment<6>(op);
              for (size_t i = 0; i < dense_slots.size(); ++i) {
                const int oi = offsets[dense_slots[i]];
                const int di = blocks[active[dense_slots[i]]].dim();
                rhs_p.noalias() -=
                    h.block(oi, op, di, 6).transpose() * delta_dense.segment(dense_off[i], di);
              }
              delta.segment<6>(op) = hpp_inv[pi] * rhs_p;
            }
            solved = delta.allFinite();
          }
        }
      }
    } else {
      Eigen::MatrixXd damped = h;
      damped.diagonal().array() += lambda;
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
      if (ldlt.info() == Eigen::Success) {
        delta = ldlt.solve(g);
        solved = delta.allFinite();
      }
    }

    if (!solved) {
      if (lambda >= 1e8) {
        throw SolveError("lm_solve: singular normal equations at lambda >= 1e8 (iteration " +
                         std::to_string(iter) + ")");
      }
      lambda *= 2.0;
      trace.iterations.push_back({iter, cost, lambda, 0.0, 0.0, false});
      continue;
    }

    const double step_norm = delta.norm();
    std::vector<ParamBlock> candidate = blocks;
    detail::apply_step(candidate, active, offsets, delta, accepted_count);

    std::vector<ResidualChunk> trial_chunks;
    const bool eval_ok = problem.evaluate(candidate, trial_chunks, true) &&
                         detail::chunks_finite(trial_chunks, true);
    const double trial_cost = eval_ok ? detail::chunk_cost(trial_chunks) : 0.0;

    if (eval_ok && trial_cost <= cost) {
      const double rel_change = (cost - trial_cost) / std::max(cost, 1e-300);
      blocks = std::move(candidate);
      chunks = std::move(trial_chunks);
      cost = trial_cost;
      lambda /= 3.0;
      ++accepted_count;
      trace.iterations.push_back({iter, cost, lambda, 0.0, step_norm, true});
      if (!blocks.empty() && !blocks[0].is_pose) {
        history.conservativeResize(history.rows() + 1, Eigen::NoChange);
        history.row(history.rows() - 1) = blocks[0].value.transpose();
      }
      if (rel_change < config.cost_tol) {
        trace.termination = "cost_tol";
        break;
      }
      if (step_norm < config.step_tol) {
        trace.termination = "step_tol";
        break;
      }
    } else {
      lambda *= 2.0;
      trace.iterations.push_back({iter, cost, lambda, 0.0, step_norm, false});
    }
  }

  if (trace.termination.empty()) trace.termination = "max_iters";
  trace.final_cost = cost;
  trace.block0_history = std::move(history);
  return {std::move(blocks), trace};
}

// ---------------------------------------------------------------------------
// First-order descent with a step-decay schedule.
// ---------------------------------------------------------------------------

/// Step-decayed schedule: lr(e) = lr * gamma^floor(e / decay_interval), with
/// intrinsics (blocks flagged freeze_during_warm_start) frozen for the first
/// `warm_start` epochs.
struct GdSchedule {
  double lr = 1e-3;
  double gamma = 0.5;
  int decay_interval = 30;
  int warm_start = 10;
  int total_epochs = 50;

  void validate() const {
    if (!(lr > 0) || !(gamma > 0) || decay_interval <= 0 || total_epochs <= 0 ||
        warm_start < 0 || warm_start >= total_epochs) {
      throw std::invalid_argument(
          "GdSchedule: fields must be positive and warm_start < total_epochs");
    }
  }

  double rate_at(int epoch) const { return lr * std::pow(gamma, epoch / decay_interval); }
};

/// Loss-and-gradient evaluator for gd_solve. Returns false when the state is
/// not evaluable; gradients must be sized like the corresponding block values.
using LossAndGrad = std::function<bool(const std::vector<ParamBlock>&, double& loss,
                                       std::vector<Eigen::VectorXd>& gradients)>;

/// Plain gradient descent over generic blocks: value -= lr(e) * lr_scale * g.
/// Records loss, learning rate and block-0 snapshots per epoch (row 0 of the
/// history is the initial state).
inline std::pair<std::vector<ParamBlock>, SolveTrace> gd_solve(const LossAndGrad& evaluate,
                                                               const GdSchedule& schedule,
                                                               std::vector<ParamBlock> blocks) {
  schedule.validate();
  for (const auto& b : blocks) {
    if (b.is_pose) throw std::invalid_argument("gd_solve: pose blocks are not supported");
  }
  SolveTrace trace;
  const int dim0 = blocks.empty() ? 0 : blocks[0].dim();
  Eigen::MatrixXd history(schedule.total_epochs + 1, dim0);

  double loss = 0;
  std::vector<Eigen::VectorXd> grads;
  for (int epoch = 0; epoch < schedule.total_epochs; ++epoch) {
    if (!evaluate(blocks, loss, grads) || !std::isfinite(loss)) {
      throw SolveError("gd_solve: non-finite loss at epoch " + std::to_string(epoch));
    }
    if (!blocks.empty()) history.row(epoch) = blocks[0].value.transpose();
    const double rate = schedule.rate_at(epoch);
    double step_sq = 0;
    for (size_t i = 0; i < blocks.size(); ++i) {
      ParamBlock& b = blocks[i];
      if (b.frozen) continue;
      if (b.freeze_during_warm_start && epoch < schedule.warm_start) continue;
      if (!grads[i].allFinite()) {
        throw SolveError("gd_solve: non-finite gradient at epoch " + std::to_string(epoch));
      }
      const Eigen::VectorXd step = rate * b.lr_scale * grads[i];
      b.value -= step;
      if (b.clamp) b.clamp(b.value);
      step_sq += step.squaredNorm();
    }
    trace.iterations.push_back({epoch, loss, 0.0, rate, std::sqrt(step_sq), true});
  }
  if (!evaluate(blocks, loss, grads) || !std::isfinite(loss)) {
    throw SolveError("gd_solve: non-finite loss at epoch " +
                     std::to_string(schedule.total_epochs));
  }
  if (!blocks.empty()) history.row(schedule.total_epochs) = blocks[0].value.transpose();
  trace.termination = "total_epochs";
  trace.final_cost = loss;
  trace.block0_history = std::move(history);
  return {std::move(blocks), trace};
}

}  // namespace unicam
