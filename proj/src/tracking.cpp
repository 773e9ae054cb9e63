#include "dynrecon/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

namespace dynrecon {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat26 = Eigen::Matrix<double, 2, 6>;

int FactorGraph::find(int id) const {
  for (std::size_t i = 0; i < keyframes.size(); ++i)
    if (keyframes[i].id == id) return int(i);
  return -1;
}

const FlowObservation& FactorGraph::edge(int source_id, int target_id) const {
  for (const auto& e : edges)
    if (e.source == source_id && e.target == target_id) return e;
  throw Error(ErrorCode::MissingEdge,
              "no edge " + std::to_string(source_id) + " -> " + std::to_string(target_id));
}

std::vector<int> FactorGraph::targets_of(int source_id) const {
  std::vector<int> out;
  for (const auto& e : edges)
    if (e.source == source_id) out.push_back(e.target);
  return out;
}

namespace {

const Keyframe& keyframe_or_throw(const FactorGraph& g, int id) {
  const int i = g.find(id);
  if (i < 0) throw Error(ErrorCode::MissingEdge, "keyframe " + std::to_string(id) + " not in graph");
  return g.keyframes[std::size_t(i)];
}

bool pixel_usable(const Keyframe& kf, int x, int y) {
  if (kf.disparity.empty() || !(kf.disparity(x, y) > 0)) return false;
  return kf.valid.empty() || kf.valid(x, y) != 0;
}

Mat23 projection_jacobian(const Vec3& c, const PinholeIntrinsics& K) {
  const double iz = 1.0 / c.z(), iz2 = iz * iz;
  Mat23 j;
  j << K.fx * iz, 0, -K.fx * c.x() * iz2, 0, K.fy * iz, -K.fy * c.y() * iz2;
  return j;
}

Vec2 pinhole(const Vec3& c, const PinholeIntrinsics& K) {
  return {K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy};
}

double pixel_weight(const FlowObservation& e, const std::vector<ScalarField>& suppression, int src_index, int x,
                    int y) {
  const double conf = e.confidence(x, y);
  if (suppression.empty() || suppression[std::size_t(src_index)].empty()) return conf * (1.0 - 0.0);
  return conf * (1.0 - suppression[std::size_t(src_index)](x, y));
}

struct EdgeRef {
  const FlowObservation* obs;
  int target;  // keyframe index
};

std::vector<std::vector<EdgeRef>> outgoing(const FactorGraph& g) {
  std::vector<std::vector<EdgeRef>> out(g.keyframes.size());
  for (const auto& e : g.edges) {
    const int a = g.find(e.source), b = g.find(e.target);
    if (a < 0 || b < 0) throw Error(ErrorCode::MissingEdge, "edge references a missing keyframe");
    if (a == b) continue;
    out[std::size_t(a)].push_back({&e, b});
  }
  return out;
}

}  // namespace

FlowField camera_induced_flow(const FactorGraph& graph, int source_id, int target_id) {
  graph.edge(source_id, target_id);
  const Keyframe& a = keyframe_or_throw(graph, source_id);
  const Keyframe& b = keyframe_or_throw(graph, target_id);
  const PinholeIntrinsics& K = graph.K;
  FlowField out{Raster<Vec2>(K.width, K.height, Vec2::Zero()), Mask(K.width, K.height, 0)};
  const RigidPose rel = b.pose.inverse() * a.pose;
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      if (!pixel_usable(a, x, y)) continue;
      const Vec3 c = rel.apply(K.ray(Vec2(x, y)) / a.disparity(x, y));
      if (c.z() <= kMinDepth) continue;
      out.flow(x, y) = pinhole(c, K) - Vec2(x, y);
      out.valid(x, y) = 1;
    }
  return out;
}

FlowField residual_flow(const FactorGraph& graph, int source_id, int target_id) {
  const FlowObservation& obs = graph.edge(source_id, target_id);
  FlowField cam = camera_induced_flow(graph, source_id, target_id);
  for (int y = 0; y < cam.flow.height; ++y)
    for (int x = 0; x < cam.flow.width; ++x) {
      if (!cam.valid(x, y)) continue;
      const Vec2 observed = obs.predicted(x, y) - Vec2(x, y);
      cam.flow(x, y) = observed - cam.flow(x, y);
    }
  return cam;
}

double mean_flow_magnitude(const FlowObservation& flow) {
  double sum = 0;
  std::size_t n = 0;
  for (int y = 0; y < flow.predicted.height; ++y)
    for (int x = 0; x < flow.predicted.width; ++x) {
      if (!(flow.confidence(x, y) > 0)) continue;
      sum += (flow.predicted(x, y) - Vec2(x, y)).norm();
      ++n;
    }
  return n ? sum / double(n) : 0.0;
}

ResidualField normalized_residual_magnitude(const FactorGraph& graph, int keyframe_id) {
  const Keyframe& kf = keyframe_or_throw(graph, keyframe_id);
  const std::vector<int> targets = graph.targets_of(keyframe_id);
  if (targets.empty())
    throw Error(ErrorCode::NoConnectedEdges, "keyframe " + std::to_string(keyframe_id) + " has no edges");
  const int w = graph.K.width, h = graph.K.height;
  ResidualField out;
  out.keyframe = kf.id;
  out.magnitude = ScalarField(w, h, 0.0);
  out.valid = Mask(w, h, 0);
  std::vector<int> count(std::size_t(w) * h, 0);
  int used = 0;
  for (int target : targets) {
    const FlowObservation& obs = graph.edge(keyframe_id, target);
    const FlowField res = residual_flow(graph, keyframe_id, target);
    double mean = 0;
    std::size_t n = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (res.valid(x, y) && obs.confidence(x, y) > 0) {
          mean += (obs.predicted(x, y) - Vec2(x, y)).norm();
          ++n;
        }
    if (n == 0) continue;
    mean /= double(n);
    if (mean < 1e-12) continue;
    ++used;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (res.valid(x, y) && obs.confidence(x, y) > 0) {
          out.magnitude(x, y) += res.flow(x, y).norm() / mean;
          ++count[std::size_t(y) * w + x];
        }
  }
  if (used == 0) {
    out.usable = false;
    out.magnitude = ScalarField(w, h, 0.0);
    return out;
  }
  for (std::size_t i = 0; i < count.size(); ++i)
    if (count[i] > 0) {
      out.magnitude[i] /= double(count[i]);
      out.valid[i] = 1;
    }
  return out;
}

Mask coarse_mask(const ResidualField& field, double quantile) {
  const ScalarField& m = field.magnitude;
  Mask out(m.width, m.height, 0);
  if (!field.usable) return out;
  std::vector<double> values;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (field.valid.empty() || field.valid[i]) values.push_back(m[i]);
  if (values.empty()) return out;
  const std::size_t n = values.size();
  const std::size_t k = std::clamp<std::size_t>(std::size_t(std::ceil(quantile * double(n) - 1e-9)), 1, n);
  std::nth_element(values.begin(), values.begin() + std::ptrdiff_t(k - 1), values.end(), std::greater<>());
  const double threshold = values[k - 1];
  for (std::size_t i = 0; i < m.size(); ++i)
    if ((field.valid.empty() || field.valid[i]) && m[i] >= threshold) out[i] = 1;
  return out;
}

double dba_objective(const FactorGraph& graph, const std::vector<ScalarField>& suppression) {
  const auto out_edges = outgoing(graph);
  const PinholeIntrinsics& K = graph.K;
  double total = 0;
  for (std::size_t a = 0; a < graph.keyframes.size(); ++a) {
    const Keyframe& kf = graph.keyframes[a];
    for (const EdgeRef& e : out_edges[a]) {
      const RigidPose rel = graph.keyframes[std::size_t(e.target)].pose.inverse() * kf.pose;
      for (int y = 0; y < K.height; ++y)
        for (int x = 0; x < K.width; ++x) {
          if (!pixel_usable(kf, x, y)) continue;
          const double wgt = pixel_weight(*e.obs, suppression, int(a), x, y);
          if (wgt == 0) continue;
          const Vec3 c = rel.apply(K.ray(Vec2(x, y)) / kf.disparity(x, y));
          if (c.z() <= kMinDepth) continue;
          total += wgt * (e.obs->predicted(x, y) - pinhole(c, K)).squaredNorm();
        }
    }
  }
  return total;
}

namespace {

struct StepResult {
  bool ok = false;
  std::vector<Vec6> pose_step;                // per keyframe (zero when fixed)
  std::vector<ScalarField> disparity_step;   // per keyframe (empty when fixed)
};

StepResult solve_step(const FactorGraph& graph, const std::vector<ScalarField>& suppression,
                      const std::vector<int>& pose_var, int pose_vars, double lambda) {
  const PinholeIntrinsics& K = graph.K;
  const auto out_edges = outgoing(graph);
  const std::size_t nk = graph.keyframes.size();
  const int dim = 6 * pose_vars;
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);

  struct PixelBlock {
    double hdd = 0, gd = 0;
    std::vector<Vec6> E;  // coupling to [source pose, target poses...]
  };
  // per source keyframe, per pixel coupling data for back-substitution
  std::vector<std::vector<PixelBlock>> blocks(nk);

  // First pass: assemble pose-pose blocks, and for free disparities the
  // structure blocks. Pose-pose damping is applied after assembly.
  for (std::size_t a = 0; a < nk; ++a) {
    const Keyframe& kf = graph.keyframes[a];
    const auto& edges = out_edges[a];
    if (edges.empty() || kf.disparity.empty()) continue;
    const Mat3 Ra = kf.pose.rotation_matrix();
    const bool free_d = !kf.fixed_disparity;
    if (free_d) blocks[a].assign(std::size_t(K.width) * K.height, PixelBlock{});
    const int va = pose_var[a];
    for (int y = 0; y < K.height; ++y) {
      for (int x = 0; x < K.width; ++x) {
        if (!pixel_usable(kf, x, y)) continue;
        const double d = kf.disparity(x, y);
        const Vec3 ray = K.ray(Vec2(x, y));
        const Vec3 X = Ra * (ray / d) + kf.pose.translation;
        const Vec3 dX_dd = -Ra * ray / (d * d);
        PixelBlock pb;
        if (free_d) pb.E.assign(1 + edges.size(), Vec6::Zero());
        for (std::size_t ei = 0; ei < edges.size(); ++ei) {
          const EdgeRef& e = edges[ei];
          const double wgt = pixel_weight(*e.obs, suppression, int(a), x, y);
          if (wgt == 0) continue;
          const Keyframe& kb = graph.keyframes[std::size_t(e.target)];
          const Mat3 RbT = kb.pose.rotation_matrix().transpose();
          const Vec3 Y = RbT * (X - kb.pose.translation);
          if (Y.z() <= kMinDepth) continue;
          const Vec2 r = e.obs->predicted(x, y) - pinhole(Y, K);
          const Mat23 A = projection_jacobian(Y, K) * RbT;
          Mat26 Ja;
          Ja.leftCols<3>() = A;
          Ja.rightCols<3>() = -A * skew(X);
          const Vec2 Jd = A * dX_dd;
          const int vb = pose_var[std::size_t(e.target)];
          if (va >= 0) {
            S.block<6, 6>(6 * va, 6 * va) += wgt * Ja.transpose() * Ja;
            rhs.segment<6>(6 * va) += wgt * Ja.transpose() * r;
          }
          if (vb >= 0) {
            S.block<6, 6>(6 * vb, 6 * vb) += wgt * Ja.transpose() * Ja;
            rhs.segment<6>(6 * vb) -= wgt * Ja.transpose() * r;
          }
          if (va >= 0 && vb >= 0) {
            const Mat6 cross = -wgt * Ja.transpose() * Ja;
            S.block<6, 6>(6 * va, 6 * vb) += cross;
            S.block<6, 6>(6 * vb, 6 * va) += cross.transpose();
          }
          if (free_d) {
            pb.hdd += wgt * Jd.squaredNorm();
            pb.gd += wgt * Jd.dot(r);
            pb.E[0] += wgt * Ja.transpose() * Jd;
            pb.E[1 + ei] -= wgt * Ja.transpose() * Jd;
          }
        }
        if (free_d && pb.hdd > 0) blocks[a][std::size_t(y) * K.width + x] = std::move(pb);
      }
    }
  }

  for (int i = 0; i < dim; ++i) S(i, i) += lambda * S(i, i) + 1e-12;

  // Schur complement over the structure blocks.
  for (std::size_t a = 0; a < nk; ++a) {
    if (blocks[a].empty()) continue;
    const auto& edges = out_edges[a];
    std::vector<int> vars(1 + edges.size());
    vars[0] = pose_var[a];
    for (std::size_t ei = 0; ei < edges.size(); ++ei) vars[1 + ei] = pose_var[std::size_t(edges[ei].target)];
    for (PixelBlock& pb : blocks[a]) {
      if (!(pb.hdd > 0)) continue;
      pb.hdd = pb.hdd * (1.0 + lambda) + 1e-12;
      const double inv = 1.0 / pb.hdd;
      for (std::size_t p = 0; p < vars.size(); ++p) {
        if (vars[p] < 0) continue;
        rhs.segment<6>(6 * vars[p]) -= pb.E[p] * (pb.gd * inv);
        for (std::size_t q = 0; q < vars.size(); ++q) {
          if (vars[q] < 0) continue;
          S.block<6, 6>(6 * vars[p], 6 * vars[q]) -= pb.E[p] * pb.E[q].transpose() * inv;
        }
      }
    }
  }

  StepResult res;
  Eigen::VectorXd dx = Eigen::VectorXd::Zero(dim);
  if (dim > 0) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return res;
    dx = ldlt.solve(rhs);
    if (!dx.allFinite()) return res;
  }

  res.pose_step.assign(nk, Vec6::Zero());
  for (std::size_t a = 0; a < nk; ++a)
    if (pose_var[a] >= 0) res.pose_step[a] = dx.segment<6>(6 * pose_var[a]);
  res.disparity_step.resize(nk);
  for (std::size_t a = 0; a < nk; ++a) {
    if (blocks[a].empty()) continue;
    const auto& edges = out_edges[a];
    ScalarField step(K.width, K.height, 0.0);
    for (std::size_t i = 0; i < blocks[a].size(); ++i) {
      const PixelBlock& pb = blocks[a][i];
      if (!(pb.hdd > 0)) continue;
      double v = pb.gd;
      for (std::size_t p = 0; p < pb.E.size(); ++p) {
        const int var = p == 0 ? pose_var[a] : pose_var[std::size_t(edges[p - 1].target)];
        if (var >= 0) v -= pb.E[p].dot(res.pose_step[std::size_t(p == 0 ? a : edges[p - 1].target)]);
      }
      step[i] = v / pb.hdd;
    }
    if (!std::isfinite(step.data.empty() ? 0.0 : *std::max_element(step.data.begin(), step.data.end())))
      return StepResult{};
    res.disparity_step[a] = std::move(step);
  }
  res.ok = true;
  return res;
}

double mean_disparity(const Keyframe& kf) {
  double s = 0;
  std::size_t n = 0;
  for (int y = 0; y < kf.disparity.height; ++y)
    for (int x = 0; x < kf.disparity.width; ++x)
      if (pixel_usable(kf, x, y)) {
        s += kf.disparity(x, y);
        ++n;
      }
  return n ? s / double(n) : 0.0;
}

void refresh_masks(const FactorGraph& graph, std::vector<ScalarField>& suppression, double quantile) {
  suppression.resize(graph.keyframes.size());
  for (std::size_t a = 0; a < graph.keyframes.size(); ++a) {
    const Keyframe& kf = graph.keyframes[a];
    if (graph.targets_of(kf.id).empty() || kf.disparity.empty()) continue;
    const Mask m = coarse_mask(normalized_residual_magnitude(graph, kf.id), quantile);
    ScalarField s(m.width, m.height, 0.0);
    for (std::size_t i = 0; i < m.size(); ++i) s[i] = m[i] ? 1.0 : 0.0;
    suppression[a] = std::move(s);
  }
}

}  // namespace

DbaReport dba_solve(FactorGraph& graph, std::vector<ScalarField>& suppression, const DbaOptions& options) {
  DbaReport report;
  const std::size_t nk = graph.keyframes.size();
  if (!suppression.empty() && suppression.size() != nk)
    throw Error(ErrorCode::ShapeMismatch, "one suppression raster per keyframe expected");
  std::vector<int> pose_var(nk, -1);
  int pose_vars = 0;
  for (std::size_t a = 0; a < nk; ++a)
    if (a != 0 && !graph.keyframes[a].fixed_pose) pose_var[a] = pose_vars++;
  bool any_free_disparity = false;
  for (const auto& kf : graph.keyframes) any_free_disparity = any_free_disparity || (!kf.fixed_disparity && !kf.disparity.empty());
  if (nk < 2 || graph.edges.empty() || (pose_vars == 0 && !any_free_disparity)) {
    report.initial_objective = report.final_objective = dba_objective(graph, suppression);
    report.converged = true;
    return report;
  }

  bool all_disparity_free = true;
  for (const auto& kf : graph.keyframes) all_disparity_free = all_disparity_free && !kf.fixed_disparity;
  const bool pin_scale = all_disparity_free && pose_vars == int(nk) - 1;
  const double target_mean = pin_scale ? mean_disparity(graph.keyframes[0]) : 0.0;

  if (options.refine_masks) refresh_masks(graph, suppression, options.quantile);
  double f = dba_objective(graph, suppression);
  report.initial_objective = f;
  double lambda = options.damping;
  int singular_retries = 0;

  for (int it = 0; it < options.iterations; ++it) {
    ++report.iterations;
    bool accepted = false;
    double f_new = f;
    for (int attempt = 0; attempt < 6 && !accepted; ++attempt) {
      StepResult step = solve_step(graph, suppression, pose_var, pose_vars, lambda);
      if (!step.ok) {
        if (++singular_retries > 5)
          throw Error(ErrorCode::SingularNormalEquations, "normal equations stayed singular after damping retries");
        lambda *= 10;
        --attempt;
        continue;
      }
      FactorGraph trial = graph;
      for (std::size_t a = 0; a < nk; ++a) {
        Keyframe& kf = trial.keyframes[a];
        if (pose_var[a] >= 0) kf.pose = kf.pose.retract(step.pose_step[a]);
        if (!step.disparity_step[a].empty())
          for (std::size_t i = 0; i < kf.disparity.size(); ++i)
            if (kf.disparity[i] > 0) kf.disparity[i] = std::max(kf.disparity[i] + step.disparity_step[a][i], 1e-6);
      }
      if (pin_scale && target_mean > 0) {
        const double m = mean_disparity(trial.keyframes[0]);
        if (m > 0) {
          const double s = target_mean / m;
          const Vec3 origin = trial.keyframes[0].pose.translation;
          for (Keyframe& kf : trial.keyframes) {
            for (double& d : kf.disparity.data) d *= s;
            kf.pose.translation = origin + (kf.pose.translation - origin) / s;
          }
        }
      }
      f_new = dba_objective(trial, suppression);
      if (std::isfinite(f_new) && f_new <= f) {
        graph = std::move(trial);
        accepted = true;
        lambda = std::max(lambda / 10, 1e-12);
      } else {
        lambda *= 10;
      }
    }
    DbaIteration info{it, accepted ? f_new : f, lambda, accepted, &suppression};
    if (!accepted) {
      if (options.hook) options.hook(info);
      break;
    }
    ++report.accepted;
    const double decrease = f - f_new;
    f = f_new;
    report.objective_trace.push_back(f);
    if (options.refine_masks) {
      refresh_masks(graph, suppression, options.quantile);
      f = dba_objective(graph, suppression);
      info.objective = f;
    }
    if (options.hook) options.hook(info);
    if (f == 0 || decrease <= options.tolerance * (f + decrease)) {
      report.converged = true;
      break;
    }
  }
  report.final_objective = f;
  return report;
}

RigidPose solve_nonkeyframe_pose(const FactorGraph& graph, const NonKeyframe& frame,
                                 const std::vector<ScalarField>& suppression, const DbaOptions& options) {
  std::vector<int> sources;
  for (const auto& flow : frame.flows) {
    if (flow.target != frame.id) throw Error(ErrorCode::MissingNeighbor, "flow does not point into the frame");
    if (graph.find(flow.source) < 0) throw Error(ErrorCode::MissingNeighbor, "flow from an unknown keyframe");
    if (std::find(sources.begin(), sources.end(), flow.source) == sources.end()) sources.push_back(flow.source);
  }
  if (sources.size() != 2)
    throw Error(ErrorCode::MissingNeighbor, "a non-keyframe needs flow from exactly two neighbouring keyframes");

  FactorGraph local;
  local.K = graph.K;
  std::vector<ScalarField> local_supp;
  for (int id : sources) {
    const int idx = graph.find(id);
    Keyframe kf = graph.keyframes[std::size_t(idx)];
    kf.fixed_pose = true;
    kf.fixed_disparity = true;
    local.keyframes.push_back(std::move(kf));
    local_supp.push_back(suppression.empty() ? ScalarField() : suppression[std::size_t(idx)]);
  }
  Keyframe self;
  self.id = frame.id;
  self.pose = frame.initial_pose;
  self.fixed_disparity = true;
  local.keyframes.push_back(self);
  local_supp.push_back(ScalarField());
  local.edges = frame.flows;
  DbaOptions opt = options;
  opt.refine_masks = false;
  dba_solve(local, local_supp, opt);
  return local.keyframes.back().pose;
}

namespace {

double sample_disparity(const ScalarField& d, const Vec2& q) {
  const int x0 = int(std::floor(q.x())), y0 = int(std::floor(q.y()));
  const double fx = q.x() - x0, fy = q.y() - y0;
  if (d.inside(x0, y0) && d.inside(x0 + 1, y0 + 1)) {
    const double a = d(x0, y0), b = d(x0 + 1, y0), c = d(x0, y0 + 1), e = d(x0 + 1, y0 + 1);
    if (a > 0 && b > 0 && c > 0 && e > 0)
      return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * e);
  }
  const int xn = int(std::lround(q.x())), yn = int(std::lround(q.y()));
  return d.inside(xn, yn) ? d(xn, yn) : 0.0;
}

}  // namespace

Mask consistency_mask(const FactorGraph& graph, int keyframe_id, double pixel_tol, double depth_rel_tol) {
  const Keyframe& a = keyframe_or_throw(graph, keyframe_id);
  const PinholeIntrinsics& K = graph.K;
  std::vector<int> neighbours;
  for (const auto& e : graph.edges) {
    int other = -1;
    if (e.source == keyframe_id) other = e.target;
    if (e.target == keyframe_id) other = e.source;
    if (other >= 0 && std::find(neighbours.begin(), neighbours.end(), other) == neighbours.end())
      neighbours.push_back(other);
  }
  Mask out(K.width, K.height, 0);
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x)
      if (!a.disparity.empty() && a.disparity(x, y) > 0) out(x, y) = neighbours.empty() ? 1 : 0;
  for (int nb : neighbours) {
    const Keyframe& b = keyframe_or_throw(graph, nb);
    if (b.disparity.empty()) continue;
    const RigidPose a_to_b = b.pose.inverse() * a.pose;
    const RigidPose b_to_a = a_to_b.inverse();
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x) {
        if (out(x, y) || a.disparity.empty() || !(a.disparity(x, y) > 0)) continue;
        const Vec3 c = a_to_b.apply(K.ray(Vec2(x, y)) / a.disparity(x, y));
        if (c.z() <= kMinDepth) continue;
        const Vec2 q = pinhole(c, K);
        const double db = sample_disparity(b.disparity, q);
        if (!(db > 0)) continue;
        if (std::abs(c.z() - 1.0 / db) > depth_rel_tol / db) continue;
        const Vec3 back = b_to_a.apply(K.ray(q) / db);
        if (back.z() <= kMinDepth) continue;
        if ((pinhole(back, K) - Vec2(x, y)).norm() <= pixel_tol) out(x, y) = 1;
      }
  }
  return out;
}

}  // namespace dynrecon
