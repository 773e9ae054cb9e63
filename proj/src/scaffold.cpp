#include "dynrecon/scaffold.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dynrecon {

int Track2D::first_visible() const {
  for (std::size_t t = 0; t < visible.size(); ++t)
    if (visible[t]) return int(t);
  return -1;
}

int Track2D::visible_count(int t0, int t1) const {
  int n = 0;
  for (int t = std::max(t0, 0); t < std::min<int>(t1, int(visible.size())); ++t) n += visible[std::size_t(t)] ? 1 : 0;
  return n;
}

std::vector<std::pair<int, int>> ScaffoldGraph::directed_edges() const {
  std::vector<std::pair<int, int>> out;
  for (std::size_t m = 0; m < neighbors.size(); ++m)
    for (int n : neighbors[m]) out.emplace_back(int(m), n);
  return out;
}

Eigen::Matrix4d quat_left_matrix(const Quat& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  Eigen::Matrix4d L;
  L << w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w;
  return L;
}

Eigen::Matrix4d quat_right_matrix(const Quat& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  Eigen::Matrix4d R;
  R << w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w;
  return R;
}

Vec4 quat_wxyz(const Quat& q) { return {q.w(), q.x(), q.y(), q.z()}; }

namespace {

Quat from_wxyz(const Vec4& v) { return Quat(v(0), v(1), v(2), v(3)); }

}  // namespace

double sample_depth(const DepthMap& depth, const Mask* labels, const Vec2& pixel) {
  const ScalarField& d = depth.depth;
  const int xn = int(std::lround(pixel.x())), yn = int(std::lround(pixel.y()));
  if (!d.inside(xn, yn)) return -1;
  auto ok = [&](int x, int y) { return d.inside(x, y) && d(x, y) > 0 && (depth.valid.empty() || depth.valid(x, y)); };
  const int x0 = int(std::floor(pixel.x())), y0 = int(std::floor(pixel.y()));
  bool bilinear = ok(x0, y0) && ok(x0 + 1, y0) && ok(x0, y0 + 1) && ok(x0 + 1, y0 + 1);
  if (bilinear && labels && !labels->empty()) {
    const std::uint8_t l = (*labels)(xn, yn);
    bilinear = (*labels)(x0, y0) == l && (*labels)(x0 + 1, y0) == l && (*labels)(x0, y0 + 1) == l &&
               (*labels)(x0 + 1, y0 + 1) == l;
  }
  if (bilinear) {
    const double fx = pixel.x() - x0, fy = pixel.y() - y0;
    return (1 - fy) * ((1 - fx) * d(x0, y0) + fx * d(x0 + 1, y0)) +
           fy * ((1 - fx) * d(x0, y0 + 1) + fx * d(x0 + 1, y0 + 1));
  }
  return ok(xn, yn) ? d(xn, yn) : -1;
}

void fill_track_gaps(Track3D& track) {
  const int T = int(track.positions.size());
  std::vector<int> seen;
  for (int t = 0; t < T; ++t)
    if (track.visible[std::size_t(t)]) seen.push_back(t);
  if (seen.empty()) throw Error(ErrorCode::NoVisibleTimestep, "track " + std::to_string(track.id) + " never lifted");
  for (int t = 0; t < seen.front(); ++t) track.positions[std::size_t(t)] = track.positions[std::size_t(seen.front())];
  for (int t = seen.back() + 1; t < T; ++t) track.positions[std::size_t(t)] = track.positions[std::size_t(seen.back())];
  for (std::size_t k = 0; k + 1 < seen.size(); ++k) {
    const int a = seen[k], b = seen[k + 1];
    for (int t = a + 1; t < b; ++t) {
      const double f = double(t - a) / double(b - a);
      track.positions[std::size_t(t)] =
          track.positions[std::size_t(a)] + f * (track.positions[std::size_t(b)] - track.positions[std::size_t(a)]);
    }
  }
}

std::vector<Track3D> lift_tracks(std::span<const Track2D> tracks, std::span<const RigidPose> poses,
                                 std::span<const DepthMap> depths, std::span<const Mask> masks,
                                 const PinholeIntrinsics& K) {
  if (depths.size() < poses.size()) throw Error(ErrorCode::ShapeMismatch, "one depth map per pose expected");
  const std::size_t T = poses.size();
  std::vector<Track3D> out;
  out.reserve(tracks.size());
  for (const Track2D& tr : tracks) {
    Track3D t3;
    t3.id = tr.id;
    t3.positions.assign(T, Vec3::Zero());
    t3.visible.assign(T, 0);
    for (std::size_t t = 0; t < T && t < tr.positions.size(); ++t) {
      if (t >= tr.visible.size() || !tr.visible[t]) continue;
      const Mask* lab = t < masks.size() && !masks[t].empty() ? &masks[t] : nullptr;
      const double z = sample_depth(depths[t], lab, tr.positions[t]);
      if (!(z > 0)) continue;
      t3.positions[t] = poses[t].apply(K.ray(tr.positions[t]) * z);
      t3.visible[t] = 1;
    }
    fill_track_gaps(t3);
    out.push_back(std::move(t3));
  }
  return out;
}

int anchor_frame(std::span<const Track3D> tracks) {
  if (tracks.empty()) return 0;
  const std::size_t T = tracks.front().positions.size();
  int best = 0, best_count = -1;
  for (std::size_t t = 0; t < T; ++t) {
    int c = 0;
    for (const Track3D& tr : tracks) c += t < tr.visible.size() && tr.visible[t] ? 1 : 0;
    if (c == int(tracks.size())) return int(t);
    if (c > best_count) {
      best_count = c;
      best = int(t);
    }
  }
  return best;
}

std::vector<std::size_t> farthest_point_indices(std::span<const Vec3> points, std::span<const Vec3> existing,
                                                int target_count, double min_separation) {
  std::vector<std::size_t> picked;
  if (points.empty() || target_count <= 0) return picked;
  std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
  for (const Vec3& e : existing)
    for (std::size_t i = 0; i < points.size(); ++i) dist[i] = std::min(dist[i], (points[i] - e).norm());
  while (int(picked.size()) < target_count) {
    std::size_t best = points.size();
    double best_d = -1;
    if (picked.empty() && existing.empty()) {
      best = 0;
      best_d = std::numeric_limits<double>::infinity();
    } else {
      for (std::size_t i = 0; i < points.size(); ++i)
        if (dist[i] > best_d) {
          best_d = dist[i];
          best = i;
        }
    }
    if (best == points.size() || best_d < min_separation || best_d == 0) break;
    picked.push_back(best);
    for (std::size_t i = 0; i < points.size(); ++i) dist[i] = std::min(dist[i], (points[i] - points[best]).norm());
  }
  return picked;
}

void build_topology(ScaffoldGraph& graph, int k) {
  const std::size_t n = graph.nodes.size();
  graph.neighbors.assign(n, {});
  if (n < 2) return;
  const int kk = std::min<int>(k, int(n) - 1);
  const int t = graph.anchor_time;
  std::vector<std::vector<int>> adj(n);
  for (std::size_t m = 0; m < n; ++m) {
    std::vector<std::pair<double, int>> d;
    for (std::size_t o = 0; o < n; ++o)
      if (o != m) d.emplace_back((graph.position(int(m), t) - graph.position(int(o), t)).squaredNorm(), int(o));
    std::partial_sort(d.begin(), d.begin() + kk, d.end());
    for (int i = 0; i < kk; ++i) {
      adj[m].push_back(d[std::size_t(i)].second);
      adj[std::size_t(d[std::size_t(i)].second)].push_back(int(m));
    }
  }
  for (std::size_t m = 0; m < n; ++m) {
    std::sort(adj[m].begin(), adj[m].end());
    adj[m].erase(std::unique(adj[m].begin(), adj[m].end()), adj[m].end());
  }
  graph.neighbors = std::move(adj);
}

void init_radii(ScaffoldGraph& graph, int nth) {
  const std::size_t n = graph.nodes.size();
  if (n < 2) return;
  const int t = graph.anchor_time;
  const int k = std::clamp(nth, 1, int(n) - 1);
  for (std::size_t m = 0; m < n; ++m) {
    std::vector<double> d;
    for (std::size_t o = 0; o < n; ++o)
      if (o != m) d.push_back((graph.position(int(m), t) - graph.position(int(o), t)).norm());
    std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
    graph.nodes[m].radius = std::max(d[std::size_t(k - 1)], 1e-4);
  }
}

ScaffoldGraph sample_nodes(std::span<const Track3D> tracks, int target_count, double min_separation, int k) {
  ScaffoldGraph g;
  if (tracks.empty()) return g;
  g.anchor_time = anchor_frame(tracks);
  std::vector<Vec3> pts;
  for (const Track3D& tr : tracks) pts.push_back(tr.positions[std::size_t(g.anchor_time)]);
  for (std::size_t i : farthest_point_indices(pts, {}, target_count, min_separation)) {
    ScaffoldNode node;
    node.track_id = tracks[i].id;
    for (const Vec3& p : tracks[i].positions) node.transforms.push_back(RigidPose::from_translation(p));
    node.observed = tracks[i].visible;
    g.nodes.push_back(std::move(node));
  }
  build_topology(g, k);
  init_radii(g);
  return g;
}

namespace {

int nearest_node(const Vec3& q, const ScaffoldGraph& graph, int t) {
  if (graph.nodes.empty()) throw Error(ErrorCode::EmptyInput, "scaffold has no nodes");
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < graph.nodes.size(); ++m) {
    const double d = (graph.position(int(m), t) - q).squaredNorm();
    if (d < bd) {
      bd = d;
      best = int(m);
    }
  }
  return best;
}

// Log-RBF exponents shifted by their max; the normalized weights are unchanged.
std::vector<double> rbf_values(const Vec3& q, std::span<const int> nodes, const ScaffoldGraph& graph, int t) {
  std::vector<double> e(nodes.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const double r = graph.nodes[std::size_t(nodes[k])].radius;
    e[k] = -(q - graph.position(nodes[k], t)).squaredNorm() / (2 * r * r);
    mx = std::max(mx, e[k]);
  }
  for (double& v : e) v = std::exp(v - mx);
  return e;
}

}  // namespace

std::vector<int> skinning_neighborhood(const Vec3& query, const ScaffoldGraph& graph, int t_ref) {
  const int m = nearest_node(query, graph, t_ref);
  std::vector<int> out{m};
  if (std::size_t(m) < graph.neighbors.size())
    for (int n : graph.neighbors[std::size_t(m)]) out.push_back(n);
  return out;
}

Skinning skinning_weights(const Vec3& query, const ScaffoldGraph& graph, int t_ref) {
  Skinning s;
  s.nodes = skinning_neighborhood(query, graph, t_ref);
  s.weights = rbf_values(query, s.nodes, graph, t_ref);
  const double sum = std::accumulate(s.weights.begin(), s.weights.end(), 0.0);
  for (double& w : s.weights) w /= sum;
  return s;
}

void ScaffoldGradient::reset(const ScaffoldGraph& graph) {
  timesteps = graph.timesteps();
  translation.assign(graph.nodes.size() * std::size_t(timesteps), Vec3::Zero());
  rotation.assign(graph.nodes.size() * std::size_t(timesteps), Vec3::Zero());
}

WarpTape warp_forward(const Vec3& query, std::span<const int> nodes, std::span<const double> dw,
                      const ScaffoldGraph& graph, int t_src, int t_dst) {
  const int T = graph.timesteps();
  if (t_src < 0 || t_dst < 0 || t_src >= T || t_dst >= T)
    throw Error(ErrorCode::MissingAnchor, "warp timestep outside the scaffold range");
  if (nodes.empty()) throw Error(ErrorCode::AllZeroWeights, "empty skinning neighbourhood");
  if (!dw.empty() && dw.size() != nodes.size()) throw Error(ErrorCode::ShapeMismatch, "one correction per node expected");
  WarpTape tp;
  tp.query = query;
  tp.t_src = t_src;
  tp.t_dst = t_dst;
  tp.nodes.assign(nodes.begin(), nodes.end());
  const std::size_t n = nodes.size();

  tp.rbf = rbf_values(query, nodes, graph, t_src);
  tp.rbf_sum = std::accumulate(tp.rbf.begin(), tp.rbf.end(), 0.0);
  tp.combined.resize(n);
  tp.combined_sum = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp.combined[k] = std::max(0.0, tp.rbf[k] / tp.rbf_sum + (dw.empty() ? 0.0 : dw[k]));
    tp.combined_sum += tp.combined[k];
  }
  if (!(tp.combined_sum > 0)) throw Error(ErrorCode::AllZeroWeights, "skinning weights vanish after clamping");
  tp.blend.resize(n);
  for (std::size_t k = 0; k < n; ++k) tp.blend[k] = tp.combined[k] / tp.combined_sum;
  if (t_src == t_dst) {
    // ΔQ is the identity for every node, independent of the node transforms.
    tp.result = RigidPose::identity();
    return tp;
  }

  std::size_t pivot = 0;
  for (std::size_t k = 1; k < n; ++k)
    if (tp.blend[k] > tp.blend[pivot]) pivot = k;
  tp.rel_rotation.resize(n);
  tp.rel_translation.resize(n);
  tp.dual.resize(n);
  tp.sign.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const ScaffoldNode& node = graph.nodes[std::size_t(nodes[k])];
    const RigidPose& qs = node.transforms[std::size_t(t_src)];
    const RigidPose& qd = node.transforms[std::size_t(t_dst)];
    const Quat q = qd.rotation.normalized() * qs.rotation.normalized().conjugate();
    tp.rel_rotation[k] = q;
    tp.rel_translation[k] = qd.translation - (q * qs.translation);
    Quat d = Quat(0, tp.rel_translation[k].x(), tp.rel_translation[k].y(), tp.rel_translation[k].z()) * q;
    d.coeffs() *= 0.5;
    tp.dual[k] = d;
  }
  const Vec4 piv = quat_wxyz(tp.rel_rotation[pivot]);
  Vec4 ar = Vec4::Zero(), ad = Vec4::Zero();
  for (std::size_t k = 0; k < n; ++k) {
    tp.sign[k] = quat_wxyz(tp.rel_rotation[k]).dot(piv) < 0 ? -1.0 : 1.0;
    ar += tp.blend[k] * tp.sign[k] * quat_wxyz(tp.rel_rotation[k]);
    ad += tp.blend[k] * tp.sign[k] * quat_wxyz(tp.dual[k]);
  }
  tp.norm = ar.norm();
  if (!(tp.norm > 1e-300)) throw Error(ErrorCode::AllZeroWeights, "blended rotation cancelled to zero");
  tp.acc_real = from_wxyz(ar);
  tp.acc_dual = from_wxyz(ad);
  const Quat r = from_wxyz(ar / tp.norm), d = from_wxyz(ad / tp.norm);
  tp.result.rotation = r;
  tp.result.translation = 2.0 * (d * r.conjugate()).vec();
  return tp;
}

void warp_backward(const WarpTape& tp, const Vec4& d_rotation, const Vec3& d_translation,
                   const ScaffoldGraph& graph, ScaffoldGradient* d_graph, Vec3* d_query, std::span<double> d_dw) {
  const std::size_t n = tp.nodes.size();
  if (!d_dw.empty() && d_dw.size() != n) throw Error(ErrorCode::ShapeMismatch, "d_dw size mismatch");
  if (tp.t_src == tp.t_dst) return;
  if (d_graph && d_graph->timesteps != graph.timesteps())
    throw Error(ErrorCode::StaleForwardState, "gradient buffer not sized for this scaffold");

  Eigen::Matrix<double, 3, 4> P = Eigen::Matrix<double, 3, 4>::Zero();
  P.rightCols<3>() = Mat3::Identity();
  const Eigen::Vector4d C(1, -1, -1, -1);
  const Vec4 r = quat_wxyz(tp.acc_real) / tp.norm;
  const Vec4 d = quat_wxyz(tp.acc_dual) / tp.norm;
  const Vec4 r_conj = C.cwiseProduct(r);

  // t = 2 vec(d ⊗ r*)
  const Vec4 g_d = 2.0 * quat_right_matrix(from_wxyz(r_conj)).transpose() * P.transpose() * d_translation;
  const Vec4 g_r =
      d_rotation + C.cwiseProduct(2.0 * quat_left_matrix(from_wxyz(d)).transpose() * P.transpose() * d_translation);
  const Vec4 G_r = (g_r - r * r.dot(g_r)) / tp.norm - r * (d.dot(g_d)) / tp.norm;
  const Vec4 G_d = g_d / tp.norm;

  std::vector<double> g_blend(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Quat& q = tp.rel_rotation[k];
    const Vec4 qv = quat_wxyz(q);
    g_blend[k] = tp.sign[k] * (qv.dot(G_r) + quat_wxyz(tp.dual[k]).dot(G_d));
    if (!d_graph) continue;
    const double bs = tp.blend[k] * tp.sign[k];
    const Vec4 g_dual = bs * G_d;
    const Vec3& tau = tp.rel_translation[k];
    // dual = ½ (0,τ) ⊗ q
    const Vec3 g_tau = 0.5 * P * quat_right_matrix(q).transpose() * g_dual;
    const Vec4 g_q = bs * G_r + 0.5 * quat_left_matrix(Quat(0, tau.x(), tau.y(), tau.z())).transpose() * g_dual;
    const ScaffoldNode& node = graph.nodes[std::size_t(tp.nodes[k])];
    const Vec3 Rps = q * node.transforms[std::size_t(tp.t_src)].translation;
    // left tangent of ΔQ's rotation, including τ = p_dst − R p_src
    const Vec3 g_theta = 0.5 * P * quat_right_matrix(q).transpose() * g_q - skew(Rps) * g_tau;
    const Mat3 Rq = q.toRotationMatrix();
    const int m = tp.nodes[k];
    d_graph->dr(m, tp.t_dst) += g_theta;
    d_graph->dr(m, tp.t_src) -= Rq.transpose() * g_theta;
    d_graph->dt(m, tp.t_dst) += g_tau;
    d_graph->dt(m, tp.t_src) -= Rq.transpose() * g_tau;
  }

  // blend = combined / Σ combined; combined = max(0, w + dw); w = rbf / Σ rbf
  double bg = 0;
  for (std::size_t k = 0; k < n; ++k) bg += tp.blend[k] * g_blend[k];
  std::vector<double> g_w(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (!(tp.combined[k] > 0)) continue;
    g_w[k] = (g_blend[k] - bg) / tp.combined_sum;
    if (!d_dw.empty()) d_dw[k] += g_w[k];
  }
  if (!d_graph && !d_query) return;
  double wg = 0;
  for (std::size_t k = 0; k < n; ++k) wg += tp.rbf[k] / tp.rbf_sum * g_w[k];
  for (std::size_t k = 0; k < n; ++k) {
    const double w = tp.rbf[k] / tp.rbf_sum;
    const double g_e = w * (g_w[k] - wg);
    if (g_e == 0) continue;
    const int m = tp.nodes[k];
    const double rad = graph.nodes[std::size_t(m)].radius;
    const Vec3 diff = tp.query - graph.position(m, tp.t_src);
    if (d_query) *d_query -= g_e * diff / (rad * rad);
    if (d_graph) d_graph->dt(m, tp.t_src) += g_e * diff / (rad * rad);
  }
}

RigidPose warp_point(const Vec3& query, std::span<const int> nodes, std::span<const double> dw,
                     const ScaffoldGraph& graph, int t_src, int t_dst) {
  return warp_forward(query, nodes, dw, graph, t_src, t_dst).result;
}

RigidPose warp_point(const Vec3& query, const ScaffoldGraph& graph, int t_src, int t_dst) {
  const std::vector<int> nb = skinning_neighborhood(query, graph, t_src);
  return warp_forward(query, nb, {}, graph, t_src, t_dst).result;
}

double arap_loss(const ScaffoldGraph& graph, ScaffoldGradient* grad, double scale) {
  const int T = graph.timesteps();
  const auto edges = graph.directed_edges();
  if (graph.nodes.size() < 2 || T < 2 || edges.empty()) return 0;
  const double norm = 1.0 / double(edges.size() * std::size_t(T - 1));
  double total = 0;
  for (const auto& [m, n] : edges) {
    for (int t = 0; t + 1 < T; ++t) {
      const Vec3 a0 = graph.position(n, t) - graph.position(m, t);
      const Vec3 a1 = graph.position(n, t + 1) - graph.position(m, t + 1);
      const Mat3 R0 = graph.nodes[std::size_t(m)].transforms[std::size_t(t)].rotation_matrix();
      const Mat3 R1 = graph.nodes[std::size_t(m)].transforms[std::size_t(t + 1)].rotation_matrix();
      const double l0 = a0.norm(), l1 = a1.norm();
      const double e = l0 - l1;
      const Vec3 loc = R0.transpose() * a0 - R1.transpose() * a1;
      total += e * e + loc.squaredNorm();
      if (!grad) continue;
      const double s = scale * norm;
      Vec3 ga0 = 2 * R0 * loc, ga1 = -2 * R1 * loc;
      if (l0 > 0) ga0 += 2 * e * a0 / l0;
      if (l1 > 0) ga1 -= 2 * e * a1 / l1;
      grad->dt(n, t) += s * ga0;
      grad->dt(m, t) -= s * ga0;
      grad->dt(n, t + 1) += s * ga1;
      grad->dt(m, t + 1) -= s * ga1;
      // d(Rᵀa)/dθ = Rᵀ[a]×
      grad->dr(m, t) += s * (R0.transpose() * skew(a0)).transpose() * (2 * loc);
      grad->dr(m, t + 1) -= s * (R1.transpose() * skew(a1)).transpose() * (2 * loc);
    }
  }
  return total * norm * scale;
}

double velocity_loss(const ScaffoldGraph& graph, ScaffoldGradient* grad, double scale) {
  const int T = graph.timesteps();
  const auto edges = graph.directed_edges();
  if (T < 2 || edges.empty()) return 0;
  const double norm = 1.0 / double(edges.size() * std::size_t(T - 1));
  double total = 0;
  for (const auto& [m, n] : edges)
    for (int t = 0; t + 1 < T; ++t) {
      const Vec3 diff = (graph.position(m, t + 1) - graph.position(m, t)) - (graph.position(n, t + 1) - graph.position(n, t));
      total += diff.squaredNorm();
      if (!grad) continue;
      const Vec3 g = 2 * scale * norm * diff;
      grad->dt(m, t + 1) += g;
      grad->dt(m, t) -= g;
      grad->dt(n, t + 1) -= g;
      grad->dt(n, t) += g;
    }
  return total * norm * scale;
}

double acceleration_loss(const ScaffoldGraph& graph, ScaffoldGradient* grad, double scale) {
  const int T = graph.timesteps();
  if (T < 3 || graph.nodes.empty()) return 0;
  const double norm = 1.0 / double(graph.nodes.size() * std::size_t(T - 2));
  double total = 0;
  for (int m = 0; m < int(graph.nodes.size()); ++m)
    for (int t = 1; t + 1 < T; ++t) {
      const Vec3 a = graph.position(m, t + 1) - 2 * graph.position(m, t) + graph.position(m, t - 1);
      total += a.squaredNorm();
      if (!grad) continue;
      const Vec3 g = 2 * scale * norm * a;
      grad->dt(m, t + 1) += g;
      grad->dt(m, t) -= 2 * g;
      grad->dt(m, t - 1) += g;
    }
  return total * norm * scale;
}

double geometry_loss(const ScaffoldGraph& graph, const GeometryWeights& w, ScaffoldGradient* grad) {
  return arap_loss(graph, grad, w.arap) + velocity_loss(graph, grad, w.velocity) +
         acceleration_loss(graph, grad, w.acceleration);
}

GeometryReport optimize_geometry(ScaffoldGraph& graph, const GeometryOptions& options) {
  GeometryReport rep;
  rep.initial_loss = rep.final_loss = geometry_loss(graph, options.weights);
  const int T = graph.timesteps();
  std::vector<std::pair<int, int>> free;
  for (int m = 0; m < int(graph.nodes.size()); ++m)
    for (int t = 0; t < T; ++t) {
      const auto& obs = graph.nodes[std::size_t(m)].observed;
      if (std::size_t(t) >= obs.size() || !obs[std::size_t(t)]) free.emplace_back(m, t);
    }
  if (free.empty()) return rep;

  using Vec6 = Eigen::Matrix<double, 6, 1>;
  std::vector<Vec6> m1(free.size(), Vec6::Zero()), m2(free.size(), Vec6::Zero());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-12;
  double lr = options.learn_rate;
  double loss = rep.initial_loss;
  ScaffoldGradient g;
  for (int step = 1; step <= options.steps; ++step) {
    g.reset(graph);
    geometry_loss(graph, options.weights, &g);
    ScaffoldGraph trial = graph;
    for (std::size_t i = 0; i < free.size(); ++i) {
      const auto [m, t] = free[i];
      Vec6 gi;
      gi << g.dt(m, t), g.dr(m, t);
      m1[i] = b1 * m1[i] + (1 - b1) * gi;
      m2[i] = b2 * m2[i] + (1 - b2) * gi.cwiseProduct(gi);
      const Vec6 mh = m1[i] / (1 - std::pow(b1, step));
      const Vec6 vh = m2[i] / (1 - std::pow(b2, step));
      const Vec6 delta = -lr * mh.cwiseQuotient((vh.cwiseSqrt().array() + eps).matrix());
      RigidPose& Q = trial.nodes[std::size_t(m)].transforms[std::size_t(t)];
      Q.translation += delta.head<3>();
      Q.rotation = (quat_exp(delta.tail<3>()) * Q.rotation).normalized();
    }
    const double next = geometry_loss(trial, options.weights);
    if (std::isfinite(next) && next <= loss) {
      graph = std::move(trial);
      loss = next;
      ++rep.accepted;
    } else {
      lr *= 0.5;
    }
  }
  rep.final_loss = loss;
  return rep;
}

ScaffoldGraph reanchor(const ScaffoldGraph& graph, std::span<const Track2D> tracks,
                       std::span<const RigidPose> old_poses, std::span<const DepthMap> old_depths,
                       std::span<const RigidPose> new_poses, std::span<const DepthMap> new_depths) {
  const std::size_t T = std::size_t(graph.timesteps());
  if (old_poses.size() < T || new_poses.size() < T || old_depths.size() < T || new_depths.size() < T)
    throw Error(ErrorCode::MissingUpdate, "pose/depth update does not cover every scaffold timestep");
  ScaffoldGraph out = graph;
  for (ScaffoldNode& node : out.nodes) {
    const Track2D* tr = nullptr;
    for (const Track2D& c : tracks)
      if (c.id == node.track_id) tr = &c;
    if (!tr) throw Error(ErrorCode::MissingUpdate, "no track for node " + std::to_string(node.track_id));
    std::vector<double> rho(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      if (t >= tr->visible.size() || !tr->visible[t]) continue;
      const double a = sample_depth(old_depths[t], nullptr, tr->positions[t]);
      const double b = sample_depth(new_depths[t], nullptr, tr->positions[t]);
      if (a > 0 && b > 0) rho[t] = b / a;
    }
    for (std::size_t t = 0; t < T; ++t) {
      double r = rho[t];
      for (std::size_t k = 1; !(r > 0) && k < T; ++k) {
        if (t >= k && rho[t - k] > 0) r = rho[t - k];
        else if (t + k < T && rho[t + k] > 0) r = rho[t + k];
      }
      if (!(r > 0)) r = 1.0;
      const RigidPose& po = old_poses[t];
      const RigidPose& pn = new_poses[t];
      if (r == 1.0 && po.rotation.coeffs() == pn.rotation.coeffs() && po.translation == pn.translation) continue;
      RigidPose& Q = node.transforms[t];
      Q.translation = pn.apply(r * po.apply_inverse(Q.translation));
      Q.rotation = (pn.rotation * po.rotation.conjugate() * Q.rotation).normalized();
    }
  }
  return out;
}

}  // namespace dynrecon
