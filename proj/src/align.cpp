#include "dust/align.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dust {

// ---------------------------------------------------------------------------
// L-BFGS

namespace {

// Strong-Wolfe line search: bracketing phase plus bisection zoom.
double wolfe_search(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& func,
                    const Eigen::VectorXd& x, const Eigen::VectorXd& dir, double f0,
                    const Eigen::VectorXd& g0, const LbfgsOptions& opt, double& f_out,
                    Eigen::VectorXd& g_out) {
  const double d0 = g0.dot(dir);
  if (d0 >= 0.0) return 0.0;  // not a descent direction

  Eigen::VectorXd g(x.size());
  double dphi = 0.0;
  auto phi = [&](double a) {
    const double f = func(x + a * dir, g);
    dphi = g.dot(dir);
    return f;
  };
  auto accept = [&](double a, double f) {
    f_out = f;
    g_out = g;
    return a;
  };

  auto zoom = [&](double a_lo, double a_hi, double f_lo) {
    for (int it = 0; it < 50; ++it) {
      const double a = 0.5 * (a_lo + a_hi);
      const double f = phi(a);
      if (f > f0 + opt.c1 * a * d0 || f >= f_lo) {
        a_hi = a;
      } else {
        if (std::abs(dphi) <= -opt.c2 * d0) return accept(a, f);
        if (dphi * (a_hi - a_lo) >= 0.0) a_hi = a_lo;
        a_lo = a;
        f_lo = f;
      }
      if (std::abs(a_hi - a_lo) < 1e-16) break;
    }
    return accept(a_lo, phi(a_lo));
  };

  double a_prev = 0.0, f_prev = f0;
  double a = 1.0;
  for (int it = 0; it < 40; ++it) {
    const double f = phi(a);
    if (f > f0 + opt.c1 * a * d0 || (it > 0 && f >= f_prev)) return zoom(a_prev, a, f_prev);
    if (std::abs(dphi) <= -opt.c2 * d0) return accept(a, f);
    if (dphi >= 0.0) return zoom(a, a_prev, f);
    a_prev = a;
    f_prev = f;
    a *= 2.0;
  }
  return accept(a_prev, phi(a_prev));
}

}  // namespace

LbfgsResult lbfgs_minimize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& func,
    const Eigen::VectorXd& x0, const LbfgsOptions& opt) {
  LbfgsResult res;
  res.x = x0;
  Eigen::VectorXd g(x0.size());
  res.value = func(res.x, g);
  res.objective_history.push_back(res.value);

  std::vector<Eigen::VectorXd> s_hist, y_hist;
  std::vector<double> rho_hist;

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    if (g.lpNorm<Eigen::Infinity>() < opt.grad_inf_tolerance) {
      res.converged = true;
      break;
    }
    // two-loop recursion
    Eigen::VectorXd q = g;
    const int m = static_cast<int>(s_hist.size());
    std::vector<double> alpha(m);
    for (int i = m - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (m > 0) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (int i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Eigen::VectorXd dir = -q;

    double f_new = res.value;
    Eigen::VectorXd g_new = g;
    double step = wolfe_search(func, res.x, dir, res.value, g, opt, f_new, g_new);
    if (step <= 0.0) {
      // fall back to steepest descent once before giving up
      dir = -g;
      step = wolfe_search(func, res.x, dir, res.value, g, opt, f_new, g_new);
      if (step <= 0.0) break;
    }

    const Eigen::VectorXd s = step * dir;
    const Eigen::VectorXd y = g_new - g;
    if (s.dot(y) > 1e-16) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / s.dot(y));
      if (static_cast<int>(s_hist.size()) > opt.memory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    res.x += s;
    res.value = f_new;
    g = g_new;
    res.objective_history.push_back(res.value);
    res.iterations = iter + 1;
  }
  if (g.lpNorm<Eigen::Infinity>() < opt.grad_inf_tolerance) res.converged = true;
  return res;
}

// ---------------------------------------------------------------------------
// Boxes and matching

Eigen::Matrix<double, 8, 3> CornerBox::corners() const {
  Eigen::Matrix<double, 8, 3> out;
  const Mat3 r = orientation.to_matrix();
  for (int k = 0; k < 8; ++k) {
    const Vec3 signs((k & 1) ? 1.0 : -1.0, (k & 2) ? 1.0 : -1.0, (k & 4) ? 1.0 : -1.0);
    out.row(k) = (center + r * (0.5 * signs.cwiseProduct(extent))).transpose();
  }
  return out;
}

CornerBox transform_box(const RigidTransform& t, const CornerBox& box) {
  CornerBox out = box;
  out.center = se3_apply(t, box.center);
  out.orientation = t.rotation * box.orientation;
  return out;
}

std::vector<int> detect_static(const std::vector<std::vector<CornerBox>>& tracks, double threshold) {
  std::vector<int> flags(tracks.size(), -1);
  for (size_t i = 0; i < tracks.size(); ++i) {
    if (tracks[i].size() < 2) continue;  // unknown
    const double displacement = (tracks[i].back().center - tracks[i].front().center).norm();
    flags[i] = displacement < threshold ? 1 : 0;
  }
  return flags;
}

std::vector<int> hungarian_assignment(const Eigen::MatrixXd& cost) {
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  const int n = std::max(rows, cols);
  if (n == 0) return {};
  // pad to square; a constant pad cost cannot change the optimum among real pairs
  const double pad = cost.size() > 0 ? cost.maxCoeff() + 1.0 : 1.0;

  // Jonker-style shortest augmenting path, 1-indexed internals
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  auto c = [&](int i, int j) {  // 0-indexed
    return (i < rows && j < cols) ? cost(i, j) : pad;
  };
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(rows, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] >= 1 && p[j] <= rows && j - 1 < cols) assignment[p[j] - 1] = j - 1;
  return assignment;
}

Matching match_boxes(const std::vector<CornerBox>& vehicle, const std::vector<CornerBox>& infra,
                     const RigidTransform& base, double gate) {
  Matching m;
  if (vehicle.empty() || infra.empty()) return m;
  Eigen::MatrixXd cost(vehicle.size(), infra.size());
  std::vector<Vec3> infra_centers(infra.size());
  for (size_t j = 0; j < infra.size(); ++j) infra_centers[j] = se3_apply(base, infra[j].center);
  for (size_t i = 0; i < vehicle.size(); ++i)
    for (size_t j = 0; j < infra.size(); ++j)
      cost(i, j) = (vehicle[i].center - infra_centers[j]).norm();
  const auto assignment = hungarian_assignment(cost);
  for (size_t i = 0; i < vehicle.size(); ++i) {
    const int j = assignment[i];
    if (j < 0 || cost(i, j) > gate) continue;
    m.pairs.push_back({vehicle[i].track_id, infra[static_cast<size_t>(j)].track_id, cost(i, j),
                       vehicle[i], infra[static_cast<size_t>(j)]});
  }
  return m;
}

double corner_objective(const RigidTransform& delta, const RigidTransform& base, const Matching& m) {
  if (m.pairs.empty()) throw std::invalid_argument("corner_objective: empty matching");
  const RigidTransform refined = se3_compose(delta, base);
  double total = 0.0;
  for (const auto& pair : m.pairs) {
    const auto xv = pair.vehicle_box.corners();
    const auto xi = pair.infra_box.corners();
    for (int k = 0; k < 8; ++k)
      total += (xv.row(k).transpose() - se3_apply(refined, xi.row(k).transpose())).squaredNorm();
  }
  return total / static_cast<double>(m.pairs.size());
}

namespace {

Rotation6D rot6d_from_params(const Eigen::VectorXd& x) {
  return {Vec3(x(0), x(1), x(2)), Vec3(x(3), x(4), x(5))};
}

// gradient of the corner objective through the Gram-Schmidt map
void corner_grad(const Eigen::VectorXd& x, const RigidTransform& base, const Matching& m,
                 double& value, Eigen::VectorXd& grad) {
  const Rotation6D r6 = rot6d_from_params(x);
  const Mat3 rot = rot6d_to_matrix(r6);
  const Vec3 t(x(6), x(7), x(8));
  const double inv_n = 1.0 / static_cast<double>(m.pairs.size());

  value = 0.0;
  Vec3 g_t = Vec3::Zero();
  Mat3 g_r = Mat3::Zero();
  for (const auto& pair : m.pairs) {
    const auto xv = pair.vehicle_box.corners();
    const auto xi = pair.infra_box.corners();
    for (int k = 0; k < 8; ++k) {
      const Vec3 y = se3_apply(base, xi.row(k).transpose());
      const Vec3 r = rot * y + t - xv.row(k).transpose();
      value += inv_n * r.squaredNorm();
      g_t += (2.0 * inv_n) * r;
      g_r += (2.0 * inv_n) * r * y.transpose();
    }
  }

  // back through Gram-Schmidt: R = [b1 b2 b1 x b2]
  const double n1 = r6.a1.norm();
  const Vec3 b1 = r6.a1 / n1;
  const Vec3 u2 = r6.a2 - b1.dot(r6.a2) * b1;
  const double n2 = u2.norm();
  const Vec3 b2 = u2 / n2;
  const Vec3 g1 = g_r.col(0), g2 = g_r.col(1), g3 = g_r.col(2);

  Vec3 d_b1 = g1 + b2.cross(g3);
  const Vec3 d_b2 = g2 - b1.cross(g3);
  const Vec3 d_u2 = (d_b2 - b2 * b2.dot(d_b2)) / n2;
  const Vec3 d_a2 = d_u2 - b1 * b1.dot(d_u2);
  d_b1 += -r6.a2 * b1.dot(d_u2) - b1.dot(r6.a2) * d_u2;
  const Vec3 d_a1 = (d_b1 - b1 * b1.dot(d_b1)) / n1;

  grad.resize(9);
  grad << d_a1, d_a2, g_t;
}

}  // namespace

ExtrinsicCorrection solve_pose_correction(const RigidTransform& base, const Matching& matching,
                                          const RigidTransform& init) {
  if (matching.pairs.empty())
    throw std::invalid_argument("solve_pose_correction: empty matching");
  for (const auto& pair : matching.pairs) {
    int tiny_v = 0, tiny_i = 0;
    for (int k = 0; k < 3; ++k) {
      tiny_v += pair.vehicle_box.extent(k) < 1e-9;
      tiny_i += pair.infra_box.extent(k) < 1e-9;
    }
    if (tiny_v >= 2 || tiny_i >= 2)
      throw std::invalid_argument("solve_pose_correction: degenerate (collinear) box corners");
  }

  const Rotation6D r6_init = matrix_to_rot6d(init.rotation_matrix());
  Eigen::VectorXd x0(9);
  x0 << r6_init.a1, r6_init.a2, init.translation;

  const auto func = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    double v;
    corner_grad(x, base, matching, v, g);
    return v;
  };
  const LbfgsResult res = lbfgs_minimize(func, x0);

  ExtrinsicCorrection out;
  out.base = base;
  out.correction = {UnitQuaternion::from_matrix(rot6d_to_matrix(rot6d_from_params(res.x))),
                    Vec3(res.x(6), res.x(7), res.x(8))};
  out.converged = res.converged;
  out.iterations = res.iterations;
  out.objective_history = res.objective_history;
  // value is the mean squared Frobenius error over boxes; per-component RMS
  out.residual_rms = std::sqrt(res.value / 24.0);
  return out;
}

const RigidTransform* ExtrinsicsTable::find(double t) const {
  for (size_t i = 0; i < timestamps.size(); ++i)
    if (std::abs(timestamps[i] - t) < 1e-9) return &transforms[i];
  return nullptr;
}

CooperativeLabels regenerate_labels(const std::vector<CornerBox>& vehicle_boxes,
                                    const std::vector<CornerBox>& infra_boxes,
                                    const RigidTransform& base, const ExtrinsicsTable& refined,
                                    const std::vector<FramePairing>& pairing) {
  CooperativeLabels out;
  for (const auto& frame : pairing) {
    std::vector<CornerBox> veh, infra;
    for (const auto& b : vehicle_boxes)
      if (std::abs(b.timestamp - frame.t_vehicle) < 1e-9) veh.push_back(b);
    for (const auto& b : infra_boxes)
      if (std::abs(b.timestamp - frame.t_infra) < 1e-9) infra.push_back(b);

    CooperativeLabels::FrameInfo info;
    info.anchor = frame.anchor;
    const RigidTransform* e = refined.find(frame.anchor);
    if (e == nullptr) {
      e = &base;
      info.extrinsic_missing = true;
    }
    const Matching m = match_boxes(veh, infra, *e);
    std::vector<char> infra_used(infra.size(), 0);
    for (const auto& pair : m.pairs)
      for (size_t j = 0; j < infra.size(); ++j)
        if (infra[j].track_id == pair.infra_id) infra_used[j] = 1;
    // vehicle-side geometry is the reference for co-visible objects
    for (const auto& b : veh) out.boxes.push_back(b);
    info.merged = static_cast<int>(m.pairs.size());
    for (size_t j = 0; j < infra.size(); ++j) {
      if (infra_used[j]) continue;
      out.boxes.push_back(transform_box(*e, infra[j]));
      ++info.infra_only;
    }
    out.frames.push_back(info);
  }
  return out;
}

std::vector<CornerBox> fill_gaps(const std::vector<CornerBox>& track,
                                 const std::vector<double>& frame_times) {
  if (track.empty()) return track;
  std::vector<const CornerBox*> slot(frame_times.size(), nullptr);
  for (const auto& b : track)
    for (size_t i = 0; i < frame_times.size(); ++i)
      if (std::abs(frame_times[i] - b.timestamp) < 1e-9) slot[i] = &b;

  std::vector<CornerBox> out = track;
  size_t i = 0;
  while (i < frame_times.size()) {
    if (slot[i] != nullptr) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < frame_times.size() && slot[j] == nullptr) ++j;
    const size_t gap = j - i;
    if (i > 0 && j < frame_times.size() && gap <= 2) {
      const CornerBox& a = *slot[i - 1];
      const CornerBox& b = *slot[j];
      for (size_t k = i; k < j; ++k) {
        const double w = (frame_times[k] - a.timestamp) / (b.timestamp - a.timestamp);
        CornerBox filled = a;  // extent and flags from the earlier bounding frame
        filled.timestamp = frame_times[k];
        filled.center = lerp_vec3(a.center, b.center, w);
        filled.orientation = slerp(a.orientation, b.orientation, w);
        out.push_back(filled);
      }
    }
    i = j;
  }
  std::sort(out.begin(), out.end(),
            [](const CornerBox& a, const CornerBox& b) { return a.timestamp < b.timestamp; });
  return out;
}

// ---------------------------------------------------------------------------
// Annotation I/O

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_annotations(const std::vector<CornerBox>& boxes, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "# dust-annotations/1: track_id timestamp cx cy cz qw qx qy qz ex ey ez source static\n";
  for (const auto& b : boxes) {
    f << b.track_id << ' ' << fmt_double(b.timestamp) << ' ' << fmt_double(b.center.x()) << ' '
      << fmt_double(b.center.y()) << ' ' << fmt_double(b.center.z()) << ' '
      << fmt_double(b.orientation.w) << ' ' << fmt_double(b.orientation.x) << ' '
      << fmt_double(b.orientation.y) << ' ' << fmt_double(b.orientation.z) << ' '
      << fmt_double(b.extent.x()) << ' ' << fmt_double(b.extent.y()) << ' '
      << fmt_double(b.extent.z()) << ' ' << source_name(b.source) << ' ' << b.static_flag << '\n';
  }
}

std::vector<CornerBox> load_annotations(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::vector<CornerBox> boxes;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    CornerBox b;
    std::string source;
    double qw, qx, qy, qz;
    if (!(ss >> b.track_id >> b.timestamp >> b.center.x() >> b.center.y() >> b.center.z() >> qw >>
          qx >> qy >> qz >> b.extent.x() >> b.extent.y() >> b.extent.z() >> source >>
          b.static_flag))
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed annotation row");
    b.orientation = UnitQuaternion(qw, qx, qy, qz);
    b.source = source == "vehicle" ? Source::vehicle : Source::infra;
    boxes.push_back(b);
  }
  return boxes;
}

void save_extrinsics(const ExtrinsicsTable& table, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "# dust-extrinsics/1: timestamp qw qx qy qz tx ty tz\n";
  for (size_t i = 0; i < table.timestamps.size(); ++i) {
    const auto& t = table.transforms[i];
    f << fmt_double(table.timestamps[i]) << ' ' << fmt_double(t.rotation.w) << ' '
      << fmt_double(t.rotation.x) << ' ' << fmt_double(t.rotation.y) << ' '
      << fmt_double(t.rotation.z) << ' ' << fmt_double(t.translation.x()) << ' '
      << fmt_double(t.translation.y()) << ' ' << fmt_double(t.translation.z()) << '\n';
  }
}

ExtrinsicsTable load_extrinsics(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  ExtrinsicsTable table;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double t, qw, qx, qy, qz, tx, ty, tz;
    if (!(ss >> t >> qw >> qx >> qy >> qz >> tx >> ty >> tz))
      throw std::runtime_error(path + ": malformed extrinsics row");
    table.timestamps.push_back(t);
    table.transforms.push_back({UnitQuaternion(qw, qx, qy, qz), Vec3(tx, ty, tz)});
  }
  return table;
}

}  // namespace dust
