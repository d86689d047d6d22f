#include <algorithm>
#include <limits>
#include <cmath>
#include <functional>
#include <map>

#include "s2diff/dynamics.hpp"
#include "s2diff/errors.hpp"

namespace s2diff {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

const std::map<std::string, std::string>& builtin_table() {
  static const std::map<std::string, std::string> table = {
#include "s2diff/builtin_systems.inc"
  };
  return table;
}

/// Safe/unsafe sets of the form "angle bound and norm bound" shared by the
/// pendulum variants.
struct AngleNormSets {
  explicit AngleNormSets(const KeyValueFile& kv)
      : safe_theta(kv.get_real("safe_theta")),
        safe_norm(kv.get_real("safe_norm")),
        unsafe_theta(kv.get_real("unsafe_theta")),
        unsafe_norm(kv.get_real("unsafe_norm")) {}

  bool safe(const VectorXd& x) const {
    return std::abs(x(0)) <= safe_theta && x.norm() <= safe_norm;
  }
  bool unsafe(const VectorXd& x) const {
    return std::abs(x(0)) >= unsafe_theta || x.norm() >= unsafe_norm;
  }

  double safe_theta, safe_norm, unsafe_theta, unsafe_norm;
};

/// Height floor plus norm ball, used by the lander and the 3D quadrotor.
struct HeightNormSets {
  HeightNormSets(const KeyValueFile& kv, int height_index)
      : index(height_index),
        safe_min_height(kv.get_real("safe_min_height")),
        safe_norm(kv.get_real("safe_norm")),
        unsafe_max_height(kv.get_real("unsafe_max_height")),
        unsafe_norm(kv.get_real("unsafe_norm")) {}

  bool safe(const VectorXd& x) const {
    return x(index) >= safe_min_height && x.norm() <= safe_norm;
  }
  bool unsafe(const VectorXd& x) const {
    return x(index) <= unsafe_max_height || x.norm() >= unsafe_norm;
  }

  int index;
  double safe_min_height, safe_norm, unsafe_max_height, unsafe_norm;
};

class Pendulum final : public System {
 public:
  explicit Pendulum(const KeyValueFile& kv)
      : System(kv), sets_(kv), m_(param("mass")), l_(param("length")), g_(param("gravity")) {
    inertia_ = m_ * l_ * l_;
  }

 protected:
  VectorXd drift(const VectorXd& x, double) const override {
    VectorXd f(2);
    f << x(1), -(m_ * g_ * l_ / inertia_) * std::sin(x(0));
    return f;
  }
  MatrixXd input_matrix(const VectorXd&, double) const override {
    MatrixXd g = MatrixXd::Zero(2, 1);
    g(1, 0) = 1.0 / inertia_;
    return g;
  }
  bool safe_predicate(const VectorXd& x) const override { return sets_.safe(x); }
  bool unsafe_predicate(const VectorXd& x) const override { return sets_.unsafe(x); }

 private:
  AngleNormSets sets_;
  double m_, l_, g_, inertia_;
};

class NonaffinePendulum final : public System {
 public:
  explicit NonaffinePendulum(const KeyValueFile& kv)
      : System(kv), sets_(kv), quad_gain_(param("quad_gain")) {}

  bool control_affine() const override { return false; }

 protected:
  VectorXd vector_field(const VectorXd& x, const VectorXd& u, double) const override {
    VectorXd f(2);
    f << x(1), -std::sin(x(0)) + u(0) + quad_gain_ * u(0) * std::abs(u(0));
    return f;
  }
  bool safe_predicate(const VectorXd& x) const override { return sets_.safe(x); }
  bool unsafe_predicate(const VectorXd& x) const override { return sets_.unsafe(x); }

 private:
  AngleNormSets sets_;
  double quad_gain_;
};

/// Time-varying reference shared by both car models.
struct ReferencePath {
  explicit ReferencePath(const KeyValueFile& kv)
      : v_ref(kv.get_real("v_ref")),
        a_ref(kv.get_real("a_ref")),
        omega_amp(kv.get_real("omega_ref_amp")),
        omega_freq(kv.get_real("omega_ref_freq")) {}

  double omega(double t) const { return omega_amp * std::sin(omega_freq * t); }

  double v_ref, a_ref, omega_amp, omega_freq;
};

class CarKinematic final : public System {
 public:
  explicit CarKinematic(const KeyValueFile& kv)
      : System(kv), ref_(kv), wheelbase_(param("lf") + param("lr")) {}

 protected:
  VectorXd drift(const VectorXd& x, double t) const override {
    const double w = ref_.omega(t);
    const double v = x(3) + ref_.v_ref;
    VectorXd f(5);
    f << v * std::cos(x(4)) - ref_.v_ref + w * x(1),
        v * std::sin(x(4)) - w * x(0),
        0.0,
        -ref_.a_ref,
        v / wheelbase_ * std::tan(x(2)) - w;
    return f;
  }
  MatrixXd input_matrix(const VectorXd&, double) const override {
    MatrixXd g = MatrixXd::Zero(5, 2);
    g(2, 0) = 1.0;
    g(3, 1) = 1.0;
    return g;
  }
  bool safe_predicate(const VectorXd&) const override { return true; }
  bool unsafe_predicate(const VectorXd&) const override { return false; }

 private:
  ReferencePath ref_;
  double wheelbase_;
};

class CarSideslip final : public System {
 public:
  explicit CarSideslip(const KeyValueFile& kv)
      : System(kv),
        ref_(kv),
        m_(param("mass")),
        iz_(param("inertia_z")),
        lf_(param("lf")),
        lr_(param("lr")),
        csf_(param("c_sf")),
        csr_(param("c_sr")),
        mu_(param("mu")),
        g_(param("gravity")) {}

 protected:
  VectorXd drift(const VectorXd& x, double t) const override {
    const double w = ref_.omega(t);
    const double v = x(3) + ref_.v_ref;
    const double delta = x(2), psi_e = x(4), psi_dot_e = x(5), beta = x(6);
    const double L = lr_ + lf_;
    const double yaw_scale = mu_ * m_ / (iz_ * L);
    const double psi_ddot =
        -yaw_scale / v * (lf_ * lf_ * csf_ * g_ * lr_ + lr_ * lr_ * csr_ * g_ * lf_) *
            (psi_dot_e + w) +
        yaw_scale * (lr_ * csr_ * g_ * lf_ - lf_ * csf_ * g_ * lr_) * beta +
        yaw_scale * (lf_ * csf_ * g_ * lr_) * delta;
    const double beta_dot =
        (mu_ / (v * v * L) * (csr_ * g_ * lf_ * lr_ - csf_ * g_ * lr_ * lf_) - 1.0) *
            (psi_dot_e - w) -
        mu_ / (v * L) * (csr_ * g_ * lf_ + csf_ * g_ * lr_) * beta +
        mu_ / (v * L) * (csf_ * g_ * lr_) * delta;
    VectorXd f(7);
    f << v * std::cos(psi_e) - ref_.v_ref + w * x(1),
        v * std::sin(psi_e) - w * x(0),
        0.0,
        0.0,
        psi_dot_e,
        psi_ddot,
        beta_dot;
    return f;
  }
  MatrixXd input_matrix(const VectorXd&, double) const override {
    MatrixXd g = MatrixXd::Zero(7, 2);
    g(2, 0) = 1.0;
    g(3, 1) = 1.0;
    return g;
  }
  bool safe_predicate(const VectorXd&) const override { return true; }
  bool unsafe_predicate(const VectorXd&) const override { return false; }

 private:
  ReferencePath ref_;
  double m_, iz_, lf_, lr_, csf_, csr_, mu_, g_;
};

class Segway final : public System {
 public:
  explicit Segway(const KeyValueFile& kv)
      : System(kv),
        M_(param("base_mass")),
        m_(param("body_mass")),
        J_(param("body_inertia")),
        l_(param("com_distance")),
        g_(param("gravity")),
        obstacle_radius_(param("obstacle_radius")),
        safe_radius_(param("safe_radius")) {
    const auto lam = kv.get_reals("lambda");
    if (lam.size() != 9) throw ConfigError("lambda", "expected 9 values");
    for (int i = 0; i < 9; ++i) lambda_[i] = lam[i];
    const auto c = kv.get_reals("obstacle_center");
    if (c.size() != 2) throw ConfigError("obstacle_center", "expected 2 values");
    cx_ = c[0];
    cy_ = c[1];
    total_mass_ = M_ + m_;
    total_inertia_ = J_ + m_ * l_ * l_;
    coupling_ = total_mass_ * total_inertia_ / (m_ * m_ * l_ * l_);
  }

 protected:
  VectorXd drift(const VectorXd& x, double) const override {
    const double th = x(1), v = x(2), w = x(3);
    const double s = std::sin(th), c = std::cos(th);
    const auto& L = lambda_;
    const double den_v = c - coupling_ + L[8];
    const double den_w = c * c - coupling_ + L[8];
    VectorXd f(4);
    f << v, w,
        (g_ * s * c + L[0] * v * c + L[1] * v - l_ * w * w * s) / den_v,
        (L[2] * v * c + L[3] * v - total_mass_ * g_ / (m_ * l_) * s - w * w * s * c) / den_w;
    return f;
  }
  MatrixXd input_matrix(const VectorXd& x, double) const override {
    const double c = std::cos(x(1));
    const auto& L = lambda_;
    const double den = c * c - coupling_ + L[8];
    MatrixXd g = MatrixXd::Zero(4, 1);
    g(2, 0) = (L[5] / total_mass_) * (L[4] + c) / den;
    g(3, 0) = (L[7] * l_ / total_inertia_) * (c + L[6]) / den;
    return g;
  }
  bool safe_predicate(const VectorXd& x) const override {
    return top_distance(x) >= safe_radius_;
  }
  bool unsafe_predicate(const VectorXd& x) const override {
    return top_distance(x) <= obstacle_radius_;
  }

 private:
  double top_distance(const VectorXd& x) const {
    const double px = x(0) + std::sin(x(1));
    const double py = std::cos(x(1));
    return std::hypot(px - cx_, py - cy_);
  }

  double M_, m_, J_, l_, g_, obstacle_radius_, safe_radius_;
  double lambda_[9];
  double cx_ = 0.0, cy_ = 1.0;
  double total_mass_, total_inertia_, coupling_;
};

class NeuralLander final : public System {
 public:
  explicit NeuralLander(const KeyValueFile& kv)
      : System(kv),
        sets_(kv, 2),
        m_(param("mass")),
        g_(param("gravity")),
        ge_gain_(param("ground_effect_gain")),
        ge_height_(param("ground_effect_height")) {}

 protected:
  VectorXd drift(const VectorXd& x, double) const override {
    double fa3 = 0.0;
    if (ge_gain_ != 0.0) fa3 = -ge_gain_ / (x(2) + ge_height_);
    VectorXd f(6);
    f << x(3), x(4), x(5), 0.0, 0.0, fa3 / m_ - g_;
    return f;
  }
  MatrixXd input_matrix(const VectorXd&, double) const override {
    MatrixXd g = MatrixXd::Zero(6, 3);
    g.bottomRows(3).diagonal().setConstant(1.0 / m_);
    return g;
  }
  bool safe_predicate(const VectorXd& x) const override { return sets_.safe(x); }
  bool unsafe_predicate(const VectorXd& x) const override { return sets_.unsafe(x); }

 private:
  HeightNormSets sets_;
  double m_, g_, ge_gain_, ge_height_;
};

class Quad2d final : public System {
 public:
  explicit Quad2d(const KeyValueFile& kv)
      : System(kv),
        m_(param("mass")),
        inertia_(param("inertia")),
        r_(param("arm_length")),
        g_(param("gravity")),
        offset_(param("safe_offset")) {
    const auto circles = kv.get_reals("obstacle_circles", {});
    if (circles.size() % 3 != 0) {
      throw ConfigError("obstacle_circles", "expected triples (cx, cz, r)");
    }
    for (std::size_t i = 0; i < circles.size(); i += 3) {
      if (!(circles[i + 2] > 0.0)) throw ConfigError("obstacle_circles", "radius must be > 0");
      circles_.push_back({circles[i], circles[i + 1], circles[i + 2]});
    }
    const auto boxes = kv.get_reals("obstacle_boxes", {});
    if (boxes.size() % 4 != 0) {
      throw ConfigError("obstacle_boxes", "expected quadruples (xmin, zmin, xmax, zmax)");
    }
    for (std::size_t i = 0; i < boxes.size(); i += 4) {
      if (!(boxes[i] < boxes[i + 2] && boxes[i + 1] < boxes[i + 3])) {
        throw ConfigError("obstacle_boxes", "box minimum must be below maximum");
      }
      boxes_.push_back({boxes[i], boxes[i + 1], boxes[i + 2], boxes[i + 3]});
    }
  }

 protected:
  VectorXd drift(const VectorXd& x, double) const override {
    VectorXd f(6);
    f << x(3), x(4), x(5), 0.0, -g_, 0.0;
    return f;
  }
  MatrixXd input_matrix(const VectorXd& x, double) const override {
    const double s = std::sin(x(2)), c = std::cos(x(2));
    MatrixXd g = MatrixXd::Zero(6, 2);
    g(3, 0) = g(3, 1) = s / m_;
    g(4, 0) = g(4, 1) = c / m_;
    g(5, 0) = r_ / inertia_;
    g(5, 1) = -r_ / inertia_;
    return g;
  }
  // Signed clearance to the nearest obstacle (negative inside).
  double clearance(const VectorXd& x) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : circles_) {
      best = std::min(best, std::hypot(x(0) - c.cx, x(1) - c.cz) - c.r);
    }
    for (const auto& b : boxes_) {
      const double dx = std::max({b.xmin - x(0), 0.0, x(0) - b.xmax});
      const double dz = std::max({b.zmin - x(1), 0.0, x(1) - b.zmax});
      double d = std::hypot(dx, dz);
      if (d == 0.0) {
        d = -std::min({x(0) - b.xmin, b.xmax - x(0), x(1) - b.zmin, b.zmax - x(1)});
      }
      best = std::min(best, d);
    }
    return best;
  }
  bool safe_predicate(const VectorXd& x) const override { return clearance(x) >= offset_; }
  bool unsafe_predicate(const VectorXd& x) const override { return clearance(x) <= 0.0; }

 private:
  struct Circle { double cx, cz, r; };
  struct Box { double xmin, zmin, xmax, zmax; };

  double m_, inertia_, r_, g_, offset_;
  std::vector<Circle> circles_;
  std::vector<Box> boxes_;
};

class Quad3d final : public System {
 public:
  explicit Quad3d(const KeyValueFile& kv)
      : System(kv), sets_(kv, 2), m_(param("mass")), g_(param("gravity")) {}

 protected:
  VectorXd drift(const VectorXd& x, double) const override {
    VectorXd f = VectorXd::Zero(9);
    f.head(3) = x.segment(3, 3);
    f(5) = -g_;
    return f;
  }
  MatrixXd input_matrix(const VectorXd& x, double) const override {
    const double phi = x(6), theta = x(7);
    MatrixXd g = MatrixXd::Zero(9, 4);
    g(3, 0) = -std::sin(theta) / m_;
    g(4, 0) = std::cos(theta) * std::sin(phi) / m_;
    g(5, 0) = std::cos(theta) * std::cos(phi) / m_;
    g(6, 1) = g(7, 2) = g(8, 3) = 1.0;
    return g;
  }
  bool safe_predicate(const VectorXd& x) const override { return sets_.safe(x); }
  bool unsafe_predicate(const VectorXd& x) const override { return sets_.unsafe(x); }

 private:
  HeightNormSets sets_;
  double m_, g_;
};

class LinearScalar final : public System {
 public:
  explicit LinearScalar(const KeyValueFile& kv)
      : System(kv),
        a_(param("a")),
        b_(param("b")),
        safe_radius_(param("safe_radius")),
        unsafe_radius_(param("unsafe_radius")) {}

 protected:
  VectorXd drift(const VectorXd& x, double) const override { return a_ * x; }
  MatrixXd input_matrix(const VectorXd&, double) const override {
    return MatrixXd::Constant(1, 1, b_);
  }
  bool safe_predicate(const VectorXd& x) const override {
    return std::abs(x(0)) <= safe_radius_;
  }
  bool unsafe_predicate(const VectorXd& x) const override {
    return std::abs(x(0)) >= unsafe_radius_;
  }

 private:
  double a_, b_, safe_radius_, unsafe_radius_;
};

template <class T>
SystemPtr build(const KeyValueFile& kv) {
  return std::make_shared<const T>(kv);
}

}  // namespace

std::vector<std::string> builtin_system_names() {
  std::vector<std::string> names;
  for (const auto& [name, text] : builtin_table()) names.push_back(name);
  return names;
}

const std::string& builtin_constants_text(const std::string& name) {
  const auto& table = builtin_table();
  const auto it = table.find(name);
  if (it == table.end()) throw ConfigError("system", "unknown system '" + name + "'");
  return it->second;
}

SystemPtr make_system(const KeyValueFile& constants) {
  using Factory = std::function<SystemPtr(const KeyValueFile&)>;
  static const std::map<std::string, Factory> factories = {
      {"pendulum", build<Pendulum>},
      {"nonaffine_pendulum", build<NonaffinePendulum>},
      {"car_kinematic", build<CarKinematic>},
      {"car_sideslip", build<CarSideslip>},
      {"segway", build<Segway>},
      {"neural_lander", build<NeuralLander>},
      {"quad2d", build<Quad2d>},
      {"quad3d", build<Quad3d>},
      {"linear_scalar", build<LinearScalar>},
  };
  const std::string kind = constants.get_string("system");
  const auto it = factories.find(kind);
  if (it == factories.end()) throw ConfigError("system", "unknown system '" + kind + "'");
  SystemPtr sys = it->second(constants);
  if (!sys->in_safe_set(sys->goal())) {
    throw ConfigError("goal", "goal state lies outside the safe set");
  }
  return sys;
}

SystemPtr load_system(const std::string& name, const KeyValueFile& overrides) {
  KeyValueFile kv = KeyValueFile::parse(builtin_constants_text(name), "systems/" + name + ".conf");
  for (const auto& key : overrides.keys()) kv.set(key, overrides.raw(key));
  return make_system(kv);
}

SystemPtr load_system_file(const std::filesystem::path& path) {
  return make_system(KeyValueFile::load(path));
}

}  // namespace s2diff
