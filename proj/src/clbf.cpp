#include "s2diff/clbf.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "s2diff/errors.hpp"
#include "s2diff/keyvalue.hpp"

namespace s2diff {
namespace {

double relu(double z) { return z > 0.0 ? z : 0.0; }
double step_fn(double z) { return z > 0.0 ? 1.0 : 0.0; }
double sign_fn(double z) { return z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0); }

/// Evaluates the loss and, when `grad` is non-null, accumulates its
/// parameter gradient.
double loss_impl(const MlpCertificate& cert, const CertificateConfig& cfg, const System& sys,
                 const std::vector<LabeledState>& batch, MlpParams* grad) {
  cfg.validate();
  const int n = sys.state_dim();
  if (cert.input_dim() != n) {
    throw ContractError("clbf_loss: certificate input dimension " +
                        std::to_string(cert.input_dim()) + " != state dimension " +
                        std::to_string(n));
  }
  if (batch.empty()) return 0.0;
  const auto N = static_cast<Eigen::Index>(batch.size());
  const bool need_lie = cfg.alpha1 > 0.0;
  const bool need_succ = cfg.alpha2 > 0.0;

  Eigen::MatrixXd X(n, N);
  Eigen::MatrixXd F = Eigen::MatrixXd::Zero(n, N);
  Eigen::MatrixXd Xs = Eigen::MatrixXd::Zero(n, N);
  std::vector<char> has_stability(batch.size(), 0);
  for (Eigen::Index b = 0; b < N; ++b) {
    const LabeledState& s = batch[b];
    if (s.x.size() != n) throw ContractError("clbf_loss: sample state has wrong dimension");
    X.col(b) = s.x;
    if (s.label == StateLabel::goal) continue;
    if (need_lie || need_succ) {
      if (!s.control) {
        throw ContractError("clbf_loss: sample " + std::to_string(b) +
                            " needs a control for the decrease terms");
      }
      has_stability[b] = 1;
    }
    if (need_lie) F.col(b) = sys.dynamics(s.x, *s.control, s.time);
    if (need_succ) {
      if (!s.successor) {
        throw ContractError("clbf_loss: sample " + std::to_string(b) +
                            " has no successor but alpha2 > 0");
      }
      if (s.successor->size() != n) throw ContractError("clbf_loss: successor has wrong dimension");
      Xs.col(b) = *s.successor;
    }
  }

  const ForwardCache cache = cert.forward(X);
  const Eigen::RowVectorXd& V = cache.output;
  Eigen::RowVectorXd lie = Eigen::RowVectorXd::Zero(N);
  if (need_lie) lie = cert.directional_derivatives(cache, F);
  ForwardCache succ_cache;
  Eigen::RowVectorXd Vs = Eigen::RowVectorXd::Zero(N);
  if (need_succ) {
    succ_cache = cert.forward(Xs);
    Vs = succ_cache.output;
  }

  const double h = cfg.discrete_step;
  double total = 0.0;
  Eigen::RowVectorXd dV = Eigen::RowVectorXd::Zero(N);
  Eigen::RowVectorXd dL = Eigen::RowVectorXd::Zero(N);
  Eigen::RowVectorXd dVs = Eigen::RowVectorXd::Zero(N);
  for (Eigen::Index b = 0; b < N; ++b) {
    const StateLabel label = batch[b].label;
    const double v = V(b);
    if (label == StateLabel::goal) {
      total += std::abs(v);
      dV(b) += sign_fn(v);
    }
    total += relu(-v);
    dV(b) -= step_fn(-v);
    if (label == StateLabel::safe || label == StateLabel::goal) {
      total += relu(v - cfg.c);
      dV(b) += step_fn(v - cfg.c);
    } else if (label == StateLabel::unsafe) {
      total += relu(cfg.c - v);
      dV(b) -= step_fn(cfg.c - v);
    }
    if (!has_stability[b]) continue;
    if (need_lie) {
      const double z = lie(b) + cfg.lambda * v + cfg.eps;
      total += cfg.alpha1 * relu(z);
      const double active = cfg.alpha1 * step_fn(z);
      dL(b) += active;
      dV(b) += active * cfg.lambda;
    }
    if (need_succ) {
      const double z = Vs(b) - v + h * (cfg.lambda * v + cfg.eps);
      total += cfg.alpha2 * relu(z);
      const double active = cfg.alpha2 * step_fn(z);
      dVs(b) += active;
      dV(b) += active * (h * cfg.lambda - 1.0);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  if (grad != nullptr) {
    dV *= inv_n;
    dL *= inv_n;
    dVs *= inv_n;
    cert.accumulate_value_param_grad(cache, dV, *grad);
    if (need_lie) cert.accumulate_directional_param_grad(cache, F, dL, *grad);
    if (need_succ) cert.accumulate_value_param_grad(succ_cache, dVs, *grad);
  }
  return total * inv_n;
}

}  // namespace

void CertificateConfig::validate() const {
  if (!(c > 0.0)) throw ConfigError("certificate.c", "must be > 0");
  if (!(lambda > 0.0)) throw ConfigError("certificate.lambda", "must be > 0");
  if (!(eps >= 0.0)) throw ConfigError("certificate.eps", "must be >= 0");
  if (!(alpha1 >= 0.0)) throw ConfigError("certificate.alpha1", "must be >= 0");
  if (!(alpha2 >= 0.0)) throw ConfigError("certificate.alpha2", "must be >= 0");
  if (!(discrete_step > 0.0)) throw ConfigError("certificate.discrete_step", "must be > 0");
}

const char* to_string(StateLabel label) {
  switch (label) {
    case StateLabel::goal: return "goal";
    case StateLabel::safe: return "safe";
    case StateLabel::unsafe: return "unsafe";
    case StateLabel::interior: return "interior";
  }
  return "?";
}

StateLabel label_from_region(Region region) {
  switch (region) {
    case Region::safe: return StateLabel::safe;
    case Region::unsafe: return StateLabel::unsafe;
    case Region::neither: return StateLabel::interior;
  }
  return StateLabel::interior;
}

double clbf_loss(const MlpCertificate& cert, const CertificateConfig& cfg, const System& sys,
                 const std::vector<LabeledState>& batch) {
  return loss_impl(cert, cfg, sys, batch, nullptr);
}

MlpParams clbf_loss_grad(const MlpCertificate& cert, const CertificateConfig& cfg,
                         const System& sys, const std::vector<LabeledState>& batch,
                         double* loss) {
  MlpParams grad = MlpParams::zeros_like(cert.params());
  const double value = loss_impl(cert, cfg, sys, batch, &grad);
  if (loss != nullptr) *loss = value;
  return grad;
}

// Checkpoint layout:
//   s2diff-checkpoint 1
//   layers <n> <h1> ... <1>
//   activation relu
//   biases on|off
//   center none | center <n values>
//   c <c> / lambda / eps / alpha1 / alpha2 / discrete_step / seed
//   W1 <rows> <cols>, then <rows> lines of <cols> values
//   b1 <len>, then one line of <len> values
//   ...
std::string checkpoint_to_string(const Checkpoint& ckpt) {
  std::ostringstream out;
  const auto sizes = ckpt.certificate.layer_sizes();
  out << "s2diff-checkpoint 1\n";
  out << "layers";
  for (int s : sizes) out << ' ' << s;
  out << "\nactivation relu\n";
  out << "biases " << (ckpt.certificate.biases_enabled() ? "on" : "off") << '\n';
  const Eigen::VectorXd& center = ckpt.certificate.center();
  out << "center";
  if (center.size() == 0) out << " none";
  for (Eigen::Index i = 0; i < center.size(); ++i) out << ' ' << format_real(center(i));
  out << '\n';
  out << "c " << format_real(ckpt.config.c) << '\n';
  out << "lambda " << format_real(ckpt.config.lambda) << '\n';
  out << "eps " << format_real(ckpt.config.eps) << '\n';
  out << "alpha1 " << format_real(ckpt.config.alpha1) << '\n';
  out << "alpha2 " << format_real(ckpt.config.alpha2) << '\n';
  out << "discrete_step " << format_real(ckpt.config.discrete_step) << '\n';
  out << "seed " << ckpt.seed << '\n';
  const MlpParams& p = ckpt.certificate.params();
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    const auto& W = p.weights[k];
    out << 'W' << (k + 1) << ' ' << W.rows() << ' ' << W.cols() << '\n';
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      for (Eigen::Index c = 0; c < W.cols(); ++c) out << (c ? " " : "") << format_real(W(r, c));
      out << '\n';
    }
    const auto& b = p.biases[k];
    out << 'b' << (k + 1) << ' ' << b.size() << '\n';
    for (Eigen::Index i = 0; i < b.size(); ++i) out << (i ? " " : "") << format_real(b(i));
    out << '\n';
  }
  return out.str();
}

namespace {

class TokenReader {
 public:
  explicit TokenReader(const std::string& text) : in_(text) {}

  std::string word(const char* what) {
    std::string w;
    if (!(in_ >> w)) throw ConfigError("checkpoint", std::string("truncated before ") + what);
    return w;
  }
  void expect(const std::string& keyword) {
    const std::string w = word(keyword.c_str());
    if (w != keyword) throw ConfigError("checkpoint", "expected '" + keyword + "', got '" + w + "'");
  }
  long long integer(const char* what) {
    const std::string w = word(what);
    try {
      std::size_t used = 0;
      const long long v = std::stoll(w, &used);
      if (used != w.size()) throw std::invalid_argument(w);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("checkpoint", std::string("bad integer for ") + what + ": '" + w + "'");
    }
  }
  double real(const char* what) { return parse_real(word(what), std::string("checkpoint.") + what); }
  std::string rest_of_line() {
    std::string line;
    std::getline(in_, line);
    return line;
  }

 private:
  std::istringstream in_;
};

}  // namespace

Checkpoint checkpoint_from_string(const std::string& text) {
  TokenReader rd(text);
  rd.expect("s2diff-checkpoint");
  if (rd.integer("version") != 1) throw ConfigError("checkpoint", "unsupported version");
  rd.expect("layers");
  std::vector<int> sizes;
  {
    std::istringstream line(rd.rest_of_line());
    int s = 0;
    while (line >> s) sizes.push_back(s);
  }
  if (sizes.size() < 2) throw ConfigError("checkpoint", "need at least two layer sizes");
  rd.expect("activation");
  if (rd.word("activation") != "relu") throw ConfigError("checkpoint", "only relu is supported");
  rd.expect("biases");
  const std::string biases = rd.word("biases");
  if (biases != "on" && biases != "off") throw ConfigError("checkpoint", "biases must be on or off");
  rd.expect("center");
  Eigen::VectorXd center;
  {
    std::istringstream line(rd.rest_of_line());
    std::vector<double> values;
    std::string w;
    while (line >> w) {
      if (w != "none") values.push_back(parse_real(w, "checkpoint.center"));
    }
    if (!values.empty() && static_cast<int>(values.size()) != sizes.front()) {
      throw ConfigError("checkpoint", "center length disagrees with layers");
    }
    center = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  }
  Checkpoint ckpt;
  rd.expect("c");
  ckpt.config.c = rd.real("c");
  rd.expect("lambda");
  ckpt.config.lambda = rd.real("lambda");
  rd.expect("eps");
  ckpt.config.eps = rd.real("eps");
  rd.expect("alpha1");
  ckpt.config.alpha1 = rd.real("alpha1");
  rd.expect("alpha2");
  ckpt.config.alpha2 = rd.real("alpha2");
  rd.expect("discrete_step");
  ckpt.config.discrete_step = rd.real("discrete_step");
  rd.expect("seed");
  ckpt.seed = static_cast<std::uint64_t>(std::stoull(rd.word("seed")));

  MlpParams p = MlpCertificate::zeros(sizes).params();
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    auto& W = p.weights[k];
    rd.expect("W" + std::to_string(k + 1));
    if (rd.integer("rows") != W.rows() || rd.integer("cols") != W.cols()) {
      throw ConfigError("checkpoint", "W" + std::to_string(k + 1) + " shape disagrees with layers");
    }
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = rd.real("weight");
    }
    auto& b = p.biases[k];
    rd.expect("b" + std::to_string(k + 1));
    if (rd.integer("len") != b.size()) {
      throw ConfigError("checkpoint", "b" + std::to_string(k + 1) + " length disagrees with layers");
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rd.real("bias");
  }
  if (!p.all_finite()) throw ConfigError("checkpoint", "non-finite parameter");
  ckpt.certificate = MlpCertificate(std::move(p));
  ckpt.certificate.set_center(std::move(center));
  if (biases == "off") {
    for (const auto& b : ckpt.certificate.params().biases) {
      if (!b.isZero(0.0)) throw ConfigError("checkpoint", "biases are off but nonzero");
    }
    ckpt.certificate.set_biases_enabled(false);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_string(ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace s2diff
