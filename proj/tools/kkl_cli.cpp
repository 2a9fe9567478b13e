// kkl: train, simulate and certify learned KKL observers.
//
//   kkl train-pinv      --config cfg.json [--seed N] [--out DIR]
//   kkl train-observer  --config cfg.json --pinv DIR/pinv.json [--seed N] [--out DIR]
//   kkl simulate        --archive DIR/observer.json [--sigma-w S] [--sigma-v S] [--seed N]
//                       [--x0 a,b] [--z0 manifold|a,b,...] [--horizon T] [--dt H]
//                       [--hold zero|linear] [--out DIR]
//   kkl linear-oracle   --A "a,b;c,d" --C "c1,c2" --Q "..." --R "..." [--T "..."] [--out DIR]
//   kkl certify         --archive DIR/observer.json
//
// Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kkl/archive.hpp"
#include "kkl/errors.hpp"
#include "kkl/observer.hpp"
#include "kkl/riccati.hpp"
#include "kkl/simlab.hpp"

namespace fs = std::filesystem;
using namespace kkl;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kNumeric = 2;

fs::path output_dir(const std::string& flag, const std::string& from_config) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  if (const char* env = std::getenv("KKL_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return ".";
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse " + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

VectorXd parse_vector(const std::string& text, const std::string& what) {
  const auto v = parse_list(text, what);
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// "a,b;c,d" -> [[a,b],[c,d]]
MatrixXd parse_matrix(const std::string& text, const std::string& what) {
  std::vector<std::vector<double>> rows;
  std::stringstream ss(text);
  std::string row;
  while (std::getline(ss, row, ';')) rows.push_back(parse_list(row, what));
  if (rows.empty()) throw ConfigError(what + " is empty");
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ConfigError(what + " has ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

std::ofstream open_csv(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

std::string fmt_matrix(const MatrixXd& m) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    os << "  [";
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? ", " : "") << m(i, j);
    os << "]\n";
  }
  return os.str();
}

void print_certificate(const CertificateReport& r) {
  std::cout << std::setprecision(10) << "lambda_max(M): " << r.max_eig_M << "\n"
            << "min eig P:     " << r.min_eig_P << "\n"
            << "min Lambda:    " << r.min_lambda << "\n"
            << "decay rate:    " << r.decay_rate << "\n"
            << "y-Lipschitz:   " << r.lipschitz_y << "\n"
            << "certificate:   " << (r.passed ? "PASS" : "FAIL") << "\n";
}

// --- train-pinv ------------------------------------------------------------

struct PinvArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_train_pinv(const PinvArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) cfg.pinv_train.seed = *a.seed;
  const SystemPtr sys = build_system(cfg);
  const auto data = sample_domain(*sys, cfg.dataset_size, cfg.dataset_seed);

  TrainConfig tc;
  tc.epochs = cfg.pinv_train.epochs;
  tc.batch_size = cfg.pinv_train.batch_size;
  tc.adam.learning_rate = cfg.pinv_train.learning_rate;
  tc.lr_decay = cfg.pinv_train.lr_decay;
  tc.seed = cfg.pinv_train.seed;
  SpdField init = SpdField::create(sys->nx(), cfg.pinv_hidden, cfg.mu, cfg.pinv_train.seed);
  const PinvTrainResult res = train_pinv(*sys, cfg.weights, data, std::move(init), tc);

  const fs::path dir = output_dir(a.out, cfg.out_dir);
  PinvArchive arch{cfg.source, res.field, res.initial_loss, res.loss_history};
  write_json(dir / "pinv.json", to_json(arch));
  auto csv = open_csv(dir / "pinv_loss.csv");
  csv << "epoch,loss\n";
  for (std::size_t e = 0; e < res.loss_history.size(); ++e) csv << e + 1 << ',' << res.loss_history[e] << '\n';

  std::cout << "initial loss " << res.initial_loss << ", final epoch loss "
            << (res.loss_history.empty() ? res.initial_loss : res.loss_history.back()) << "\n"
            << "wrote " << (dir / "pinv.json").string() << "\n";
  return kOk;
}

// --- train-observer --------------------------------------------------------

struct ObserverArgs {
  std::string config;
  std::string pinv;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_train_observer(const ObserverArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) cfg.observer_train.seed = *a.seed;
  const SystemPtr sys = build_system(cfg);
  const PinvArchive pinv = load_pinv(a.pinv);
  if (pinv.field.nx() != sys->nx())
    throw ConfigError("pinv archive has nx = " + std::to_string(pinv.field.nx()) + " but the config system has nx = " +
                      std::to_string(sys->nx()));
  const auto data = sample_domain(*sys, cfg.dataset_size, cfg.dataset_seed);

  ObserverTrainConfig oc;
  oc.epochs = cfg.observer_train.epochs;
  oc.batch_size = cfg.observer_train.batch_size;
  oc.adam.learning_rate = cfg.observer_train.learning_rate;
  oc.lr_decay = cfg.observer_train.lr_decay;
  oc.loss_weights = cfg.loss_weights;
  oc.seed = cfg.observer_train.seed;
  ObserverBundle init = ObserverBundle::create(sys->nx(), sys->ny(), cfg.latent, cfg.epsilon, cfg.T_hidden,
                                               cfg.tau_hidden, cfg.observer_train.seed);
  const ObserverTrainResult res =
      train_observer(*sys, pinv.field, cfg.weights, data, PerturbationRule{cfg.radius}, std::move(init), oc);

  const fs::path dir = output_dir(a.out, cfg.out_dir);
  ObserverArchive arch{cfg.source, res.bundle, pinv.field, certify(res.bundle.phi)};
  write_json(dir / "observer.json", to_json(arch));
  auto csv = open_csv(dir / "observer_loss.csv");
  csv << "epoch,pde,inv,opt,total,max_eig_M\n";
  for (std::size_t e = 0; e < res.history.size(); ++e) {
    const LossTerms& t = res.history[e];
    csv << e + 1 << ',' << t.pde << ',' << t.inv << ',' << t.opt << ',' << t.total() << ','
        << res.checkpoints[e].max_eig_M << '\n';
  }
  for (const auto& c : res.checkpoints)
    if (!c.passed) {
      std::cerr << "error: certificate failed at a checkpoint\n";
      return kNumeric;
    }
  if (res.diverged) {
    std::cerr << "error: " << res.diagnostic << "\nwrote last checkpoint to " << (dir / "observer.json").string() << "\n";
    return kNumeric;
  }
  if (!res.history.empty()) {
    const LossTerms& t = res.history.back();
    std::cout << "final epoch losses: pde " << t.pde << ", inv " << t.inv << ", opt " << t.opt << "\n";
  }
  std::cout << "wrote " << (dir / "observer.json").string() << "\n";
  return kOk;
}

// --- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string archive;
  std::string out;
  std::optional<double> sigma_w;
  std::optional<double> sigma_v;
  std::optional<double> horizon;
  std::optional<double> dt;
  std::optional<std::uint64_t> seed;
  std::string x0;
  std::string z0;
  std::string hold = "zero";
};

int run_simulate(const SimulateArgs& a) {
  const ObserverArchive arch = load_observer(a.archive);
  const ExperimentConfig cfg = parse_config(arch.config);
  const SystemPtr sys = build_system(cfg);
  const ObserverBundle& b = arch.bundle;
  if (b.nx != sys->nx() || b.ny != sys->ny()) throw ConfigError("archive dimensions do not match its system");

  SimulationConfig s = cfg.simulation;
  if (a.sigma_w) s.sigma_w = *a.sigma_w;
  if (a.sigma_v) s.sigma_v = *a.sigma_v;
  if (a.horizon) s.horizon = *a.horizon;
  if (a.dt) s.dt = *a.dt;
  if (a.seed) s.seed = *a.seed;
  if (!a.x0.empty()) s.x0 = parse_vector(a.x0, "--x0");
  if (s.x0.size() == 0) {
    const Box& d = sys->domain();
    s.x0 = d.center() + 0.25 * (d.upper - d.lower);
  }
  if (s.x0.size() != sys->nx()) throw ConfigError("--x0 needs " + std::to_string(sys->nx()) + " entries");
  if (!(s.horizon > s.dt)) throw ConfigError("--horizon must exceed the step size");
  if (s.transient_cut >= s.horizon) throw ConfigError("horizon must exceed the transient cut");
  VectorXd z0 = s.z0.value_or(VectorXd::Zero(b.nz()));
  if (a.z0 == "manifold") {
    z0 = b.immersion(s.x0);
  } else if (!a.z0.empty()) {
    z0 = parse_vector(a.z0, "--z0");
  }
  if (z0.size() != b.nz()) throw ConfigError("--z0 needs " + std::to_string(b.nz()) + " entries");

  const int steps = static_cast<int>(std::llround(s.horizon / s.dt));
  const Trajectory tr = simulate_plant(*sys, s.x0, s.dt, steps, NoiseSpec{s.sigma_w, s.sigma_v, s.seed});
  const EstimateTrajectory est =
      rollout_observer(b, tr.outputs, z0, s.dt, a.hold == "linear" ? InputHold::Linear : InputHold::Zero);
  const MetricsReport m = metrics(tr.times, tr.states, est.estimates, s.transient_cut, sys.get(), tr.outputs);

  // raw first output used as an estimate of the first state
  double raw_sq = 0.0;
  for (std::size_t k = 0; k < tr.times.size(); ++k)
    if (tr.times[k] >= s.transient_cut) raw_sq += std::pow(tr.outputs[k](0) - tr.states[k](0), 2);
  const double raw_rmse = std::sqrt(raw_sq / static_cast<double>(m.samples));

  const fs::path dir = output_dir(a.out, cfg.out_dir);
  auto csv = open_csv(dir / "trajectory.csv");
  csv << 't';
  for (int i = 1; i <= b.nx; ++i) csv << ",x" << i;
  for (int i = 1; i <= b.nx; ++i) csv << ",xhat" << i;
  for (int i = 1; i <= b.ny; ++i) csv << ",y" << i;
  for (int i = 1; i <= b.nz(); ++i) csv << ",z" << i;
  csv << '\n';
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    csv << tr.times[k];
    for (auto* v : {&tr.states[k], &est.estimates[k], &tr.outputs[k], &est.latent[k]})
      for (Eigen::Index i = 0; i < v->size(); ++i) csv << ',' << (*v)(i);
    csv << '\n';
  }

  const Json report{{"rmse_per_state", vector_to_json(m.rmse_per_state)},
                    {"rmse_total", m.rmse_total},
                    {"output_rmse", m.output_rmse},
                    {"raw_output_rmse_x1", raw_rmse},
                    {"samples", m.samples},
                    {"transient_cut", s.transient_cut},
                    {"sigma_w", s.sigma_w},
                    {"sigma_v", s.sigma_v},
                    {"seed", s.seed},
                    {"dt", s.dt},
                    {"hold", a.hold},
                    {"horizon", s.horizon}};
  write_json(dir / "metrics.json", report);
  std::cout << report.dump(2) << "\n";
  return kOk;
}

// --- linear-oracle ---------------------------------------------------------

struct OracleArgs {
  std::string A, C, Q, R, T;
  std::string lower, upper;
  std::string out;
  double epsilon = 0.5;
};

int run_linear_oracle(const OracleArgs& a) {
  LinearSystem lin{parse_matrix(a.A, "--A"), parse_matrix(a.C, "--C")};
  try {
    lin.validate();
  } catch (const DimensionError& e) {
    throw ConfigError(e.what());
  }
  CostWeights w{parse_matrix(a.Q, "--Q"), parse_matrix(a.R, "--R")};
  try {
    w.validate(lin.nx(), lin.ny());
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const MatrixXd T = a.T.empty() ? MatrixXd::Identity(lin.nx(), lin.nx()) : parse_matrix(a.T, "--T");
  if (T.rows() != lin.nx() || T.cols() != lin.nx()) throw ConfigError("--T must be nx x nx");

  const OptimalGain og = optimal_gain(lin, w);
  const MatrixXd F = matched_latent_matrix(lin, og.K, T);
  const MatrixXd G = T * og.K;
  const double are_res = are_residual(lin, w, og.Sigma);
  const double syl_res = (T * lin.A_mat - F * T - G * lin.C_mat).norm();
  // the immersion recovered from (F, G) must be T itself; with a zero gain F
  // keeps the spectrum of A and the immersion is not unique
  Json immersion_gap = nullptr;
  try {
    immersion_gap = (sylvester_solve(lin.A_mat, F, G, lin.C_mat) - T).norm();
  } catch (const NumericError&) {
  }

  std::cout << "Sigma:\n" << fmt_matrix(og.Sigma) << "K_opt:\n" << fmt_matrix(og.K) << "Psi_opt:\n"
            << fmt_matrix(og.Psi) << "F_matched:\n" << fmt_matrix(F) << "G_matched:\n" << fmt_matrix(G)
            << std::setprecision(3) << "ARE residual:       " << are_res << "\n"
            << "Sylvester residual: " << syl_res << "\n"
            << "immersion gap:      "
            << (immersion_gap.is_null() ? std::string("not unique") : std::to_string(immersion_gap.get<double>())) << "\n";

  const fs::path dir = output_dir(a.out, "");
  const Json report{{"Sigma", matrix_to_json(og.Sigma)},      {"K_opt", matrix_to_json(og.K)},
                    {"Psi_opt", matrix_to_json(og.Psi)},      {"F_matched", matrix_to_json(F)},
                    {"G_matched", matrix_to_json(G)},         {"T", matrix_to_json(T)},
                    {"are_residual", are_res},                {"sylvester_residual", syl_res},
                    {"immersion_gap", immersion_gap}};
  write_json(dir / "linear_oracle.json", report);

  // matched observer archive, simulatable on the same linear plant
  VectorXd lo = a.lower.empty() ? VectorXd::Constant(lin.nx(), -2.0) : parse_vector(a.lower, "--lower");
  VectorXd hi = a.upper.empty() ? VectorXd::Constant(lin.nx(), 2.0) : parse_vector(a.upper, "--upper");
  if (lo.size() != lin.nx() || hi.size() != lin.nx()) throw ConfigError("--lower/--upper need nx entries");
  Json cfg{{"system", "linear"},
           {"linear", {{"A", matrix_to_json(lin.A_mat)}, {"C", matrix_to_json(lin.C_mat)}}},
           {"domain", {{"lower", vector_to_json(lo)}, {"upper", vector_to_json(hi)}}},
           {"weights", {{"Q", matrix_to_json(w.Q)}, {"R", matrix_to_json(w.R)}}},
           {"latent", {{"nz", lin.nx()}, {"nq", 0}, {"epsilon", a.epsilon}}}};
  try {
    parse_config(cfg);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("--lower/--upper: ") + e.what());
  }
  ObserverBundle b = matched_linear_bundle(lin, w, T, a.epsilon);
  ObserverArchive arch{cfg, b, std::nullopt, certify(b.phi)};
  write_json(dir / "observer.json", to_json(arch));
  std::cout << "wrote " << (dir / "linear_oracle.json").string() << " and " << (dir / "observer.json").string() << "\n";
  return kOk;
}

// --- certify ---------------------------------------------------------------

int run_certify(const std::string& path) {
  const Json doc = read_json(path);
  if (archive_kind(doc) != "observer") throw ConfigError("certify needs an observer archive");
  ObserverArchive arch;
  try {
    arch = observer_from_json(doc);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  print_certificate(arch.certificate);
  return arch.certificate.passed ? kOk : kNumeric;
}

template <class F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned KKL observers: training, simulation, certification"};
  app.require_subcommand(1);

  PinvArgs pa;
  auto* pinv = app.add_subcommand("train-pinv", "fit the inverse-information field to the Riccati PDE");
  pinv->add_option("--config", pa.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  pinv->add_option("--seed", pa.seed, "initialization and shuffling seed");
  pinv->add_option("--out", pa.out, "output directory");

  ObserverArgs oa;
  auto* obs = app.add_subcommand("train-observer", "train T, tau and the latent dynamics with the field frozen");
  obs->add_option("--config", oa.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  obs->add_option("--pinv", oa.pinv, "archive written by train-pinv")->required()->check(CLI::ExistingFile);
  obs->add_option("--seed", oa.seed, "initialization, shuffling and perturbation seed");
  obs->add_option("--out", oa.out, "output directory");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "run the plant and the observer, write trajectory and metrics");
  sim->add_option("--archive", sa.archive, "observer archive")->required()->check(CLI::ExistingFile);
  sim->add_option("--sigma-w", sa.sigma_w, "process noise standard deviation")->check(CLI::NonNegativeNumber);
  sim->add_option("--sigma-v", sa.sigma_v, "measurement noise standard deviation")->check(CLI::NonNegativeNumber);
  sim->add_option("--seed", sa.seed, "noise seed");
  sim->add_option("--horizon", sa.horizon, "simulated time")->check(CLI::PositiveNumber);
  sim->add_option("--x0", sa.x0, "plant initial state, comma separated");
  sim->add_option("--z0", sa.z0, "observer initial state: 'manifold' or comma separated");
  sim->add_option("--hold", sa.hold, "output reconstruction between samples")->check(CLI::IsMember({"zero", "linear"}));
  sim->add_option("--dt", sa.dt, "step size")->check(CLI::PositiveNumber);
  sim->add_option("--out", sa.out, "output directory");

  OracleArgs la;
  auto* lino = app.add_subcommand("linear-oracle", "optimal gain and matched linear observer");
  lino->add_option("--A", la.A, "state matrix, rows separated by ';'")->required();
  lino->add_option("--C", la.C, "output matrix")->required();
  lino->add_option("--Q", la.Q, "process weight")->required();
  lino->add_option("--R", la.R, "measurement weight")->required();
  lino->add_option("--T", la.T, "immersion matrix (default identity)");
  lino->add_option("--lower", la.lower, "domain lower corner for the archive (default -2)");
  lino->add_option("--upper", la.upper, "domain upper corner for the archive (default 2)");
  lino->add_option("--epsilon", la.epsilon, "contraction margin")->check(CLI::PositiveNumber);
  lino->add_option("--out", la.out, "output directory");

  std::string cert_path;
  auto* cert = app.add_subcommand("certify", "re-check the contraction certificate of an archive");
  cert->add_option("--archive", cert_path, "observer archive")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*pinv) return guarded([&] { return run_train_pinv(pa); });
  if (*obs) return guarded([&] { return run_train_observer(oa); });
  if (*sim) return guarded([&] { return run_simulate(sa); });
  if (*lino) return guarded([&] { return run_linear_oracle(la); });
  if (*cert) return guarded([&] { return run_certify(cert_path); });
  return kUsage;
}
