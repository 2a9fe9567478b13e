#include "kkl/archive.hpp"

#include <fstream>
#include <sstream>

#include "kkl/errors.hpp"

namespace kkl {

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

const Json* find(const Json& obj, const std::string& key) {
  if (!obj.is_object()) return nullptr;
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

const Json& require(const Json& obj, const std::string& key, const std::string& path) {
  const Json* j = find(obj, key);
  if (j == nullptr) throw ConfigError("missing required field '" + join(path, key) + "'");
  return *j;
}

template <class T>
T as(const Json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("field '" + field + "' has the wrong type");
  }
}

template <class T>
T get_or(const Json& obj, const std::string& key, const std::string& path, T fallback) {
  const Json* j = find(obj, key);
  return j == nullptr ? fallback : as<T>(*j, join(path, key));
}

StageConfig parse_stage(const Json& obj, const std::string& path, StageConfig s) {
  if (!obj.is_null() && !obj.is_object()) throw ConfigError("field '" + path + "' must be an object");
  s.learning_rate = get_or(obj, "learning_rate", path, s.learning_rate);
  s.batch_size = get_or(obj, "batch_size", path, s.batch_size);
  s.epochs = get_or(obj, "epochs", path, s.epochs);
  s.lr_decay = get_or(obj, "lr_decay", path, s.lr_decay);
  s.seed = get_or(obj, "seed", path, s.seed);
  if (!(s.learning_rate > 0.0)) throw ConfigError("field '" + path + ".learning_rate' must be > 0");
  if (s.batch_size < 1) throw ConfigError("field '" + path + ".batch_size' must be >= 1");
  if (s.epochs < 0) throw ConfigError("field '" + path + ".epochs' must be >= 0");
  if (!(s.lr_decay > 0.0 && s.lr_decay <= 1.0)) throw ConfigError("field '" + path + ".lr_decay' must be in (0, 1]");
  return s;
}

std::vector<int> widths_from(const Json& obj, const std::string& key, const std::string& path, std::vector<int> fallback) {
  auto w = get_or(obj, key, path, fallback);
  for (int v : w)
    if (v < 1) throw ConfigError("field '" + join(path, key) + "' must hold positive widths");
  return w;
}

Json report_to_json(const CertificateReport& r) {
  return Json{{"max_eig_M", r.max_eig_M},   {"min_eig_P", r.min_eig_P},   {"min_lambda", r.min_lambda},
              {"decay_rate", r.decay_rate}, {"lipschitz_y", r.lipschitz_y}, {"passed", r.passed}};
}

Json spec_to_json(const MapSpec& spec, const VectorXd& params) {
  return Json{{"widths", spec.widths}, {"params", std::vector<double>(params.data(), params.data() + params.size())}};
}

std::pair<MapSpec, VectorXd> spec_from_json(const Json& j, const std::string& path) {
  const auto widths = as<std::vector<int>>(require(j, "widths", path), join(path, "widths"));
  MapSpec spec;
  try {
    spec = MapSpec(widths);
  } catch (const DimensionError& e) {
    throw ConfigError("field '" + join(path, "widths") + "': " + e.what());
  }
  const VectorXd p = vector_from_json(require(j, "params", path), join(path, "params"));
  if (p.size() != spec.param_count()) throw ConfigError("field '" + join(path, "params") + "' has the wrong length");
  return {spec, p};
}

Json field_to_json(const SpdField& f) {
  Json j = spec_to_json(f.spec, f.params);
  j["mu"] = f.mu;
  return j;
}

SpdField field_from_json(const Json& j, const std::string& path) {
  SpdField f;
  std::tie(f.spec, f.params) = spec_from_json(j, path);
  f.mu = as<double>(require(j, "mu", path), join(path, "mu"));
  const int n = f.spec.input_dim();
  if (f.spec.output_dim() != n * (n + 1) / 2) throw ConfigError("field '" + path + "' is not a factor map");
  return f;
}

Json weights_to_json(const CostWeights& w) { return Json{{"Q", matrix_to_json(w.Q)}, {"R", matrix_to_json(w.R)}}; }

void check_kind(const Json& doc, const std::string& kind) {
  const std::string k = archive_kind(doc);
  if (k != kind) throw ConfigError("archive holds a '" + k + "' model, expected '" + kind + "'");
  const int v = as<int>(require(doc, "version", ""), "version");
  if (v != kArchiveVersion) throw ConfigError("unsupported archive version " + std::to_string(v));
}

}  // namespace

Json matrix_to_json(const MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const Json& j, const std::string& field) {
  if (j.is_number()) return MatrixXd::Constant(1, 1, j.get<double>());
  if (!j.is_array()) throw ConfigError("field '" + field + "' must be a matrix (array of rows)");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return MatrixXd(0, 0);
  if (!j.front().is_array()) {
    // a flat list is read as a column
    MatrixXd m(rows, 1);
    for (Eigen::Index i = 0; i < rows; ++i) m(i, 0) = as<double>(j[static_cast<std::size_t>(i)], field);
    return m;
  }
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ConfigError("field '" + field + "' has ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = as<double>(row[static_cast<std::size_t>(c)], field);
  }
  return m;
}

Json vector_to_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vector_from_json(const Json& j, const std::string& field) {
  const auto vals = as<std::vector<double>>(j, field);
  return Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

ExperimentConfig parse_config(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  cfg.source = doc;
  cfg.system = as<std::string>(require(doc, "system", ""), "system");

  if (const Json* lin = find(doc, "linear")) {
    LinearSystem ls{matrix_from_json(require(*lin, "A", "linear"), "linear.A"),
                    matrix_from_json(require(*lin, "C", "linear"), "linear.C")};
    try {
      ls.validate();
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("field 'linear': ") + e.what());
    }
    cfg.linear = ls;
  }
  if (const Json* dom = find(doc, "domain")) {
    try {
      cfg.domain = Box(vector_from_json(require(*dom, "lower", "domain"), "domain.lower"),
                       vector_from_json(require(*dom, "upper", "domain"), "domain.upper"));
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("field 'domain': ") + e.what());
    }
  }
  if (cfg.system == "linear" && (!cfg.linear || !cfg.domain))
    throw ConfigError("system 'linear' needs the fields 'linear' and 'domain'");

  const SystemPtr sys = build_system(cfg);

  const Json& w = require(doc, "weights", "");
  cfg.weights.Q = matrix_from_json(require(w, "Q", "weights"), "weights.Q");
  cfg.weights.R = matrix_from_json(require(w, "R", "weights"), "weights.R");
  try {
    cfg.weights.validate(sys->nx(), sys->ny());
  } catch (const std::exception& e) {
    throw ConfigError(std::string("field 'weights': ") + e.what());
  }

  const Json lat = doc.value("latent", Json::object());
  cfg.latent.nz = get_or(lat, "nz", "latent", 5);
  cfg.latent.nq = get_or(lat, "nq", "latent", 2 * cfg.latent.nz);
  cfg.latent.ny = sys->ny();
  cfg.epsilon = get_or(lat, "epsilon", "latent", 0.5);
  if (cfg.latent.nz < 1 || cfg.latent.nq < 0) throw ConfigError("field 'latent': need nz >= 1 and nq >= 0");
  if (!(cfg.epsilon > 0.0)) throw ConfigError("field 'latent.epsilon' must be > 0");

  const Json ds = doc.value("dataset", Json::object());
  cfg.dataset_size = get_or(ds, "size", "dataset", cfg.dataset_size);
  cfg.dataset_seed = get_or(ds, "seed", "dataset", cfg.dataset_seed);
  if (cfg.dataset_size < 1) throw ConfigError("field 'dataset.size' must be >= 1");

  const Json pert = doc.value("perturbation", Json::object());
  cfg.radius = get_or(pert, "radius", "perturbation", cfg.radius);
  if (!(cfg.radius > 0.0)) throw ConfigError("field 'perturbation.radius' must be > 0");

  const Json net = doc.value("networks", Json::object());
  cfg.T_hidden = widths_from(net, "T_hidden", "networks", cfg.T_hidden);
  cfg.tau_hidden = widths_from(net, "tau_hidden", "networks", cfg.tau_hidden);
  cfg.pinv_hidden = widths_from(net, "pinv_hidden", "networks", cfg.pinv_hidden);
  cfg.mu = get_or(net, "mu", "networks", cfg.mu);
  if (!(cfg.mu > 0.0)) throw ConfigError("field 'networks.mu' must be > 0");

  const Json lw = doc.value("loss_weights", Json::object());
  cfg.loss_weights.pde = get_or(lw, "pde", "loss_weights", 1.0);
  cfg.loss_weights.inv = get_or(lw, "inv", "loss_weights", 1.0);
  cfg.loss_weights.opt = get_or(lw, "opt", "loss_weights", 1.0);

  cfg.pinv_train = parse_stage(doc.value("train_pinv", Json::object()), "train_pinv", cfg.pinv_train);
  cfg.observer_train = parse_stage(doc.value("train_observer", Json::object()), "train_observer", cfg.observer_train);

  const Json sim = doc.value("simulation", Json::object());
  SimulationConfig& s = cfg.simulation;
  s.dt = get_or(sim, "dt", "simulation", s.dt);
  s.horizon = get_or(sim, "horizon", "simulation", s.horizon);
  s.transient_cut = get_or(sim, "transient_cut", "simulation", s.transient_cut);
  s.sigma_w = get_or(sim, "sigma_w", "simulation", s.sigma_w);
  s.sigma_v = get_or(sim, "sigma_v", "simulation", s.sigma_v);
  s.seed = get_or(sim, "seed", "simulation", s.seed);
  if (const Json* x0 = find(sim, "x0")) s.x0 = vector_from_json(*x0, "simulation.x0");
  if (const Json* z0 = find(sim, "z0")) s.z0 = vector_from_json(*z0, "simulation.z0");
  if (!(s.dt > 0.0) || !(s.horizon > s.dt)) throw ConfigError("field 'simulation': need dt > 0 and horizon > dt");
  if (!(s.transient_cut >= 0.0) || !(s.transient_cut < s.horizon))
    throw ConfigError("field 'simulation.transient_cut' must lie in [0, horizon)");
  if (!(s.sigma_w >= 0.0) || !(s.sigma_v >= 0.0)) throw ConfigError("field 'simulation': noise levels must be >= 0");
  if (s.x0.size() != 0 && s.x0.size() != sys->nx()) throw ConfigError("field 'simulation.x0' has the wrong length");
  if (s.z0 && s.z0->size() != cfg.latent.nz) throw ConfigError("field 'simulation.z0' has the wrong length");

  cfg.out_dir = get_or(doc, "out_dir", "", std::string());
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_json(path)); }

SystemPtr build_system(const ExperimentConfig& cfg) {
  if (cfg.system == "linear") {
    if (!cfg.linear || !cfg.domain) throw ConfigError("system 'linear' needs matrices and a domain");
    if (cfg.domain->dim() != cfg.linear->nx()) throw ConfigError("field 'domain' does not match the linear system");
    return make_linear(*cfg.linear, *cfg.domain);
  }
  SystemPtr sys;
  try {
    sys = make_system(cfg.system);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("field 'system': ") + e.what());
  }
  if (cfg.domain) throw ConfigError("field 'domain' is only accepted for system 'linear'");
  return sys;
}

std::string archive_kind(const Json& doc) {
  if (!doc.is_object() || doc.value("format", std::string()) != "kkl-archive")
    throw ConfigError("not a model archive (missing format tag)");
  return as<std::string>(require(doc, "kind", ""), "kind");
}

Json to_json(const PinvArchive& a) {
  return Json{{"format", "kkl-archive"},
              {"version", kArchiveVersion},
              {"kind", "pinv"},
              {"config", a.config},
              {"dims", {{"nx", a.field.nx()}}},
              {"pinv", field_to_json(a.field)},
              {"initial_loss", a.initial_loss},
              {"loss_history", a.loss_history}};
}

PinvArchive pinv_from_json(const Json& doc) {
  check_kind(doc, "pinv");
  PinvArchive a;
  a.config = doc.value("config", Json::object());
  a.field = field_from_json(require(doc, "pinv", ""), "pinv");
  a.initial_loss = get_or(doc, "initial_loss", "", 0.0);
  a.loss_history = get_or(doc, "loss_history", "", std::vector<double>{});
  return a;
}

Json to_json(const ObserverArchive& a) {
  const ObserverBundle& b = a.bundle;
  const ContractingLatentRealization& r = b.phi;
  Json realized{{"A", matrix_to_json(r.A)},     {"B1", matrix_to_json(r.B1)}, {"B2", matrix_to_json(r.B2)},
                {"C1", matrix_to_json(r.C1)},   {"D12", matrix_to_json(r.D12)}, {"bw", vector_to_json(r.bw)},
                {"bz", vector_to_json(r.bz)},   {"P", matrix_to_json(r.P)},   {"lambda", vector_to_json(r.lambda)}};
  Json doc{{"format", "kkl-archive"},
           {"version", kArchiveVersion},
           {"kind", "observer"},
           {"config", a.config},
           {"dims", {{"nx", b.nx}, {"ny", b.ny}, {"nz", b.latent.dims.nz}, {"nq", b.latent.dims.nq}}},
           {"T", spec_to_json(b.T_spec, b.T_params)},
           {"tau", spec_to_json(b.tau_spec, b.tau_params)},
           {"latent", {{"epsilon", b.latent.epsilon}, {"free", vector_to_json(b.latent.flatten())}}},
           {"realized", realized},
           {"certificate", report_to_json(a.certificate)},
           {"weights", weights_to_json(b.weights)},
           {"seed", b.seed},
           {"loss_history", b.loss_history}};
  if (a.field) doc["pinv"] = field_to_json(*a.field);
  return doc;
}

ObserverArchive observer_from_json(const Json& doc) {
  check_kind(doc, "observer");
  ObserverArchive a;
  a.config = doc.value("config", Json::object());
  ObserverBundle& b = a.bundle;
  const Json& dims = require(doc, "dims", "");
  b.nx = as<int>(require(dims, "nx", "dims"), "dims.nx");
  b.ny = as<int>(require(dims, "ny", "dims"), "dims.ny");
  const LatentDims ld{as<int>(require(dims, "nz", "dims"), "dims.nz"), as<int>(require(dims, "nq", "dims"), "dims.nq"), b.ny};
  std::tie(b.T_spec, b.T_params) = spec_from_json(require(doc, "T", ""), "T");
  std::tie(b.tau_spec, b.tau_params) = spec_from_json(require(doc, "tau", ""), "tau");
  const Json& lat = require(doc, "latent", "");
  const double eps = as<double>(require(lat, "epsilon", "latent"), "latent.epsilon");
  const VectorXd free = vector_from_json(require(lat, "free", "latent"), "latent.free");
  if (ld.nz < 1 || ld.nq < 0 || ld.ny < 1 || free.size() != LatentFreeParams::flat_size(ld))
    throw ConfigError("field 'latent.free' does not match dims");
  b.latent = LatentFreeParams::unflatten(ld, eps, {free.data(), static_cast<std::size_t>(free.size())});
  try {
    b.validate();
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("archive: ") + e.what());
  }
  const Json& w = require(doc, "weights", "");
  b.weights.Q = matrix_from_json(require(w, "Q", "weights"), "weights.Q");
  b.weights.R = matrix_from_json(require(w, "R", "weights"), "weights.R");
  b.seed = get_or(doc, "seed", "", std::uint64_t{0});
  b.loss_history = get_or(doc, "loss_history", "", std::vector<double>{});
  b.refresh();

  // certify what was stored, not only what the free parameters produce
  const Json& rj = require(doc, "realized", "");
  ContractingLatentRealization stored;
  stored.dims = ld;
  stored.epsilon = eps;
  stored.A = matrix_from_json(require(rj, "A", "realized"), "realized.A");
  stored.B1 = matrix_from_json(require(rj, "B1", "realized"), "realized.B1");
  stored.B2 = matrix_from_json(require(rj, "B2", "realized"), "realized.B2");
  stored.C1 = matrix_from_json(require(rj, "C1", "realized"), "realized.C1");
  stored.D12 = matrix_from_json(require(rj, "D12", "realized"), "realized.D12");
  stored.bw = vector_from_json(require(rj, "bw", "realized"), "realized.bw");
  stored.bz = vector_from_json(require(rj, "bz", "realized"), "realized.bz");
  stored.P = matrix_from_json(require(rj, "P", "realized"), "realized.P");
  stored.lambda = vector_from_json(require(rj, "lambda", "realized"), "realized.lambda");
  auto same_shape = [](const MatrixXd& x, const MatrixXd& y) { return x.rows() == y.rows() && x.cols() == y.cols(); };
  const auto& r = b.phi;
  // empty matrices come back as 0x0
  auto shape_ok = [&](const MatrixXd& x, const MatrixXd& y) { return same_shape(x, y) || (x.size() == 0 && y.size() == 0); };
  if (!shape_ok(stored.A, r.A) || !shape_ok(stored.B1, r.B1) || !shape_ok(stored.B2, r.B2) || !shape_ok(stored.C1, r.C1) ||
      !shape_ok(stored.D12, r.D12) || stored.bw.size() != r.bw.size() || stored.bz.size() != r.bz.size() ||
      !shape_ok(stored.P, r.P) || stored.lambda.size() != r.lambda.size())
    throw ConfigError("archive: realized matrices have the wrong shapes");
  stored.B1.resize(r.B1.rows(), r.B1.cols());
  stored.C1.resize(r.C1.rows(), r.C1.cols());
  stored.D12.resize(r.D12.rows(), r.D12.cols());

  a.certificate = certify(stored);
  if (!a.certificate.passed) {
    std::ostringstream msg;
    msg << "archive: stored latent realization fails the contraction certificate (lambda_max(M) = "
        << a.certificate.max_eig_M << ")";
    throw NumericError(msg.str());
  }
  auto close = [](const MatrixXd& x, const MatrixXd& y) { return x.size() == 0 || (x - y).norm() <= 1e-9 * (1.0 + y.norm()); };
  if (!close(stored.A, r.A) || !close(stored.B1, r.B1) || !close(stored.B2, r.B2) || !close(stored.C1, r.C1) ||
      !close(stored.D12, r.D12) || !close(stored.bw, r.bw) || !close(stored.bz, r.bz) || !close(stored.P, r.P) ||
      !close(stored.lambda, r.lambda))
    throw NumericError("archive: stored realization does not match the free parameters");

  if (const Json* pf = find(doc, "pinv")) {
    a.field = field_from_json(*pf, "pinv");
    if (a.field->nx() != b.nx) throw ConfigError("archive: field and observer dimensions differ");
  }
  return a;
}

void write_json(const std::filesystem::path& path, const Json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw ConfigError("failed writing " + path.string());
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

PinvArchive load_pinv(const std::filesystem::path& path) { return pinv_from_json(read_json(path)); }
ObserverArchive load_observer(const std::filesystem::path& path) { return observer_from_json(read_json(path)); }

}  // namespace kkl
