#pragma once

// Experiment configuration and model archives (JSON). Doubles are written in
// shortest round-trip form, so load(save(m)) reproduces every parameter.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kkl/dynamics.hpp"
#include "kkl/latent.hpp"
#include "kkl/observer.hpp"
#include "kkl/riccati.hpp"

namespace kkl {

using Json = nlohmann::json;

struct StageConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int epochs = 50;
  double lr_decay = 1.0;
  std::uint64_t seed = 0;
};

struct SimulationConfig {
  double dt = 1e-2;
  double horizon = 20.0;
  double transient_cut = 5.0;
  double sigma_w = 0.0;
  double sigma_v = 0.0;
  std::uint64_t seed = 0;
  VectorXd x0;                  // empty: domain center shifted by a quarter width
  std::optional<VectorXd> z0;   // empty: zero
};

struct ExperimentConfig {
  std::string system;                // catalog key or "linear"
  std::optional<LinearSystem> linear;  // required for "linear"
  std::optional<Box> domain;           // overrides the catalog domain; required for "linear"
  LatentDims latent;
  double epsilon = 0.5;
  CostWeights weights;
  int dataset_size = 5000;
  std::uint64_t dataset_seed = 0;
  double radius = 0.1;
  std::vector<int> T_hidden{32, 32};
  std::vector<int> tau_hidden{32, 32};
  std::vector<int> pinv_hidden{32, 32};
  double mu = 1e-3;
  LossWeights loss_weights;
  StageConfig pinv_train;
  StageConfig observer_train;
  SimulationConfig simulation;
  std::string out_dir;
  Json source;  // the document as read, stored in archives
};

/// Throws ConfigError naming the offending field (e.g. "weights.R").
ExperimentConfig parse_config(const Json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

SystemPtr build_system(const ExperimentConfig& cfg);

Json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const Json& j, const std::string& field);
Json vector_to_json(const VectorXd& v);
VectorXd vector_from_json(const Json& j, const std::string& field);

constexpr int kArchiveVersion = 1;

struct PinvArchive {
  Json config;
  SpdField field;
  double initial_loss = 0.0;
  std::vector<double> loss_history;
};

struct ObserverArchive {
  Json config;
  ObserverBundle bundle;
  std::optional<SpdField> field;
  CertificateReport certificate;
};

Json to_json(const PinvArchive& a);
Json to_json(const ObserverArchive& a);
PinvArchive pinv_from_json(const Json& doc);
/// Re-certifies the stored realization; throws NumericError if the
/// certificate fails or the realization disagrees with the free parameters.
ObserverArchive observer_from_json(const Json& doc);

void write_json(const std::filesystem::path& path, const Json& doc);
Json read_json(const std::filesystem::path& path);

PinvArchive load_pinv(const std::filesystem::path& path);
ObserverArchive load_observer(const std::filesystem::path& path);
/// Kind tag of an archive document ("pinv" or "observer").
std::string archive_kind(const Json& doc);

}  // namespace kkl
