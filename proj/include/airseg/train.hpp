#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/medseg.hpp"
#include "airseg/prep.hpp"
#include "airseg/volume.hpp"

namespace airseg {

struct TrainConfig {
  double lr0 = 1e-4;
  double lr_decay = 0.985;
  double weight_decay = 1e-5;
  std::size_t epochs = 95;
  std::size_t batch_size = 8;
  std::size_t crop_size = 256;
  std::uint64_t seed = 0;
  std::size_t val_every = 1;
  std::string device = "cpu";

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys throw std::invalid_argument.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// lr0 * lr_decay^epoch.
double lr_at(const TrainConfig& c, long long epoch);

/// Moments are kept in double whatever the parameter precision.
struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
  bool operator==(const AdamWState&) const = default;
};

/// One decoupled-weight-decay Adam update over every parameter. A parameter
/// that received no gradient is treated as having gradient 0.
template <typename T>
void adamw_step(std::vector<nn::BasicParam<T>>& params, AdamWState& state, double lr, double wd);

struct CurveRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_dice = std::numeric_limits<double>::quiet_NaN();
};

struct CurveLog {
  std::vector<CurveRow> rows;
  std::string csv() const;
};

inline constexpr const char* kCurveCsvHeader = "epoch,train_loss,val_loss,val_dice";

struct ScanData {
  Volume image;  // normalized
  MaskVolume label;
};
using ScanSet = std::map<std::string, ScanData>;

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::function<void(const CurveRow&)> on_epoch;
  /// Called after an epoch whose validation loss is a new strict minimum.
  std::function<void(const CurveRow&, const nn::MEDSeg&, const AdamWState&)> on_improve;
};

struct TrainResult {
  CurveLog log;
  std::size_t best_epoch = 0;  // 1-based, 0 if never validated
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::pair<std::string, nn::Tensor>> best_state;
};

/// Mean validation loss and mean hard (threshold 0.5) per-slice Dice over
/// full-resolution slices, in eval mode.
std::pair<double, double> validate_slices(nn::MEDSeg& model, const ScanSet& scans,
                                          const std::vector<ManifestEntry>& entries);

/// Trains for config.epochs epochs starting after `start_epoch` completed ones.
/// Leaves the model holding its final weights; the lowest-validation-loss
/// weights are returned in the result.
TrainResult train_loop(nn::MEDSeg& model, AdamWState& optimizer, const ScanSet& scans,
                       const DatasetManifest& manifest, const TrainConfig& config, const TrainHooks& hooks = {},
                       std::size_t start_epoch = 0);

/// Hard Dice of two binary planes; 1 when both are empty.
double binary_dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

}  // namespace airseg
