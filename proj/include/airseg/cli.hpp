#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/airmetrics.hpp"
#include "airseg/medseg.hpp"
#include "airseg/phantom.hpp"
#include "airseg/prep.hpp"
#include "airseg/report.hpp"
#include "airseg/train.hpp"

namespace airseg {

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a run needs besides the phantom generator. Serialized flat:
/// TrainConfig keys, ArchConfig keys and the keys below share one object.
struct RunConfig {
  TrainConfig train;
  nn::ArchConfig arch;
  double clip_min = kHuClipMin;
  double clip_max = kHuClipMax;
  double threshold = 0.5;
  int connectivity = 26;
  double bd_min_fraction = 0.0;
  double val_fraction = 0.2;
  bool postprocess = true;
  std::string data_dir;
  std::string out_dir;
  std::string pred_dir;
  std::string checkpoint;
  std::string resume;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their values from `base`; unknown keys throw std::invalid_argument.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});

/// Worker count: AIRSEG_THREADS when set (must be a positive integer),
/// otherwise the hardware concurrency.
std::size_t thread_cap();

/// NIfTI files directly inside `dir`, keyed by stem.
std::map<std::string, std::filesystem::path> list_scans(const std::filesystem::path& dir);

struct PhantomOutput {
  std::string scan_id;
  PhantomTruth truth;
};

/// Writes images/<id>.nii.gz, labels/<id>.nii.gz and truth/<id>.json under
/// `out` for seeds spec.seed .. spec.seed + count - 1.
std::vector<PhantomOutput> cmd_phantom(const PhantomSpec& spec, std::size_t count, const std::filesystem::path& out);
std::string phantom_id(std::uint64_t seed);

/// Reads data_dir/{images,labels}, writes normalized volumes, labels and
/// manifest.csv to out_dir.
DatasetManifest cmd_prep(const RunConfig& c);

/// Trains on a prep output directory; writes best.ckpt, last.ckpt and curves.csv.
TrainResult cmd_train(const RunConfig& c, const TrainHooks& hooks = {});

/// Predicts every scan under data_dir (a file or a directory); writes
/// <id>.nii.gz masks and prob/<id>.nii.gz maps to out_dir.
std::vector<std::string> cmd_predict(const RunConfig& c);

/// Pairs pred_dir with data_dir (ground truth) by stem and writes metrics.csv.
std::vector<MetricsReport> cmd_eval(const RunConfig& c);

/// Writes report.csv for every mask in data_dir.
std::vector<VolumetricReportRow> cmd_report(const RunConfig& c);

/// Parses argv and runs a subcommand. Failures print one "error: ..." line
/// to `err` and return nonzero.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace airseg
