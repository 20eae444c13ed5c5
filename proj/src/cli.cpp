#include "airseg/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "airseg/checkpoint.hpp"
#include "airseg/components.hpp"
#include "airseg/fsutil.hpp"
#include "airseg/inferpost.hpp"
#include "airseg/nifti.hpp"

namespace airseg {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
  train.validate();
  arch.validate();
  if (!(clip_min < clip_max)) throw std::invalid_argument("clip_min must be below clip_max");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("threshold must lie in [0, 1]");
  if (connectivity != 6 && connectivity != 26) throw std::invalid_argument("connectivity must be 6 or 26");
  if (!(bd_min_fraction >= 0.0 && bd_min_fraction <= 1.0))
    throw std::invalid_argument("bd_min_fraction must lie in [0, 1]");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must lie in (0, 1)");
}

json to_json(const RunConfig& c) {
  json j = to_json(c.train);
  j.update(to_json(c.arch));
  j.update(json{{"clip_min", c.clip_min},
                {"clip_max", c.clip_max},
                {"threshold", c.threshold},
                {"connectivity", c.connectivity},
                {"bd_min_fraction", c.bd_min_fraction},
                {"val_fraction", c.val_fraction},
                {"postprocess", c.postprocess},
                {"data_dir", c.data_dir},
                {"out_dir", c.out_dir},
                {"pred_dir", c.pred_dir},
                {"checkpoint", c.checkpoint},
                {"resume", c.resume}});
  return j;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  const json train_keys = to_json(TrainConfig{});
  const json arch_keys = to_json(nn::ArchConfig{});
  json train_part = json::object(), arch_part = json::object();
  for (const auto& [key, value] : j.items()) {
    if (train_keys.contains(key)) train_part[key] = value;
    else if (arch_keys.contains(key)) arch_part[key] = value;
    else if (key == "clip_min") c.clip_min = value.get<double>();
    else if (key == "clip_max") c.clip_max = value.get<double>();
    else if (key == "threshold") c.threshold = value.get<double>();
    else if (key == "connectivity") c.connectivity = value.get<int>();
    else if (key == "bd_min_fraction") c.bd_min_fraction = value.get<double>();
    else if (key == "val_fraction") c.val_fraction = value.get<double>();
    else if (key == "postprocess") c.postprocess = value.get<bool>();
    else if (key == "data_dir") c.data_dir = value.get<std::string>();
    else if (key == "out_dir") c.out_dir = value.get<std::string>();
    else if (key == "pred_dir") c.pred_dir = value.get<std::string>();
    else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
    else if (key == "resume") c.resume = value.get<std::string>();
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  c.train = train_config_from_json(train_part, c.train);
  c.arch = arch_config_from_json(arch_part, c.arch);
  c.validate();
  return c;
}

std::size_t thread_cap() {
  const char* env = std::getenv("AIRSEG_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw CliError(std::string("AIRSEG_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(n);
}

namespace {

// Runs fn(i) for i in [0, n) on up to thread_cap() workers; rethrows the first failure.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_cap(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

void require_dir(const std::string& dir, const char* what) {
  if (dir.empty()) throw CliError(std::string(what) + " is not set");
  if (!fs::is_directory(dir)) throw CliError(std::string(what) + " '" + dir + "' is not a directory");
}

fs::path out_path(const RunConfig& c) {
  if (c.out_dir.empty()) throw CliError("out_dir is not set");
  fs::create_directories(c.out_dir);
  return c.out_dir;
}

void echo_config(const RunConfig& c) { write_text_atomic(fs::path(c.out_dir) / "config.resolved.json", to_json(c).dump(2) + "\n"); }

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

ScanSet load_prepped(const fs::path& dir, const DatasetManifest& manifest) {
  std::set<std::string> ids;
  for (const auto& e : manifest.entries) ids.insert(e.scan_id);
  ScanSet scans;
  for (const auto& id : ids) {
    const fs::path img = dir / "images" / (id + ".nii.gz");
    const fs::path lab = dir / "labels" / (id + ".nii.gz");
    if (!fs::exists(img) || !fs::exists(lab)) throw CliError("prepared scan '" + id + "' is missing under " + dir.string());
    ScanData s{read_nifti_volume(img), read_nifti_mask(lab)};
    if (s.image.kind() != IntensityKind::normalized) throw CliError("'" + img.string() + "' is not a normalized volume");
    if (s.image.dims() != s.label.dims()) throw CliError("image and label dims differ for '" + id + "'");
    scans.emplace(id, std::move(s));
  }
  return scans;
}

// Keeps the rows of an earlier curves.csv up to and including `epoch`.
std::string curves_prefix(const fs::path& path, std::size_t epoch) {
  if (!fs::exists(path)) return {};
  const auto bytes = read_file_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line, kept;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoul(line.substr(0, line.find(','))) <= epoch) kept += line + "\n";
  }
  return kept;
}

}  // namespace

std::map<std::string, fs::path> list_scans(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw CliError("'" + dir.string() + "' is not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_nifti_path(entry.path())) continue;
    const std::string id = nifti_stem(entry.path());
    if (!out.emplace(id, entry.path()).second) throw CliError("two files share the scan id '" + id + "' in " + dir.string());
  }
  return out;
}

std::string phantom_id(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%03llu", static_cast<unsigned long long>(seed));
  return buf;
}

std::vector<PhantomOutput> cmd_phantom(const PhantomSpec& spec, std::size_t count, const fs::path& out) {
  spec.validate();
  if (count < 1) throw CliError("count must be at least 1");
  if (out.empty()) throw CliError("out_dir is not set");
  std::vector<PhantomOutput> made;
  for (std::size_t k = 0; k < count; ++k) {
    PhantomSpec s = spec;
    s.seed = spec.seed + k;
    PhantomOutput p{phantom_id(s.seed), generate_tree(s)};
    fs::create_directories(out / "images");
    fs::create_directories(out / "labels");
    fs::create_directories(out / "truth");
    write_nifti(p.truth.image, out / "images" / (p.scan_id + ".nii.gz"));
    write_nifti(p.truth.mask, out / "labels" / (p.scan_id + ".nii.gz"));
    write_text_atomic(out / "truth" / (p.scan_id + ".json"), truth_json(p.truth, s).dump(2) + "\n");
    made.push_back(std::move(p));
  }
  return made;
}

DatasetManifest cmd_prep(const RunConfig& c) {
  c.validate();
  require_dir(c.data_dir, "data_dir");
  const fs::path data(c.data_dir);
  if (!fs::is_directory(data / "images")) throw CliError("no images/ directory under " + data.string());
  const auto images = list_scans(data / "images");
  if (images.empty()) throw CliError("no NIfTI volumes under " + (data / "images").string());
  const auto labels = fs::is_directory(data / "labels") ? list_scans(data / "labels") : std::map<std::string, fs::path>{};
  std::vector<std::string> missing;
  for (const auto& [id, path] : images)
    if (!labels.contains(id)) missing.push_back(id);
  if (!missing.empty()) throw CliError("missing mask for: " + join(missing));

  const fs::path out = out_path(c);
  std::vector<std::string> ids;
  std::map<std::string, std::vector<std::size_t>> annotated;
  for (const auto& [id, path] : images) {
    const Volume v = read_nifti_volume(path);
    const MaskVolume m = read_nifti_mask(labels.at(id));
    if (v.dims() != m.dims()) throw CliError("image and mask dims differ for '" + id + "'");
    if (v.kind() != IntensityKind::hounsfield) throw CliError("'" + path.string() + "' is not a Hounsfield volume");
    fs::create_directories(out / "images");
    fs::create_directories(out / "labels");
    write_nifti(clip_normalize(v, c.clip_min, c.clip_max), out / "images" / (id + ".nii.gz"));
    write_nifti(m, out / "labels" / (id + ".nii.gz"));
    ids.push_back(id);
    annotated[id] = annotated_z_indices(m);
  }
  const auto [train_ids, val_ids] = split_scans(ids, c.val_fraction, c.train.seed);
  const std::set<std::string> val(val_ids.begin(), val_ids.end());

  DatasetManifest manifest;
  manifest.seed = c.train.seed;
  for (const auto& id : ids)
    for (std::size_t z : annotated[id])
      manifest.entries.push_back({id, z, val.contains(id) ? Split::internal_val : Split::train});
  write_text_atomic(out / "manifest.csv", manifest_csv(manifest));
  echo_config(c);
  return manifest;
}

TrainResult cmd_train(const RunConfig& c, const TrainHooks& user_hooks) {
  c.validate();
  require_dir(c.data_dir, "data_dir");
  const fs::path data(c.data_dir);
  const fs::path manifest_path = data / "manifest.csv";
  if (!fs::exists(manifest_path)) throw CliError("no manifest.csv under " + data.string() + " (run prep first)");
  const auto bytes = read_file_bytes(manifest_path);
  const DatasetManifest manifest = parse_manifest_csv(std::string(bytes.begin(), bytes.end()), c.train.seed);
  const ScanSet scans = load_prepped(data, manifest);

  nn::MEDSeg model(c.arch, c.train.seed);
  AdamWState optimizer;
  std::size_t start_epoch = 0;
  if (!c.resume.empty()) {
    if (!fs::exists(c.resume)) throw CliError("resume checkpoint '" + c.resume + "' does not exist");
    LoadedCheckpoint ck = load_checkpoint(c.resume, c.arch);
    if (!(ck.meta.arch == c.arch))
      throw CliError("resume checkpoint architecture " + to_json(ck.meta.arch).dump() + " does not match " +
                     to_json(c.arch).dump());
    if (!ck.has_optimizer) throw CliError("resume checkpoint '" + c.resume + "' has no optimizer state");
    model = std::move(ck.model);
    optimizer = std::move(ck.optimizer);
    start_epoch = ck.meta.epoch;
  }

  const fs::path out = out_path(c);
  const fs::path best_path = out / "best.ckpt";
  const fs::path curves_path = out / "curves.csv";
  double best_so_far = std::numeric_limits<double>::infinity();
  std::string earlier_rows;
  if (start_epoch > 0) {
    earlier_rows = curves_prefix(curves_path, start_epoch);
    if (fs::exists(best_path)) {
      const auto prev = load_checkpoint(best_path, c.arch);
      if (prev.meta.arch == c.arch && prev.meta.epoch <= start_epoch && std::isfinite(prev.meta.val_loss))
        best_so_far = prev.meta.val_loss;
    }
  }

  CurveLog log;
  TrainHooks hooks;
  hooks.on_epoch = [&](const CurveRow& row) {
    log.rows.push_back(row);
    const std::string body = log.csv();
    write_text_atomic(curves_path, std::string(kCurveCsvHeader) + "\n" + earlier_rows + body.substr(body.find('\n') + 1));
    save_checkpoint(model, &optimizer, {c.arch, row.epoch, row.val_loss}, out / "last.ckpt");
    if (user_hooks.on_epoch) user_hooks.on_epoch(row);
  };
  hooks.on_improve = [&](const CurveRow& row, const nn::MEDSeg& m, const AdamWState& opt) {
    if (row.val_loss < best_so_far) {
      best_so_far = row.val_loss;
      save_checkpoint(m, &opt, {c.arch, row.epoch, row.val_loss}, best_path);
    }
    if (user_hooks.on_improve) user_hooks.on_improve(row, m, opt);
  };
  TrainResult result = train_loop(model, optimizer, scans, manifest, c.train, hooks, start_epoch);
  echo_config(c);
  return result;
}

std::vector<std::string> cmd_predict(const RunConfig& c) {
  c.validate();
  if (c.checkpoint.empty()) throw CliError("checkpoint is not set");
  if (!fs::exists(c.checkpoint)) throw CliError("checkpoint '" + c.checkpoint + "' does not exist");
  if (c.data_dir.empty()) throw CliError("data_dir is not set");
  std::map<std::string, fs::path> inputs;
  if (fs::is_regular_file(c.data_dir)) inputs.emplace(nifti_stem(c.data_dir), c.data_dir);
  else inputs = list_scans(c.data_dir);
  if (inputs.empty()) throw CliError("no NIfTI volumes under " + c.data_dir);

  LoadedCheckpoint ck = load_checkpoint(c.checkpoint, c.arch);
  const fs::path out = out_path(c);
  std::vector<std::string> done;
  for (const auto& [id, path] : inputs) {
    Volume v = read_nifti_volume(path);
    if (v.kind() == IntensityKind::hounsfield) v = clip_normalize(v, c.clip_min, c.clip_max);
    else if (v.kind() != IntensityKind::normalized) throw CliError("'" + path.string() + "' is a probability map, not a scan");
    const Volume prob = predict_volume(ck.model, v);
    MaskVolume mask = threshold(prob, c.threshold);
    if (c.postprocess) mask = largest_component(mask, c.connectivity);
    fs::create_directories(out / "prob");
    write_nifti(prob, out / "prob" / (id + ".nii.gz"));
    write_nifti(mask, out / (id + ".nii.gz"));
    done.push_back(id);
  }
  echo_config(c);
  return done;
}

std::vector<MetricsReport> cmd_eval(const RunConfig& c) {
  c.validate();
  require_dir(c.pred_dir, "pred_dir");
  require_dir(c.data_dir, "data_dir");
  const auto preds = list_scans(c.pred_dir);
  const auto gts = list_scans(c.data_dir);
  std::vector<std::string> unmatched;
  for (const auto& [id, p] : preds)
    if (!gts.contains(id)) unmatched.push_back(id + " (prediction only)");
  for (const auto& [id, p] : gts)
    if (!preds.contains(id)) unmatched.push_back(id + " (ground truth only)");
  if (!unmatched.empty()) throw CliError("unmatched scan ids: " + join(unmatched));
  if (preds.empty()) throw CliError("no scans to evaluate");

  std::vector<std::string> ids;
  for (const auto& [id, p] : preds) ids.push_back(id);
  std::vector<MetricsReport> rows(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    const MaskVolume pred = read_nifti_mask(preds.at(ids[i]));
    const MaskVolume gt = read_nifti_mask(gts.at(ids[i]));
    if (pred.dims() != gt.dims()) throw CliError("prediction and ground truth dims differ for '" + ids[i] + "'");
    rows[i] = evaluate_pair(pred, gt, ids[i], c.bd_min_fraction);
  });
  const fs::path out = out_path(c);
  write_text_atomic(out / "metrics.csv", metrics_csv(rows));
  echo_config(c);
  return rows;
}

std::vector<VolumetricReportRow> cmd_report(const RunConfig& c) {
  c.validate();
  require_dir(c.data_dir, "data_dir");
  const auto masks = list_scans(c.data_dir);
  std::vector<std::string> ids;
  for (const auto& [id, p] : masks) ids.push_back(id);
  std::vector<VolumetricReportRow> rows(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) { rows[i] = volumetric_report(read_nifti_mask(masks.at(ids[i])), ids[i]); });
  const fs::path out = out_path(c);
  write_text_atomic(out / "report.csv", report_csv(rows));
  echo_config(c);
  return rows;
}

namespace {

using Override = std::function<void(RunConfig&)>;

template <typename T, typename Set>
void add_override(CLI::App* app, std::vector<Override>& overrides, const std::string& names, Set set, const std::string& help) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = app->add_option(names, *value, help);
  overrides.push_back([value, opt, set](RunConfig& c) {
    if (opt->count() > 0) set(c, *value);
  });
}

void bind_paths(CLI::App* app, std::vector<Override>& ov, const std::string& data_help) {
  add_override<std::string>(app, ov, "--data,--data_dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; }, data_help);
  add_override<std::string>(app, ov, "--out,--out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; }, "Output directory");
}

void bind_clip(CLI::App* app, std::vector<Override>& ov) {
  add_override<double>(app, ov, "--clip_min", [](RunConfig& c, double v) { c.clip_min = v; }, "Lower HU clip");
  add_override<double>(app, ov, "--clip_max", [](RunConfig& c, double v) { c.clip_max = v; }, "Upper HU clip");
}

void bind_arch(CLI::App* app, std::vector<Override>& ov) {
  auto widths = std::make_shared<std::vector<std::size_t>>();
  CLI::Option* opt = app->add_option("--backbone_widths", *widths, "Backbone stage widths")->expected(3);
  ov.push_back([widths, opt](RunConfig& c) {
    if (opt->count() > 0) std::copy(widths->begin(), widths->end(), c.arch.backbone_widths.begin());
  });
  add_override<std::size_t>(app, ov, "--bifpn_width", [](RunConfig& c, std::size_t v) { c.arch.bifpn_width = v; }, "BiFPN width");
  add_override<std::size_t>(app, ov, "--bifpn_repeats", [](RunConfig& c, std::size_t v) { c.arch.bifpn_repeats = v; }, "BiFPN repeats");
  add_override<std::size_t>(app, ov, "--head_blocks", [](RunConfig& c, std::size_t v) { c.arch.head_blocks = v; }, "Head blocks");
  add_override<std::size_t>(app, ov, "--head_width", [](RunConfig& c, std::size_t v) { c.arch.head_width = v; }, "Head width");
  add_override<std::size_t>(app, ov, "--classes", [](RunConfig& c, std::size_t v) { c.arch.classes = v; }, "Output classes");
  add_override<double>(app, ov, "--fusion_eps", [](RunConfig& c, double v) { c.arch.fusion_eps = v; }, "Fusion epsilon");
}

void bind_train(CLI::App* app, std::vector<Override>& ov) {
  add_override<double>(app, ov, "--lr0", [](RunConfig& c, double v) { c.train.lr0 = v; }, "Initial learning rate");
  add_override<double>(app, ov, "--lr_decay", [](RunConfig& c, double v) { c.train.lr_decay = v; }, "Per-epoch LR factor");
  add_override<double>(app, ov, "--weight_decay", [](RunConfig& c, double v) { c.train.weight_decay = v; }, "AdamW weight decay");
  add_override<std::size_t>(app, ov, "--epochs", [](RunConfig& c, std::size_t v) { c.train.epochs = v; }, "Total epochs");
  add_override<std::size_t>(app, ov, "--batch_size", [](RunConfig& c, std::size_t v) { c.train.batch_size = v; }, "Batch size");
  add_override<std::size_t>(app, ov, "--crop,--crop_size", [](RunConfig& c, std::size_t v) { c.train.crop_size = v; }, "Crop size");
  add_override<std::size_t>(app, ov, "--val_every", [](RunConfig& c, std::size_t v) { c.train.val_every = v; }, "Validate every n epochs");
  add_override<std::string>(app, ov, "--device", [](RunConfig& c, const std::string& v) { c.train.device = v; }, "Compute device");
  add_override<std::string>(app, ov, "--resume", [](RunConfig& c, const std::string& v) { c.resume = v; }, "Checkpoint to resume from");
}

void bind_seed(CLI::App* app, std::vector<Override>& ov) {
  add_override<std::uint64_t>(app, ov, "--seed", [](RunConfig& c, std::uint64_t v) { c.train.seed = v; }, "Random seed");
}

RunConfig resolve(const std::string& config_path, const std::vector<Override>& overrides) {
  RunConfig c;
  if (!config_path.empty()) {
    if (!fs::exists(config_path)) throw CliError("config file '" + config_path + "' does not exist");
    const auto bytes = read_file_bytes(config_path);
    json j;
    try {
      j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
      throw CliError("config file '" + config_path + "' is not valid JSON: " + e.what());
    }
    c = run_config_from_json(j, c);
  }
  for (const auto& o : overrides) o(c);
  c.validate();
  return c;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Airway segmentation pipeline", "airseg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // phantom
  CLI::App* phantom = app.add_subcommand("phantom", "Generate synthetic airway phantoms");
  std::string phantom_config, phantom_out;
  std::size_t phantom_count = 1;
  PhantomSpec spec_flags;
  std::vector<std::function<void(PhantomSpec&)>> spec_overrides;
  auto spec_opt = [&](const std::string& name, auto member, const std::string& help) {
    using T = std::remove_reference_t<decltype(spec_flags.*member)>;
    auto value = std::make_shared<T>();
    CLI::Option* o = phantom->add_option(name, *value, help);
    spec_overrides.push_back([value, o, member](PhantomSpec& s) {
      if (o->count() > 0) s.*member = *value;
    });
  };
  phantom->add_option("--config", phantom_config, "PhantomSpec JSON file");
  phantom->add_option("--out,--out_dir", phantom_out, "Output directory")->required();
  phantom->add_option("--count", phantom_count, "Number of phantoms (consecutive seeds)");
  spec_opt("--depth", &PhantomSpec::depth, "Branching generations");
  spec_opt("--seed", &PhantomSpec::seed, "Seed of the first phantom");
  spec_opt("--root_radius", &PhantomSpec::root_radius, "Root radius (voxels)");
  spec_opt("--radius_decay", &PhantomSpec::radius_decay, "Radius factor per generation");
  spec_opt("--segment_length", &PhantomSpec::segment_length, "Root segment length (voxels)");
  spec_opt("--length_decay", &PhantomSpec::length_decay, "Length factor per generation");
  spec_opt("--half_angle_deg", &PhantomSpec::half_angle_deg, "Branching half angle");
  spec_opt("--angle_jitter_deg", &PhantomSpec::angle_jitter_deg, "Angle jitter");
  spec_opt("--noise_level", &PhantomSpec::noise_level, "Noise amplitude relative to contrast");

  // pipeline commands share the RunConfig overrides
  std::string config_path;
  std::vector<Override> prep_ov, train_ov, predict_ov, eval_ov, report_ov;

  CLI::App* prep = app.add_subcommand("prep", "Normalize scans and build the slice manifest");
  prep->add_option("--config", config_path, "RunConfig JSON file");
  bind_paths(prep, prep_ov, "Directory with images/ and labels/");
  bind_clip(prep, prep_ov);
  bind_seed(prep, prep_ov);
  add_override<double>(prep, prep_ov, "--val_fraction", [](RunConfig& c, double v) { c.val_fraction = v; }, "Validation share of scans");

  CLI::App* train = app.add_subcommand("train", "Train MEDSeg on a prepared directory");
  train->add_option("--config", config_path, "RunConfig JSON file");
  bind_paths(train, train_ov, "Prepared directory (prep output)");
  bind_seed(train, train_ov);
  bind_train(train, train_ov);
  bind_arch(train, train_ov);

  CLI::App* predict = app.add_subcommand("predict", "Segment scans with a trained checkpoint");
  predict->add_option("--config", config_path, "RunConfig JSON file");
  bind_paths(predict, predict_ov, "Scan file or directory of scans");
  bind_clip(predict, predict_ov);
  bind_arch(predict, predict_ov);
  add_override<std::string>(predict, predict_ov, "--checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; }, "Checkpoint file");
  add_override<double>(predict, predict_ov, "--threshold", [](RunConfig& c, double v) { c.threshold = v; }, "Probability threshold");
  add_override<int>(predict, predict_ov, "--connectivity", [](RunConfig& c, int v) { c.connectivity = v; }, "Component connectivity (6 or 26)");
  auto no_post = std::make_shared<bool>(false);
  CLI::Option* no_post_opt = predict->add_flag("--no-postprocess", *no_post, "Skip largest-component extraction");
  predict_ov.push_back([no_post_opt](RunConfig& c) {
    if (no_post_opt->count() > 0) c.postprocess = false;
  });

  CLI::App* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  eval->add_option("--config", config_path, "RunConfig JSON file");
  bind_paths(eval, eval_ov, "Ground-truth mask directory");
  add_override<std::string>(eval, eval_ov, "--pred,--pred_dir", [](RunConfig& c, const std::string& v) { c.pred_dir = v; }, "Predicted mask directory");
  add_override<double>(eval, eval_ov, "--bd_min_fraction", [](RunConfig& c, double v) { c.bd_min_fraction = v; }, "Branch detection fraction");

  CLI::App* report = app.add_subcommand("report", "Volumetric sheet for a directory of masks");
  report->add_option("--config", config_path, "RunConfig JSON file");
  bind_paths(report, report_ov, "Mask directory");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
      err << "error: " << one_line(e.what()) << "\n";
      return 2;
    }

    if (phantom->parsed()) {
      PhantomSpec spec;
      if (!phantom_config.empty()) {
        const auto bytes = read_file_bytes(phantom_config);
        spec = phantom_spec_from_json(json::parse(bytes.begin(), bytes.end()));
      }
      for (const auto& o : spec_overrides) o(spec);
      for (const auto& p : cmd_phantom(spec, phantom_count, phantom_out)) {
        out << p.scan_id << ": " << p.truth.branches.size() << " branches, " << p.truth.junctions.size()
            << " junctions, " << p.truth.mask.count() << " voxels, tree length " << fmt(p.truth.total_length_mm(), 1)
            << " mm\n";
      }
    } else if (prep->parsed()) {
      const DatasetManifest m = cmd_prep(resolve(config_path, prep_ov));
      out << "prep: " << m.of(Split::train).size() << " train slices, " << m.of(Split::internal_val).size()
          << " validation slices\n";
    } else if (train->parsed()) {
      TrainHooks hooks;
      hooks.on_epoch = [&](const CurveRow& r) {
        out << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss);
        if (std::isfinite(r.val_loss)) out << " val_loss " << fmt(r.val_loss) << " val_dice " << fmt(r.val_dice);
        out << "\n" << std::flush;
      };
      const TrainResult r = cmd_train(resolve(config_path, train_ov), hooks);
      out << "best epoch " << r.best_epoch << " val_loss " << fmt(r.best_val_loss) << "\n";
    } else if (predict->parsed()) {
      const RunConfig c = resolve(config_path, predict_ov);
      const auto ids = cmd_predict(c);
      out << "predict: " << ids.size() << " scan(s) written to " << c.out_dir << "\n";
    } else if (eval->parsed()) {
      const auto rows = cmd_eval(resolve(config_path, eval_ov));
      const std::string csv = metrics_csv(rows);
      const auto last = csv.rfind('\n', csv.size() - 2);
      out << "eval: " << rows.size() << " scan(s); " << csv.substr(last + 1);
    } else if (report->parsed()) {
      const auto rows = cmd_report(resolve(config_path, report_ov));
      out << "report: " << rows.size() << " mask(s)\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace airseg
