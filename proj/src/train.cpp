#include "airseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "airseg/csv.hpp"

namespace airseg {

using nlohmann::json;
using nn::Tensor;

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("lr0 must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("lr_decay must be in (0, 1]");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (crop_size < 1) throw std::invalid_argument("crop_size must be at least 1");
  if (val_every < 1) throw std::invalid_argument("val_every must be at least 1");
  if (device != "cpu") throw std::invalid_argument("only device \"cpu\" is supported");
}

json to_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"lr_decay", c.lr_decay},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"crop_size", c.crop_size},
              {"seed", c.seed},
              {"val_every", c.val_every},
              {"device", c.device}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "lr0") c.lr0 = value.get<double>();
    else if (key == "lr_decay") c.lr_decay = value.get<double>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "epochs") c.epochs = value.get<std::size_t>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "crop_size") c.crop_size = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "val_every") c.val_every = value.get<std::size_t>();
    else if (key == "device") c.device = value.get<std::string>();
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

double lr_at(const TrainConfig& c, long long epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  return c.lr0 * std::pow(c.lr_decay, static_cast<double>(epoch));
}

template <typename T>
void adamw_step(std::vector<nn::BasicParam<T>>& params, AdamWState& s, double lr, double wd) {
  if (s.m.empty() && s.v.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.numel(), 0.0);
      s.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (s.m.size() != params.size() || s.v.size() != params.size())
    throw nn::ShapeError("adamw_step: optimizer state does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (s.m[i].size() != params[i].tensor.numel() || s.v[i].size() != params[i].tensor.numel())
      throw nn::ShapeError("adamw_step: optimizer state shape mismatch for " + params[i].name);

  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t), c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto theta = tensor.data();
    const bool has = tensor.has_grad();
    auto g = tensor.grad();
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = has ? static_cast<double>(g[k]) : 0.0;
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * gk;
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * gk * gk;
      const double mh = m[k] / c1, vh = v[k] / c2;
      const double th = static_cast<double>(theta[k]);
      theta[k] = static_cast<T>(th - lr * mh / (std::sqrt(vh) + s.eps) - lr * wd * th);
    }
  }
}

template void adamw_step<float>(std::vector<nn::BasicParam<float>>&, AdamWState&, double, double);
template void adamw_step<double>(std::vector<nn::BasicParam<double>>&, AdamWState&, double, double);

std::string CurveLog::csv() const {
  std::ostringstream out;
  out << kCurveCsvHeader << '\n';
  auto optional = [](double v) { return std::isnan(v) ? std::string() : format_real(v); };
  for (const auto& r : rows)
    out << r.epoch << ',' << format_real(r.train_loss) << ',' << optional(r.val_loss) << ',' << optional(r.val_dice)
        << '\n';
  return out.str();
}

double binary_dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  std::size_t tp = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    tp += a[i] & b[i];
    sa += a[i];
    sb += b[i];
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(sa + sb);
}

namespace {

const ScanData& scan_of(const ScanSet& scans, const std::string& id) {
  auto it = scans.find(id);
  if (it == scans.end()) throw TrainError("manifest references unknown scan '" + id + "'");
  return it->second;
}

// Packs slices of equal size into [B,3,H,W] and [B,1,H,W].
std::pair<Tensor, Tensor> pack(const std::vector<Slice25D>& batch) {
  const std::size_t b = batch.size(), h = batch[0].height, w = batch[0].width, plane = h * w;
  Tensor x({b, 3, h, w}), g({b, 1, h, w});
  auto xd = x.data();
  auto gd = g.data();
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(batch[i].channels.begin(), batch[i].channels.end(), xd.begin() + static_cast<std::ptrdiff_t>(i * 3 * plane));
    for (std::size_t k = 0; k < plane; ++k) gd[i * plane + k] = batch[i].label[k];
  }
  return {x, g};
}

}  // namespace

std::pair<double, double> validate_slices(nn::MEDSeg& model, const ScanSet& scans,
                                          const std::vector<ManifestEntry>& entries) {
  if (entries.empty()) throw TrainError("validation split is empty");
  const nn::NormMode saved = model.mode();
  model.set_mode(nn::NormMode::eval);
  nn::NoGradGuard no_grad;
  double loss_sum = 0.0, dice_sum = 0.0;
  std::vector<std::uint8_t> hard;
  for (const auto& e : entries) {
    const ScanData& s = scan_of(scans, e.scan_id);
    auto [x, g] = pack({extract_25d(s.image, s.label, e.z, e.scan_id)});
    Tensor p = model.forward(x);
    loss_sum += nn::dice_loss(p, g).item();
    hard.resize(p.numel());
    for (std::size_t k = 0; k < p.numel(); ++k) hard[k] = p[k] >= 0.5f ? 1 : 0;
    std::vector<std::uint8_t> truth(g.numel());
    for (std::size_t k = 0; k < g.numel(); ++k) truth[k] = g[k] > 0.5f ? 1 : 0;
    dice_sum += binary_dice(hard, truth);
  }
  model.set_mode(saved);
  const auto n = static_cast<double>(entries.size());
  return {loss_sum / n, dice_sum / n};
}

TrainResult train_loop(nn::MEDSeg& model, AdamWState& optimizer, const ScanSet& scans,
                       const DatasetManifest& manifest, const TrainConfig& cfg, const TrainHooks& hooks,
                       std::size_t start_epoch) {
  cfg.validate();
  const auto train_entries = manifest.of(Split::train);
  const auto val_entries = manifest.of(Split::internal_val);
  if (train_entries.empty()) throw TrainError("training split is empty");
  if (val_entries.empty()) throw TrainError("validation split is empty");
  if (start_epoch >= cfg.epochs) throw TrainError("nothing to do: start epoch is not below the epoch count");

  TrainResult result;
  for (std::size_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    model.set_mode(nn::NormMode::train);
    Xoshiro256 rng(derive_seed(cfg.seed, "epoch", epoch));
    std::vector<std::size_t> order(train_entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    const double lr = lr_at(cfg, static_cast<long long>(epoch - 1));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<Slice25D> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        const auto& e = train_entries[order[i]];
        const ScanData& s = scan_of(scans, e.scan_id);
        batch.push_back(random_crop(extract_25d(s.image, s.label, e.z, e.scan_id), cfg.crop_size, rng));
      }
      auto [x, g] = pack(batch);
      model.zero_grad();
      Tensor loss = nn::dice_loss(model.forward(x), g);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batches + 1));
      }
      loss.backward();
      adamw_step(model.params(), optimizer, lr, cfg.weight_decay);
      loss_sum += lv;
      ++batches;
    }

    CurveRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(batches);
    const bool validate_now = (epoch - start_epoch) % cfg.val_every == 0 || epoch == cfg.epochs;
    if (validate_now) {
      std::tie(row.val_loss, row.val_dice) = validate_slices(model, scans, val_entries);
      if (!std::isfinite(row.val_loss)) throw TrainError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.log.rows.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);

    if (validate_now && row.val_loss < result.best_val_loss) {
      result.best_val_loss = row.val_loss;
      result.best_epoch = epoch;
      result.best_state.clear();
      for (const auto& [name, t] : model.state_tensors()) result.best_state.emplace_back(name, t.clone());
      if (hooks.on_improve) hooks.on_improve(row, model, optimizer);
    }
  }
  return result;
}

}  // namespace airseg
