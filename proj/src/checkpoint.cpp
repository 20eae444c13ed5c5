#include "airseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>
#include <limits>

#include "airseg/fsutil.hpp"

namespace airseg {

using nlohmann::json;
using nn::Tensor;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json to_json(const nn::ArchConfig& a) {
  return json{{"backbone_widths", a.backbone_widths}, {"bifpn_width", a.bifpn_width},
              {"bifpn_repeats", a.bifpn_repeats},     {"head_blocks", a.head_blocks},
              {"head_width", a.head_width},           {"classes", a.classes},
              {"fusion_eps", a.fusion_eps}};
}

nn::ArchConfig arch_config_from_json(const json& j, nn::ArchConfig a) {
  if (!j.is_object()) throw std::invalid_argument("arch config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "backbone_widths") a.backbone_widths = value.get<std::array<std::size_t, 3>>();
    else if (key == "bifpn_width") a.bifpn_width = value.get<std::size_t>();
    else if (key == "bifpn_repeats") a.bifpn_repeats = value.get<std::size_t>();
    else if (key == "head_blocks") a.head_blocks = value.get<std::size_t>();
    else if (key == "head_width") a.head_width = value.get<std::size_t>();
    else if (key == "classes") a.classes = value.get<std::size_t>();
    else if (key == "fusion_eps") a.fusion_eps = value.get<double>();
    else throw std::invalid_argument("unknown arch config key '" + key + "'");
  }
  a.validate();
  return a;
}

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}
  template <typename V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > buf.size() - pos) throw CheckpointError("checkpoint is truncated");
    const std::uint8_t* p = buf.data() + pos;
    pos += n;
    return p;
  }
  bool done() const { return pos == buf.size(); }

  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

void encode_tensor(Writer& w, const std::string& name, const Tensor& t) {
  if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name);
  if (t.rank() > 0xFF) throw CheckpointError("tensor rank too large: " + name);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.put<std::uint8_t>(0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.bytes(t.data().data(), t.numel() * sizeof(float));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes("MSEG", 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) encode_tensor(w, name, t);

  if (c.meta) {
    const json j{{"arch", to_json(c.meta->arch)}, {"epoch", c.meta->epoch}, {"val_loss", c.meta->val_loss}};
    const std::string text = j.dump();
    w.bytes("META", 4);
    w.put<std::uint64_t>(text.size());
    w.bytes(text.data(), text.size());
  }
  if (c.optimizer) {
    const AdamWState& s = *c.optimizer;
    Writer body;
    body.put<double>(s.beta1);
    body.put<double>(s.beta2);
    body.put<double>(s.eps);
    body.put<std::uint64_t>(s.step);
    body.put<std::uint32_t>(static_cast<std::uint32_t>(s.m.size()));
    for (std::size_t i = 0; i < s.m.size(); ++i) {
      body.put<std::uint64_t>(s.m[i].size());
      body.bytes(s.m[i].data(), s.m[i].size() * sizeof(double));
      body.bytes(s.v[i].data(), s.v[i].size() * sizeof(double));
    }
    w.bytes("ADMW", 4);
    w.put<std::uint64_t>(body.out.size());
    w.bytes(body.out.data(), body.out.size());
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(r.take(4), "MSEG", 4) != 0) throw CheckpointError("not a weights file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported weights file version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();

  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name(reinterpret_cast<const char*>(r.take(len)), len);
    if (r.get<std::uint8_t>() != 0) throw CheckpointError("tensor " + name + ": unsupported dtype");
    const auto rank = r.get<std::uint8_t>();
    nn::Shape shape;
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(r.get<std::uint32_t>());
      n *= shape.back();
    }
    if (n > (bytes.size() - r.pos) / sizeof(float)) throw CheckpointError("checkpoint is truncated");
    std::vector<float> data(n);
    std::memcpy(data.data(), r.take(n * sizeof(float)), n * sizeof(float));
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }

  while (!r.done()) {
    const std::string tag(reinterpret_cast<const char*>(r.take(4)), 4);
    const auto len = r.get<std::uint64_t>();
    if (len > bytes.size() - r.pos) throw CheckpointError("checkpoint is truncated");
    Reader sec(std::span<const std::uint8_t>(r.take(len), len));
    if (tag == "META") {
      json j;
      try {
        j = json::parse(sec.buf.begin(), sec.buf.end());
      } catch (const json::exception& e) {
        throw CheckpointError(std::string("bad META section: ") + e.what());
      }
      CheckpointMeta m;
      m.arch = arch_config_from_json(j.at("arch"));
      m.epoch = j.at("epoch").get<std::size_t>();
      m.val_loss = j.at("val_loss").is_number() ? j.at("val_loss").get<double>() : std::numeric_limits<double>::quiet_NaN();
      c.meta = m;
    } else if (tag == "ADMW") {
      AdamWState s;
      s.beta1 = sec.get<double>();
      s.beta2 = sec.get<double>();
      s.eps = sec.get<double>();
      s.step = sec.get<std::uint64_t>();
      const auto n = sec.get<std::uint32_t>();
      for (std::uint32_t i = 0; i < n; ++i) {
        const auto k = sec.get<std::uint64_t>();
        if (k > sec.buf.size() / sizeof(double)) throw CheckpointError("checkpoint is truncated");
        std::vector<double> m(k), v(k);
        std::memcpy(m.data(), sec.take(k * sizeof(double)), k * sizeof(double));
        std::memcpy(v.data(), sec.take(k * sizeof(double)), k * sizeof(double));
        s.m.push_back(std::move(m));
        s.v.push_back(std::move(v));
      }
      c.optimizer = std::move(s);
    }
    // unknown sections are skipped
  }
  return c;
}

void save_checkpoint(const nn::MEDSeg& model, const AdamWState* optimizer, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  Checkpoint c;
  c.tensors = model.state_tensors();
  c.meta = meta;
  c.meta->arch = model.config();
  if (optimizer) c.optimizer = *optimizer;
  write_file_atomic(path, encode_checkpoint(c));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const nn::ArchConfig& fallback_arch) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  Checkpoint c = decode_checkpoint(read_file_bytes(path));
  CheckpointMeta meta = c.meta ? *c.meta : CheckpointMeta{fallback_arch, 0, 0.0};
  LoadedCheckpoint out{nn::MEDSeg(meta.arch), {}, false, meta};
  std::map<std::string, Tensor> named(c.tensors.begin(), c.tensors.end());
  try {
    out.model.load_state(named);
  } catch (const nn::ShapeError& e) {
    throw CheckpointError(std::string("checkpoint does not match the architecture: ") + e.what());
  }
  if (c.optimizer) {
    const auto& params = out.model.params();
    const bool fresh = c.optimizer->m.empty() && c.optimizer->v.empty() && c.optimizer->step == 0;
    bool ok = fresh || (c.optimizer->m.size() == params.size() && c.optimizer->v.size() == params.size());
    for (std::size_t i = 0; ok && !fresh && i < params.size(); ++i)
      ok = c.optimizer->m[i].size() == params[i].tensor.numel() && c.optimizer->v[i].size() == params[i].tensor.numel();
    if (!ok) throw CheckpointError("optimizer section does not match the model parameters");
    out.optimizer = std::move(*c.optimizer);
    out.has_optimizer = true;
  }
  return out;
}

}  // namespace airseg
