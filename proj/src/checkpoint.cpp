#include "sharelora/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sharelora/errors.hpp"

namespace sharelora {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

constexpr int kCheckpointVersion = 1;

std::uint64_t fnv1a(const char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<NamedTensor> checkpoint_tensors(const TinyTransformer& model) {
  if (!model.scheme().is_adapter_mode()) return model.base_parameters();
  std::vector<NamedTensor> out = model.trainable_parameters();
  for (const LayerAdapter& la : model.adapter_set().adapters) {
    if (la.frozen_a) out.push_back({owned_param_name(la.layer_index, la.module_type, MatrixRole::kA), la.a});
  }
  return out;
}

Checkpoint make_checkpoint(const TinyTransformer& model, std::uint64_t base_seed, std::uint64_t adapter_seed) {
  Checkpoint c;
  c.header = {{"format", "sharelora-checkpoint"},
              {"version", kCheckpointVersion},
              {"spec", to_json(model.spec())},
              {"spec_hash", std::to_string(spec_hash(model.spec()))},
              {"scheme", to_json(model.scheme())},
              {"base_seed", base_seed},
              {"adapter_seed", adapter_seed}};
  for (const NamedTensor& t : checkpoint_tensors(model)) c.tensors.emplace_back(t.name, t.tensor);
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::string header = ckpt.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError("not a sharelora checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (stored != fnv1a(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch");

  Reader r(bytes, body);
  r.str(sizeof kCheckpointMagic, "magic");
  Checkpoint c;
  const auto header_len = r.get<std::uint64_t>("header length");
  try {
    c.header = nlohmann::json::parse(r.str(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (c.header.value("format", "") != "sharelora-checkpoint" || c.header.value("version", 0) != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint format or version");
  }
  const auto n = r.get<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto name = r.str(r.get<std::uint32_t>("name length"), "tensor name");
    const auto ndim = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.get<std::uint64_t>("dims"));
    const std::size_t numel = shape_numel(shape);
    if (numel > r.remaining() / sizeof(double)) throw CheckpointError("checkpoint truncated in tensor " + name);
    std::vector<double> values(numel);
    for (double& v : values) v = r.get<double>("tensor data");
    c.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
  }
  if (r.pos() != body) throw CheckpointError("trailing bytes after the last tensor");
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(ckpt);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

TinyTransformer restore_model(const Checkpoint& ckpt) {
  ModelSpec spec;
  AdapterScheme scheme;
  std::uint64_t base_seed = 0, adapter_seed = 0;
  try {
    spec = model_spec_from_json(ckpt.header.at("spec"));
    scheme = scheme_from_json(ckpt.header.at("scheme"));
    base_seed = ckpt.header.at("base_seed").get<std::uint64_t>();
    adapter_seed = ckpt.header.at("adapter_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint header is invalid: ") + e.what());
  }
  if (ckpt.header.value("spec_hash", "") != std::to_string(spec_hash(spec))) {
    throw CheckpointError("checkpoint spec_hash does not match its spec");
  }
  TinyTransformer model(spec, scheme, base_seed, adapter_seed);
  std::vector<NamedTensor> slots = checkpoint_tensors(model);
  if (slots.size() != ckpt.tensors.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(slots.size()));
  }
  for (NamedTensor& slot : slots) {
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const auto& e) { return e.first == slot.name; });
    if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint is missing tensor " + slot.name);
    if (it->second.shape() != slot.tensor.shape()) {
      throw CheckpointError("tensor " + slot.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                            shape_str(slot.tensor.shape()));
    }
    auto dst = slot.tensor.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
  }
  return model;
}

}  // namespace sharelora
