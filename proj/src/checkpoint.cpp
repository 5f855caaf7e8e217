#include "sbd/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "sbd/config.hpp"
#include "sbd/errors.hpp"

namespace sbd {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  std::string str(std::size_t n) { return std::string(take(n), n); }

  Tensor<float> tensor(const Shape& shape) {
    Tensor<float> t(shape);
    std::memcpy(t.data(), take(t.size() * sizeof(float)), t.size() * sizeof(float));
    return t;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw IoError("checkpoint is truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out = "SBD1";
  put<std::uint32_t>(out, kCheckpointVersion);
  const Json header{{"model", to_json(ckpt.model)},
                    {"vocab", to_json(ckpt.vocab)},
                    {"train", Json::parse(ckpt.train_json)}};
  const std::string h = header.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  put<std::int64_t>(out, ckpt.step);
  put<std::uint64_t>(out, ckpt.rng.key);
  put<std::uint64_t>(out, ckpt.rng.counter);
  const auto& slots = ckpt.params.slots();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(3 * slots.size()));
  for (const auto& s : slots) put_tensor(out, s.name, s.value);
  for (const auto& s : slots) put_tensor(out, s.name + "#m", s.m);
  for (const auto& s : slots) put_tensor(out, s.name + "#v", s.v);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != "SBD1") throw IoError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  Json header;
  try {
    header = Json::parse(r.str(r.get<std::uint32_t>()));
    c.model = denoiser_config_from_json(header.at("model"));
    c.vocab = vocab_from_json(header.at("vocab"));
    c.train_json = header.at("train").dump();
  } catch (const Json::exception& e) {
    throw IoError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint header is malformed: ") + e.what());
  }
  c.step = r.get<std::int64_t>();
  c.rng.key = r.get<std::uint64_t>();
  c.rng.counter = r.get<std::uint64_t>();

  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError("checkpoint tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    tensors.emplace_back(std::move(name), r.tensor(shape));
  }
  if (!r.done()) throw IoError("checkpoint has trailing bytes");
  if (count % 3 != 0) throw IoError("checkpoint tensor count is not a multiple of 3");

  const std::size_t n = count / 3;
  for (std::size_t i = 0; i < n; ++i) c.params.add(tensors[i].first, std::move(tensors[i].second));
  for (std::size_t i = 0; i < n; ++i) {
    auto& slot = c.params.slot(i);
    auto& m = tensors[n + i];
    auto& v = tensors[2 * n + i];
    if (m.first != slot.name + "#m" || v.first != slot.name + "#v" ||
        m.second.shape() != slot.value.shape() || v.second.shape() != slot.value.shape())
      throw IoError("checkpoint optimizer state does not match parameter '" + slot.name + "'");
    slot.m = std::move(m.second);
    slot.v = std::move(v.second);
    slot.steps = c.step;
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return deserialize_checkpoint(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

Transformer<float> model_from_checkpoint(const Checkpoint& ckpt) {
  return Transformer<float>(ckpt.model, ckpt.params);
}

}  // namespace sbd
