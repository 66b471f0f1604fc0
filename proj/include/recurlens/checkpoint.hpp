#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

#include "recurlens/error.hpp"
#include "recurlens/model.hpp"

namespace recurlens {

// Layout (little-endian), see docs/checkpoint-format.md:
//   "RLCK" | u32 version | u64 n | n bytes config JSON
//   u64 tensor count, then per tensor:
//   u32 name length | name | u32 rank | rank × u64 dims | numel × f64
inline constexpr char kCheckpointMagic[4] = {'R', 'L', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},
          {"n_prelude", c.n_prelude},
          {"n_core", c.n_core},
          {"n_coda", c.n_coda},
          {"sigma", c.sigma},
          {"r_max_train", c.r_max_train},
          {"eps", c.eps},
          {"mlp_ratio", c.mlp_ratio},
          {"combiner", to_string(c.combiner)},
          {"activation", to_string(c.activation)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d = j.at("d").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_prelude = j.at("n_prelude").get<std::size_t>();
    c.n_core = j.at("n_core").get<std::size_t>();
    c.n_coda = j.at("n_coda").get<std::size_t>();
    c.sigma = j.at("sigma").get<double>();
    c.r_max_train = j.at("r_max_train").get<std::size_t>();
    c.eps = j.at("eps").get<double>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    const auto comb = j.at("combiner").get<std::string>();
    const auto act = j.at("activation").get<std::string>();
    if (comb != "add" && comb != "concat_adapter") throw ConfigError("unknown combiner '" + comb + "'");
    if (act != "gelu" && act != "relu") throw ConfigError("unknown activation '" + act + "'");
    c.combiner = comb == "add" ? Combiner::Add : Combiner::ConcatAdapter;
    c.activation = act == "relu" ? Activation::Relu : Activation::Gelu;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what).data(), sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                     std::to_string(pos_));
    }
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const DepthRecurrentModel& m) {
  std::string out(kCheckpointMagic, 4);
  detail::put(out, kCheckpointVersion);
  const std::string cfg = config_to_json(m.config).dump();
  detail::put<std::uint64_t>(out, cfg.size());
  out += cfg;
  std::uint64_t count = 0;
  m.for_each_param([&](const std::string&, const Tensor&) { ++count; });
  detail::put(out, count);
  m.for_each_param([&](const std::string& name, const Tensor& t) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) detail::put<std::uint64_t>(out, dim);
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(double));
  });
  return out;
}

inline DepthRecurrentModel deserialize_checkpoint(std::string_view bytes) {
  detail::Reader rd(bytes);
  if (rd.take(4, "magic") != std::string_view(kCheckpointMagic, 4)) throw ParseError("not a checkpoint file");
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  const auto cfg_len = rd.get<std::uint64_t>("config length");
  const auto cfg_text = rd.take(cfg_len, "config");
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }
  DepthRecurrentModel m = DepthRecurrentModel::init(config_from_json(cfg_json), 0);
  std::map<std::string, Tensor*> slots;
  m.for_each_param([&](const std::string& name, Tensor& t) { slots[name] = &t; });
  const auto count = rd.get<std::uint64_t>("tensor count");
  if (count != slots.size()) {
    throw ParseError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                     std::to_string(slots.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = rd.get<std::uint32_t>("name length");
    const std::string name(rd.take(name_len, "name"));
    auto it = slots.find(name);
    if (it == slots.end()) throw ParseError("unexpected tensor '" + name + "'");
    const auto rank = rd.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& dim : shape) dim = rd.get<std::uint64_t>("dimension");
    Tensor& t = *it->second;
    if (shape != t.shape()) {
      throw DimensionError("tensor '" + name + "' stored as " + shape_str(shape) + ", config implies " +
                           shape_str(t.shape()));
    }
    const auto raw = rd.take(t.numel() * sizeof(double), "tensor data");
    std::memcpy(t.data().data(), raw.data(), raw.size());
    slots.erase(it);
  }
  if (!rd.done()) throw ParseError("trailing bytes after the last tensor");
  m.validate();
  return m;
}

/// 64-bit FNV-1a over the serialized checkpoint, as 16 hex digits.
inline std::string fingerprint_bytes(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string model_fingerprint(const DepthRecurrentModel& m) {
  return fingerprint_bytes(serialize_checkpoint(m));
}

inline void save_checkpoint(const std::string& path, const DepthRecurrentModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(m);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path);
}

inline DepthRecurrentModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace recurlens
