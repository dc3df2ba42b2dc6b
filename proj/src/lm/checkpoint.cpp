#include "gpelab/lm/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace gpelab::lm {
namespace {

using nlohmann::json;
using Code = CheckpointError::Code;

constexpr char kMagic[8] = {'G', 'P', 'E', 'L', 'A', 'B', 'C', 'K'};

std::uint64_t fnv1a(const std::string& bytes, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

void put_floats(std::string& out, const std::vector<float>& xs) {
  for (float x : xs) put_le(out, std::bit_cast<std::uint32_t>(x));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  void need(std::size_t n, const char* what) const {
    if (end_ - pos_ < n) {
      throw CheckpointError(Code::kTruncated, std::string("checkpoint truncated while reading ") + what);
    }
  }

  template <class U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<float> get_floats(std::size_t n, const char* what) {
    if (n > (end_ - pos_) / 4) {
      throw CheckpointError(Code::kTruncated, std::string("checkpoint truncated while reading ") + what);
    }
    std::vector<float> xs(n);
    for (auto& x : xs) x = std::bit_cast<float>(get_le<std::uint32_t>(what));
    return xs;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

json header_json(const Checkpoint& c) {
  json tensors = json::array();
  for (const auto& t : c.tensors) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  json log = json::array();
  for (const auto& r : c.state.log) log.push_back({r.iter, r.loss, r.lr});
  json h{{"model", to_json(c.model)},
         {"train", c.train ? to_json(*c.train) : json(nullptr)},
         {"vocab", c.vocab},
         {"tensors", tensors},
         {"iteration", c.state.iteration},
         {"rng_state", c.state.sampler_state},
         {"has_optimizer", c.state.optimizer.has_value()},
         {"optimizer_step", c.state.optimizer ? c.state.optimizer->step : 0},
         {"loss_log", log},
         {"extra", c.extra}};
  return h;
}

}  // namespace

std::string to_string(CheckpointError::Code code) {
  switch (code) {
    case Code::kIo: return "io";
    case Code::kBadMagic: return "bad_magic";
    case Code::kVersion: return "version";
    case Code::kTruncated: return "truncated";
    case Code::kCorrupt: return "corrupt";
    case Code::kShape: return "shape";
  }
  return "unknown";
}

Checkpoint make_checkpoint(const Transformer<float>& model, const corpus::Vocab& vocab,
                           const std::optional<TrainConfig>& train, const TrainState& state) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.vocab = vocab.serialize();
  for (const auto& t : model.tensors()) c.tensors.push_back({t.name, t.shape});
  const auto p = model.parameters();
  c.parameters.assign(p.begin(), p.end());
  c.state = state;
  return c;
}

Transformer<float> model_from_checkpoint(const Checkpoint& ckpt) {
  try {
    ckpt.model.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(Code::kCorrupt, std::string("invalid model config in checkpoint: ") + e.what());
  }
  Transformer<float> model(ckpt.model);
  const auto& layout = model.tensors();
  if (layout.size() != ckpt.tensors.size()) {
    throw CheckpointError(Code::kShape, "checkpoint has " + std::to_string(ckpt.tensors.size()) +
                                            " tensors, config implies " +
                                            std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != ckpt.tensors[i].name || layout[i].shape != ckpt.tensors[i].shape) {
      throw CheckpointError(Code::kShape, "tensor " + std::to_string(i) + " (" +
                                              ckpt.tensors[i].name +
                                              ") does not match the model layout");
    }
  }
  if (ckpt.parameters.size() != model.num_parameters()) {
    throw CheckpointError(Code::kShape, "parameter count does not match the model layout");
  }
  std::copy(ckpt.parameters.begin(), ckpt.parameters.end(), model.parameters().begin());
  return model;
}

corpus::Vocab vocab_from_checkpoint(const Checkpoint& ckpt) {
  return corpus::Vocab::deserialize(ckpt.vocab);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::size_t n = ckpt.parameters.size();
  if (ckpt.state.optimizer &&
      (ckpt.state.optimizer->m.size() != n || ckpt.state.optimizer->v.size() != n)) {
    throw CheckpointError(Code::kShape, "optimizer state size does not match parameters");
  }
  std::string out(kMagic, sizeof(kMagic));
  put_le(out, kCheckpointVersion);
  const std::string header = header_json(ckpt).dump();
  put_le(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  put_le(out, static_cast<std::uint64_t>(n));
  put_floats(out, ckpt.parameters);
  if (ckpt.state.optimizer) {
    put_floats(out, ckpt.state.optimizer->m);
    put_floats(out, ckpt.state.optimizer->v);
  }
  put_le(out, fnv1a(out, out.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(Code::kIo, "cannot open " + tmp + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(Code::kIo, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw CheckpointError(Code::kIo, "cannot move checkpoint into place at " + path + ": " + ec.message());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Code::kIo, "cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    if (bytes.size() < sizeof(kMagic) &&
        std::memcmp(bytes.data(), kMagic, bytes.size()) == 0) {
      throw CheckpointError(Code::kTruncated, "checkpoint truncated inside the magic bytes");
    }
    throw CheckpointError(Code::kBadMagic, path + " is not a gpelab checkpoint");
  }
  if (bytes.size() < sizeof(kMagic) + 4 + 8 + 8) {
    throw CheckpointError(Code::kTruncated, "checkpoint truncated before the header");
  }
  Reader r(bytes, bytes.size() - 8);
  r.get_bytes(sizeof(kMagic), "magic");
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Code::kVersion, "checkpoint format version " + std::to_string(version) +
                                              " is not supported (expected " +
                                              std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = r.get_le<std::uint64_t>("header length");
  const std::string header = r.get_bytes(header_len, "header");

  json h;
  Checkpoint c;
  try {
    h = json::parse(header);
    c.model = model_config_from_json(h.at("model"));
    if (!h.at("train").is_null()) c.train = train_config_from_json(h.at("train"));
    c.vocab = h.at("vocab").get<std::string>();
    for (const auto& t : h.at("tensors")) {
      c.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>()});
    }
    c.state.iteration = h.at("iteration").get<int>();
    c.state.sampler_state = h.at("rng_state").get<std::string>();
    for (const auto& row : h.at("loss_log")) {
      c.state.log.push_back({row.at(0).get<int>(), row.at(1).get<double>(), row.at(2).get<double>()});
    }
    c.extra = h.value("extra", json::object());
  } catch (const std::exception& e) {
    // A cut inside the header shows up here only if the length field lied.
    throw CheckpointError(Code::kCorrupt, std::string("bad checkpoint header: ") + e.what());
  }

  const auto n = r.get_le<std::uint64_t>("parameter count");
  c.parameters = r.get_floats(n, "parameters");
  if (h.at("has_optimizer").get<bool>()) {
    OptimizerState opt;
    opt.m = r.get_floats(n, "optimizer moments");
    opt.v = r.get_floats(n, "optimizer moments");
    opt.step = h.at("optimizer_step").get<std::int64_t>();
    c.state.optimizer = std::move(opt);
  }
  if (r.pos() != bytes.size() - 8) {
    throw CheckpointError(Code::kCorrupt, "unexpected trailing bytes in checkpoint");
  }
  Reader tail(bytes, bytes.size());
  tail.get_bytes(bytes.size() - 8, "payload");
  if (tail.get_le<std::uint64_t>("checksum") != fnv1a(bytes, bytes.size() - 8)) {
    throw CheckpointError(Code::kCorrupt, "checkpoint checksum mismatch");
  }
  return c;
}

}  // namespace gpelab::lm
