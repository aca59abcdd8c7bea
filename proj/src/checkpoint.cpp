#include "llama/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace llama {

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"dim", c.dim},
                        {"n_heads", c.n_heads},
                        {"n_layers", c.n_layers},
                        {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len},
                        {"ffn_multiple", c.ffn_multiple},
                        {"rope_base", c.rope_base},
                        {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& doc, ModelConfig c) {
  if (!doc.is_object()) throw ConfigError("model config must be an object");
  for (const auto& [key, value] : doc.items()) {
    auto integer = [&](std::int64_t& field) {
      if (!value.is_number_integer()) throw ConfigError("model config '" + key + "' must be an integer");
      field = value.get<std::int64_t>();
    };
    auto real = [&](double& field) {
      if (!value.is_number()) throw ConfigError("model config '" + key + "' must be a number");
      field = value.get<double>();
    };
    if (key == "dim") integer(c.dim);
    else if (key == "n_heads") integer(c.n_heads);
    else if (key == "n_layers") integer(c.n_layers);
    else if (key == "vocab_size") integer(c.vocab_size);
    else if (key == "max_seq_len") integer(c.max_seq_len);
    else if (key == "ffn_multiple") integer(c.ffn_multiple);
    else if (key == "rope_base") real(c.rope_base);
    else if (key == "norm_eps") real(c.norm_eps);
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  return c;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  std::uint8_t u8(const char* field) {
    need(1, field);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint16_t u16(const char* field) {
    need(2, field);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (in_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + field);
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.bytes("LLMC");
  w.u32(kCheckpointVersion);
  nlohmann::json doc = to_json(checkpoint.config);
  if (checkpoint.tokenizer) doc["tokenizer"] = *checkpoint.tokenizer;
  const std::string config = doc.dump();
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.bytes(config);
  const auto tensors = checkpoint.weights.named();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("tensor name too long: " + t.name);
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.tensor.rank()));
    for (auto extent : t.tensor.shape()) w.u32(static_cast<std::uint32_t>(extent));
    for (float v : t.tensor.data()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != "LLMC") throw FormatError("checkpoint magic: expected \"LLMC\"");
  const auto version = r.u32("format version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version: expected " + std::to_string(kCheckpointVersion) + ", found " +
                      std::to_string(version));
  }
  const auto config_len = r.u32("config length");
  const std::string config_text = r.bytes(config_len, "config document");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(config_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config document: ") + e.what());
  }
  Checkpoint out;
  if (doc.contains("tokenizer")) {
    if (!doc["tokenizer"].is_string()) throw FormatError("checkpoint config document: tokenizer must be a string");
    out.tokenizer = doc["tokenizer"].get<std::string>();
    doc.erase("tokenizer");
  }
  try {
    out.config = model_config_from_json(doc);
    out.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config document: ") + e.what());
  }

  const auto count = r.u32("tensor count");
  const auto expected = expected_tensor_layout(out.config).size();
  if (count != expected) {
    throw FormatError("checkpoint tensor count: expected " + std::to_string(expected) + ", found " +
                      std::to_string(count));
  }
  std::vector<NamedTensor<float>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> t;
    t.name = r.bytes(r.u16("tensor name length"), "tensor name");
    const auto rank = r.u8("tensor rank");
    if (rank == 0 || rank > 2) throw FormatError("checkpoint tensor rank: " + std::to_string(rank) + " in '" + t.name + "'");
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto extent = r.u32("tensor extent");
      if (extent == 0) throw FormatError("checkpoint tensor extent: zero extent in '" + t.name + "'");
      shape.push_back(extent);
    }
    std::uint64_t numel = 1;
    for (auto e : shape) numel *= static_cast<std::uint64_t>(e);
    if (numel > r.remaining() / 4) throw FormatError("checkpoint truncated while reading tensor data");
    const std::string raw = r.bytes(static_cast<std::size_t>(numel) * 4, "tensor data");
    std::vector<float> values(static_cast<std::size_t>(numel));
    for (std::size_t j = 0; j < numel; ++j) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[j * 4 + b])) << (8 * b);
      values[j] = std::bit_cast<float>(bits);
    }
    t.tensor = Tensor(std::move(shape), std::move(values));
    tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("checkpoint trailing bytes after last tensor");
  out.weights = ModelWeights<float>::from_named(out.config, tensors);
  return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace llama
