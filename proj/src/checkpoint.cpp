#include "mmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace mmoe {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'O', 'E'};
constexpr std::size_t kPrefix = 4 + 4 + 8;

std::size_t align_up(std::size_t n) { return (n + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }

struct Header {
  Json json;
  std::size_t payload_start = 0;
};

Header parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPrefix) throw FormatError("checkpoint truncated: missing file prefix");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes");
  const auto version = get_le<std::uint32_t>(bytes.subspan(4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes.subspan(8));
  if (header_len > bytes.size() - kPrefix) throw FormatError("checkpoint truncated: header runs past end of file");
  Header h;
  try {
    h.json = Json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  h.payload_start = align_up(kPrefix + header_len);
  return h;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const CheckpointMeta& meta) {
  Json index = Json::object();
  std::size_t offset = 0;
  for (const auto* p : model.parameters()) {
    if (index.contains(p->name)) throw FormatError("duplicate parameter name " + p->name);
    index[p->name] = Json{{"shape", p->value.shape()}, {"offset", offset}};
    offset = align_up(offset + p->value.numel() * sizeof(float));
  }
  Json header{{"format", "mmoe-checkpoint"},
              {"model", to_json(model.config)},
              {"strategy", to_json(meta.strategy)},
              {"step", meta.step}};
  if (meta.task) header["task"] = to_json(*meta.task);
  if (meta.seq_len) header["seq_len"] = *meta.seq_len;
  header["tensors"] = std::move(index);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align_up(out.size()), 0);
  const std::size_t payload_start = out.size();
  for (const auto* p : model.parameters()) {
    out.resize(payload_start + header["tensors"][p->name]["offset"].get<std::size_t>(), 0);
    for (float v : p->value.data()) put_f32(out, v);
  }
  out.resize(align_up(out.size()), 0);
  return out;
}

LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  const Header h = parse_header(bytes);
  LoadedCheckpoint ck;
  try {
    const ModelConfig cfg = model_config_from_json(h.json.at("model"));
    cfg.validate();
    ck.meta.strategy = strategy_config_from_json(h.json.at("strategy"));
    ck.meta.step = h.json.at("step").get<std::int64_t>();
    if (h.json.contains("task")) ck.meta.task = task_from_json(h.json.at("task"));
    if (h.json.contains("seq_len")) ck.meta.seq_len = h.json.at("seq_len").get<std::size_t>();
    Rng unused(0);
    ck.model = build_model<float>(cfg, unused);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  }
  const Json& index = h.json.at("tensors");
  auto params = ck.model.parameters();
  if (index.size() != params.size()) {
    throw FormatError("checkpoint lists " + std::to_string(index.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto* p : params) {
    if (!index.contains(p->name)) throw FormatError("checkpoint is missing tensor " + p->name);
    const Json& entry = index.at(p->name);
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != p->value.shape()) {
      throw FormatError("tensor " + p->name + " has shape " + shape_str(shape) + " in header, model expects " +
                        shape_str(p->value.shape()));
    }
    const std::size_t start = h.payload_start + entry.at("offset").get<std::size_t>();
    const std::size_t len = p->value.numel() * sizeof(float);
    if (start + len > bytes.size()) throw FormatError("checkpoint truncated inside tensor " + p->name);
    auto dst = p->value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes.subspan(start + 4 * i)));
    }
  }
  return ck;
}

void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  write_binary_file(path, serialize_checkpoint(model, meta));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_binary_file(path)); }

Json read_checkpoint_header(const std::filesystem::path& path) { return parse_header(read_binary_file(path)).json; }

std::vector<std::uint8_t> frame_f32(Json header, std::span<const float> payload) {
  header["count"] = payload.size();
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align_up(out.size()), 0);
  out.reserve(out.size() + payload.size() * sizeof(float));
  for (float v : payload) put_f32(out, v);
  out.resize(align_up(out.size()), 0);
  return out;
}

std::pair<Json, std::vector<float>> unframe_f32(std::span<const std::uint8_t> bytes) {
  Header h = parse_header(bytes);
  if (!h.json.contains("count") || !h.json["count"].is_number_unsigned()) throw FormatError("header has no payload count");
  const auto count = h.json["count"].get<std::size_t>();
  if (h.payload_start > bytes.size() || count > (bytes.size() - h.payload_start) / sizeof(float)) {
    throw FormatError("truncated payload: header lists " + std::to_string(count) + " floats");
  }
  std::vector<float> payload(count);
  for (std::size_t i = 0; i < count; ++i) {
    payload[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes.subspan(h.payload_start + 4 * i)));
  }
  return {std::move(h.json), std::move(payload)};
}

}  // namespace mmoe
