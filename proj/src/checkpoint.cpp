#include "deform/checkpoint.hpp"

#include "deform/training.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace deform {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ad::Tensor frame_tensor(const Frame& f) {
  ad::Tensor t({f.rows(), f.cols()});
  std::copy(f.data(), f.data() + f.size(), t.data());
  return t;
}

Frame tensor_frame(const ad::Tensor& t) {
  if (t.ndim() != 2) throw ParseError("checkpoint: normalization map is not 2-D");
  Frame f(t.dim(0), t.dim(1));
  std::copy(t.data(), t.data() + t.size(), f.data());
  return f;
}

NamedTensors stats_tensors(const NormStats& s) {
  ad::Tensor sm({3}), ss({3});
  for (int i = 0; i < 3; ++i) sm[i] = s.static_mean[i], ss[i] = s.static_std[i];
  return {{"stats.pixel_mean", frame_tensor(s.pixel_mean)},
          {"stats.pixel_std", frame_tensor(s.pixel_std)},
          {"stats.static_mean", sm},
          {"stats.static_std", ss},
          {"stats.epsilon", ad::Tensor({1}, s.epsilon)}};
}

}  // namespace

ModelCheckpoint make_checkpoint(const Model& model, const NormStats& stats, const std::string& source_tile,
                                const std::vector<ad::Tensor>* parameters, const std::vector<ad::Tensor>* ema) {
  ModelCheckpoint c;
  c.config = model.config_json();
  c.stats = stats;
  c.source_tile = source_tile;
  const auto params = model.parameters().all();
  auto fill = [&](NamedTensors& out, const std::vector<ad::Tensor>* values) {
    if (values && values->size() != params.size()) throw Error("checkpoint: tensor count does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) out.emplace_back(params[i]->name, values ? (*values)[i] : params[i]->value);
  };
  fill(c.parameters, parameters);
  fill(c.ema, ema ? ema : parameters);
  return c;
}

std::unique_ptr<Model> instantiate(const ModelCheckpoint& ckpt, bool use_ema) {
  auto model = make_model(ckpt.config, 0);
  const NamedTensors& src = use_ema ? ckpt.ema : ckpt.parameters;
  const auto params = model->parameters().all();
  if (src.size() != params.size())
    throw ParseError("checkpoint: " + std::to_string(src.size()) + " tensors for a model with " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (src[i].first != params[i]->name || src[i].second.shape() != params[i]->value.shape())
      throw ParseError("checkpoint: tensor '" + src[i].first + "' " + shape_string(src[i].second.shape()) +
                       " does not match parameter '" + params[i]->name + "' " + shape_string(params[i]->value.shape()));
    params[i]->value = src[i].second;
  }
  return model;
}

std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  nlohmann::json header;
  header["version"] = ckpt.version;
  header["config"] = ckpt.config;
  header["training"] = ckpt.training;
  header["source_tile"] = ckpt.source_tile;
  std::string payload;
  Index offset = 0;
  auto section = [&](const NamedTensors& tensors) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
      list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
      payload.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(double));
      offset += t.size();
    }
    return list;
  };
  header["parameters"] = section(ckpt.parameters);
  header["ema"] = section(ckpt.ema);
  header["stats"] = section(stats_tensors(ckpt.stats));

  const std::string text = header.dump();
  std::string out = std::string(ModelCheckpoint::kMagic) + "\n";
  const auto length = static_cast<std::uint64_t>(text.size());
  out.append(reinterpret_cast<const char*>(&length), sizeof length);
  out += text;
  out += payload;
  return out;
}

ModelCheckpoint deserialize_checkpoint(const std::string& bytes) {
  const std::string magic = std::string(ModelCheckpoint::kMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw ParseError("checkpoint: missing DEFCKPT1 magic");
  std::size_t pos = magic.size();
  std::uint64_t length = 0;
  if (bytes.size() < pos + sizeof length) throw ParseError("checkpoint: truncated header length");
  std::memcpy(&length, bytes.data() + pos, sizeof length);
  pos += sizeof length;
  if (bytes.size() - pos < length) throw ParseError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, length));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what());
  }
  const char* payload = bytes.data() + pos + length;
  const auto payload_values = static_cast<Index>((bytes.size() - pos - length) / sizeof(double));
  if ((bytes.size() - pos - length) % sizeof(double) != 0) throw ParseError("checkpoint: payload is not whole float64 values");

  ModelCheckpoint c;
  try {
    c.version = header.at("version").get<int>();
    if (c.version != ModelCheckpoint::kVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(c.version));
    c.config = header.at("config");
    c.training = header.at("training");
    c.source_tile = header.at("source_tile").get<std::string>();
    auto section = [&](const char* key) {
      NamedTensors out;
      for (const auto& e : header.at(key)) {
        ad::Tensor t(e.at("shape").get<ad::Shape>());
        const Index offset = e.at("offset").get<Index>();
        if (offset < 0 || offset + t.size() > payload_values)
          throw ParseError("checkpoint: tensor '" + e.at("name").get<std::string>() + "' lies outside the payload");
        std::memcpy(t.data(), payload + offset * sizeof(double), static_cast<std::size_t>(t.size()) * sizeof(double));
        out.emplace_back(e.at("name").get<std::string>(), std::move(t));
      }
      return out;
    };
    c.parameters = section("parameters");
    c.ema = section("ema");
    if (!header.contains("stats")) throw ParseError("checkpoint: normalization statistics missing");
    const NamedTensors stats = section("stats");
    auto find = [&](const std::string& name) -> const ad::Tensor& {
      for (const auto& [n, t] : stats)
        if (n == name) return t;
      throw ParseError("checkpoint: normalization statistic '" + name + "' missing");
    };
    c.stats.pixel_mean = tensor_frame(find("stats.pixel_mean"));
    c.stats.pixel_std = tensor_frame(find("stats.pixel_std"));
    const auto& sm = find("stats.static_mean");
    const auto& ss = find("stats.static_std");
    if (sm.size() != 3 || ss.size() != 3) throw ParseError("checkpoint: static statistics must have 3 entries");
    for (int i = 0; i < 3; ++i) c.stats.static_mean[i] = sm[i], c.stats.static_std[i] = ss[i];
    c.stats.epsilon = find("stats.epsilon")[0];
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what());
  }
  return c;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

std::string file_digest(const std::filesystem::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : read_file(path)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace deform
