#include "diffcls/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "byte_io.hpp"
#include "diffcls/error.hpp"
#include "json.hpp"

namespace diffcls {

using nlohmann::json;

namespace {

constexpr char kMagic[5] = "CKPT";
constexpr std::uint32_t kVersion = 1;
constexpr const char* kFormat = "diffcls-checkpoint";

json schedule_json(const ScheduleConfig& s) {
  json j = {{"type", to_string(s.kind)}, {"T", s.steps}};
  if (s.kind == ScheduleKind::Linear) {
    j["beta1"] = s.beta1;
    j["betaT"] = s.betaT;
  } else {
    j["s"] = s.offset;
  }
  return j;
}

json encoder_json(const EncoderConfig& e) {
  return {{"kind", to_string(e.kind)},
          {"hidden", e.hidden},
          {"attention_dim", e.attention_dim},
          {"heads", e.heads},
          {"patch", e.patch}};
}

}  // namespace

std::string to_string(CheckpointKind kind) {
  return kind == CheckpointKind::Guidance ? "guidance" : "diffusion";
}

std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& path) {
  std::filesystem::path out = path;
  out.replace_extension(".json");
  return out;
}

void quantize_state(StateList& state) {
  for (auto& entry : state)
    for (double& v : entry.values) v = static_cast<double>(static_cast<float>(v));
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info,
                     const StateList& state) {
  if (path.extension() == ".json") {
    throw UsageError("checkpoint path must not end in .json: " + path.string());
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write checkpoint " + path.string());
    os.write(kMagic, 4);
    io::write_le<std::uint32_t>(os, kVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(state.size()));
    for (const auto& entry : state) {
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entry.name.size()));
      os.write(entry.name.data(), static_cast<std::streamsize>(entry.name.size()));
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entry.shape.size()));
      for (std::size_t d : entry.shape) io::write_le<std::uint64_t>(os, d);
      for (double v : entry.values) io::write_f32(os, v);
    }
    if (!os) throw ConfigError("failed writing checkpoint " + path.string());
  }

  json tensors = json::array();
  for (const auto& entry : state) tensors.push_back({{"name", entry.name}, {"shape", entry.shape}});
  const RunConfig& c = info.config;
  json manifest = {
      {"format", kFormat},
      {"version", kVersion},
      {"kind", to_string(info.kind)},
      {"blob", path.filename().string()},
      {"config_hash", info.config_hash},
      {"guidance_hash", info.guidance_hash},
      {"image",
       {{"channels", info.image.channels}, {"height", info.image.height}, {"width", info.image.width}}},
      {"classes", info.classes},
      {"class_names", info.class_names},
      {"schedule", schedule_json(c.schedule)},
      {"embedding", {{"kind", to_string(c.embedding.kind)}, {"dim", c.embedding.dim}}},
      {"architecture",
       {{"encoder", encoder_json(c.encoder)},
        {"activation", to_string(c.activation)},
        {"guidance_backbone", encoder_json(c.guidance_backbone)}}},
      {"config", json::parse(c.to_json())},
      {"tensors", tensors},
  };
  std::ofstream ms(checkpoint_manifest_path(path));
  if (!ms) throw ConfigError("cannot write checkpoint manifest for " + path.string());
  ms << manifest.dump(2) << '\n';
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  const auto mpath = checkpoint_manifest_path(path);
  std::ifstream is(mpath);
  if (!is) throw FormatError("missing checkpoint manifest " + mpath.string());
  try {
    const json m = json::parse(is);
    if (m.value("format", "") != kFormat) throw FormatError("not a checkpoint manifest: " + mpath.string());
    if (m.at("version").get<std::uint32_t>() != kVersion) {
      throw FormatError("unsupported checkpoint version in " + mpath.string());
    }
    CheckpointInfo info;
    const std::string kind = m.at("kind").get<std::string>();
    if (kind == "guidance") {
      info.kind = CheckpointKind::Guidance;
    } else if (kind == "diffusion") {
      info.kind = CheckpointKind::Diffusion;
    } else {
      throw FormatError("unknown checkpoint kind '" + kind + "'");
    }
    info.config = RunConfig::from_json(m.at("config").dump());
    info.config_hash = m.at("config_hash").get<std::string>();
    info.guidance_hash = m.value("guidance_hash", "");
    const json& img = m.at("image");
    info.image = {img.at("channels").get<std::size_t>(), img.at("height").get<std::size_t>(),
                  img.at("width").get<std::size_t>()};
    info.classes = m.at("classes").get<std::size_t>();
    info.class_names = m.value("class_names", std::vector<std::string>{});
    if (info.config.hash() != info.config_hash) {
      throw FormatError("checkpoint manifest " + mpath.string() +
                        " config does not match its recorded hash");
    }
    return info;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + mpath.string() + ": " + e.what());
  }
}

void load_checkpoint_state(const std::filesystem::path& path, StateList& state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  io::expect_magic(is, kMagic, "checkpoint");
  if (io::read_le<std::uint32_t>(is, "checkpoint version") != kVersion) {
    throw FormatError("unsupported checkpoint version in " + path.string());
  }
  const auto count = io::read_le<std::uint32_t>(is, "tensor count");
  std::map<std::string, StateEntry*> targets;
  for (auto& entry : state) targets[entry.name] = &entry;
  if (count != state.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(state.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io::read_le<std::uint32_t>(is, "tensor name length");
    if (len > 4096) throw FormatError("corrupt checkpoint tensor name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("unexpected end of checkpoint");
    const auto rank = io::read_le<std::uint32_t>(is, "tensor rank");
    if (rank > 8) throw FormatError("corrupt checkpoint tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(io::read_le<std::uint64_t>(is, "tensor dim"));
    const auto it = targets.find(name);
    if (it == targets.end()) throw FormatError("unexpected tensor '" + name + "' in checkpoint");
    StateEntry& target = *it->second;
    if (target.shape != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) +
                        " in checkpoint, model expects " + shape_string(target.shape));
    }
    for (double& v : target.values) v = io::read_f32(is, "tensor values");
    targets.erase(it);
  }
  if (!targets.empty()) {
    throw FormatError("checkpoint is missing tensor '" + targets.begin()->first + "'");
  }
}

}  // namespace diffcls
