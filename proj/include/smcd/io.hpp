#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>
#include <nlohmann/json.hpp>

#include "smcd/model.hpp"
#include "smcd/synthetic.hpp"

namespace smcd {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- raw files ---------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline json read_json(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": malformed JSON (" + e.what() + ")");
  }
}

inline void write_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

/// FNV-1a 64 of a file's bytes, as "fnv1a64:<hex>".
inline std::string file_hash(const std::string& path) {
  std::ostringstream os;
  os << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(read_file(path));
  return os.str();
}

// ---- PNG ---------------------------------------------------------------------

inline Image read_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG '" + path + "': " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path + "': " + img.message);
  }
  return out;
}

inline void write_png(const std::string& path, const Image& im) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.rgb.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path + "': " + img.message);
}

inline std::string frame_name(int i) {
  std::ostringstream os;
  os << "frame_" << std::setw(3) << std::setfill('0') << i << ".png";
  return os.str();
}

inline void write_frames(const std::string& dir, const std::vector<Image>& frames) {
  for (std::size_t i = 0; i < frames.size(); ++i) write_png((fs::path(dir) / frame_name(static_cast<int>(i))).string(), frames[i]);
}

/// frame_000.png, frame_001.png, ... until the first missing index.
inline std::vector<Image> read_frames(const std::string& dir) {
  std::vector<Image> out;
  for (int i = 0;; ++i) {
    const fs::path p = fs::path(dir) / frame_name(i);
    if (!fs::exists(p)) break;
    out.push_back(read_png(p.string()));
  }
  if (out.empty()) throw IoError("no frames (frame_000.png ...) in '" + dir + "'");
  return out;
}

// ---- trajectory files --------------------------------------------------------

struct TrajectoryFile {
  std::string caption;
  int frames = 0;
  std::vector<ObjectTrajectory> objects;
};

inline json trajectory_json(const std::string& caption, const std::vector<ObjectTrajectory>& objects) {
  json objs = json::array();
  int frames = 0;
  for (const auto& o : objects) {
    json boxes = json::array();
    for (const auto& b : o.boxes)
      boxes.push_back(b ? json::array({b->x_min, b->y_min, b->x_max, b->y_max}) : json(nullptr));
    objs.push_back({{"label", o.label}, {"boxes", boxes}});
    frames = o.frames();
  }
  return {{"caption", caption}, {"frames", frames}, {"objects", objs}};
}

/// Schema check with path-precise messages, e.g. "objects[0].boxes[3]".
inline TrajectoryFile parse_trajectory(const json& j, const std::string& where = "trajectory") {
  auto fail = [&](const std::string& path, const std::string& msg) -> void {
    throw ValidationError(where + ": " + path + ": " + msg);
  };
  if (!j.is_object()) fail("(root)", "expected an object");
  TrajectoryFile t;
  if (!j.contains("caption") || !j["caption"].is_string()) fail("caption", "expected a string");
  t.caption = j["caption"].get<std::string>();
  if (!j.contains("frames") || !j["frames"].is_number_integer() || j["frames"].get<long long>() < 1)
    fail("frames", "expected a positive integer");
  t.frames = j["frames"].get<int>();
  if (!j.contains("objects") || !j["objects"].is_array()) fail("objects", "expected an array");
  const auto& objs = j["objects"];
  if (objs.size() > static_cast<std::size_t>(kMaxObjects))
    fail("objects", "at most " + std::to_string(kMaxObjects) + " objects allowed");
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const std::string op = "objects[" + std::to_string(i) + "]";
    const auto& o = objs[i];
    if (!o.is_object()) fail(op, "expected an object");
    if (!o.contains("label") || !o["label"].is_string()) fail(op + ".label", "expected a string");
    if (!o.contains("boxes") || !o["boxes"].is_array()) fail(op + ".boxes", "expected an array");
    const auto& boxes = o["boxes"];
    if (boxes.size() != static_cast<std::size_t>(t.frames))
      fail(op + ".boxes", "expected " + std::to_string(t.frames) + " entries, got " + std::to_string(boxes.size()));
    ObjectTrajectory traj{o["label"].get<std::string>(), {}};
    for (std::size_t f = 0; f < boxes.size(); ++f) {
      const std::string bp = op + ".boxes[" + std::to_string(f) + "]";
      const auto& b = boxes[f];
      if (b.is_null()) {
        traj.boxes.emplace_back(std::nullopt);
        continue;
      }
      if (!b.is_array() || b.size() != 4) fail(bp, "expected null or [x_min, y_min, x_max, y_max]");
      double v[4];
      for (int k = 0; k < 4; ++k) {
        if (!b[static_cast<std::size_t>(k)].is_number()) fail(bp, "coordinates must be numbers");
        v[k] = b[static_cast<std::size_t>(k)].get<double>();
        if (!(v[k] >= 0.0 && v[k] <= 1.0)) fail(bp, "coordinate " + std::to_string(k) + " outside [0, 1]");
      }
      if (v[0] > v[2]) fail(bp, "x_min > x_max");
      if (v[1] > v[3]) fail(bp, "y_min > y_max");
      traj.boxes.emplace_back(BoundingBox{v[0], v[1], v[2], v[3]});
    }
    t.objects.push_back(std::move(traj));
  }
  return t;
}

inline TrajectoryFile load_trajectory(const std::string& path) { return parse_trajectory(read_json(path), path); }

// ---- dataset manifests -------------------------------------------------------

/// Writes frames under out/<name>/ and a manifest.json listing
/// {frames_dir, caption, trajectories} with paths relative to `out`.
inline void write_dataset(const std::string& out, const std::vector<Sample>& data) {
  json list = json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << i;
    write_frames((fs::path(out) / name.str()).string(), data[i].frames);
    list.push_back({{"frames_dir", name.str()},
                    {"caption", data[i].caption},
                    {"trajectories", trajectory_json(data[i].caption, data[i].trajectories)}});
  }
  write_json((fs::path(out) / "manifest.json").string(), list);
}

struct ManifestEntry {
  std::string name;  // frames_dir as written in the manifest
  Sample sample;
};

inline std::vector<ManifestEntry> load_dataset(const std::string& manifest_path) {
  const json j = read_json(manifest_path);
  if (!j.is_array()) throw ValidationError(manifest_path + ": expected a JSON list of samples");
  const fs::path root = fs::path(manifest_path).parent_path();
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string where = manifest_path + ": [" + std::to_string(i) + "]";
    const auto& e = j[i];
    if (!e.is_object() || !e.contains("frames_dir") || !e["frames_dir"].is_string())
      throw ValidationError(where + ".frames_dir: expected a string");
    if (!e.contains("caption") || !e["caption"].is_string()) throw ValidationError(where + ".caption: expected a string");
    if (!e.contains("trajectories")) throw ValidationError(where + ".trajectories: missing");
    ManifestEntry m;
    m.name = e["frames_dir"].get<std::string>();
    m.sample.caption = e["caption"].get<std::string>();
    m.sample.trajectories = parse_trajectory(e["trajectories"], where + ".trajectories").objects;
    m.sample.frames = read_frames((root / m.name).string());
    for (const auto& o : m.sample.trajectories)
      if (o.frames() != static_cast<int>(m.sample.frames.size()))
        throw ValidationError(where + ".trajectories: " + std::to_string(o.frames()) + " boxes for " +
                              std::to_string(m.sample.frames.size()) + " frames");
    out.push_back(std::move(m));
  }
  return out;
}

// ---- checkpoints -------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'C', 'D', '0', '0', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32_le(const std::string& in, std::size_t at) { return std::bit_cast<float>(get_u32_le(in, at)); }

}  // namespace detail

inline std::string checkpoint_bytes(const Model& m) {
  json tensors = json::object();
  std::string payload;
  for (const auto& [name, p] : m.params.all()) {
    tensors[name] = {{"shape", p.value.shape()},
                     {"dtype", "f32"},
                     {"byte_offset", payload.size()},
                     {"group", std::string(group_name(p.group))}};
    for (float v : p.value.vec()) detail::put_f32_le(payload, v);
  }
  const json meta = {{"format_version", kCheckpointVersion}, {"config", m.config}, {"stage", m.stage}, {"tensors", tensors}};
  const std::string mj = meta.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u32_le(out, static_cast<std::uint32_t>(mj.size()));
  return out + mj + payload;
}

inline void save_checkpoint(const std::string& path, const Model& m) { write_file(path, checkpoint_bytes(m)); }

inline Model parse_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  auto bad = [&](const std::string& msg) -> void { throw ValidationError(where + ": " + msg); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) bad("bad magic (not an SMCD0001 file)");
  const std::uint32_t mlen = detail::get_u32_le(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(mlen)) bad("truncated metadata");
  json meta;
  try {
    meta = json::parse(bytes.substr(12, mlen));
  } catch (const json::parse_error& e) {
    bad(std::string("metadata is not JSON: ") + e.what());
  }
  if (meta.value("format_version", -1) != kCheckpointVersion) bad("unsupported format_version");
  if (!meta.contains("config") || !meta.contains("tensors") || !meta["tensors"].is_object()) bad("missing config/tensors");
  Model m;
  m.config = meta["config"].get<ModelConfig>();
  m.config.validate();
  m.stage = meta.value("stage", -1);
  const std::size_t base = 12 + mlen, payload = bytes.size() - base;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& [name, t] : meta["tensors"].items()) {
    const std::string tp = "tensors." + name;
    if (t.value("dtype", std::string()) != "f32") bad(tp + ".dtype: only f32 is supported");
    if (!t.contains("shape") || !t["shape"].is_array() || !t.contains("byte_offset")) bad(tp + ": missing shape/byte_offset");
    const Shape shape = t["shape"].get<Shape>();
    for (int d : shape)
      if (d < 0) bad(tp + ".shape: negative extent");
    const std::size_t n = shape_numel(shape), off = t["byte_offset"].get<std::size_t>();
    if (off % 4 != 0 || off > payload || n * 4 > payload - off) bad(tp + ".byte_offset: outside the payload");
    spans.emplace_back(off, off + n * 4);
    Tensor<float> v(shape);
    for (std::size_t i = 0; i < n; ++i) v[i] = detail::get_f32_le(bytes, base + off + 4 * i);
    Group g = Group::resnet;
    try {
      g = group_from_name(t.value("group", std::string()));
    } catch (const Error&) {
      bad(tp + ".group: unknown group");
    }
    m.params.add(name, std::move(v), g);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) bad("tensor byte ranges overlap");
  validate_params(m.params, m.config.denoiser);
  return m;
}

inline Model load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path), path); }

}  // namespace smcd
