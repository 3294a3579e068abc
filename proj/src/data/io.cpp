#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "fflab/data.hpp"

namespace fflab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("short write to " + path.string());
}

[[noreturn]] void fail(const std::string& name, std::size_t pos, const std::string& what) {
  throw DataFormatError(name + ": " + what + " at byte " + std::to_string(pos));
}

// Netpbm header tokenizer: whitespace and '#' comments separate fields.
struct HeaderReader {
  const std::string& bytes;
  const std::string& name;
  std::size_t pos = 0;

  void skip() {
    while (pos < bytes.size()) {
      const unsigned char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(c)) {
        ++pos;
      } else {
        break;
      }
    }
  }

  int integer(const char* field) {
    skip();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) fail(name, start, std::string("expected ") + field);
    int v = 0;
    const auto [end, ec] = std::from_chars(bytes.data() + start, bytes.data() + pos, v);
    if (ec != std::errc() || end != bytes.data() + pos)
      fail(name, start, std::string(field) + " out of range");
    return v;
  }
};

// Truncates toward zero so a coordinate just below the image edge never
// rounds onto it; the error stays under 1e-6.
std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", std::trunc(v * 1e6) / 1e6);
  return buf;
}

}  // namespace

Image parse_image(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 2 || bytes[0] != 'P') fail(name, 0, "bad magic, expected P5 or P6");
  if (bytes[1] != '5' && bytes[1] != '6') fail(name, 1, "bad magic, expected P5 or P6");
  HeaderReader hr{bytes, name, 2};
  Image img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  const std::size_t wpos = hr.pos;
  img.width = hr.integer("width");
  img.height = hr.integer("height");
  if (img.width < 1 || img.height < 1) fail(name, wpos, "zero image size");
  const std::size_t mpos = hr.pos;
  const int maxval = hr.integer("maxval");
  if (maxval != 255) fail(name, mpos, "maxval " + std::to_string(maxval) + ", expected 255");
  if (hr.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[hr.pos])))
    fail(name, hr.pos, "missing whitespace after header");
  const std::size_t data = hr.pos + 1;
  const std::size_t want = static_cast<std::size_t>(img.width) * img.height * img.channels;
  const std::size_t have = bytes.size() - data;
  if (have < want)
    fail(name, data, "truncated pixel data, expected " + std::to_string(want) + " bytes, got " +
                         std::to_string(have));
  if (have > want) fail(name, data + want, "trailing bytes after pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data), bytes.end());
  return img;
}

void write_image(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3)
    throw std::invalid_argument("write_image: channels must be 1 or 3");
  std::string bytes = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) +
                      " " + std::to_string(image.height) + "\n255\n";
  bytes.append(image.pixels.begin(), image.pixels.end());
  spill(path, bytes);
}

Image read_image(const fs::path& path) { return parse_image(slurp(path), path.string()); }

void write_points(const fs::path& path, const PointSet& points) {
  std::string text = "x,y\n";
  for (const Point& p : points) text += fixed6(p.x) + "," + fixed6(p.y) + "\n";
  spill(path, text);
}

PointSet read_points(const fs::path& path) {
  std::istringstream in(slurp(path));
  const std::string name = path.string();
  std::string line;
  if (!std::getline(in, line) || (line != "x,y" && line != "x,y\r"))
    throw DataFormatError(name + ": expected header 'x,y' at line 1");
  PointSet points;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    Point p;
    const char* b = line.data();
    const char* e = b + line.size();
    bool ok = comma != std::string::npos;
    if (ok) {
      const auto rx = std::from_chars(b, b + comma, p.x);
      const auto ry = std::from_chars(b + comma + 1, e, p.y);
      ok = rx.ec == std::errc() && rx.ptr == b + comma && ry.ec == std::errc() && ry.ptr == e;
    }
    if (!ok || !std::isfinite(p.x) || !std::isfinite(p.y))
      throw DataFormatError(name + ": malformed point '" + line + "' at line " +
                            std::to_string(lineno));
    points.push_back(p);
  }
  return points;
}

Dataset generate_dataset(const SceneConfig& config, std::size_t count, std::uint64_t base_seed) {
  Dataset ds;
  ds.config = config;
  ds.config.seed = base_seed;
  for (std::size_t i = 0; i < count; ++i) {
    SceneConfig c = config;
    c.seed = base_seed + i;
    ds.scenes.push_back(generate_scene(c));
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%05zu", i);
    const char* ext = config.channels == 1 ? ".pgm" : ".ppm";
    ds.entries.push_back({std::string("images/") + stem + ext,
                          std::string("annotations/") + stem + ".csv",
                          ds.scenes.back().points.size(), c.seed});
  }
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& dataset) {
  if (dataset.entries.size() != dataset.scenes.size())
    throw std::invalid_argument("write_dataset: entries and scenes differ in length");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  json scenes = json::array();
  for (std::size_t i = 0; i < dataset.entries.size(); ++i) {
    const DatasetEntry& e = dataset.entries[i];
    write_image(dir / e.image_file, dataset.scenes[i].image);
    write_points(dir / e.annotation_file, dataset.scenes[i].points);
    scenes.push_back({{"image", e.image_file},
                      {"annotations", e.annotation_file},
                      {"count", dataset.scenes[i].points.size()},
                      {"seed", e.seed}});
  }
  json manifest{{"format", "fflab-dataset"},
                {"version", kManifestVersion},
                {"scene_config", dataset.config},
                {"scenes", scenes}};
  spill(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  const std::string mname = mpath.string();
  json manifest;
  try {
    manifest = json::parse(slurp(mpath));
  } catch (const json::parse_error& e) {
    throw DataFormatError(mname + ": " + e.what());
  }
  Dataset ds;
  try {
    if (manifest.at("format") != "fflab-dataset")
      throw DataFormatError(mname + ": not an fflab dataset manifest");
    if (manifest.at("version") != kManifestVersion)
      throw DataFormatError(mname + ": unsupported version " + manifest.at("version").dump());
    ds.config = manifest.at("scene_config").get<SceneConfig>();
    for (const json& s : manifest.at("scenes")) {
      DatasetEntry e;
      e.image_file = s.at("image").get<std::string>();
      e.annotation_file = s.at("annotations").get<std::string>();
      e.count = s.at("count").get<std::size_t>();
      e.seed = s.at("seed").get<std::uint64_t>();
      ds.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataFormatError(mname + ": " + e.what());
  }

  std::size_t on_disk = 0;
  if (fs::is_directory(dir / "images"))
    for (const auto& f : fs::directory_iterator(dir / "images"))
      if (f.is_regular_file()) ++on_disk;
  if (on_disk != ds.entries.size())
    throw DataFormatError(mname + ": lists " + std::to_string(ds.entries.size()) +
                          " scenes but images/ holds " + std::to_string(on_disk) + " files");

  for (const DatasetEntry& e : ds.entries) {
    Scene s{read_image(dir / e.image_file), read_points(dir / e.annotation_file)};
    if (s.points.size() != e.count)
      throw DataFormatError(e.annotation_file + ": holds " + std::to_string(s.points.size()) +
                            " points, manifest says " + std::to_string(e.count));
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const Point& p = s.points[i];
      if (!(p.x >= 0 && p.x < s.image.width && p.y >= 0 && p.y < s.image.height))
        throw DataFormatError(e.annotation_file + ": point " + std::to_string(i) +
                              " lies outside the image");
    }
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

}  // namespace fflab
