#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "fflab/trainer.hpp"

namespace fflab {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O copies raw little-endian bytes");

namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', 'K'};
constexpr std::uint8_t kTagFloat64 = 0;
constexpr std::uint8_t kTagJson = 1;

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes.append(p, sizeof v);
  }
  void raw(const void* p, std::size_t n) { bytes.append(static_cast<const char*>(p), n); }
  std::string bytes;
};

class Reader {
 public:
  Reader(std::string bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw CheckpointError(name_ + ": " + what + " at byte " + std::to_string(pos_));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) +
           " bytes, " + std::to_string(bytes_.size() - pos_) + " left)");
  }
  std::string bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

struct Entry {
  std::uint8_t tag = 0;
  std::vector<std::uint32_t> dims;
  std::string payload;
};

void write_entry(Writer& w, const std::string& name, std::uint8_t tag,
                 const std::vector<std::uint32_t>& dims, const void* data, std::size_t bytes) {
  w.put(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  w.put(tag);
  w.put(static_cast<std::uint8_t>(dims.size()));
  for (std::uint32_t d : dims) w.put(d);
  w.raw(data, bytes);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Parses the whole file into named entries. Any byte left over is an error.
std::map<std::string, Entry> parse(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  if (r.take(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic, expected FFCK");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    r.fail("unsupported version " + std::to_string(version) + ", expected " +
           std::to_string(kCheckpointVersion));
  const auto count = r.get<std::uint32_t>("entry count");
  std::map<std::string, Entry> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.take(len, "name");
    Entry entry;
    entry.tag = r.get<std::uint8_t>("dtype tag");
    if (entry.tag != kTagFloat64 && entry.tag != kTagJson)
      r.fail("unknown dtype tag " + std::to_string(entry.tag) + " for '" + name + "'");
    const auto ndim = r.get<std::uint8_t>("ndim");
    std::uint64_t elems = 1;
    for (int d = 0; d < ndim; ++d) {
      entry.dims.push_back(r.get<std::uint32_t>("dims"));
      elems *= entry.dims.back();
      if (elems > (std::uint64_t{1} << 34)) r.fail("implausible tensor size for '" + name + "'");
    }
    const std::size_t width = entry.tag == kTagFloat64 ? sizeof(double) : 1;
    entry.payload = r.take(static_cast<std::size_t>(elems) * width, "values");
    if (!entries.emplace(name, std::move(entry)).second) r.fail("duplicate entry '" + name + "'");
  }
  if (!r.done()) r.fail("trailing bytes after last entry");
  return entries;
}

ModelConfig config_of(const std::map<std::string, Entry>& entries,
                      const std::filesystem::path& path) {
  const auto it = entries.find(kConfigEntry);
  if (it == entries.end() || it->second.tag != kTagJson)
    throw CheckpointError(path.string() + ": missing model config entry");
  try {
    return model_config_from_json(json::parse(it->second.payload));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad model config: " + e.what());
  }
}

void assign(FFNet& model, const std::map<std::string, Entry>& entries,
            const std::filesystem::path& path) {
  std::vector<std::pair<std::string, Tensor>> targets;
  for (const ParamRef& p : model.parameters()) targets.emplace_back(p.name, p.tensor);
  for (const BufferRef& b : model.buffers()) targets.emplace_back(b.name, b.tensor);
  if (entries.size() != targets.size() + 1)
    throw CheckpointError(path.string() + ": holds " + std::to_string(entries.size() - 1) +
                          " tensors, model expects " + std::to_string(targets.size()));
  // Check everything before writing anything so a bad file leaves the model intact.
  for (const auto& [name, t] : targets) {
    const auto it = entries.find(name);
    if (it == entries.end() || it->second.tag != kTagFloat64)
      throw CheckpointError(path.string() + ": missing tensor '" + name + "'");
    const Shape s = t.shape();
    const std::vector<std::uint32_t> want = {static_cast<std::uint32_t>(s.n),
                                             static_cast<std::uint32_t>(s.c),
                                             static_cast<std::uint32_t>(s.h),
                                             static_cast<std::uint32_t>(s.w)};
    if (it->second.dims != want)
      throw CheckpointError(path.string() + ": shape mismatch for '" + name + "', model has " +
                            s.str());
  }
  for (auto& [name, t] : targets) {
    const Entry& e = entries.at(name);
    std::memcpy(t.data().data(), e.payload.data(), e.payload.size());
  }
}

}  // namespace

void save_checkpoint(const FFNet& model, const std::filesystem::path& path) {
  Writer w;
  w.raw(kMagic, 4);
  w.put(kCheckpointVersion);
  const auto params = model.parameters();
  const auto buffers = model.buffers();
  w.put(static_cast<std::uint32_t>(1 + params.size() + buffers.size()));
  json cfg;
  to_json(cfg, model.config());
  const std::string text = cfg.dump();
  write_entry(w, kConfigEntry, kTagJson, {static_cast<std::uint32_t>(text.size())}, text.data(),
              text.size());
  auto put_tensor = [&](const std::string& name, const Tensor& t) {
    const Shape s = t.shape();
    write_entry(w, name, kTagFloat64,
                {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                 static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)},
                t.values().data(), t.numel() * sizeof(double));
  };
  for (const ParamRef& p : params) put_tensor(p.name, p.tensor);
  for (const BufferRef& b : buffers) put_tensor(b.name, b.tensor);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw std::ios_base::failure("short write to " + path.string());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  return config_of(parse(path), path);
}

std::unique_ptr<FFNet> load_checkpoint(const std::filesystem::path& path) {
  const auto entries = parse(path);
  auto model = std::make_unique<FFNet>(config_of(entries, path));
  assign(*model, entries, path);
  return model;
}

void load_checkpoint_into(FFNet& model, const std::filesystem::path& path) {
  assign(model, parse(path), path);
}

}  // namespace fflab
