#include "msgc/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "msgc/rng.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Little-endian byte buffer helpers
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  buf.push_back(static_cast<uint8_t>(v));
  buf.push_back(static_cast<uint8_t>(v >> 8));
  buf.push_back(static_cast<uint8_t>(v >> 16));
  buf.push_back(static_cast<uint8_t>(v >> 24));
}

void put_f32(std::vector<uint8_t>& buf, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}

struct Reader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;
  std::string what;

  uint32_t u32() {
    require(pos + 4 <= buf.size(), ErrorCode::truncated,
            what + " ends before the declared payload");
    uint32_t v = static_cast<uint32_t>(buf[pos]) | (static_cast<uint32_t>(buf[pos + 1]) << 8) |
                 (static_cast<uint32_t>(buf[pos + 2]) << 16) |
                 (static_cast<uint32_t>(buf[pos + 3]) << 24);
    pos += 4;
    return v;
  }

  float f32() {
    uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }

  void bytes(void* dst, size_t n) {
    require(pos + n <= buf.size(), ErrorCode::truncated,
            what + " ends before the declared payload");
    std::memcpy(dst, buf.data() + pos, n);
    pos += n;
  }
};

std::vector<uint8_t> read_file(const std::string& path, const std::string& what) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::io, "cannot open " + what + " '" + path + "'");
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), len);
  require(static_cast<bool>(f), ErrorCode::io, "cannot read " + what + " '" + path + "'");
  return buf;
}

void write_file(const std::string& path, const std::vector<uint8_t>& buf,
                const std::string& what) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorCode::io, "cannot open " + what + " '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  f.flush();
  require(static_cast<bool>(f), ErrorCode::io, "cannot write " + what + " '" + path + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

static constexpr char kDatasetMagic[4] = {'M', 'S', 'G', 'D'};
static constexpr char kCheckpointMagic[4] = {'M', 'S', 'G', 'C'};

Tensor4 Dataset::gather(const std::vector<size_t>& idx) const {
  Tensor4 batch(static_cast<int>(idx.size()), channels, height, width);
  const size_t sf = sample_floats();
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < count(), ErrorCode::config, "sample index out of range");
    const float* src = images.data() + idx[i] * sf;
    double* dst = batch.v.data() + i * sf;
    for (size_t j = 0; j < sf; ++j) dst[j] = src[j];
  }
  return batch;
}

std::vector<uint32_t> Dataset::gather_labels(const std::vector<size_t>& idx) const {
  std::vector<uint32_t> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  require(ds.images.size() == ds.count() * ds.sample_floats(), ErrorCode::config,
          "image buffer does not match the declared sample count");
  for (uint32_t l : ds.labels)
    require(l < ds.num_classes, ErrorCode::label_range,
            "label " + std::to_string(l) + " outside [0, " +
                std::to_string(ds.num_classes) + ")");
  std::vector<uint8_t> buf;
  buf.reserve(28 + ds.images.size() * 4 + ds.labels.size() * 4);
  buf.insert(buf.end(), kDatasetMagic, kDatasetMagic + 4);
  put_u32(buf, 1);
  put_u32(buf, static_cast<uint32_t>(ds.count()));
  put_u32(buf, ds.channels);
  put_u32(buf, ds.height);
  put_u32(buf, ds.width);
  put_u32(buf, ds.num_classes);
  for (float f : ds.images) put_f32(buf, f);
  for (uint32_t l : ds.labels) put_u32(buf, l);
  write_file(path, buf, "dataset");
}

Dataset load_dataset(const std::string& path) {
  std::vector<uint8_t> buf = read_file(path, "dataset");
  require(buf.size() >= 4 && std::memcmp(buf.data(), kDatasetMagic, 4) == 0,
          ErrorCode::bad_magic, "'" + path + "' is not a dataset file");
  Reader r{buf, 4, "dataset '" + path + "'"};
  uint32_t version = r.u32();
  require(version == 1, ErrorCode::bad_magic,
          "unsupported dataset version " + std::to_string(version));
  uint32_t count = r.u32();
  Dataset ds;
  ds.channels = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  ds.num_classes = r.u32();
  require(ds.channels >= 1 && ds.height >= 1 && ds.width >= 1 && ds.num_classes >= 1,
          ErrorCode::bad_magic, "dataset declares an empty shape");
  const size_t sf = ds.sample_floats();
  ds.images.resize(static_cast<size_t>(count) * sf);
  r.bytes(ds.images.data(), ds.images.size() * 4);
  ds.labels.resize(count);
  r.bytes(ds.labels.data(), ds.labels.size() * 4);
  require(r.pos == buf.size(), ErrorCode::bad_magic,
          "dataset '" + path + "' has trailing bytes");
  for (uint32_t l : ds.labels)
    require(l < ds.num_classes, ErrorCode::label_range,
            "label " + std::to_string(l) + " outside [0, " +
                std::to_string(ds.num_classes) + ")");
  return ds;
}

Dataset synth_dataset(const SynthSpec& spec) {
  require(spec.per_class >= 0 && spec.classes >= 1 && spec.channels >= 1 &&
              spec.size >= 2 && spec.noise >= 0.0,
          ErrorCode::config, "invalid synthetic dataset request");
  Dataset ds;
  ds.channels = static_cast<uint32_t>(spec.channels);
  ds.height = static_cast<uint32_t>(spec.size);
  ds.width = static_cast<uint32_t>(spec.size);
  ds.num_classes = static_cast<uint32_t>(spec.classes);
  const size_t sf = ds.sample_floats();
  ds.images.resize(static_cast<size_t>(spec.per_class) * spec.classes * sf);
  ds.labels.resize(static_cast<size_t>(spec.per_class) * spec.classes);

  Rng rng(spec.seed);
  size_t s = 0;
  for (int k = 0; k < spec.classes; ++k) {
    // Oriented gratings: orientation cycles through four angles and the
    // frequency steps up every four classes, so (orientation, frequency)
    // identifies the class.  Each sample randomizes the global phase, and the
    // three channels carry the wave at staggered phases, so the class is
    // recoverable regardless of phase; `noise` tunes difficulty.
    const double theta = M_PI * (k % 4) / 4.0;
    const double cycles = 2.0 + 3.0 * (k / 4);
    const double freq = 2.0 * M_PI * cycles / spec.size;
    const double cx = std::cos(theta), cy = std::sin(theta);
    for (int j = 0; j < spec.per_class; ++j, ++s) {
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      float* img = ds.images.data() + s * sf;
      for (int c = 0; c < spec.channels; ++c) {
        const double chan_phase = phase + 2.0 * M_PI * c / 3.0;
        for (int y = 0; y < spec.size; ++y)
          for (int x = 0; x < spec.size; ++x) {
            double v = 0.5 * std::sin(freq * (cx * x + cy * y) + chan_phase);
            v += spec.noise * rng.normal();
            img[(static_cast<size_t>(c) * spec.size + y) * spec.size + x] =
                static_cast<float>(v);
          }
      }
      ds.labels[s] = static_cast<uint32_t>(k);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CRC-32 and checkpoint container
// ---------------------------------------------------------------------------

uint32_t crc32(const uint8_t* data, size_t len) {
  static uint32_t table[256];
  static bool ready = false;
  if (!ready) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int b = 0; b < 8; ++b) c = (c & 1) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
      table[i] = c;
    }
    ready = true;
  }
  uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(buf, 1);
  put_u32(buf, static_cast<uint32_t>(entries.size()));
  const size_t payload_start = buf.size();
  for (const NamedTensor& e : entries) {
    require(!e.name.empty(), ErrorCode::config, "checkpoint entry without a name");
    require(e.data.size() == e.element_count(), ErrorCode::config,
            "entry '" + e.name + "' data does not match its dims");
    put_u32(buf, static_cast<uint32_t>(e.name.size()));
    buf.insert(buf.end(), e.name.begin(), e.name.end());
    put_u32(buf, static_cast<uint32_t>(e.dims.size()));
    for (uint32_t d : e.dims) put_u32(buf, d);
    for (float f : e.data) put_f32(buf, f);
  }
  const uint32_t crc = crc32(buf.data() + payload_start, buf.size() - payload_start);
  put_u32(buf, crc);
  write_file(path, buf, "checkpoint");
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::vector<uint8_t> buf = read_file(path, "checkpoint");
  require(buf.size() >= 4 && std::memcmp(buf.data(), kCheckpointMagic, 4) == 0,
          ErrorCode::bad_magic, "'" + path + "' is not a checkpoint file");
  Reader r{buf, 4, "checkpoint '" + path + "'"};
  uint32_t version = r.u32();
  require(version == 1, ErrorCode::bad_magic,
          "unsupported checkpoint version " + std::to_string(version));
  uint32_t count = r.u32();
  const size_t payload_start = r.pos;
  require(buf.size() >= payload_start + 4, ErrorCode::truncated,
          "checkpoint '" + path + "' ends before its checksum");
  const size_t crc_pos = buf.size() - 4;

  std::vector<NamedTensor> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    uint32_t name_len = r.u32();
    require(r.pos + name_len <= crc_pos, ErrorCode::truncated,
            "checkpoint '" + path + "' ends inside an entry name");
    e.name.assign(reinterpret_cast<const char*>(buf.data() + r.pos), name_len);
    r.pos += name_len;
    uint32_t rank = r.u32();
    require(rank <= 8, ErrorCode::bad_magic, "entry '" + e.name + "' declares rank > 8");
    e.dims.resize(rank);
    for (uint32_t d = 0; d < rank; ++d) e.dims[d] = r.u32();
    const size_t n = e.element_count();
    require(r.pos + n * 4 <= crc_pos, ErrorCode::truncated,
            "checkpoint '" + path + "' ends inside entry '" + e.name + "'");
    e.data.resize(n);
    r.bytes(e.data.data(), n * 4);
    entries.push_back(std::move(e));
  }
  require(r.pos == crc_pos, ErrorCode::bad_magic,
          "checkpoint '" + path + "' has trailing bytes");
  const uint32_t stored = r.u32();
  const uint32_t computed = crc32(buf.data() + payload_start, crc_pos - payload_start);
  require(stored == computed, ErrorCode::crc_mismatch,
          "checkpoint '" + path + "' checksum mismatch");
  return entries;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int r = std::stoi(v, &used);
    require(used == v.size(), ErrorCode::config, "");
    return r;
  } catch (...) {
    fail(ErrorCode::config, "key '" + key + "': expected an integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double r = std::stod(v, &used);
    require(used == v.size(), ErrorCode::config, "");
    return r;
  } catch (...) {
    fail(ErrorCode::config, "key '" + key + "': expected a number, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    unsigned long long r = std::stoull(v, &used);
    require(used == v.size(), ErrorCode::config, "");
    return r;
  } catch (...) {
    fail(ErrorCode::config, "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  fail(ErrorCode::config, "key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  for (const std::string& part : split(v, ',')) out.push_back(parse_int(key, trim(part)));
  return out;
}

std::vector<std::pair<int, int>> parse_blocks(const std::string& key, const std::string& v) {
  std::vector<std::pair<int, int>> out;
  for (const std::string& part : split(v, ',')) {
    std::vector<std::string> halves = split(trim(part), ':');
    require(halves.size() == 2, ErrorCode::config,
            "key '" + key + "': expected width:stride entries, got '" + part + "'");
    out.push_back({parse_int(key, trim(halves[0])), parse_int(key, trim(halves[1]))});
  }
  require(!out.empty(), ErrorCode::config, "key '" + key + "': at least one block required");
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text, std::vector<std::string>* notices) {
  RunConfig rc;
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::config,
            "line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), ErrorCode::config,
            "line " + std::to_string(line_no) + ": empty key");
    for (const auto& [k, v] : kv)
      require(k != key, ErrorCode::config, "duplicate key '" + key + "'");
    kv.push_back({key, value});
  }

  std::vector<std::string> seen;
  auto take = [&](const std::string& key) -> const std::string* {
    seen.push_back(key);
    for (const auto& [k, v] : kv)
      if (k == key) return &v;
    return nullptr;
  };
  auto note_default = [&](const std::string& key, const std::string& value) {
    if (notices) notices->push_back("key '" + key + "' not set, using default " + value);
  };

  if (const auto* v = take("train_data")) rc.train_data = *v; else note_default("train_data", "(none)");
  if (const auto* v = take("val_data")) rc.val_data = *v; else note_default("val_data", "(none)");
  if (const auto* v = take("in_channels")) rc.in_channels = parse_int("in_channels", *v); else note_default("in_channels", std::to_string(rc.in_channels));
  if (const auto* v = take("in_size")) rc.in_size = parse_int("in_size", *v); else note_default("in_size", std::to_string(rc.in_size));
  if (const auto* v = take("stem")) rc.stem = parse_int("stem", *v); else note_default("stem", std::to_string(rc.stem));
  if (const auto* v = take("blocks")) rc.blocks = parse_blocks("blocks", *v); else note_default("blocks", "16:1,32:2,64:2");
  if (const auto* v = take("classes")) rc.classes = parse_int("classes", *v); else note_default("classes", std::to_string(rc.classes));
  if (const auto* v = take("gated")) rc.gated = parse_bool("gated", *v); else note_default("gated", rc.gated ? "1" : "0");
  if (const auto* v = take("groups")) rc.groups = parse_int_list("groups", *v); else note_default("groups", "1,4");
  if (const auto* v = take("attention")) rc.attention = parse_int_list("attention", *v); else note_default("attention", "1,2");
  if (const auto* v = take("reduction")) rc.reduction = parse_int("reduction", *v); else note_default("reduction", std::to_string(rc.reduction));
  if (const auto* v = take("temperature")) rc.temperature = parse_double("temperature", *v); else note_default("temperature", fmt_double(rc.temperature));
  if (const auto* v = take("gate_bias_init")) rc.gate_bias_init = parse_double("gate_bias_init", *v); else note_default("gate_bias_init", fmt_double(rc.gate_bias_init));
  if (const auto* v = take("attention_bias_init")) rc.attention_bias_init = parse_double("attention_bias_init", *v); else note_default("attention_bias_init", fmt_double(rc.attention_bias_init));
  if (const auto* v = take("lambda")) rc.lambda = parse_double("lambda", *v); else note_default("lambda", fmt_double(rc.lambda));
  if (const auto* v = take("budget_target")) rc.budget_target = parse_double("budget_target", *v); else note_default("budget_target", fmt_double(rc.budget_target));
  if (const auto* v = take("warm_fraction")) rc.warm_fraction = parse_double("warm_fraction", *v); else note_default("warm_fraction", fmt_double(rc.warm_fraction));
  if (const auto* v = take("epochs")) rc.epochs = parse_int("epochs", *v); else note_default("epochs", std::to_string(rc.epochs));
  if (const auto* v = take("batch_size")) rc.batch_size = parse_int("batch_size", *v); else note_default("batch_size", std::to_string(rc.batch_size));
  if (const auto* v = take("lr_backbone")) rc.lr_backbone = parse_double("lr_backbone", *v); else note_default("lr_backbone", fmt_double(rc.lr_backbone));
  if (const auto* v = take("lr_mlp")) rc.lr_mlp = parse_double("lr_mlp", *v); else note_default("lr_mlp", fmt_double(rc.lr_mlp));
  if (const auto* v = take("momentum")) rc.momentum = parse_double("momentum", *v); else note_default("momentum", fmt_double(rc.momentum));
  if (const auto* v = take("weight_decay")) rc.weight_decay = parse_double("weight_decay", *v); else note_default("weight_decay", fmt_double(rc.weight_decay));
  if (const auto* v = take("seed")) rc.seed = parse_u64("seed", *v); else note_default("seed", std::to_string(rc.seed));
  if (const auto* v = take("augment")) rc.augment = parse_bool("augment", *v); else note_default("augment", rc.augment ? "1" : "0");
  if (const auto* v = take("out_checkpoint")) rc.out_checkpoint = *v; else note_default("out_checkpoint", rc.out_checkpoint);
  if (const auto* v = take("out_log")) rc.out_log = *v; else note_default("out_log", rc.out_log);

  for (const auto& [k, v] : kv) {
    bool known = false;
    for (const std::string& s : seen)
      if (s == k) { known = true; break; }
    require(known, ErrorCode::config, "unknown key '" + k + "'");
  }

  require(rc.in_channels >= 1 && rc.in_size >= 2, ErrorCode::config,
          "input shape must be at least 1 channel and 2x2 pixels");
  require(rc.stem >= 1, ErrorCode::config, "stem width must be positive");
  require(rc.classes >= 2, ErrorCode::config, "at least two classes required");
  require(rc.epochs >= 1, ErrorCode::config, "epochs must be positive");
  require(rc.batch_size >= 2, ErrorCode::config,
          "batch size must be at least 2 (batch statistics)");
  return rc;
}

RunConfig parse_run_config(const std::string& path, std::vector<std::string>* notices) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorCode::io, "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config_text(ss.str(), notices);
}

}  // namespace msgc
