#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dagnas/evolution.hpp"

namespace dagnas {

ConfigError::ConfigError(std::string key, const std::string& what)
    : InvalidConfig(key.empty() ? what : "config key '" + key + "': " + what), key_(std::move(key)), detail_(what) {}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

int parse_i32(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < -2147483647LL || x > 2147483647LL) throw ConfigError(key, "integer out of range: " + v);
  return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  double out = 0;
  is >> out;
  if (!is || !is.eof() || !std::isfinite(out)) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

struct Field {
  const char* name;
  std::function<void(SearchConfig&, const std::string&)> set;
  std::function<std::string(const SearchConfig&)> get;
};

#define DAGNAS_INT(key, member)                                                          \
  Field {                                                                                \
    key, [](SearchConfig& c, const std::string& v) { c.member = parse_i32(key, v); },    \
        [](const SearchConfig& c) { return std::to_string(c.member); }                   \
  }
#define DAGNAS_DOUBLE(key, member)                                                       \
  Field {                                                                                \
    key, [](SearchConfig& c, const std::string& v) { c.member = parse_double(key, v); }, \
        [](const SearchConfig& c) { return fmt_double(c.member); }                       \
  }
#define DAGNAS_BOOL(key, member)                                                         \
  Field {                                                                                \
    key, [](SearchConfig& c, const std::string& v) { c.member = parse_bool(key, v); },   \
        [](const SearchConfig& c) { return std::string(c.member ? "true" : "false"); }   \
  }
#define DAGNAS_STRING(key, member)                                               \
  Field {                                                                        \
    key, [](SearchConfig& c, const std::string& v) { c.member = v; },            \
        [](const SearchConfig& c) { return c.member; }                           \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      DAGNAS_INT("population", population),
      DAGNAS_INT("generations", generations),
      DAGNAS_INT("n_c", n_c),
      DAGNAS_DOUBLE("p_c", p_c),
      DAGNAS_DOUBLE("p_m", p_m),
      DAGNAS_INT("batch_size", batch_size),
      DAGNAS_INT("channels", channels),
      Field{"lr_schedule",
            [](SearchConfig& c, const std::string& v) { c.lr = LrSchedule::parse(v, c.lr.reference); },
            [](const SearchConfig& c) { return c.lr.render(); }},
      Field{"lr_reference", [](SearchConfig& c, const std::string& v) { c.lr.reference = parse_i32("lr_reference", v); },
            [](const SearchConfig& c) { return std::to_string(c.lr.reference); }},
      DAGNAS_DOUBLE("momentum", momentum),
      DAGNAS_BOOL("nesterov", nesterov),
      DAGNAS_DOUBLE("weight_decay", weight_decay),
      DAGNAS_DOUBLE("dropout", dropout),
      DAGNAS_BOOL("augment", augment),
      DAGNAS_INT("eval_batch", eval_batch),
      Field{"fitness_mode",
            [](SearchConfig& c, const std::string& v) {
              if (v == "node-inheritance") {
                c.mode = FitnessMode::NodeInheritance;
              } else if (v == "parameter-sharing") {
                c.mode = FitnessMode::ParameterSharing;
              } else {
                throw ConfigError("fitness_mode", "expected node-inheritance or parameter-sharing, got '" + v + "'");
              }
            },
            [](const SearchConfig& c) {
              return std::string(c.mode == FitnessMode::NodeInheritance ? "node-inheritance" : "parameter-sharing");
            }},
      DAGNAS_BOOL("fr_enabled", fr_enabled),
      Field{"seed", [](SearchConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
            [](const SearchConfig& c) { return std::to_string(c.seed); }},
      DAGNAS_BOOL("wall_clock", wall_clock),
      DAGNAS_INT("train_epochs", train_epochs),
      Field{"train_lr_schedule",
            [](SearchConfig& c, const std::string& v) { c.train_lr = LrSchedule::parse(v, c.train_lr.reference); },
            [](const SearchConfig& c) { return c.train_lr.render(); }},
      Field{"train_lr_reference",
            [](SearchConfig& c, const std::string& v) { c.train_lr.reference = parse_i32("train_lr_reference", v); },
            [](const SearchConfig& c) { return std::to_string(c.train_lr.reference); }},
      Field{"dataset",
            [](SearchConfig& c, const std::string& v) {
              if (v == "synthetic") {
                c.data.source = DataSource::Synthetic;
              } else if (v == "idx") {
                c.data.source = DataSource::Idx;
              } else if (v == "raw_rgb") {
                c.data.source = DataSource::RawRgb;
              } else {
                throw ConfigError("dataset", "expected synthetic, idx or raw_rgb, got '" + v + "'");
              }
            },
            [](const SearchConfig& c) {
              switch (c.data.source) {
                case DataSource::Synthetic: return std::string("synthetic");
                case DataSource::Idx: return std::string("idx");
                case DataSource::RawRgb: return std::string("raw_rgb");
              }
              return std::string();
            }},
      DAGNAS_INT("classes", data.classes),
      DAGNAS_INT("height", data.height),
      DAGNAS_INT("width", data.width),
      DAGNAS_INT("synthetic_n", data.synthetic_n),
      DAGNAS_INT("synthetic_test_n", data.synthetic_test_n),
      Field{"data_seed", [](SearchConfig& c, const std::string& v) { c.data.data_seed = parse_u64("data_seed", v); },
            [](const SearchConfig& c) { return std::to_string(c.data.data_seed); }},
      DAGNAS_STRING("train_images", data.train_images),
      DAGNAS_STRING("train_labels", data.train_labels),
      DAGNAS_STRING("test_images", data.test_images),
      DAGNAS_STRING("test_labels", data.test_labels),
      DAGNAS_STRING("train_file", data.train_file),
      DAGNAS_STRING("test_file", data.test_file),
  };
  return table;
}

#undef DAGNAS_INT
#undef DAGNAS_DOUBLE
#undef DAGNAS_BOOL
#undef DAGNAS_STRING

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.name) return f;
  }
  throw ConfigError(key, "unknown key");
}

void set_key(SearchConfig& cfg, const std::string& key, const std::string& value) { field(key).set(cfg, value); }

}  // namespace

LrSchedule LrSchedule::parse(std::string_view text, int reference) {
  LrSchedule s;
  s.reference = reference;
  std::string t(text);
  std::stringstream ss(t);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw InvalidConfig("learning-rate breakpoint '" + item + "' is not of the form start:rate");
    }
    const std::string start = trim(item.substr(0, colon)), rate = trim(item.substr(colon + 1));
    s.points.emplace_back(parse_i32("breakpoint", start), parse_double("rate", rate));
  }
  if (s.points.empty()) throw InvalidConfig("learning-rate schedule is empty");
  return s;
}

std::string LrSchedule::render() const {
  std::string out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(points[i].first) + ":" + fmt_double(points[i].second);
  }
  return out;
}

void LrSchedule::check() const {
  if (reference < 1) throw InvalidConfig("learning-rate reference length must be at least 1");
  if (points.empty() || points.front().first != 0) throw InvalidConfig("learning-rate schedule must start at 0");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].first < 0 || points[i].first >= reference) {
      throw InvalidConfig("breakpoint " + std::to_string(points[i].first) + " outside [0, " +
                          std::to_string(reference) + ")");
    }
    if (i > 0 && points[i].first <= points[i - 1].first) {
      throw InvalidConfig("learning-rate breakpoints must be strictly increasing");
    }
    if (!(points[i].second > 0)) throw InvalidConfig("learning rates must be positive");
  }
}

std::vector<std::pair<int, double>> LrSchedule::scaled(int total) const {
  std::vector<std::pair<int, double>> out;
  for (const auto& [start, rate] : points) {
    const int at = static_cast<int>((static_cast<long long>(start) * total) / reference);
    if (!out.empty() && out.back().first == at) {
      out.back().second = rate;
    } else {
      out.emplace_back(at, rate);
    }
  }
  return out;
}

double lr_at(int step, const LrSchedule& schedule, int total) {
  double lr = schedule.points.front().second;
  for (const auto& [start, rate] : schedule.scaled(total)) {
    if (start <= step) lr = rate;
  }
  return lr;
}

void SearchConfig::check() const {
  auto need = [](bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(key, what);
  };
  need(population >= 2, "population", "must be at least 2");
  need(generations >= 1, "generations", "must be at least 1");
  need(n_c >= 1, "n_c", "must be at least 1");
  need(p_c >= 0 && p_c <= 1, "p_c", "must lie in [0, 1]");
  need(p_m >= 0 && p_m <= 1, "p_m", "must lie in [0, 1]");
  need(batch_size >= 2, "batch_size", "must be at least 2 (batch statistics)");
  need(channels >= 1, "channels", "must be at least 1");
  need(momentum >= 0 && momentum < 1, "momentum", "must lie in [0, 1)");
  need(weight_decay >= 0, "weight_decay", "must be non-negative");
  need(dropout >= 0 && dropout < 1, "dropout", "must lie in [0, 1)");
  need(eval_batch >= 1, "eval_batch", "must be at least 1");
  need(train_epochs >= 0, "train_epochs", "must be non-negative");
  try {
    lr.check();
  } catch (const InvalidConfig& e) {
    throw ConfigError("lr_schedule", e.what());
  }
  try {
    train_lr.check();
  } catch (const InvalidConfig& e) {
    throw ConfigError("train_lr_schedule", e.what());
  }
  need(data.classes >= 2, "classes", "must be at least 2");
  need(data.height >= 1 && data.width >= 1, "height", "image size must be positive");
  if (data.source == DataSource::Synthetic) {
    need(data.synthetic_n >= 5 * data.classes, "synthetic_n", "needs at least 5 samples per class");
    need(data.synthetic_test_n >= 1, "synthetic_test_n", "must be at least 1");
  } else if (data.source == DataSource::Idx) {
    need(!data.train_images.empty(), "train_images", "required for dataset=idx");
    need(!data.train_labels.empty(), "train_labels", "required for dataset=idx");
    need(!data.test_images.empty(), "test_images", "required for dataset=idx");
    need(!data.test_labels.empty(), "test_labels", "required for dataset=idx");
  } else {
    need(!data.train_file.empty(), "train_file", "required for dataset=raw_rgb");
    need(!data.test_file.empty(), "test_file", "required for dataset=raw_rgb");
  }
}

std::vector<Op> SearchConfig::allowed_ops() const {
  std::vector<Op> ops;
  for (int g = 1; g <= kNumOps; ++g) {
    const Op op = static_cast<Op>(g);
    if (fr_enabled || !op_is_fr(op)) ops.push_back(op);
  }
  return ops;
}

BankLayout SearchConfig::layout(int in_channels, int in_h, int in_w) const {
  BankLayout l;
  l.plan = BlockPlan::standard(in_channels, in_h, in_w, channels);
  l.n_c = n_c;
  l.classes = data.classes;
  l.ops = allowed_ops();
  return l;
}

NetworkOptions SearchConfig::network_options() const {
  NetworkOptions o;
  o.classes = data.classes;
  o.dropout = dropout;
  return o;
}

SgdConfig SearchConfig::sgd(double rate) const { return {rate, momentum, nesterov, weight_decay}; }

SearchConfig parse_config(std::string_view text, SearchConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", "line " + std::to_string(line_no) + ": expected key = value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw ConfigError(key, "line " + std::to_string(line_no) + ": duplicate key");
    }
    seen.push_back(key);
    try {
      set_key(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(key, "line " + std::to_string(line_no) + ": " + e.detail());
    } catch (const InvalidConfig& e) {
      throw ConfigError(key, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  base.check();
  return base;
}

SearchConfig load_config(const std::string& path, SearchConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

void apply_override(SearchConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("", "override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key = trim(assignment.substr(0, eq)), value = trim(assignment.substr(eq + 1));
  SearchConfig next = cfg;
  try {
    set_key(next, key, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key, e.detail());
  } catch (const InvalidConfig& e) {
    throw ConfigError(key, e.what());
  }
  next.check();
  cfg = std::move(next);
}

std::string render_config(const SearchConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.name) + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.name);
  return out;
}

}  // namespace dagnas
