#include "sharelora/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "sharelora/errors.hpp"

namespace sharelora {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& msg) {
  throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_str) {
      ++i;
    } else if (line[i] == '"') {
      in_str = !in_str;
    } else if (line[i] == '#' && !in_str) {
      return line.substr(0, i);
    }
  }
  return line;
}

ConfigValue::Scalar parse_scalar(const std::string& raw, const std::string& source, int line, bool bare_string) {
  const std::string t = trim(raw);
  if (t.empty()) fail(source, line, "missing value");
  if (t.front() == '"') {
    if (t.size() < 2 || t.back() != '"') fail(source, line, "unterminated string " + t);
    std::string out;
    for (std::size_t i = 1; i + 1 < t.size(); ++i) {
      if (t[i] == '\\' && i + 2 < t.size()) {
        const char c = t[++i];
        out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        out += t[i];
      }
    }
    return out;
  }
  if (t == "true") return true;
  if (t == "false") return false;
  const bool floaty = t.find_first_of(".eE") != std::string::npos || t == "inf" || t == "nan";
  if (!floaty) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec == std::errc() && p == t.data() + t.size()) return v;
  } else {
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec == std::errc() && p == t.data() + t.size()) return v;
  }
  if (bare_string) return t;
  fail(source, line, "cannot parse value '" + t + "' (strings need double quotes)");
}

ConfigValue parse_value(const std::string& raw, const std::string& source, int line, bool bare_string = false) {
  const std::string t = trim(raw);
  ConfigValue v;
  v.line = line;
  if (!t.empty() && t.front() == '[') {
    if (t.back() != ']') fail(source, line, "unterminated array");
    std::vector<ConfigValue::Scalar> items;
    std::string cur;
    bool in_str = false;
    const std::string inner = t.substr(1, t.size() - 2);
    for (std::size_t i = 0; i < inner.size(); ++i) {
      const char c = inner[i];
      if (c == '"' && (i == 0 || inner[i - 1] != '\\')) in_str = !in_str;
      if (c == ',' && !in_str) {
        items.push_back(parse_scalar(cur, source, line, bare_string));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!trim(cur).empty()) items.push_back(parse_scalar(cur, source, line, bare_string));
    v.value = std::move(items);
  } else {
    v.value = parse_scalar(t, source, line, bare_string);
  }
  return v;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

// Typed access to one section; remembers which keys were read.
class Section {
 public:
  Section(const ConfigDocument& doc, const std::string& name) : doc_(doc), name_(name) {
    auto it = doc.sections.find(name);
    if (it != doc.sections.end()) values_ = &it->second;
  }

  bool present() const { return values_ != nullptr; }
  int line() const {
    auto it = doc_.section_lines.find(name_);
    return it == doc_.section_lines.end() ? 0 : it->second;
  }

  const ConfigValue* find(const std::string& key) {
    used_.insert(key);
    if (!values_) return nullptr;
    auto it = values_->find(key);
    return it == values_->end() ? nullptr : &it->second;
  }

  std::string str(const std::string& key, const std::string& def) {
    const ConfigValue* v = find(key);
    if (!v) return def;
    const auto* s = std::get_if<ConfigValue::Scalar>(&v->value);
    if (!s || !std::holds_alternative<std::string>(*s)) type_error(*v, key, "a string");
    return std::get<std::string>(*s);
  }

  std::int64_t integer(const std::string& key, std::int64_t def, std::int64_t min = 0) {
    const ConfigValue* v = find(key);
    if (!v) return def;
    const auto* s = std::get_if<ConfigValue::Scalar>(&v->value);
    if (!s || !std::holds_alternative<std::int64_t>(*s)) type_error(*v, key, "an integer");
    const std::int64_t x = std::get<std::int64_t>(*s);
    if (x < min) fail(doc_.source, v->line, name_ + "." + key + " must be >= " + std::to_string(min));
    return x;
  }

  std::size_t size(const std::string& key, std::size_t def, std::int64_t min = 0) {
    return static_cast<std::size_t>(integer(key, static_cast<std::int64_t>(def), min));
  }

  double real(const std::string& key, double def) {
    const ConfigValue* v = find(key);
    if (!v) return def;
    const auto* s = std::get_if<ConfigValue::Scalar>(&v->value);
    if (s && std::holds_alternative<double>(*s)) return std::get<double>(*s);
    if (s && std::holds_alternative<std::int64_t>(*s)) return static_cast<double>(std::get<std::int64_t>(*s));
    type_error(*v, key, "a number");
  }

  bool boolean(const std::string& key, bool def) {
    const ConfigValue* v = find(key);
    if (!v) return def;
    const auto* s = std::get_if<ConfigValue::Scalar>(&v->value);
    if (!s || !std::holds_alternative<bool>(*s)) type_error(*v, key, "true or false");
    return std::get<bool>(*s);
  }

  // A scalar is accepted as a one-element array.
  std::vector<ConfigValue::Scalar> list(const std::string& key) {
    const ConfigValue* v = find(key);
    if (!v) return {};
    if (const auto* arr = std::get_if<std::vector<ConfigValue::Scalar>>(&v->value)) return *arr;
    return {std::get<ConfigValue::Scalar>(v->value)};
  }

  int key_line(const std::string& key) const {
    if (!values_) return line();
    auto it = values_->find(key);
    return it == values_->end() ? line() : it->second.line;
  }

  void reject_unknown() const {
    if (!values_) return;
    for (const auto& [k, v] : *values_) {
      if (!used_.contains(k)) fail(doc_.source, v.line, "unknown key '" + k + "' in [" + name_ + "]");
    }
  }

  [[noreturn]] void type_error(const ConfigValue& v, const std::string& key, const char* expected) const {
    fail(doc_.source, v.line, name_ + "." + key + " expects " + expected);
  }

  const std::string& name() const { return name_; }
  const std::string& source() const { return doc_.source; }

 private:
  const ConfigDocument& doc_;
  std::string name_;
  const std::map<std::string, ConfigValue>* values_ = nullptr;
  std::set<std::string> used_;
};

TaskSpec read_task(Section& s, const std::string& name) {
  TaskSpec t;
  t.name = name;
  try {
    t.kind = parse_task_kind(s.str("kind", std::string(task_kind_name(t.kind))));
  } catch (const ConfigError& e) {
    fail(s.source(), s.key_line("kind"), e.what());
  }
  t.alphabet = s.size("alphabet", t.alphabet);
  t.length = s.size("length", t.length);
  t.modulus = s.size("modulus", t.modulus);
  t.n_classes = s.size("n_classes", t.n_classes);
  t.batch_size = s.size("batch_size", t.batch_size, 1);
  t.eval_size = s.size("eval_size", t.eval_size, 1);
  t.train_seed = static_cast<std::uint64_t>(s.integer("train_seed", static_cast<std::int64_t>(t.train_seed)));
  t.eval_seed = static_cast<std::uint64_t>(s.integer("eval_seed", static_cast<std::int64_t>(t.eval_seed)));
  if (t.train_seed == t.eval_seed) fail(s.source(), s.key_line("eval_seed"), "train_seed and eval_seed must differ");
  s.reject_unknown();
  return t;
}

}  // namespace

ConfigDocument parse_config_text(const std::string& text, const std::string& source) {
  ConfigDocument doc;
  doc.source = source;
  std::istringstream is(text);
  std::string raw, section;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const std::string t = trim(strip_comment(raw));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') fail(source, line, "malformed section header " + t);
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) fail(source, line, "empty section name");
      if (!doc.section_lines.emplace(section, line).second) fail(source, line, "duplicate section [" + section + "]");
      doc.sections[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail(source, line, "expected key = value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) fail(source, line, "missing key before '='");
    if (section.empty()) fail(source, line, "key '" + key + "' appears before any [section]");
    auto& keys = doc.sections[section];
    if (keys.contains(key)) fail(source, line, "duplicate key '" + key + "' in [" + section + "]");
    keys.emplace(key, parse_value(t.substr(eq + 1), source, line));
  }
  return doc;
}

void apply_override(ConfigDocument& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const std::string path = trim(assignment.substr(0, eq == std::string::npos ? 0 : eq));
  const auto dot = path.rfind('.');
  if (eq == std::string::npos || dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  const std::string section = path.substr(0, dot);
  doc.sections[section][path.substr(dot + 1)] = parse_value(assignment.substr(eq + 1), "override", 0, true);
  doc.section_lines.emplace(section, 0);
}

PhasePlan ExperimentConfig::phase_plan() const {
  PhasePlan p;
  p.tasks = tasks;
  p.phases = phases;
  p.eval_tasks = eval_tasks;
  return p;
}

TinyTransformer ExperimentConfig::make_model(std::uint64_t seed) const {
  return TinyTransformer(model, scheme, base_seed(seed), adapter_seed(seed));
}

ExperimentConfig build_config(const ConfigDocument& doc) {
  static const std::set<std::string> kFixed = {"model", "adapter", "task", "train", "run", "continual"};
  for (const auto& [name, line] : doc.section_lines) {
    if (!kFixed.contains(name) && name.rfind("task.", 0) != 0) fail(doc.source, line, "unknown section [" + name + "]");
  }
  ExperimentConfig c;

  Section model(doc, "model");
  c.preset = model.str("preset", c.preset);
  try {
    c.model = preset_spec(c.preset);
  } catch (const ConfigError& e) {
    fail(doc.source, model.key_line("preset"), e.what());
  }
  ModelSpec& m = c.model;
  m.n_layers = model.size("n_layers", m.n_layers, 1);
  m.hidden_dim = model.size("hidden_dim", m.hidden_dim, 1);
  m.n_heads = model.size("n_heads", m.n_heads, 1);
  m.intermediate_dim = model.size("intermediate_dim", m.intermediate_dim, 1);
  m.vocab_size = model.size("vocab_size", m.vocab_size, 2);
  m.max_seq_len = model.size("max_seq_len", m.max_seq_len, 1);
  m.has_gated_mlp = model.boolean("has_gated_mlp", m.has_gated_mlp);
  m.linear_bias = model.boolean("linear_bias", m.linear_bias);
  m.norm_bias = model.boolean("norm_bias", m.norm_bias);
  m.tied_head = model.boolean("tied_head", m.tied_head);
  m.learned_positions = model.boolean("learned_positions", m.learned_positions);
  model.reject_unknown();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    fail(doc.source, model.line(), e.what());
  }

  Section adapter(doc, "adapter");
  {
    const std::string label = adapter.str("scheme", "lora");
    const int rank = static_cast<int>(adapter.integer("rank", 8, 1));
    const double alpha = adapter.real("alpha", 16.0);
    std::set<ModuleType> targets;
    std::string targets_text;
    for (const auto& item : adapter.list("targets")) {
      if (!std::holds_alternative<std::string>(item)) {
        fail(doc.source, adapter.key_line("targets"), "adapter.targets expects module names");
      }
      targets_text += (targets_text.empty() ? "" : ",") + std::get<std::string>(item);
    }
    try {
      targets = (targets_text.empty() || targets_text == "all") ? all_targets(m) : parse_targets(targets_text);
      c.scheme = AdapterScheme::named(label, rank, alpha, targets);
    } catch (const ConfigError& e) {
      fail(doc.source, adapter.key_line("scheme"), e.what());
    }
    const std::string scaling = adapter.str("scaling", "alpha_over_r");
    if (scaling == "alpha") {
      c.scheme.scaling = ScalingConvention::kAlpha;
    } else if (scaling != "alpha_over_r") {
      fail(doc.source, adapter.key_line("scaling"), "adapter.scaling must be alpha_over_r or alpha");
    }
    adapter.reject_unknown();
    try {
      c.scheme.validate(m);
    } catch (const ConfigError& e) {
      fail(doc.source, adapter.key_line("rank"), e.what());
    }
  }

  Section train(doc, "train");
  TrainHyper& h = c.train;
  h.steps = train.size("steps", h.steps, 1);
  h.adam.lr = train.real("lr", h.adam.lr);
  h.adam.beta1 = train.real("beta1", h.adam.beta1);
  h.adam.beta2 = train.real("beta2", h.adam.beta2);
  h.adam.eps = train.real("eps", h.adam.eps);
  h.adam.weight_decay = train.real("weight_decay", h.adam.weight_decay);
  h.warmup_ratio = train.real("warmup_ratio", h.warmup_ratio);
  h.eval_interval = train.size("eval_interval", h.eval_interval, 1);
  h.divergence_threshold = train.real("divergence_threshold", h.divergence_threshold);
  if (!(h.adam.lr > 0.0)) fail(doc.source, train.key_line("lr"), "train.lr must be > 0");
  if (!(h.adam.beta1 >= 0.0 && h.adam.beta1 < 1.0) || !(h.adam.beta2 >= 0.0 && h.adam.beta2 < 1.0)) {
    fail(doc.source, train.key_line("beta1"), "train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(h.adam.eps > 0.0)) fail(doc.source, train.key_line("eps"), "train.eps must be > 0");
  if (!(h.adam.weight_decay >= 0.0)) fail(doc.source, train.key_line("weight_decay"), "train.weight_decay must be >= 0");
  if (!(h.warmup_ratio >= 0.0 && h.warmup_ratio <= 1.0)) {
    fail(doc.source, train.key_line("warmup_ratio"), "train.warmup_ratio must lie in [0, 1]");
  }
  if (!(h.divergence_threshold > 0.0)) {
    fail(doc.source, train.key_line("divergence_threshold"), "train.divergence_threshold must be > 0");
  }
  train.reject_unknown();

  Section plain_task(doc, "task");
  if (plain_task.present()) {
    c.tasks.push_back(read_task(plain_task, "task"));
  }
  for (const auto& [name, line] : doc.section_lines) {
    if (name.rfind("task.", 0) != 0) continue;
    if (plain_task.present()) fail(doc.source, line, "use either [task] or [task.<name>] sections, not both");
    Section s(doc, name);
    c.tasks.push_back(read_task(s, name.substr(5)));
  }
  if (c.tasks.empty()) {
    c.tasks.push_back(TaskSpec{});
    c.tasks.back().name = "task";
  }
  for (const TaskSpec& t : c.tasks) {
    const std::string section = t.name == "task" && plain_task.present() ? "task" : "task." + t.name;
    try {
      Task probe(t, m);
    } catch (const ConfigError& e) {
      fail(doc.source, Section(doc, section).line(), e.what());
    }
  }

  Section run(doc, "run");
  {
    const auto seeds = run.list("seeds");
    if (!seeds.empty()) {
      c.seeds.clear();
      for (const auto& s : seeds) {
        if (!std::holds_alternative<std::int64_t>(s) || std::get<std::int64_t>(s) < 0) {
          fail(doc.source, run.key_line("seeds"), "run.seeds expects non-negative integers");
        }
        c.seeds.push_back(static_cast<std::uint64_t>(std::get<std::int64_t>(s)));
      }
    }
    c.base_seed_offset = static_cast<std::uint64_t>(run.integer("base_seed_offset", 1000));
    c.adapter_seed_offset = static_cast<std::uint64_t>(run.integer("adapter_seed_offset", 2000));
    c.output_dir = run.str("output_dir", c.output_dir);
    if (c.output_dir.empty()) fail(doc.source, run.key_line("output_dir"), "run.output_dir must not be empty");
    run.reject_unknown();
  }

  Section cont(doc, "continual");
  if (cont.present()) {
    for (const auto& item : cont.list("phases")) {
      const auto* text = std::get_if<std::string>(&item);
      const auto colon = text ? text->rfind(':') : std::string::npos;
      if (colon == std::string::npos) {
        fail(doc.source, cont.key_line("phases"), "continual.phases entries must look like \"task:steps\"");
      }
      Phase p;
      p.task = text->substr(0, colon);
      const std::string steps = text->substr(colon + 1);
      auto [ptr, ec] = std::from_chars(steps.data(), steps.data() + steps.size(), p.steps);
      if (ec != std::errc() || ptr != steps.data() + steps.size() || p.steps == 0) {
        fail(doc.source, cont.key_line("phases"), "bad step count in phase \"" + *text + "\"");
      }
      if (std::none_of(c.tasks.begin(), c.tasks.end(), [&](const TaskSpec& t) { return t.name == p.task; })) {
        fail(doc.source, cont.key_line("phases"), "phase names unknown task '" + p.task + "'");
      }
      c.phases.push_back(p);
    }
    for (const auto& item : cont.list("eval_tasks")) {
      const auto* text = std::get_if<std::string>(&item);
      if (!text || std::none_of(c.tasks.begin(), c.tasks.end(), [&](const TaskSpec& t) { return t.name == *text; })) {
        fail(doc.source, cont.key_line("eval_tasks"), "continual.eval_tasks names an unknown task");
      }
      c.eval_tasks.push_back(*text);
    }
    if (c.phases.size() < 2) fail(doc.source, cont.line(), "continual needs at least two phases");
    cont.reject_unknown();
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path.string() + ":0: cannot open config file");
  std::stringstream ss;
  ss << is.rdbuf();
  ConfigDocument doc = parse_config_text(ss.str(), path.string());
  for (const std::string& o : overrides) apply_override(doc, o);
  return build_config(doc);
}

std::string to_toml(const ExperimentConfig& c) {
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  const ModelSpec& m = c.model;
  os << "[model]\n"
     << "preset = " << quote(c.preset) << "\n"
     << "n_layers = " << m.n_layers << "\n"
     << "hidden_dim = " << m.hidden_dim << "\n"
     << "n_heads = " << m.n_heads << "\n"
     << "intermediate_dim = " << m.intermediate_dim << "\n"
     << "vocab_size = " << m.vocab_size << "\n"
     << "max_seq_len = " << m.max_seq_len << "\n"
     << "has_gated_mlp = " << b(m.has_gated_mlp) << "\n"
     << "linear_bias = " << b(m.linear_bias) << "\n"
     << "norm_bias = " << b(m.norm_bias) << "\n"
     << "tied_head = " << b(m.tied_head) << "\n"
     << "learned_positions = " << b(m.learned_positions) << "\n\n";
  const AdapterScheme& s = c.scheme;
  os << "[adapter]\n"
     << "scheme = " << quote(s.label()) << "\n"
     << "rank = " << s.rank << "\n"
     << "alpha = " << num(s.alpha) << "\n"
     << "targets = " << quote(s.targets.empty() ? "all" : targets_str(s.targets)) << "\n"
     << "scaling = " << quote(s.scaling == ScalingConvention::kAlpha ? "alpha" : "alpha_over_r") << "\n\n";
  const TrainHyper& h = c.train;
  os << "[train]\n"
     << "steps = " << h.steps << "\n"
     << "lr = " << num(h.adam.lr) << "\n"
     << "beta1 = " << num(h.adam.beta1) << "\n"
     << "beta2 = " << num(h.adam.beta2) << "\n"
     << "eps = " << num(h.adam.eps) << "\n"
     << "weight_decay = " << num(h.adam.weight_decay) << "\n"
     << "warmup_ratio = " << num(h.warmup_ratio) << "\n"
     << "eval_interval = " << h.eval_interval << "\n"
     << "divergence_threshold = " << num(h.divergence_threshold) << "\n\n";
  const bool named = c.tasks.size() > 1 || !c.phases.empty() || (c.tasks.size() == 1 && c.tasks[0].name != "task");
  for (const TaskSpec& t : c.tasks) {
    os << (named ? "[task." + t.name + "]\n" : std::string("[task]\n"))
       << "kind = " << quote(std::string(task_kind_name(t.kind))) << "\n"
       << "alphabet = " << t.alphabet << "\n"
       << "length = " << t.length << "\n"
       << "modulus = " << t.modulus << "\n"
       << "n_classes = " << t.n_classes << "\n"
       << "batch_size = " << t.batch_size << "\n"
       << "eval_size = " << t.eval_size << "\n"
       << "train_seed = " << t.train_seed << "\n"
       << "eval_seed = " << t.eval_seed << "\n\n";
  }
  if (!c.phases.empty()) {
    os << "[continual]\nphases = [";
    for (std::size_t i = 0; i < c.phases.size(); ++i) {
      os << (i ? ", " : "") << quote(c.phases[i].task + ":" + std::to_string(c.phases[i].steps));
    }
    os << "]\n";
    if (!c.eval_tasks.empty()) {
      os << "eval_tasks = [";
      for (std::size_t i = 0; i < c.eval_tasks.size(); ++i) os << (i ? ", " : "") << quote(c.eval_tasks[i]);
      os << "]\n";
    }
    os << "\n";
  }
  os << "[run]\nseeds = [";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) os << (i ? ", " : "") << c.seeds[i];
  os << "]\n"
     << "base_seed_offset = " << c.base_seed_offset << "\n"
     << "adapter_seed_offset = " << c.adapter_seed_offset << "\n"
     << "output_dir = " << quote(c.output_dir) << "\n";
  return os.str();
}

}  // namespace sharelora
