#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11/CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vitlm/evaluator.hpp"
#include "vitlm/harmonizer.hpp"
#include "vitlm/nifti.hpp"
#include "vitlm/selftest.hpp"
#include "vitlm/synth.hpp"
#include "vitlm/trainer.hpp"

namespace vitlm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Layered configuration: defaults < --config file < VITLM_* env < flags.

class LayeredConfig {
 public:
  explicit LayeredConfig(const json& defaults) { absorb(defaults, "", "default", true); }

  /// Merges a nested JSON object; unknown keys are rejected.
  void merge(const json& overlay, const std::string& source) { absorb(overlay, "", source, false); }

  void merge_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError("bad config " + path.string() + ": " + e.what());
    }
    merge(j, "file:" + path.string());
  }

  /// Reads VITLM_<KEY> for every known key, dots becoming underscores.
  template <class Getenv>
  void merge_env(Getenv&& getenv) {
    for (auto& [key, value] : values_) {
      if (const char* v = getenv(env_name(key).c_str())) assign(key, v, "env:" + env_name(key));
    }
  }

  void merge_env() {
    merge_env([](const char* name) { return std::getenv(name); });
  }

  /// Sets one key from command-line text.
  void set(const std::string& key, const std::string& text, const std::string& source = "flag") {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    assign(key, text, source);
  }

  const json& get(const std::string& key) const { return values_.at(key); }
  const std::string& source(const std::string& key) const { return sources_.at(key); }

  json nested() const {
    json out = json::object();
    for (const auto& [key, value] : values_) out[json::json_pointer("/" + replace_dots(key))] = value;
    return out;
  }

  /// `key = value  (source)` lines in key order.
  std::string describe() const {
    std::string s;
    for (const auto& [key, value] : values_) s += "  " + key + " = " + value.dump() + "  (" + sources_.at(key) + ")\n";
    return s;
  }

  static std::string env_name(const std::string& key) {
    std::string n = "VITLM_";
    for (char c : key) n += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return n;
  }

 private:
  static std::string replace_dots(std::string k) {
    for (auto& c : k) {
      if (c == '.') c = '/';
    }
    return k;
  }

  void absorb(const json& j, const std::string& prefix, const std::string& source, bool define) {
    if (!j.is_object()) throw ConfigError("config " + (prefix.empty() ? "root" : prefix) + " must be an object");
    for (const auto& [k, v] : j.items()) {
      const std::string key = prefix.empty() ? k : prefix + "." + k;
      const bool branch = define ? v.is_object() : !values_.count(key) && v.is_object();
      if (branch) {
        absorb(v, key, source, define);
        continue;
      }
      if (!define && !values_.count(key)) throw ConfigError("unknown config key '" + key + "' in " + source);
      if (!define && !same_kind(values_[key], v)) {
        throw ConfigError("config key '" + key + "' expects " + std::string(values_[key].type_name()) +
                          ", got " + v.type_name() + " in " + source);
      }
      values_[key] = v;
      sources_[key] = source;
    }
  }

  static bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
  }

  void assign(const std::string& key, const std::string& text, const std::string& source) {
    const json& current = values_.at(key);
    json v;
    if (current.is_string()) {
      v = text;
    } else if (current.is_array() && !text.empty() && text.front() != '[') {
      v = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        auto parsed = json::parse(item, nullptr, false);
        v.push_back(parsed.is_discarded() ? json(item) : parsed);
      }
    } else {
      v = json::parse(text, nullptr, false);
      if (v.is_discarded()) throw ConfigError("cannot parse '" + text + "' for " + key + " (" + source + ")");
    }
    if (!same_kind(current, v)) {
      throw ConfigError("config key '" + key + "' expects " + std::string(current.type_name()) + ", got '" +
                        text + "' (" + source + ")");
    }
    values_[key] = std::move(v);
    sources_[key] = source;
  }

  std::map<std::string, json> values_;
  std::map<std::string, std::string> sources_;
};

// ---------------------------------------------------------------------------
// Shared helpers.

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PreprocessConfig preprocess;
};

inline json run_defaults() {
  ModelConfig m;
  m.vision.d_lm = m.lm.d_lm;
  json model = m;
  model["lm"].erase("vocab_size");
  model["vision"].erase("d_lm");
  return {{"model", model}, {"train", TrainConfig{}}, {"preprocess", PreprocessConfig{}}};
}

inline RunConfig resolve(const LayeredConfig& cfg) {
  const json j = cfg.nested();
  RunConfig r;
  try {
    r.model = j.at("model").get<ModelConfig>();
    r.train = j.at("train").get<TrainConfig>();
    r.preprocess = j.at("preprocess").get<PreprocessConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  r.model.vision.d_lm = r.model.lm.d_lm;
  r.train.validate();
  r.preprocess.validate();
  if (r.preprocess.target_shape != r.model.vision.input_shape) {
    throw ConfigError("preprocess.shape must equal model.vision.input_shape");
  }
  return r;
}

inline Dims3 parse_dims(const std::string& text) {
  Dims3 d{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw ConfigError("shape needs three values D,H,W: " + text);
    try {
      const long v = std::stol(part);
      if (v <= 0) throw ConfigError("shape values must be positive: " + text);
      d[i++] = static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("bad shape '" + text + "'");
    }
  }
  if (i != 3) throw ConfigError("shape needs three values D,H,W: " + text);
  return d;
}

inline IntensityWindow parse_window(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError("window needs lo,hi: " + text);
  try {
    IntensityWindow w{std::stof(text.substr(0, comma)), std::stof(text.substr(comma + 1))};
    if (!(w.high_hu > w.low_hu)) throw ConfigError("window needs lo < hi: " + text);
    return w;
  } catch (const std::logic_error&) {
    throw ConfigError("bad window '" + text + "'");
  }
}

inline fs::path resolve_path(const std::string& p, const fs::path& base) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <std::floating_point T, std::floating_point U>
Tensor<T> convert(const Tensor<U>& t) {
  return Tensor<T>(t.shape(), std::vector<T>(t.data().begin(), t.data().end()));
}

/// A NIfTI file (preprocessed on load) or an `ingest` tensor cache.
template <std::floating_point T>
Tensor<T> load_volume(const fs::path& path, const PreprocessConfig& pp) {
  if (fs::is_directory(path)) {
    auto ck = Checkpoint::load(path);
    auto t = ck.dtype("volume") == "f64" ? convert<T>(ck.get<double>("volume")) : convert<T>(ck.get<float>("volume"));
    const Shape want{1, pp.target_shape[0], pp.target_shape[1], pp.target_shape[2]};
    if (t.shape() != want) {
      throw DimensionError("cached volume " + path.string() + " has shape " + shape_str(t.shape()) +
                           ", model expects " + shape_str(want));
    }
    return t;
  }
  return preprocess_volume<T>(load_nifti(path), pp);
}

/// Caches preprocessed volumes by path.
template <std::floating_point T>
class VolumeCache {
 public:
  VolumeCache(fs::path base, PreprocessConfig pp) : base_(std::move(base)), pp_(pp) {}
  const Tensor<T>& get(const std::string& volume_path) {
    auto it = cache_.find(volume_path);
    if (it == cache_.end()) it = cache_.emplace(volume_path, load_volume<T>(resolve_path(volume_path, base_), pp_)).first;
    return it->second;
  }

 private:
  fs::path base_;
  PreprocessConfig pp_;
  std::map<std::string, Tensor<T>> cache_;
};

/// One JSONL data file holding MRG rows, VQA rows or both.
struct TaskData {
  std::vector<MrgRow> mrg;
  std::vector<VqaRecord> vqa;
};

inline TaskData read_task_data(const fs::path& path) {
  TaskData d;
  std::size_t i = 0;
  for (const auto& row : read_jsonl(path)) {
    ++i;
    try {
      if (row.contains("question")) {
        d.vqa.push_back(row.get<VqaRecord>());
      } else {
        d.mrg.push_back(row.get<MrgRow>());
      }
    } catch (const json::exception& e) {
      throw FormatError(path.string() + " row " + std::to_string(i) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + " row " + std::to_string(i) + ": " + e.what());
    }
  }
  return d;
}

inline void check_task(const std::string& task, const TaskData& d, const std::string& what) {
  if (task == "mrg" && !d.vqa.empty()) throw FormatError(what + " holds VQA rows but --task is mrg");
  if (task == "vqa" && !d.mrg.empty()) throw FormatError(what + " holds MRG rows but --task is vqa");
  if (d.mrg.empty() && d.vqa.empty()) throw FormatError(what + " has no rows");
}

inline PromptTemplates load_templates(const std::optional<fs::path>& path) {
  if (!path) return {};
  std::ifstream in(*path);
  if (!in) throw IoError("cannot open templates " + path->string());
  try {
    return json::parse(in).get<PromptTemplates>();
  } catch (const json::exception& e) {
    throw FormatError("bad templates " + path->string() + ": " + e.what());
  }
}

/// Vocabulary over every text the model is asked to read or write.
inline Vocab build_vocab(const std::vector<TaskData>& data, const PromptTemplates& tpl) {
  std::vector<std::string> corpus;
  for (auto r : kRegions) corpus.push_back(tpl.render_mrg(r));
  for (std::size_t i = 0; i < 5; ++i) corpus.emplace_back(1, option_letter(i));
  for (const auto& d : data) {
    for (const auto& r : d.mrg) corpus.push_back(r.report_text);
    for (const auto& q : d.vqa) corpus.push_back(tpl.render_vqa(q.question, q.options));
  }
  return Vocab::build(corpus);
}

inline std::string precision_of(const fs::path& ckpt) {
  auto ck = Checkpoint::load(ckpt);
  return ck.meta().value("precision", std::string("f32"));
}

inline PreprocessConfig preprocess_of(const fs::path& ckpt, const ModelConfig& model) {
  auto ck = Checkpoint::load(ckpt);
  PreprocessConfig pp;
  if (ck.meta().contains("preprocess")) pp = ck.meta().at("preprocess").get<PreprocessConfig>();
  pp.target_shape = model.vision.input_shape;
  return pp;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Subcommands.

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

struct SynthArgs {
  std::optional<fs::path> spec;
  fs::path out;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  double train_ratio = 0.76;
};

inline int run_synth(const SynthArgs& a, Streams io) {
  SyntheticSpec spec;
  if (a.spec) {
    std::ifstream in(*a.spec);
    if (!in) throw IoError("cannot open spec " + a.spec->string());
    try {
      spec = json::parse(in).get<SyntheticSpec>();
    } catch (const json::exception& e) {
      throw FormatError("bad spec " + a.spec->string() + ": " + e.what());
    }
  }
  if (a.n) spec.n_examples = *a.n;
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  const auto cases = synthesize_corpus(spec);
  write_corpus(a.out, spec, cases);

  std::vector<ReportRecord> reports;
  std::vector<VqaRecord> vqa;
  std::map<std::string, std::vector<Finding>> findings;
  for (const auto& c : cases) {
    reports.push_back(c.report);
    vqa.insert(vqa.end(), c.questions.begin(), c.questions.end());
    findings[c.volume_path] = c.findings;
  }
  const auto split = build_dataset(reports, vqa, {a.train_ratio, spec.seed}, a.out, &findings);
  write_jsonl(a.out / "mrg_train.jsonl", split.mrg_train);
  write_jsonl(a.out / "mrg_val.jsonl", split.mrg_val);
  write_jsonl(a.out / "vqa_train.jsonl", split.vqa_train);
  write_jsonl(a.out / "vqa_val.jsonl", split.vqa_val);
  write_text(a.out / "split.json",
             json{{"train", split.train_volumes}, {"val", split.val_volumes}}.dump(2) + "\n");
  io.out << "synth: " << cases.size() << " volumes (" << split.train_volumes.size() << " train / "
         << split.val_volumes.size() << " val), " << split.mrg_train.size() << "+" << split.mrg_val.size()
         << " MRG rows, " << split.vqa_train.size() << "+" << split.vqa_val.size() << " VQA rows -> "
         << a.out.string() << "\n";
  return 0;
}

struct IngestArgs {
  fs::path in, out;
  std::string shape = "8,32,32";
  std::string window = "-1000,1000";
  std::string resample = "trilinear";
  std::string precision = "f32";
};

inline int run_ingest(const IngestArgs& a, Streams io) {
  PreprocessConfig pp;
  pp.target_shape = parse_dims(a.shape);
  pp.window = parse_window(a.window);
  pp.mode = a.resample == "nearest" ? ResampleMode::nearest : ResampleMode::trilinear;
  const auto volume = load_nifti(a.in);
  const json meta = {{"source", a.in.string()},
                     {"source_dims", volume.dims()},
                     {"spacing_mm", volume.spacing_mm},
                     {"preprocess", pp}};
  if (a.precision == "f64") {
    save_checkpoint<double>(a.out, {{"volume", preprocess_volume<double>(volume, pp)}}, meta);
  } else {
    save_checkpoint<float>(a.out, {{"volume", preprocess_volume<float>(volume, pp)}}, meta);
  }
  const auto dims = volume.dims();
  io.out << "ingest: " << a.in.string() << " " << shape_str(Shape(dims.begin(), dims.end()))
         << " -> " << a.out.string() << " " << a.shape << "\n";
  return 0;
}

struct HarmonizeArgs {
  fs::path in, out;
  std::optional<fs::path> lexicon;
};

inline int run_harmonize(const HarmonizeArgs& a, Streams io) {
  const auto lex = a.lexicon ? OrganLexicon::load(*a.lexicon) : OrganLexicon::defaults();
  RoutingStats stats;
  std::vector<ReportRecord> out;
  std::size_t i = 0;
  for (const auto& row : read_jsonl(a.in)) {
    ++i;
    if (!row.contains("volume_path") || !row.contains("report_text")) {
      throw FormatError(a.in.string() + " row " + std::to_string(i) + ": needs volume_path and report_text");
    }
    out.push_back(harmonize_report(row.at("volume_path").get<std::string>(),
                                   row.at("report_text").get<std::string>(), lex, &stats));
  }
  write_jsonl(a.out, out);
  io.err << json{{"reports", out.size()},
                 {"sentences", stats.sentences},
                 {"routed", stats.routed},
                 {"dropped", stats.dropped},
                 {"multi_region", stats.multi_region}}
                .dump()
         << "\n";
  return 0;
}

struct TrainArgs {
  std::string task;
  std::vector<fs::path> data;
  std::optional<fs::path> config, init, templates, vocab;
  fs::path out;
  std::vector<std::string> sets;
  std::optional<double> lr;
  std::optional<std::size_t> epochs, batch_size, max_steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
};

template <std::floating_point T>
std::vector<TrainExample<T>> make_examples(const MultimodalModel<T>& model, const TaskData& d,
                                           VolumeCache<T>& volumes) {
  std::vector<TrainExample<T>> out;
  for (const auto& r : d.mrg) {
    out.push_back({r.volume_path + "#" + r.region, volumes.get(r.volume_path), model.mrg_prompt(r.region),
                   model.target(r.report_text)});
  }
  for (const auto& q : d.vqa) {
    out.push_back({q.volume_path + "#" + q.question, volumes.get(q.volume_path),
                   model.vqa_prompt(q.question, q.options), model.target(q.answer_letter())});
  }
  return out;
}

template <std::floating_point T>
int train_with(const TrainArgs& a, const RunConfig& rc, const json& resolved, Streams io) {
  std::vector<TaskData> data;
  for (const auto& p : a.data) {
    data.push_back(read_task_data(p));
    check_task(a.task, data.back(), p.string());
  }
  std::optional<MultimodalModel<T>> model;
  if (a.init) {
    if (precision_of(*a.init) != dtype_name<T>()) {
      throw ConfigError("--init checkpoint precision differs from train.precision");
    }
    model.emplace(MultimodalModel<T>::load(*a.init));
  } else {
    const auto tpl = load_templates(a.templates);
    Vocab vocab = build_vocab(data, tpl);
    if (a.vocab) {
      std::ifstream in(*a.vocab);
      if (!in) throw IoError("cannot open vocabulary " + a.vocab->string());
      vocab = Vocab::from_json(json::parse(in));
    }
    model.emplace(rc.model, std::move(vocab), tpl);
  }
  std::vector<TrainExample<T>> examples;
  for (std::size_t i = 0; i < data.size(); ++i) {
    VolumeCache<T> volumes(a.data[i].parent_path(), rc.preprocess);
    auto part = make_examples(*model, data[i], volumes);
    examples.insert(examples.end(), part.begin(), part.end());
  }
  const auto counts = param_count(model->params());
  io.err << format_param_counts(counts) << "\n";
  write_text(a.out / "config.json", resolved.dump(2) + "\n");
  write_text(a.out / "params.json", json(counts.by_group).dump(2) + "\n");

  const json meta = {{"preprocess", rc.preprocess}, {"task", a.task}};
  TrainHooks hooks;
  const std::size_t per_epoch = (examples.size() + rc.train.batch_size - 1) / rc.train.batch_size;
  double acc = 0.0;
  std::size_t n = 0;
  hooks.on_step = [&](const LossReport& r) {
    acc += r.loss;
    ++n;
  };
  hooks.on_epoch = [&](std::size_t e) {
    char line[128];
    std::snprintf(line, sizeof line, "epoch %zu/%zu  steps %zu  mean loss %.4f\n", e, rc.train.epochs, per_epoch,
                  n ? acc / static_cast<double>(n) : 0.0);
    io.err << line << std::flush;
    acc = 0.0;
    n = 0;
  };
  const auto log = train_loop(*model, examples, rc.train, a.out, hooks, meta);
  json final_meta = meta;
  final_meta["train"] = rc.train;
  final_meta["step"] = log.empty() ? 0 : log.back().step;
  model->save(a.out / "final", final_meta);
  io.out << "train: " << examples.size() << " examples, " << log.size() << " steps, final loss "
         << (log.empty() ? 0.0 : log.back().loss) << " -> " << (a.out / "final").string() << "\n";
  return 0;
}

inline LayeredConfig layered_config(const std::optional<fs::path>& file, const std::vector<std::string>& sets,
                                    const std::vector<std::pair<std::string, std::string>>& flags) {
  LayeredConfig cfg(run_defaults());
  if (file) cfg.merge_file(*file);
  cfg.merge_env();
  for (const auto& [k, v] : flags) cfg.set(k, v);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

inline int run_train(const TrainArgs& a, Streams io) {
  std::vector<std::pair<std::string, std::string>> flags;
  auto num = [](auto v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  if (a.lr) flags.emplace_back("train.lr", num(*a.lr));
  if (a.epochs) flags.emplace_back("train.epochs", num(*a.epochs));
  if (a.batch_size) flags.emplace_back("train.batch_size", num(*a.batch_size));
  if (a.max_steps) flags.emplace_back("train.max_steps", num(*a.max_steps));
  if (a.precision) flags.emplace_back("train.precision", *a.precision);
  if (a.seed) {
    flags.emplace_back("train.seed", num(*a.seed));
    flags.emplace_back("model.seed", num(*a.seed));
  }
  const auto cfg = layered_config(a.config, a.sets, flags);
  io.err << "resolved config:\n" << cfg.describe();
  const auto rc = resolve(cfg);
  json resolved = {{"model", rc.model}, {"train", rc.train}, {"preprocess", rc.preprocess}, {"task", a.task}};
  if (rc.train.precision == "f64") return train_with<double>(a, rc, resolved, io);
  return train_with<float>(a, rc, resolved, io);
}

struct GenerateArgs {
  fs::path ckpt, volume;
  std::optional<std::string> region, question;
  std::vector<std::string> options;
  bool as_json = false;
  std::string mode = "greedy";
  double temperature = 1.0;
  std::size_t top_k = 5;
  std::uint64_t seed = 0;
  std::size_t max_new = 64;
};

template <std::floating_point T>
int generate_with(const GenerateArgs& a, Streams io) {
  const auto model = MultimodalModel<T>::load(a.ckpt);
  const auto pp = preprocess_of(a.ckpt, model.config());
  const auto volume = load_volume<T>(a.volume, pp);
  GenerateOptions opt;
  opt.mode = a.mode == "temperature" ? DecodeMode::temperature
             : a.mode == "top_k"     ? DecodeMode::top_k
                                     : DecodeMode::greedy;
  opt.temperature = a.temperature;
  opt.top_k = a.top_k;
  opt.seed = a.seed;
  opt.max_new = a.max_new;
  TokenSequence prompt;
  if (a.region) {
    if (!is_region(*a.region)) throw ConfigError("--region must be chest, abdomen or pelvis");
    prompt = model.mrg_prompt(*a.region);
  } else {
    VqaRecord check{a.volume.string(), *a.question, a.options, 0};
    check.validate();
    prompt = model.vqa_prompt(*a.question, a.options);
  }
  const auto ids = model.generate(prompt, model.encode(volume), opt);
  const auto text = model.vocab().decode(ids);
  if (a.as_json) {
    json j = {{"volume", a.volume.string()}, {"text", text}, {"tokens", ids.size()}, {"mode", a.mode}};
    if (a.region) j["region"] = *a.region;
    if (a.question) {
      j["question"] = *a.question;
      if (auto letter = parse_option_letter(text, a.options.size())) {
        j["answer_index"] = *letter;
        j["answer"] = a.options[*letter];
      }
    }
    io.out << j.dump() << "\n";
  } else {
    io.out << text << "\n";
  }
  return 0;
}

inline int run_generate(const GenerateArgs& a, Streams io) {
  if (a.region.has_value() == a.question.has_value()) {
    throw ConfigError("generate needs exactly one of --region or --question");
  }
  if (a.mode != "greedy" && a.mode != "temperature" && a.mode != "top_k") {
    throw ConfigError("--mode must be greedy, temperature or top_k");
  }
  if (precision_of(a.ckpt) == "f64") return generate_with<double>(a, io);
  return generate_with<float>(a, io);
}

struct EvalArgs {
  std::string task;
  fs::path data, ckpt;
  std::optional<fs::path> out;
  std::optional<std::size_t> limit;
};

template <std::floating_point T>
int eval_with(const EvalArgs& a, Streams io) {
  const auto model = MultimodalModel<T>::load(a.ckpt);
  auto data = read_task_data(a.data);
  check_task(a.task, data, a.data.string());
  if (a.task == "mrg" && data.mrg.empty()) throw FormatError(a.data.string() + " has no MRG rows");
  if (a.task == "vqa" && data.vqa.empty()) throw FormatError(a.data.string() + " has no VQA rows");
  if (a.limit) {
    if (data.mrg.size() > *a.limit) data.mrg.resize(*a.limit);
    if (data.vqa.size() > *a.limit) data.vqa.resize(*a.limit);
  }
  VolumeCache<T> volumes(a.data.parent_path(), preprocess_of(a.ckpt, model.config()));
  json metrics;
  std::vector<json> predictions;
  std::vector<EvalReport> table;
  if (a.task == "mrg") {
    std::vector<MrgEvalExample<T>> ex;
    for (const auto& r : data.mrg) ex.push_back({r.volume_path, r.region, volumes.get(r.volume_path), r.report_text, r.findings});
    auto e = evaluate_mrg(model, ex);
    metrics = e.to_json();
    predictions = std::move(e.predictions);
    table = e.reports();
  } else {
    std::vector<VqaEvalExample<T>> ex;
    for (const auto& q : data.vqa) ex.push_back({volumes.get(q.volume_path), q});
    auto e = evaluate_vqa(model, ex);
    metrics = e.to_json();
    predictions = std::move(e.predictions);
    table = {e.accuracy};
  }
  io.out << format_table(table);
  if (a.out) {
    write_text(*a.out / "metrics.json", metrics.dump(2) + "\n");
    write_jsonl(*a.out / "predictions.jsonl", predictions);
  }
  return 0;
}

inline int run_eval(const EvalArgs& a, Streams io) {
  if (a.task != "mrg" && a.task != "vqa") throw ConfigError("--task must be mrg or vqa");
  if (precision_of(a.ckpt) == "f64") return eval_with<double>(a, io);
  return eval_with<float>(a, io);
}

inline int run_selftest(Streams io) {
  bool ok = true;
  for (const auto& r : selftest::run_all()) {
    char line[512];
    std::snprintf(line, sizeof line, "[%s] %-14s %s (%.1fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                  r.detail.c_str(), r.seconds);
    io.out << line << std::flush;
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Entry point.

inline std::string error_line(const std::string& kind, const std::string& message) {
  return json{{"error", kind}, {"message", message}}.dump();
}

/// Parses `args` (without the program name) and runs one subcommand.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Streams io{out, err};
  CLI::App app{"3D vision-language model toolkit: synth, ingest, harmonize, train, generate, eval, selftest",
               "vitlm"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic corpus with train/val splits");
  s->add_option("--spec", synth.spec, "synthetic spec JSON")->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--n", synth.n, "number of volumes");
  s->add_option("--seed", synth.seed, "corpus seed");
  s->add_option("--train-ratio", synth.train_ratio, "fraction of volumes in train")->check(CLI::Range(0.0, 1.0));

  IngestArgs ingest;
  auto* in = app.add_subcommand("ingest", "NIfTI volume to a preprocessed tensor cache");
  in->add_option("--in", ingest.in, "NIfTI file (.nii or .nii.gz)")->required()->check(CLI::ExistingFile);
  in->add_option("--out", ingest.out, "cache directory")->required();
  in->add_option("--shape", ingest.shape, "target D,H,W")->capture_default_str();
  in->add_option("--window", ingest.window, "HU window lo,hi")->capture_default_str();
  in->add_option("--resample", ingest.resample)->check(CLI::IsMember({"nearest", "trilinear"}))->capture_default_str();
  in->add_option("--precision", ingest.precision)->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();

  HarmonizeArgs harm;
  auto* h = app.add_subcommand("harmonize", "route free-text report sentences into region sections");
  h->add_option("--in", harm.in, "JSONL rows {volume_path, report_text}")->required()->check(CLI::ExistingFile);
  h->add_option("--out", harm.out, "sections JSONL")->required();
  h->add_option("--lexicon", harm.lexicon, "organ lexicon JSON")->check(CLI::ExistingFile);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "fine-tune vision encoder, projector and LoRA adapters");
  t->add_option("--task", train.task, "mrg, vqa or mixed")->required()->check(CLI::IsMember({"mrg", "vqa", "mixed"}));
  t->add_option("--data", train.data, "training JSONL (repeatable)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "run directory")->required();
  t->add_option("--config", train.config, "JSON config")->check(CLI::ExistingFile);
  t->add_option("--init", train.init, "start from this checkpoint")->check(CLI::ExistingDirectory);
  t->add_option("--templates", train.templates, "prompt templates JSON")->check(CLI::ExistingFile);
  t->add_option("--vocab", train.vocab, "vocabulary JSON")->check(CLI::ExistingFile);
  t->add_option("--set", train.sets, "override config key=value");
  t->add_option("--lr", train.lr);
  t->add_option("--epochs", train.epochs);
  t->add_option("--batch-size", train.batch_size);
  t->add_option("--max-steps", train.max_steps);
  t->add_option("--seed", train.seed, "seed for initialization and shuffling");
  t->add_option("--precision", train.precision)->check(CLI::IsMember({"f32", "f64"}));

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "report or answer for one volume");
  g->add_option("--ckpt", gen.ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  g->add_option("--volume", gen.volume, "NIfTI file or ingest cache")->required()->check(CLI::ExistingPath);
  auto* region = g->add_option("--region", gen.region, "chest, abdomen or pelvis");
  auto* question = g->add_option("--question", gen.question, "multiple-choice question");
  region->excludes(question);
  g->add_option("--options", gen.options, "answer options")->delimiter(',')->needs(question);
  g->add_flag("--json", gen.as_json, "print JSON");
  g->add_option("--mode", gen.mode)->check(CLI::IsMember({"greedy", "temperature", "top_k"}))->capture_default_str();
  g->add_option("--temperature", gen.temperature)->capture_default_str();
  g->add_option("--top-k", gen.top_k)->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--max-new", gen.max_new)->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on MRG or VQA rows");
  e->add_option("--task", ev.task)->required()->check(CLI::IsMember({"mrg", "vqa"}));
  e->add_option("--data", ev.data, "evaluation JSONL")->required()->check(CLI::ExistingFile);
  e->add_option("--ckpt", ev.ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--out", ev.out, "write metrics.json and predictions.jsonl here");
  e->add_option("--limit", ev.limit, "score at most this many rows");

  auto* st = app.add_subcommand("selftest", "gradient, LoRA identity and likelihood checks");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    if (pe.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return 0;
    }
    err << error_line("usage", pe.what()) << "\n";
    err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 2;
  }

  try {
    if (s->parsed()) return run_synth(synth, io);
    if (in->parsed()) return run_ingest(ingest, io);
    if (h->parsed()) return run_harmonize(harm, io);
    if (t->parsed()) return run_train(train, io);
    if (g->parsed()) {
      if (!gen.question && !gen.options.empty()) throw ConfigError("--options needs --question");
      if (gen.question && gen.options.empty()) throw ConfigError("--question needs --options");
      return run_generate(gen, io);
    }
    if (e->parsed()) return run_eval(ev, io);
    if (st->parsed()) return run_selftest(io);
  } catch (const Error& x) {
    err << error_line(x.kind(), x.what()) << "\n";
    return 1;
  } catch (const json::exception& x) {
    err << error_line("format", x.what()) << "\n";
    return 1;
  } catch (const fs::filesystem_error& x) {
    err << error_line("io", x.what()) << "\n";
    return 1;
  }
  return 2;
}

}  // namespace vitlm::cli
