#include "aline/persistence.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace aline {

namespace {

constexpr char kMagic[8] = {'A', 'L', 'I', 'N', 'E', 'C', 'K', 'P'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f64s(std::string& out, const std::vector<double>& v) {
  for (double d : v) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

/// Sequential reader over the file bytes.
class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  const unsigned char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw TruncatedFile(std::string("checkpoint truncated while reading ") + what);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += n;
    return p;
  }
  std::vector<double> f64s(std::size_t n, const char* what) {
    const unsigned char* p = take(8 * n, what);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(get_u64(p + 8 * i));
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

std::size_t element_count(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

template <class J>
void reject_unknown(const J& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key " + where + "." + it.key());
}

}  // namespace

nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"emb_dim", c.emb_dim},         {"ff_dim", c.ff_dim},           {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},         {"n_mixture", c.n_mixture},     {"param_dim", c.param_dim},
          {"design_dim", c.design_dim},   {"outcome_dim", c.outcome_dim}, {"binary_outcome", c.binary_outcome}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  reject_unknown(j,
                 {"emb_dim", "ff_dim", "n_layers", "n_heads", "n_mixture", "param_dim", "design_dim",
                  "outcome_dim", "binary_outcome"},
                 "model");
  c.emb_dim = j.value("emb_dim", c.emb_dim);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_mixture = j.value("n_mixture", c.n_mixture);
  c.param_dim = j.value("param_dim", c.param_dim);
  c.design_dim = j.value("design_dim", c.design_dim);
  c.outcome_dim = j.value("outcome_dim", c.outcome_dim);
  c.binary_outcome = j.value("binary_outcome", c.binary_outcome);
  return c;
}

template <class T>
Checkpoint Checkpoint::from_params(const ModelParams<T>& params, const std::string& task) {
  Checkpoint c;
  c.model = params.config;
  c.task = task;
  for (const auto& ti : params.layout->tensors()) {
    TensorEntry e{ti.name, ti.shape, {}};
    e.values.assign(params.data.begin() + static_cast<std::ptrdiff_t>(ti.offset),
                    params.data.begin() + static_cast<std::ptrdiff_t>(ti.offset + ti.size));
    c.tensors.push_back(std::move(e));
  }
  return c;
}

void Checkpoint::validate() const {
  if (format_version != kFormatVersion)
    throw VersionMismatch("checkpoint format_version " + std::to_string(format_version) + ", expected " +
                          std::to_string(kFormatVersion));
  try {
    model.validate();
  } catch (const InvalidArgument& e) {
    throw ShapeMismatch(std::string("checkpoint model config: ") + e.what());
  }
  const ParamLayout layout(model);
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    if (!seen.insert(t.name).second) throw ShapeMismatch("tensor " + t.name + " appears more than once");
    if (t.values.size() != element_count(t.shape))
      throw ShapeMismatch("tensor " + t.name + " has " + std::to_string(t.values.size()) + " values for its shape");
  }
  for (const auto& ti : layout.tensors()) {
    const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const TensorEntry& e) { return e.name == ti.name; });
    if (it == tensors.end()) throw ShapeMismatch("missing tensor " + ti.name);
    if (it->shape != ti.shape) throw ShapeMismatch("tensor " + ti.name + " has the wrong shape");
  }
  if (tensors.size() != layout.tensors().size()) {
    for (const auto& t : tensors) {
      bool known = false;
      for (const auto& ti : layout.tensors()) known = known || ti.name == t.name;
      if (!known) throw ShapeMismatch("unexpected tensor " + t.name);
    }
  }
  if (training && !training->adam_m.empty() &&
      (training->adam_m.size() != layout.size() || training->adam_v.size() != layout.size()))
    throw ShapeMismatch("optimizer moments do not match the parameter count");
}

template <class T>
ModelParams<T> Checkpoint::to_params() const {
  validate();
  ModelParams<T> p;
  p.config = model;
  p.layout = std::make_shared<const ParamLayout>(model);
  p.data.assign(p.layout->size(), T(0));
  for (const auto& t : tensors) {
    const TensorInfo& ti = p.layout->find(t.name);
    for (std::size_t k = 0; k < ti.size; ++k) p.data[ti.offset + k] = static_cast<T>(t.values[k]);
  }
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  nlohmann::ordered_json h;
  h["format_version"] = c.format_version;
  h["task"] = c.task;
  h["model"] = model_config_json(c.model);
  h["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : c.tensors) h["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  if (c.training) {
    const auto& s = *c.training;
    h["training"] = {{"epoch", s.epoch},
                     {"adam_step", s.adam_step},
                     {"moments", s.adam_m.size()},
                     {"seed", s.seed},
                     {"train_config", s.train_config}};
  }
  const std::string header = h.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, static_cast<std::uint64_t>(c.format_version));
  put_u64(out, header.size());
  out += header;
  for (const auto& t : c.tensors) put_f64s(out, t.values);
  if (c.training) {
    put_f64s(out, c.training->adam_m);
    put_f64s(out, c.training->adam_v);
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  Reader r(ss.str());

  if (std::memcmp(r.take(8, "magic"), kMagic, 8) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  Checkpoint c;
  c.format_version = static_cast<int>(get_u64(r.take(8, "version")));
  if (c.format_version != Checkpoint::kFormatVersion)
    throw VersionMismatch("checkpoint format_version " + std::to_string(c.format_version) + ", expected " +
                          std::to_string(Checkpoint::kFormatVersion));
  const std::uint64_t hlen = get_u64(r.take(8, "header length"));
  const unsigned char* hp = r.take(hlen, "header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(hp), hlen));
    c.task = h.at("task").get<std::string>();
    c.model = model_config_from_json(h.at("model"));
    for (const auto& t : h.at("tensors"))
      c.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>(), {}});
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  for (auto& t : c.tensors) t.values = r.f64s(element_count(t.shape), t.name.c_str());
  if (h.contains("training")) {
    const auto& s = h["training"];
    TrainingSnapshot snap;
    snap.epoch = s.at("epoch").get<int>();
    snap.adam_step = s.at("adam_step").get<long>();
    snap.seed = s.at("seed").get<std::uint64_t>();
    snap.train_config = s.at("train_config");
    const auto n = s.at("moments").get<std::size_t>();
    snap.adam_m = r.f64s(n, "optimizer moments");
    snap.adam_v = r.f64s(n, "optimizer moments");
    c.training = std::move(snap);
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint payload");
  c.validate();
  return c;
}

// --- Run configuration ------------------------------------------------------

nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"total_epochs", c.total_epochs}, {"warmup_epochs", c.warmup_epochs}, {"batch_size", c.batch_size},
          {"horizon", c.horizon},           {"pool_size", c.pool_size},         {"target_count", c.target_count},
          {"discount", c.discount},         {"lr", c.lr},                       {"weight_decay", c.weight_decay},
          {"min_lr", c.min_lr},             {"clip_norm", c.clip_norm},         {"reward_to_go", c.reward_to_go},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  reject_unknown(j,
                 {"total_epochs", "warmup_epochs", "batch_size", "horizon", "pool_size", "target_count", "discount",
                  "lr", "weight_decay", "min_lr", "clip_norm", "reward_to_go", "seed", "checkpoint_every"},
                 "train");
  c.total_epochs = j.value("total_epochs", c.total_epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.horizon = j.value("horizon", c.horizon);
  c.pool_size = j.value("pool_size", c.pool_size);
  c.target_count = j.value("target_count", c.target_count);
  c.discount = j.value("discount", c.discount);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.reward_to_go = j.value("reward_to_go", c.reward_to_go);
  c.seed = j.value("seed", c.seed);
  return c;
}

TargetSpecifier parse_target(const std::string& spec, const TaskDefinition& task) {
  if (spec == "all") {
    std::vector<int> all(task.param_dim);
    std::iota(all.begin(), all.end(), 0);
    return TargetSpecifier::subset_of(all);
  }
  if (spec == "predictive") {
    if (task.design_dim > 2) throw ConfigError("predictive target needs a 1D or 2D design space");
    return TargetSpecifier::predictive_at(evaluation_grid(task, 100));
  }
  if (spec.rfind("subset=", 0) == 0) {
    std::vector<int> idx;
    std::stringstream ss(spec.substr(7));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        std::size_t used = 0;
        idx.push_back(std::stoi(tok, &used));
        if (used != tok.size()) throw ConfigError("bad index");
      } catch (const std::exception&) {
        throw ConfigError("bad target subset: " + spec);
      }
    }
    auto t = TargetSpecifier::subset_of(idx);
    try {
      validate_target(t, task.param_dim);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("bad target subset: ") + e.what());
    }
    return t;
  }
  throw ConfigError("target must be all, subset=i,j or predictive, got " + spec);
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    reject_unknown(j, {"task", "seed", "out_dir", "precision", "model", "train", "eval"}, "config");
    RunConfig c;
    c.task = j.value("task", c.task);
    const TaskDefinition task = make_task(c.task);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    const std::string prec = j.value("precision", std::string("f32"));
    if (prec == "f32") {
      c.precision = Precision::F32;
    } else if (prec == "f64") {
      c.precision = Precision::F64;
    } else {
      throw ConfigError("precision must be f32 or f64");
    }

    const nlohmann::json empty = nlohmann::json::object();
    const auto& mj = j.contains("model") ? j["model"] : empty;
    reject_unknown(mj, {"emb_dim", "ff_dim", "n_layers", "n_heads", "n_mixture"}, "model");
    c.model = model_config_for(task, model_config_from_json(mj));
    c.model.validate();

    const auto& tj = j.contains("train") ? j["train"] : empty;
    c.train = train_config_from_json(tj, TrainConfig::for_task(task));
    c.train.seed = c.seed;
    c.checkpoint_every = tj.value("checkpoint_every", 0);
    if (c.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    c.train.validate();

    const auto& ej = j.contains("eval") ? j["eval"] : empty;
    reject_unknown(ej, {"n_runs", "horizon", "pool_size", "spce_contrastive", "grid_size", "mode", "target"}, "eval");
    c.eval.horizon = task.horizon;
    c.eval.pool_size = task.pool_size;
    c.eval.n_runs = ej.value("n_runs", c.eval.n_runs);
    c.eval.horizon = ej.value("horizon", c.eval.horizon);
    c.eval.pool_size = ej.value("pool_size", c.eval.pool_size);
    c.eval.spce_contrastive = ej.value("spce_contrastive", c.eval.spce_contrastive);
    c.eval.grid_size = ej.value("grid_size", c.eval.grid_size);
    const std::string mode = ej.value("mode", std::string("argmax"));
    if (mode != "argmax" && mode != "sample") throw ConfigError("eval.mode must be argmax or sample");
    c.eval.mode = mode == "argmax" ? SelectMode::Argmax : SelectMode::Sample;
    c.eval.seed = c.seed;
    if (ej.contains("target")) c.eval_target = parse_target(ej["target"].get<std::string>(), task);
    if (c.eval.n_runs < 2) throw ConfigError("eval.n_runs must be >= 2");
    if (c.eval.horizon < 1 || c.eval.pool_size < c.eval.horizon)
      throw ConfigError("eval needs horizon >= 1 and pool_size >= horizon");
    if (c.eval.spce_contrastive < 0) throw ConfigError("eval.spce_contrastive must be >= 0");
    if (c.eval.grid_size < 2) throw ConfigError("eval.grid_size must be >= 2");
    return c;
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["precision"] = precision == Precision::F32 ? "f32" : "f64";
  j["model"] = {{"emb_dim", model.emb_dim},
                {"ff_dim", model.ff_dim},
                {"n_layers", model.n_layers},
                {"n_heads", model.n_heads},
                {"n_mixture", model.n_mixture}};
  nlohmann::json t = train_config_json(train);
  t.erase("seed");
  t["checkpoint_every"] = checkpoint_every;
  j["train"] = t;
  j["eval"] = {{"n_runs", eval.n_runs},
               {"horizon", eval.horizon},
               {"pool_size", eval.pool_size},
               {"spce_contrastive", eval.spce_contrastive},
               {"grid_size", eval.grid_size},
               {"mode", eval.mode == SelectMode::Argmax ? "argmax" : "sample"}};
  return j;
}

// --- Episode fixtures -------------------------------------------------------

nlohmann::ordered_json episode_fixture(const TaskDefinition& task, const Episode& ep, const History& history) {
  nlohmann::ordered_json j;
  j["task"] = task.name;
  j["theta"] = ep.theta.values;
  auto pool = nlohmann::ordered_json::array();
  for (const auto& d : ep.pool) pool.push_back(d.x);
  j["pool"] = pool;
  auto hist = nlohmann::ordered_json::array();
  for (const auto& p : history.pairs()) hist.push_back({{"x", p.design.x}, {"y", p.outcome.y}});
  j["history"] = hist;
  nlohmann::ordered_json tgt;
  if (ep.target.is_subset()) {
    tgt["kind"] = "subset";
    tgt["indices"] = ep.target.subset().indices;
  } else {
    tgt["kind"] = "predictive";
    auto xs = nlohmann::ordered_json::array();
    for (const auto& d : ep.target.predictive().inputs) xs.push_back(d.x);
    tgt["inputs"] = xs;
  }
  tgt["values"] = ep.target_values;
  if (ep.gp) tgt["latent_values"] = ep.gp->target_values;
  j["targets"] = tgt;
  return j;
}

template Checkpoint Checkpoint::from_params<float>(const ModelParams<float>&, const std::string&);
template Checkpoint Checkpoint::from_params<double>(const ModelParams<double>&, const std::string&);
template ModelParams<float> Checkpoint::to_params<float>() const;
template ModelParams<double> Checkpoint::to_params<double>() const;

}  // namespace aline
