#include "archon/config.hpp"

#include <fstream>

namespace archon {

namespace {

/// Strict object access: every key in `j` must be consumed by the schema.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path)
      : j_(j), path_(std::move(path)) {
    if (!j.is_object()) {
      fail(ErrorCode::InvalidConfig, path_ + " must be a JSON object");
    }
  }

  ~StrictObject() = default;

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::InvalidConfig, "bad value for key '" + path_ + key + "'");
    }
  }

  const nlohmann::json* object(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) {
        fail(ErrorCode::InvalidConfig, "unknown key '" + path_ + key + "'");
      }
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

RvqKindConfig parse_rvq(const nlohmann::json& j, const std::string& path,
                        RvqKindConfig fallback) {
  StrictObject o(j, path);
  RvqKindConfig cfg;
  cfg.levels = o.get<std::uint32_t>("levels", fallback.levels);
  cfg.codes = o.get<std::uint32_t>("codes", fallback.codes);
  o.finish();
  if (cfg.levels == 0 || cfg.codes == 0) {
    fail(ErrorCode::InvalidConfig, path + " needs levels >= 1 and codes >= 1");
  }
  return cfg;
}

nlohmann::json rvq_json(const RvqKindConfig& cfg) {
  return {{"levels", cfg.levels}, {"codes", cfg.codes}};
}

}  // namespace

std::vector<LayoutEntry> RunConfig::layout_entries() const {
  std::vector<LayoutEntry> entries;
  entries.push_back({ModalityKind::script, 0, kTextVocabSize});
  entries.push_back({ModalityKind::description, 0, kTextVocabSize});
  for (std::uint32_t l = 0; l < codecs.speech.levels; ++l) {
    entries.push_back({ModalityKind::speech, l, codecs.speech.codes});
  }
  for (std::uint32_t l = 0; l < codecs.shape.levels; ++l) {
    entries.push_back({ModalityKind::shape, l, codecs.shape.codes});
  }
  for (std::uint32_t l = 0; l < codecs.expression.levels; ++l) {
    entries.push_back({ModalityKind::expression, l, codecs.expression.codes});
  }
  for (std::uint32_t l = 0; l < codecs.pose.levels; ++l) {
    entries.push_back({ModalityKind::pose, l, codecs.pose.codes});
  }
  entries.push_back({ModalityKind::semantic, 0, codecs.semantic_codes});
  entries.push_back({ModalityKind::image, 0, 1u << codecs.image_bits});
  return entries;
}

VocabularyLayout RunConfig::layout() const {
  return VocabularyLayout::build(layout_entries());
}

ModelConfig RunConfig::resolved_model() const {
  ModelConfig cfg = model;
  if (cfg.vocab_size == 0) cfg.vocab_size = layout().total_size();
  return cfg;
}

nlohmann::json RunConfig::to_json() const {
  return {
      {"seed", seed},
      {"world",
       {{"identities", world.identities},
        {"frames", world.frames},
        {"lexicon_size", world.lexicon_size},
        {"words_per_window", world.words_per_window},
        {"sample_rate", world.sample_rate},
        {"height", world.height},
        {"width", world.width},
        {"shape_dim", world.shape_dim},
        {"expr_dim", world.expr_dim},
        {"pose_dim", world.pose_dim},
        {"freq_base_hz", world.freq_base_hz},
        {"freq_step_hz", world.freq_step_hz},
        {"seed", world.seed}}},
      {"codecs",
       {{"speech", rvq_json(codecs.speech)},
        {"shape", rvq_json(codecs.shape)},
        {"expression", rvq_json(codecs.expression)},
        {"pose", rvq_json(codecs.pose)},
        {"semantic_codes", codecs.semantic_codes},
        {"image_bits", codecs.image_bits},
        {"kmeans_iters", codecs.kmeans_iters},
        {"palette_seed", codecs.palette_seed}}},
      {"model", model.to_json()},
      {"train", train.to_json()},
      {"sampler",
       {{"budget", sampler.budget},
        {"weight_floor", sampler.weight_floor},
        {"samples_per_task", sampler.samples_per_task},
        {"seed", sampler.seed}}},
      {"layout", layout().to_json()},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  StrictObject root(j, "");
  cfg.seed = root.get<std::uint64_t>("seed", 0);

  if (const auto* w = root.object("world")) {
    StrictObject o(*w, "world.");
    cfg.world.identities = o.get<std::uint32_t>("identities", cfg.world.identities);
    cfg.world.frames = o.get<std::uint32_t>("frames", cfg.world.frames);
    cfg.world.lexicon_size =
        o.get<std::uint32_t>("lexicon_size", cfg.world.lexicon_size);
    cfg.world.words_per_window =
        o.get<std::uint32_t>("words_per_window", cfg.world.words_per_window);
    cfg.world.sample_rate =
        o.get<std::uint32_t>("sample_rate", cfg.world.sample_rate);
    cfg.world.height = o.get<std::uint32_t>("height", cfg.world.height);
    cfg.world.width = o.get<std::uint32_t>("width", cfg.world.width);
    cfg.world.shape_dim = o.get<std::uint32_t>("shape_dim", cfg.world.shape_dim);
    cfg.world.expr_dim = o.get<std::uint32_t>("expr_dim", cfg.world.expr_dim);
    cfg.world.pose_dim = o.get<std::uint32_t>("pose_dim", cfg.world.pose_dim);
    cfg.world.freq_base_hz =
        o.get<double>("freq_base_hz", cfg.world.freq_base_hz);
    cfg.world.freq_step_hz =
        o.get<double>("freq_step_hz", cfg.world.freq_step_hz);
    cfg.world.seed = o.get<std::uint64_t>("seed", cfg.world.seed);
    o.finish();
  }

  if (const auto* c = root.object("codecs")) {
    StrictObject o(*c, "codecs.");
    if (const auto* s = o.object("speech")) {
      cfg.codecs.speech = parse_rvq(*s, "codecs.speech.", cfg.codecs.speech);
    }
    if (const auto* s = o.object("shape")) {
      cfg.codecs.shape = parse_rvq(*s, "codecs.shape.", cfg.codecs.shape);
    }
    if (const auto* s = o.object("expression")) {
      cfg.codecs.expression =
          parse_rvq(*s, "codecs.expression.", cfg.codecs.expression);
    }
    if (const auto* s = o.object("pose")) {
      cfg.codecs.pose = parse_rvq(*s, "codecs.pose.", cfg.codecs.pose);
    }
    cfg.codecs.semantic_codes =
        o.get<std::uint32_t>("semantic_codes", cfg.codecs.semantic_codes);
    cfg.codecs.image_bits =
        o.get<std::uint32_t>("image_bits", cfg.codecs.image_bits);
    cfg.codecs.kmeans_iters =
        o.get<std::uint32_t>("kmeans_iters", cfg.codecs.kmeans_iters);
    cfg.codecs.palette_seed =
        o.get<std::uint64_t>("palette_seed", cfg.codecs.palette_seed);
    o.finish();
  }

  if (const auto* m = root.object("model")) {
    StrictObject o(*m, "model.");
    cfg.model.vocab_size = o.get<std::uint32_t>("vocab_size", 0);
    cfg.model.embed_dim = o.get<std::uint32_t>("embed_dim", cfg.model.embed_dim);
    cfg.model.num_layers =
        o.get<std::uint32_t>("num_layers", cfg.model.num_layers);
    cfg.model.num_heads = o.get<std::uint32_t>("num_heads", cfg.model.num_heads);
    cfg.model.max_context =
        o.get<std::uint32_t>("max_context", cfg.model.max_context);
    cfg.model.seed = o.get<std::uint64_t>("seed", cfg.model.seed);
    o.finish();
  }

  if (const auto* t = root.object("train")) {
    StrictObject o(*t, "train.");
    cfg.train.warmup_steps =
        o.get<std::uint32_t>("warmup_steps", cfg.train.warmup_steps);
    cfg.train.total_steps =
        o.get<std::uint32_t>("total_steps", cfg.train.total_steps);
    cfg.train.peak_lr = o.get<double>("peak_lr", cfg.train.peak_lr);
    cfg.train.floor_lr = o.get<double>("floor_lr", cfg.train.floor_lr);
    cfg.train.weight_decay =
        o.get<double>("weight_decay", cfg.train.weight_decay);
    cfg.train.beta1 = o.get<double>("beta1", cfg.train.beta1);
    cfg.train.beta2 = o.get<double>("beta2", cfg.train.beta2);
    cfg.train.adam_eps = o.get<double>("adam_eps", cfg.train.adam_eps);
    o.finish();
  }

  if (const auto* s = root.object("sampler")) {
    StrictObject o(*s, "sampler.");
    cfg.sampler.budget = o.get<std::size_t>("budget", cfg.sampler.budget);
    cfg.sampler.weight_floor =
        o.get<double>("weight_floor", cfg.sampler.weight_floor);
    cfg.sampler.samples_per_task =
        o.get<std::uint32_t>("samples_per_task", cfg.sampler.samples_per_task);
    cfg.sampler.seed = o.get<std::uint64_t>("seed", cfg.sampler.seed);
    o.finish();
  }

  if (const auto* l = root.object("layout")) {
    // The layout is derived from the codec configuration; an explicit
    // layout section must agree with it.
    const VocabularyLayout given = VocabularyLayout::from_json(*l);
    if (given.hash() != cfg.layout().hash()) {
      fail(ErrorCode::InvalidConfig,
           "key 'layout' disagrees with the codec-derived layout");
    }
  }
  root.finish();

  if (cfg.world.sample_rate % 25 != 0) {
    fail(ErrorCode::InvalidConfig,
         "key 'world.sample_rate' must be a multiple of the 25 fps frame rate");
  }
  if (cfg.world.height % 16 != 0 || cfg.world.width % 16 != 0) {
    fail(ErrorCode::InvalidConfig,
         "key 'world.height'/'world.width' must divide by 16");
  }
  return cfg;
}

RunConfig RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, "config is not valid JSON: " +
                                       std::string(e.what()));
  }
  return from_json(j);
}

void RunConfig::save_file(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string());
  os << to_json().dump(2) << '\n';
}

RunConfig RunConfig::desk_default() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.world.identities = 4;
  cfg.world.frames = 29;
  cfg.world.height = 64;
  cfg.world.width = 64;
  cfg.world.sample_rate = 800;
  cfg.world.seed = 7;
  cfg.codecs.speech = {4, 256};
  cfg.codecs.shape = {8, 32};
  cfg.codecs.expression = {8, 64};
  cfg.codecs.pose = {6, 32};
  cfg.codecs.semantic_codes = 256;
  cfg.codecs.image_bits = 10;
  cfg.codecs.kmeans_iters = 10;
  cfg.model.vocab_size = 0;  // derive
  cfg.model.embed_dim = 64;
  cfg.model.num_layers = 2;
  cfg.model.num_heads = 4;
  cfg.model.max_context = 2048;
  cfg.model.seed = 7;
  cfg.train.warmup_steps = 100;
  cfg.train.total_steps = 1000;
  cfg.train.peak_lr = 1e-3;
  cfg.train.floor_lr = 5e-5;
  cfg.sampler.budget = 2048;
  cfg.sampler.seed = 7;
  return cfg;
}

}  // namespace archon
