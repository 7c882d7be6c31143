#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "archon/config.hpp"
#include "archon/pipeline.hpp"
#include "archon/rng.hpp"

namespace fs = std::filesystem;
using namespace archon;

namespace {

int g_log_level = 1;  // ARCHON_LOG: 0 silent, 1 info, 2 debug

void log_info(const std::string& msg) {
  if (g_log_level >= 1) std::cout << msg << '\n';
}

void log_debug(const std::string& msg) {
  if (g_log_level >= 2) std::cout << msg << '\n';
}

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed_override = 0;
  bool has_seed_override = false;
  int threads = 1;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = args.config_path.empty()
                      ? RunConfig::desk_default()
                      : RunConfig::load_file(args.config_path);
  if (args.has_seed_override) {
    cfg.seed = args.seed_override;
    cfg.world.seed = args.seed_override;
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "RunConfig JSON path");
  cmd->add_option("--seed", args.seed_override, "override the config seed")
      ->each([&args](const std::string&) { args.has_seed_override = true; });
  cmd->add_option("--threads", args.threads,
                  "worker threads (deterministic mode uses 1)")
      ->default_val(1);
}

ModalityRef parse_condition_ref(const std::string& item) {
  const auto colon = item.find(':');
  const std::string kind_s = item.substr(0, colon);
  const ModalityKind kind = kind_from_name(kind_s);
  ModalityState state;
  if (colon == std::string::npos) {
    state = (kind == ModalityKind::image || kind == ModalityKind::description ||
             kind == ModalityKind::shape)
                ? ModalityState::invariant
                : ModalityState::current;
  } else {
    state = state_from_name(item.substr(colon + 1));
  }
  return ModalityRef{kind, state};
}

std::set<ModalityRef> parse_condition_list(const std::string& list) {
  std::set<ModalityRef> refs;
  std::string item;
  std::istringstream ss(list);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) refs.insert(parse_condition_ref(item));
  }
  return refs;
}

ChainDims default_chain_dims(const RunConfig& cfg, std::uint32_t text_len) {
  ChainDims dims;
  dims.dims[ModalityKind::shape] = {};
  dims.dims[ModalityKind::expression] = {cfg.world.frames};
  dims.dims[ModalityKind::pose] = {cfg.world.frames};
  dims.dims[ModalityKind::speech] = {cfg.world.frames};
  dims.dims[ModalityKind::semantic] = {cfg.world.frames, cfg.world.height,
                                       cfg.world.width};
  dims.dims[ModalityKind::image] = {cfg.world.height, cfg.world.width};
  dims.dims[ModalityKind::description] = {text_len};
  dims.dims[ModalityKind::script] = {text_len};
  return dims;
}

/// Writes one generated segment as a token file plus its decoded media.
void write_generated(const fs::path& out_dir, const Segment& seg,
                     const CodecSuite& suite, const VocabularyLayout& layout,
                     const RunConfig& cfg) {
  TokenFile tf;
  tf.layout_hash = layout.hash();
  tf.kind = seg.ref.kind;
  tf.level_count = static_cast<std::uint8_t>(layout.level_count(seg.ref.kind));
  for (std::size_t i = 0; i < seg.dims.size() && i < 4; ++i) {
    tf.dims[i] = seg.dims[i];
  }
  tf.tokens = seg.payload;
  const std::string base = kind_name(seg.ref.kind);
  write_tokens_file(out_dir / (base + ".artk"), tf);

  SampleRecord decoded;
  decode_payload_into(decoded, seg, suite, layout, cfg.world);
  switch (seg.ref.kind) {
    case ModalityKind::description: {
      std::ofstream os(out_dir / "description.txt");
      os << decoded.description;
      break;
    }
    case ModalityKind::script: {
      std::ofstream os(out_dir / "script.txt");
      os << decoded.script;
      break;
    }
    case ModalityKind::speech:
      write_signal_file(out_dir / "speech.sig", decoded.speech);
      break;
    case ModalityKind::shape:
    case ModalityKind::expression:
    case ModalityKind::pose:
      write_animation_file(out_dir / (base + std::string(".bin")),
                           decoded.animation);
      break;
    case ModalityKind::semantic:
      write_labels_file(out_dir / "semantic.lbl", decoded.semantic);
      break;
    case ModalityKind::image:
      write_image_file(out_dir / "image.bin", decoded.image);
      break;
    case ModalityKind::video:
      break;
  }
}

int cmd_gen_data(const CommonArgs& common, std::size_t n,
                 const std::string& out) {
  const RunConfig cfg = load_config(common);
  const AvatarWorld world = AvatarWorld::create(cfg.world);
  const auto records = generate_dataset(world, n, cfg.seed);
  save_dataset(out, records, cfg);
  log_info("wrote " + std::to_string(records.size()) + " records to " + out);
  return 0;
}

int cmd_train_codecs(const CommonArgs& common, const std::string& data,
                     const std::string& out) {
  const RunConfig cfg = load_config(common);
  const auto records = load_dataset(data);
  CodecReport report;
  const CodecSuite suite = train_codec_suite(cfg, records, &report);
  save_codec_suite(out, suite);
  std::ofstream os(fs::path(out) / "metrics.json");
  os << report.to_json().dump(2) << '\n';
  log_info("trained codecs on " + std::to_string(records.size()) +
           " records; metrics in " + out + "/metrics.json");
  return 0;
}

int cmd_pack(const CommonArgs& common, const std::string& data,
             const std::string& codecs, const std::string& out,
             std::size_t n_windows) {
  const RunConfig cfg = load_config(common);
  const auto records = load_dataset(data);
  const CodecSuite suite = load_codec_suite(codecs, cfg);
  const VocabularyLayout layout = cfg.layout();
  const AvatarWorld world = AvatarWorld::create(cfg.world);
  const Registry registry = Registry::default_table();

  // Uniform stats until a perplexity report exists.
  std::vector<double> ppl(registry.size(), std::exp(1.0));
  const SamplerWeights weights =
      compute_weights(TaskStats::from_registry(registry, ppl),
                      cfg.sampler.weight_floor);
  const WindowBatch batch =
      sample_windows(registry, weights, records, world, suite, layout,
                     cfg.sampler.budget, n_windows, cfg.sampler.seed);

  fs::create_directories(out);
  nlohmann::json sidecar;
  sidecar["budget"] = cfg.sampler.budget;
  sidecar["windows"] = nlohmann::json::array();
  for (std::size_t i = 0; i < batch.windows.size(); ++i) {
    const PackedWindow& w = batch.windows[i];
    TokenFile tf;
    tf.layout_hash = layout.hash();
    tf.tokens = w.tokens;
    char name[32];
    std::snprintf(name, sizeof(name), "window_%05zu.artk", i);
    write_tokens_file(fs::path(out) / name, tf, /*mixed_prompt=*/true);
    nlohmann::json spans = nlohmann::json::array();
    for (const WindowSpan& s : w.spans) {
      spans.push_back({{"begin", s.begin},
                       {"end", s.end},
                       {"prefix_len", s.prefix_len},
                       {"target_begin", s.target_begin},
                       {"target_end", s.target_end}});
    }
    sidecar["windows"].push_back(
        {{"file", name}, {"used", w.used}, {"spans", spans}});
  }
  std::ofstream os(fs::path(out) / "spans.json");
  os << sidecar.dump(2) << '\n';
  log_info("packed " + std::to_string(batch.windows.size()) +
           " windows into " + out);
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& data,
              const std::string& codecs, const std::string& out,
              std::size_t steps_override, const std::string& stats_path,
              std::size_t checkpoint_every) {
  const RunConfig cfg = load_config(common);
  const auto records = load_dataset(data);
  const CodecSuite suite = load_codec_suite(codecs, cfg);
  const VocabularyLayout layout = cfg.layout();
  const AvatarWorld world = AvatarWorld::create(cfg.world);
  const Registry registry = Registry::default_table();

  std::vector<double> ppl(registry.size(), std::exp(1.0));
  if (!stats_path.empty()) {
    std::ifstream is(stats_path);
    if (!is) fail(ErrorCode::IoError, "cannot open " + stats_path);
    nlohmann::json j;
    is >> j;
    ppl.clear();
    for (const auto& row : j.at("tasks")) {
      ppl.push_back(row.at("perplexity").get<double>());
    }
  }
  const SamplerWeights weights =
      compute_weights(TaskStats::from_registry(registry, ppl),
                      cfg.sampler.weight_floor);

  TrainConfig tc = cfg.train;
  if (steps_override > 0) {
    tc.total_steps = static_cast<std::uint32_t>(steps_override);
  }
  TrainState state(cfg.resolved_model(), tc);

  fs::create_directories(out);
  std::ofstream curve(fs::path(out) / "loss.csv");
  curve << "step,loss,lr\n";
  for (std::uint32_t step = 0; step < tc.total_steps; ++step) {
    const WindowBatch batch =
        sample_windows(registry, weights, records, world, suite, layout,
                       cfg.sampler.budget, 1,
                       splitmix64(cfg.sampler.seed + step));
    const double lr = state.learning_rate();
    const double loss = state.train_step(batch.windows[0]);
    curve << step << ',' << loss << ',' << lr << '\n';
    if (g_log_level >= 2 || (g_log_level >= 1 && step % 50 == 0)) {
      log_info("step " + std::to_string(step) + " loss " + std::to_string(loss));
    }
    if (checkpoint_every > 0 && (step + 1) % checkpoint_every == 0) {
      state.save(fs::path(out) / "model.ckpt");
    }
  }
  state.save(fs::path(out) / "model.ckpt");
  cfg.save_file(fs::path(out) / "config.json");
  log_info("checkpoint written to " + out + "/model.ckpt");
  return 0;
}

int cmd_generate(const CommonArgs& common, const std::string& codecs,
                 const std::string& checkpoint, const std::string& prompt_path,
                 const std::string& out, const std::string& chain,
                 const std::string& final_kind, double temperature,
                 std::uint32_t text_len) {
  const RunConfig cfg = load_config(common);
  const CodecSuite suite = load_codec_suite(codecs, cfg);
  const VocabularyLayout layout = cfg.layout();
  const Registry registry = Registry::default_table();
  TrainState state = TrainState::load(checkpoint);
  const Model& model = state.model();

  bool mixed = false;
  const TokenFile prompt_file = read_tokens_file(prompt_path, &mixed);
  if (prompt_file.layout_hash != layout.hash()) {
    fail(ErrorCode::InvalidConfig,
         "prompt layout hash does not match the config layout");
  }
  const TaskInstance prompt = parse(prompt_file.tokens, layout);
  fs::create_directories(out);

  if (chain.empty()) {
    const SerializedInstance ser = serialize(prompt, layout);
    const auto payload =
        generate(model, ser.tokens, ser.prefix_len, prompt.expected_output_len,
                 ranges_for_kind(layout, prompt.output_ref.kind), temperature,
                 cfg.seed);
    Segment seg{prompt.output_ref, prompt.output_dims, payload};
    write_generated(out, seg, suite, layout, cfg);
    log_info("generated " + std::to_string(payload.size()) + " " +
             std::string(kind_name(prompt.output_ref.kind)) + " tokens");
    return 0;
  }

  const ChainStrategy strategy =
      chain == "direct" ? ChainStrategy::direct : ChainStrategy::canonical;
  const ModalityKind final_k =
      kind_from_name(final_kind.empty() ? "video" : final_kind);
  const ModalityState final_state =
      (final_k == ModalityKind::image || final_k == ModalityKind::description ||
       final_k == ModalityKind::shape)
          ? ModalityState::invariant
          : ModalityState::current;
  std::set<ModalityRef> cond_refs;
  for (const Segment& seg : prompt.conditions) cond_refs.insert(seg.ref);
  const ChainPlan plan = plan_chain(registry, cond_refs,
                                    ModalityRef{final_k, final_state}, strategy);
  {
    std::string steps = "plan:";
    for (const ModalityRef& s : plan.steps) steps += " " + ref_name(s);
    if (plan.needs_render) steps += " + render";
    log_info(steps);
  }

  ChainRenderContext render;
  const ChainRenderContext* render_ptr = nullptr;
  if (plan.needs_render) {
    const Segment* image_seg = nullptr;
    for (const Segment& seg : prompt.conditions) {
      if (seg.ref.kind == ModalityKind::image) image_seg = &seg;
    }
    if (!image_seg) {
      fail(ErrorCode::InvalidInput,
           "video rendering needs an image condition as the reference");
    }
    SampleRecord tmp;
    decode_payload_into(tmp, *image_seg, suite, layout, cfg.world);
    render.semantic = &suite.semantic;
    render.palette = &suite.palette;
    render.reference = tmp.image;
    render_ptr = &render;
  }

  const ChainDims dims = default_chain_dims(cfg, text_len);
  const ChainResult result =
      run_chain(model, layout, registry, prompt.conditions, plan, dims,
                temperature, cfg.seed, render_ptr);
  for (const Segment& seg : result.generated) {
    write_generated(out, seg, suite, layout, cfg);
    log_debug("chain step wrote " + std::string(kind_name(seg.ref.kind)));
  }
  if (result.video) {
    write_video_file(fs::path(out) / "video.bin", *result.video);
    log_info("rendered video.bin (" + std::to_string(result.video->frames) +
             " frames)");
  }
  return 0;
}

int cmd_plan_chain(const std::string& conditions, const std::string& final_kind,
                   const std::string& strategy_name) {
  const Registry registry = Registry::default_table();
  const std::set<ModalityRef> conds = parse_condition_list(conditions);
  const ModalityRef final_ref = parse_condition_ref(final_kind);
  const ChainStrategy strategy = strategy_name == "direct"
                                     ? ChainStrategy::direct
                                     : ChainStrategy::canonical;
  const ChainPlan plan = plan_chain(registry, conds, final_ref, strategy);
  std::string line;
  for (const ModalityRef& s : plan.steps) {
    if (!line.empty()) line += " -> ";
    line += ref_name(s);
  }
  if (plan.needs_render) line += " -> render(video)";
  std::cout << line << '\n';
  return 0;
}

int cmd_perplexity(const CommonArgs& common, const std::string& data,
                   const std::string& codecs, const std::string& checkpoint,
                   const std::string& out, std::size_t samples) {
  const RunConfig cfg = load_config(common);
  const auto records = load_dataset(data);
  const CodecSuite suite = load_codec_suite(codecs, cfg);
  const VocabularyLayout layout = cfg.layout();
  const AvatarWorld world = AvatarWorld::create(cfg.world);
  const Registry registry = Registry::default_table();
  TrainState state = TrainState::load(checkpoint);

  nlohmann::json report;
  report["tasks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const TaskSpec& spec = registry.specs()[i];
    const double p = estimate_task_perplexity(
        state.model(), spec, records, world, suite, layout,
        samples == 0 ? cfg.sampler.samples_per_task : samples,
        splitmix64(cfg.seed + i));
    nlohmann::json inputs = nlohmann::json::array();
    for (const ModalityRef& in : spec.inputs) inputs.push_back(ref_name(in));
    report["tasks"].push_back({{"index", i},
                               {"output", ref_name(spec.output)},
                               {"inputs", inputs},
                               {"perplexity", p}});
    log_debug("task " + std::to_string(i) + " perplexity " + std::to_string(p));
  }
  std::ofstream os(out);
  if (!os) fail(ErrorCode::IoError, "cannot open " + out);
  os << report.dump(2) << '\n';
  log_info("wrote " + std::to_string(registry.size()) +
           " task perplexities to " + out);
  return 0;
}

int cmd_eval(const std::string& ref_dir, const std::string& pred_dir,
             const std::string& out) {
  nlohmann::json per_record = nlohmann::json::array();
  double sum_label = 0, sum_mse = 0, sum_exact = 0, sum_attr = 0, sum_spec = 0;
  std::size_t n_label = 0, n_mse = 0, n_exact = 0, n_attr = 0, n_spec = 0;

  std::vector<fs::path> entries;
  for (const auto& entry : fs::directory_iterator(pred_dir)) {
    if (entry.is_directory() &&
        entry.path().filename().string().rfind("record_", 0) == 0) {
      entries.push_back(entry.path());
    }
  }
  std::sort(entries.begin(), entries.end());

  for (const fs::path& pred : entries) {
    const std::string name = pred.filename().string();
    const fs::path ref = fs::path(ref_dir) / name;
    if (!fs::exists(ref)) continue;
    nlohmann::json row;
    row["record"] = name;

    auto slurp = [](const fs::path& p) {
      std::ifstream f(p);
      std::stringstream ss;
      ss << f.rdbuf();
      return ss.str();
    };
    if (fs::exists(pred / "semantic.lbl")) {
      const double acc =
          semantic_label_accuracy(read_labels_file(ref / "semantic.lbl"),
                                  read_labels_file(pred / "semantic.lbl"));
      row["semantic_label_accuracy"] = acc;
      sum_label += acc;
      ++n_label;
    }
    if (fs::exists(pred / "animation.bin")) {
      const double mse =
          animation_mse(read_animation_file(ref / "animation.bin"),
                        read_animation_file(pred / "animation.bin"));
      row["animation_mse"] = mse;
      sum_mse += mse;
      ++n_mse;
    }
    if (fs::exists(pred / "script.txt")) {
      const bool match = script_exact_match(slurp(ref / "script.txt"),
                                            slurp(pred / "script.txt"));
      row["script_exact_match"] = match;
      sum_exact += match ? 1.0 : 0.0;
      ++n_exact;
    }
    if (fs::exists(pred / "description.txt")) {
      const double acc = description_attribute_accuracy(
          slurp(ref / "description.txt"), slurp(pred / "description.txt"));
      row["description_attribute_accuracy"] = acc;
      sum_attr += acc;
      ++n_attr;
    }
    if (fs::exists(pred / "speech.sig")) {
      const double corr =
          speech_spectral_correlation(read_signal_file(ref / "speech.sig"),
                                      read_signal_file(pred / "speech.sig"));
      row["speech_spectral_correlation"] = corr;
      sum_spec += corr;
      ++n_spec;
    }
    per_record.push_back(row);
  }

  nlohmann::json report;
  report["records"] = per_record;
  nlohmann::json means;
  if (n_label) means["semantic_label_accuracy"] = sum_label / n_label;
  if (n_mse) means["animation_mse"] = sum_mse / n_mse;
  if (n_exact) means["script_exact_match"] = sum_exact / n_exact;
  if (n_attr) means["description_attribute_accuracy"] = sum_attr / n_attr;
  if (n_spec) means["speech_spectral_correlation"] = sum_spec / n_spec;
  report["means"] = means;
  std::ofstream os(out);
  if (!os) fail(ErrorCode::IoError, "cannot open " + out);
  os << report.dump(2) << '\n';
  log_info("eval over " + std::to_string(per_record.size()) + " records -> " +
           out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* level = std::getenv("ARCHON_LOG")) {
    g_log_level = std::atoi(level);
  }

  CLI::App app{"unified multimodal token pipeline"};
  app.require_subcommand(1);

  CommonArgs common;

  auto* gen_data = app.add_subcommand("gen-data", "write a synthetic dataset");
  std::size_t gen_n = 10;
  std::string gen_out = "data";
  add_common(gen_data, common);
  gen_data->add_option("--n", gen_n, "record count")->default_val(10);
  gen_data->add_option("--out", gen_out, "output directory")->required();

  auto* train_codecs_cmd =
      app.add_subcommand("train-codecs", "train all codebooks");
  std::string tc_data, tc_out;
  add_common(train_codecs_cmd, common);
  train_codecs_cmd->add_option("--data", tc_data, "dataset directory")
      ->required();
  train_codecs_cmd->add_option("--out", tc_out, "codec output directory")
      ->required();

  auto* pack = app.add_subcommand("pack", "sample and pack training windows");
  std::string pk_data, pk_codecs, pk_out;
  std::size_t pk_windows = 8;
  add_common(pack, common);
  pack->add_option("--data", pk_data)->required();
  pack->add_option("--codecs", pk_codecs)->required();
  pack->add_option("--out", pk_out)->required();
  pack->add_option("--windows", pk_windows)->default_val(8);

  auto* train = app.add_subcommand("train", "run the training loop");
  std::string tr_data, tr_codecs, tr_out, tr_stats;
  std::size_t tr_steps = 0, tr_ckpt_every = 0;
  add_common(train, common);
  train->add_option("--data", tr_data)->required();
  train->add_option("--codecs", tr_codecs)->required();
  train->add_option("--out", tr_out)->required();
  train->add_option("--steps", tr_steps, "override train.total_steps");
  train->add_option("--stats", tr_stats, "task perplexity JSON for weights");
  train->add_option("--checkpoint-every", tr_ckpt_every);

  auto* gen = app.add_subcommand("generate", "execute a task from a prompt");
  std::string g_codecs, g_ckpt, g_prompt, g_out, g_chain, g_final;
  double g_temp = 0.0;
  std::uint32_t g_text_len = 48;
  add_common(gen, common);
  gen->add_option("--codecs", g_codecs)->required();
  gen->add_option("--checkpoint", g_ckpt)->required();
  gen->add_option("--prompt", g_prompt, "ARTK prompt file")->required();
  gen->add_option("--out", g_out)->required();
  gen->add_option("--chain", g_chain, "canonical or direct (omit = no chain)");
  gen->add_option("--final", g_final, "chain final modality kind");
  gen->add_option("--temperature", g_temp)->default_val(0.0);
  gen->add_option("--text-len", g_text_len,
                  "byte length for generated text modalities");

  auto* plan = app.add_subcommand("plan-chain", "print a chain plan");
  std::string pl_conditions, pl_final = "video", pl_strategy = "canonical";
  add_common(plan, common);
  plan->add_option("--conditions", pl_conditions,
                   "comma list, e.g. speech,image")
      ->required();
  plan->add_option("--final", pl_final)->default_val("video");
  plan->add_option("--strategy", pl_strategy)->default_val("canonical");

  auto* ppl = app.add_subcommand("perplexity", "estimate per-task perplexity");
  std::string pp_data, pp_codecs, pp_ckpt, pp_out = "perplexity.json";
  std::size_t pp_samples = 0;
  add_common(ppl, common);
  ppl->add_option("--data", pp_data)->required();
  ppl->add_option("--codecs", pp_codecs)->required();
  ppl->add_option("--checkpoint", pp_ckpt)->required();
  ppl->add_option("--out", pp_out)->default_val("perplexity.json");
  ppl->add_option("--samples", pp_samples, "instances per task");

  auto* eval = app.add_subcommand("eval", "compare predictions to references");
  std::string ev_ref, ev_pred, ev_out = "metrics.json";
  add_common(eval, common);
  eval->add_option("--ref", ev_ref, "reference dataset directory")->required();
  eval->add_option("--pred", ev_pred, "prediction directory")->required();
  eval->add_option("--out", ev_out)->default_val("metrics.json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_data->parsed()) return cmd_gen_data(common, gen_n, gen_out);
    if (train_codecs_cmd->parsed()) {
      return cmd_train_codecs(common, tc_data, tc_out);
    }
    if (pack->parsed()) {
      return cmd_pack(common, pk_data, pk_codecs, pk_out, pk_windows);
    }
    if (train->parsed()) {
      return cmd_train(common, tr_data, tr_codecs, tr_out, tr_steps, tr_stats,
                       tr_ckpt_every);
    }
    if (gen->parsed()) {
      return cmd_generate(common, g_codecs, g_ckpt, g_prompt, g_out, g_chain,
                          g_final, g_temp, g_text_len);
    }
    if (plan->parsed()) {
      return cmd_plan_chain(pl_conditions, pl_final, pl_strategy);
    }
    if (ppl->parsed()) {
      return cmd_perplexity(common, pp_data, pp_codecs, pp_ckpt, pp_out,
                            pp_samples);
    }
    if (eval->parsed()) return cmd_eval(ev_ref, ev_pred, ev_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
