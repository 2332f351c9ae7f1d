// smcd: datagen / train / sample / eval / inspect.
//
// Failures print one line "error: <kind>: <message>" on stderr and exit with
// 2 (validation), 3 (config / shape / prerequisite) or 4 (I/O).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "smcd/smcd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace smcd;

namespace {

constexpr const char* kToolVersion = "smcd 1.0";

json provenance(const std::string& command, const json& flags) {
  return {{"tool", kToolVersion}, {"command", command}, {"flags", flags}};
}

// ---- datagen -----------------------------------------------------------------

struct DatagenArgs {
  int count = 64;
  std::uint64_t seed = 0;
  std::string out;
  SceneDistribution dist;
};

void run_datagen(const DatagenArgs& a) {
  const auto data = make_dataset(a.count, a.seed, a.dist);
  write_dataset(a.out, data);
  write_json((fs::path(a.out) / "provenance.json").string(),
             provenance("datagen", {{"count", a.count},
                                    {"seed", a.seed},
                                    {"out", a.out},
                                    {"canvas", a.dist.canvas},
                                    {"episode_length", a.dist.episode_length},
                                    {"max_objects", a.dist.max_objects}}));
  std::cout << "wrote " << data.size() << " samples to " << a.out << "\n";
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  int stage = 0;
  std::string config;
  std::string data;
  std::string init;
  std::string out;
  std::string metrics;
  bool joint = false;
  int checkpoint_every = 0;
  std::optional<int> steps, batch;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

void run_train(const TrainArgs& a) {
  json cfg = a.config.empty() ? json::object() : read_json(a.config);
  if (!cfg.is_object()) throw ValidationError(a.config + ": expected an object with 'model' and 'train'");
  TrainConfig tc;
  ModelConfig mc;
  try {
    if (cfg.contains("train")) tc = cfg["train"].get<TrainConfig>();
    if (cfg.contains("model")) mc = cfg["model"].get<ModelConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(a.config + ": " + e.what());
  }
  tc.stage = a.stage;
  tc.joint = a.joint;
  if (a.steps) tc.steps = *a.steps;
  if (a.batch) tc.batch_size = *a.batch;
  if (a.lr) tc.lr = *a.lr;
  if (a.seed) tc.seed = *a.seed;
  tc.validate();

  Model model;
  std::string init_hash;
  if (!a.init.empty()) {
    model = load_checkpoint(a.init);
    init_hash = file_hash(a.init);
  } else if (tc.stage == 0) {
    model = Model::fresh(mc);
  } else {
    throw PrerequisiteError("stage " + std::to_string(tc.stage) + " requires --init-checkpoint from stage " +
                            std::to_string(tc.stage - 1));
  }
  check_prerequisite(model, tc);

  std::vector<Sample> data;
  for (auto& e : load_dataset(a.data)) data.push_back(std::move(e.sample));

  const std::string metrics = a.metrics.empty() ? a.out + ".metrics.jsonl" : a.metrics;
  if (fs::path(metrics).has_parent_path()) fs::create_directories(fs::path(metrics).parent_path());
  std::ofstream log(metrics, std::ios::trunc);
  if (!log) throw IoError("cannot write metrics log '" + metrics + "'");
  const auto records = train_stage(model, data, tc, [&](const StepRecord& r) {
    log << json(r).dump() << "\n" << std::flush;
    if (a.checkpoint_every > 0 && (r.step + 1) % a.checkpoint_every == 0 && r.step + 1 < tc.steps)
      save_checkpoint(a.out, model);
  });
  save_checkpoint(a.out, model);
  write_json(a.out + ".provenance.json", provenance("train", {{"stage", a.stage},
                                                              {"joint", a.joint},
                                                              {"config", a.config},
                                                              {"data", a.data},
                                                              {"data_manifest_hash", file_hash(a.data)},
                                                              {"init_checkpoint", a.init},
                                                              {"init_checkpoint_hash", init_hash},
                                                              {"out", a.out},
                                                              {"checkpoint_hash", file_hash(a.out)},
                                                              {"model", model.config},
                                                              {"train", tc}}));
  if (!records.empty())
    std::cout << "stage " << tc.stage << ": " << records.size() << " steps, final loss " << records.back().loss
              << "\n";
}

// ---- sample ------------------------------------------------------------------

struct SampleArgs {
  std::string checkpoint;
  std::string trajectory;
  std::string image;
  std::string out;
  double alpha = 2.0;
  std::optional<int> steps;
  std::uint64_t seed = 0;
  bool no_guidance = false;
  bool no_clip = false;
};

void run_sample(const SampleArgs& a) {
  const Model model = load_checkpoint(a.checkpoint);
  const auto& dcfg = model.config.denoiser;
  const TrajectoryFile traj = load_trajectory(a.trajectory);
  if (!traj.objects.empty())
    SMCD_REQUIRE(traj.frames == dcfg.frames, ShapeError,
                 a.trajectory + ": frames = " + std::to_string(traj.frames) + ", model generates " +
                     std::to_string(dcfg.frames));
  std::optional<Tensor<float>> latent;
  if (!a.image.empty()) {
    const Image img = read_png(a.image);
    SMCD_REQUIRE(img.height == model.config.image_size() && img.width == model.config.image_size(), ShapeError,
                 a.image + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     ", model expects " + std::to_string(model.config.image_size()) + " square");
    latent = encode_frame<float>(img, model.config.patch);
  }
  const ConditionSet<float> cond =
      make_conditions<float>(model.config.embedder(), traj.caption, latent ? &*latent : nullptr, traj.objects);
  SamplerConfig sc;
  sc.alpha = a.alpha;
  sc.steps = a.steps.value_or(model.config.schedule.steps);
  sc.seed = a.seed;
  sc.guidance = !a.no_guidance;
  sc.clip = !a.no_clip;
  const Generation gen = generate(model, cond, sc);
  write_frames(a.out, gen.frames);
  write_json((fs::path(a.out) / "provenance.json").string(),
             provenance("sample", {{"checkpoint", a.checkpoint},
                                   {"checkpoint_hash", file_hash(a.checkpoint)},
                                   {"trajectory", a.trajectory},
                                   {"image", a.image},
                                   {"image_hash", a.image.empty() ? std::string() : file_hash(a.image)},
                                   {"out", a.out},
                                   {"conditions",
                                    {{"caption", traj.caption},
                                     {"text_present", cond.has_text()},
                                     {"image_present", cond.has_image()},
                                     {"boxes_present", cond.has_boxes()},
                                     {"trajectories", trajectory_json(traj.caption, traj.objects)}}},
                                   {"sampler", sc}}));
  std::cout << "wrote " << gen.frames.size() << " frames to " << a.out << "\n";
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string generated;
  std::string reference;
  std::string report;
  double tolerance = TrackerOptions{}.tolerance;
};

std::vector<TrackTarget> targets_from_labels(const std::vector<ObjectTrajectory>& objs) {
  std::vector<TrackTarget> out;
  for (const auto& o : objs) {
    const auto toks = tokenize(o.label);
    SMCD_REQUIRE(!toks.empty(), ConfigError, "object with an empty label cannot be tracked by color");
    out.push_back({o.label, kPalette.at(static_cast<std::size_t>(palette_index(toks[0]))).rgb});
  }
  return out;
}

void run_eval(const EvalArgs& a) {
  const auto refs = load_dataset(a.reference);
  const FeatureExtractor fx = luminance_extractor();
  EvalReport rep;
  rep.extractor = fx.id;
  std::set<std::string> trackers;
  std::vector<std::vector<double>> gen_feats, ref_feats;
  double ao = 0, sr50 = 0, sr75 = 0, fff = 0;
  for (const auto& ref : refs) {
    const fs::path dir = fs::path(a.generated) / ref.name;
    if (!fs::exists(dir)) continue;
    const auto frames = read_frames(dir.string());
    const int f = static_cast<int>(frames.size());
    SMCD_REQUIRE(static_cast<int>(ref.sample.frames.size()) >= f + 1, ValidationError,
                 a.reference + ": sample '" + ref.name + "' has no conditioning frame before a " + std::to_string(f) +
                     "-frame clip");
    const auto gt = ref.sample.clip_trajectories(f);
    std::vector<ObjectTrajectory> pred;
    if (fs::exists(dir / "tracks.json")) {
      pred = load_trajectory((dir / "tracks.json").string()).objects;
      trackers.insert("external");
    } else {
      TrackerOptions opt;
      opt.tolerance = a.tolerance;
      pred = oracle_track(frames, targets_from_labels(gt), opt);
      trackers.insert("oracle_color");
    }
    const GroundingReport g = grounding_metrics(pred, gt);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const GroundingReport one = grounding_metrics(pred.empty() ? pred : std::vector{pred[i]}, {gt[i]});
      rep.per_object.push_back({ref.name, gt[i].label, one.ao, one.sr50, one.sr75, one.scored});
    }
    const FidelityResult fr = first_frame_fidelity(ref.sample.first_frame(), frames, fx);
    ao += g.ao, sr50 += g.sr50, sr75 += g.sr75, fff += fr.value;
    rep.fff_excluded += fr.excluded;
    for (const auto& im : frames) gen_feats.push_back(fx.fn(im));
    for (const auto& im : ref.sample.clip(f)) ref_feats.push_back(fx.fn(im));
    ++rep.videos;
  }
  if (rep.videos == 0) throw IoError("no generated video directories in '" + a.generated + "' match the reference");
  rep.ao = ao / rep.videos, rep.sr50 = sr50 / rep.videos, rep.sr75 = sr75 / rep.videos, rep.fff = fff / rep.videos;
  if (gen_feats.size() >= 2 && ref_feats.size() >= 2) rep.frechet = frechet_distance(gen_feats, ref_feats);
  for (const auto& t : trackers) rep.tracker += (rep.tracker.empty() ? "" : "+") + t;

  json j = rep;
  j["provenance"] = provenance("eval", {{"generated", a.generated},
                                        {"reference", a.reference},
                                        {"reference_hash", file_hash(a.reference)},
                                        {"report", a.report},
                                        {"tolerance", a.tolerance}});
  write_json(a.report, j);
  const std::string table = report_table(rep);
  write_file(a.report + ".txt", table);
  std::cout << table;
}

// ---- inspect -----------------------------------------------------------------

void run_inspect(const std::string& path) {
  const Model m = load_checkpoint(path);
  std::cout << "checkpoint " << path << "\n";
  std::cout << "stage " << m.stage << ", " << m.params.size() << " tensors, " << m.params.numel() << " parameters\n";
  std::cout << "config " << json(m.config).dump() << "\n";
  std::map<Group, std::size_t> per_group;
  for (const auto& [name, p] : m.params.all()) {
    per_group[p.group] += p.value.size();
    std::cout << "  " << std::left << std::setw(36) << name << std::setw(16) << shape_str(p.value.shape())
              << std::setw(16) << group_name(p.group) << p.value.size() << "\n";
  }
  std::cout << "groups:";
  for (const auto& [g, n] : per_group) std::cout << " " << group_name(g) << "(" << n << ")";
  std::cout << "\n";
}

int fail(const char* kind, const std::string& msg, int code) {
  std::string line = msg;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error: " << kind << ": " << line << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene and motion conditional video diffusion (desk scale)"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* c_dg = app.add_subcommand("datagen", "Generate a synthetic moving-shapes dataset");
  c_dg->add_option("--count", dg.count, "Number of episodes")->check(CLI::PositiveNumber);
  c_dg->add_option("--seed", dg.seed, "Dataset seed");
  c_dg->add_option("--out", dg.out, "Output directory")->required();
  c_dg->add_option("--canvas", dg.dist.canvas, "Canvas side in pixels");
  c_dg->add_option("--episode", dg.dist.episode_length, "Frames per episode (v0 + clip)");
  c_dg->add_option("--max-objects", dg.dist.max_objects, "Objects per scene, upper bound")->check(CLI::Range(1, kMaxObjects));

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Run one training stage");
  c_tr->add_option("--stage", tr.stage, "0 backbone, 1 motion module, 2 image module + temporal")->required()->check(CLI::Range(0, 2));
  c_tr->add_option("--config", tr.config, "JSON with 'model' and 'train' sections");
  c_tr->add_option("--data", tr.data, "Dataset manifest")->required();
  c_tr->add_option("--init-checkpoint", tr.init, "Checkpoint of the previous stage");
  c_tr->add_option("--out", tr.out, "Output checkpoint")->required();
  c_tr->add_option("--metrics", tr.metrics, "Metrics log (default <out>.metrics.jsonl)");
  c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "Also save every K steps");
  c_tr->add_option("--steps", tr.steps, "Override train.steps");
  c_tr->add_option("--batch", tr.batch, "Override train.batch_size");
  c_tr->add_option("--lr", tr.lr, "Override train.lr");
  c_tr->add_option("--seed", tr.seed, "Override train.seed");
  c_tr->add_flag("--joint", tr.joint, "Train motion, image and temporal layers together (stage 2 only)");

  SampleArgs sa;
  auto* c_sa = app.add_subcommand("sample", "Generate a video");
  c_sa->add_option("--checkpoint", sa.checkpoint)->required();
  c_sa->add_option("--trajectory", sa.trajectory, "Trajectory JSON with caption and boxes")->required();
  c_sa->add_option("--image", sa.image, "Conditioning frame (PNG)");
  c_sa->add_option("--alpha", sa.alpha, "Guidance scale")->check(CLI::NonNegativeNumber);
  c_sa->add_option("--steps", sa.steps, "Sampling steps (default T)");
  c_sa->add_option("--seed", sa.seed);
  c_sa->add_option("--out", sa.out, "Output directory")->required();
  c_sa->add_flag("--no-guidance", sa.no_guidance, "Use the conditional prediction only");
  c_sa->add_flag("--no-clip", sa.no_clip, "Do not clamp the predicted clean latent");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Grounding accuracy and fidelity of generated videos");
  c_ev->add_option("--generated", ev.generated, "Directory with one sub-directory per reference sample")->required();
  c_ev->add_option("--reference", ev.reference, "Reference dataset manifest")->required();
  c_ev->add_option("--report", ev.report, "Report JSON (a .txt table is written next to it)")->required();
  c_ev->add_option("--tolerance", ev.tolerance, "Tracker color tolerance");

  std::string inspect_path;
  auto* c_in = app.add_subcommand("inspect", "List checkpoint tensors, shapes and groups");
  c_in->add_option("--checkpoint", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("validation_error", e.what(), 2);
  }

  try {
    if (*c_dg) run_datagen(dg);
    else if (*c_tr) run_train(tr);
    else if (*c_sa) run_sample(sa);
    else if (*c_ev) run_eval(ev);
    else if (*c_in) run_inspect(inspect_path);
  } catch (const smcd::Error& e) {
    return fail(e.kind(), e.what(), e.exit_code());
  } catch (const fs::filesystem_error& e) {
    return fail("io_error", e.what(), 4);
  } catch (const std::exception& e) {
    return fail("internal_error", e.what(), 1);
  }
  return 0;
}
