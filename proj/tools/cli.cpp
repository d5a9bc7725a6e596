#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>

#include "robomamba/bench.hpp"
#include "robomamba/binio.hpp"
#include "robomamba/config.hpp"
#include "robomamba/trainer.hpp"

namespace robomamba::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

void add_globals(CLI::App& sub, Globals& g, const std::string& out_default, const std::string& out_help) {
  g.out = out_default;
  sub.add_option("--config", g.config, "flat key=value file; keys are long flag names, flags win");
  sub.add_option("--seed", g.seed, "seed for model init, data and evaluation");
  sub.add_option("--out", g.out, out_help);
}

struct ModelFlags {
  std::size_t d_model = 128;
  std::size_t layers = 4;
  std::size_t d_state = 8;
  std::size_t d_vis = 64;
  double position_std = 0.3;
  std::string head = "mlp2";
  std::size_t head_hidden = 8;
  std::string pooling = "mean";
  bool gripper = false;
  bool train_encoder = false;
};

void add_model_flags(CLI::App& sub, ModelFlags& f) {
  const auto group = "Model (fresh models only; a checkpoint carries its own)";
  sub.add_option("--d-model", f.d_model, "LM width")->group(group);
  sub.add_option("--layers", f.layers, "LM blocks")->group(group);
  sub.add_option("--d-state", f.d_state, "SSM state size")->group(group);
  sub.add_option("--d-vis", f.d_vis, "patch feature width")->group(group);
  sub.add_option("--position-std", f.position_std, "init scale of the patch position embedding")->group(group);
  sub.add_option("--head", f.head, "policy head variant")
      ->check(CLI::IsMember({"mlp2", "mlp1", "ssm-mlp"}))
      ->group(group);
  sub.add_option("--head-hidden", f.head_hidden, "policy head hidden width")->group(group);
  sub.add_option("--pooling", f.pooling, "global token pooling")->check(CLI::IsMember({"mean", "max"}))->group(group);
  sub.add_flag("--gripper", f.gripper, "predict the gripper state as well")->group(group);
  sub.add_flag("--train-encoder", f.train_encoder, "let cotrain update the encoder")->group(group);
}

ModelConfig model_config(const ModelFlags& f, std::uint64_t seed) {
  ModelConfig c;
  c.lm.block.d_model = f.d_model;
  c.lm.n_layers = f.layers;
  c.lm.block.d_state = f.d_state;
  c.vision.d_vis = f.d_vis;
  c.vision.position_std = f.position_std;
  c.head.variant = parse_head_variant(f.head);
  c.head.hidden = f.head_hidden;
  c.head.pooling = parse_pooling(f.pooling);
  c.head.gripper = f.gripper;
  c.train_encoder_in_cotrain = f.train_encoder;
  c.seed = seed;
  return c;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Splices config entries in front of the command-line flags of the chosen
// subcommand; with TakeLast the command line then wins.
std::vector<std::string> with_config(const std::vector<std::string>& args, const CLI::App& app) {
  std::string path;
  std::size_t sub_at = args.size();
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (sub_at == args.size() && app.get_subcommand_no_throw(args[i]) != nullptr) sub_at = i;
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty() || sub_at == args.size()) return args;
  const auto cfg = KeyValueConfig::load(path);
  const CLI::App* sub = app.get_subcommand_no_throw(args[sub_at]);
  std::set<std::string> known_anywhere;
  for (const auto* s : app.get_subcommands({})) {
    for (const auto* o : s->get_options()) {
      for (const auto& n : o->get_lnames()) known_anywhere.insert(n);
    }
  }
  std::vector<std::string> injected;
  for (const auto& [key, value] : cfg.entries()) {
    if (key == "config") throw DataError(path + ": config files cannot include other configs");
    if (!known_anywhere.count(key)) throw DataError(path + ": unknown key '" + key + "'");
    bool here = false;
    for (const auto* o : sub->get_options()) {
      for (const auto& n : o->get_lnames()) here = here || n == key;
    }
    if (here) injected.push_back("--" + key + "=" + value);
  }
  std::vector<std::string> out(args.begin(), args.begin() + std::ptrdiff_t(sub_at) + 1);
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + std::ptrdiff_t(sub_at) + 1, args.end());
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vision-language state space model with a manipulation policy head", "robomamba"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // train
  Globals tg;
  std::string stage_name, data_path, init_ckpt;
  std::size_t samples = 64;
  std::optional<double> lr, wd;
  std::optional<std::size_t> epochs;
  std::size_t max_steps = 0, batch = 8, accumulate = 1;
  ModelFlags tm;
  auto* train = app.add_subcommand("train", "run one training stage and write a checkpoint");
  add_globals(*train, tg, "run", "output directory for model.rmck, metrics.csv and vocab.txt");
  train->add_option("--stage", stage_name, "stage to run")
      ->required()
      ->check(CLI::IsMember({"warmup", "align", "cotrain", "manip"}));
  train->add_option("--data", data_path, "JSONL manifest; empty generates a toy set");
  train->add_option("--samples", samples, "toy set size when --data is empty");
  train->add_option("--ckpt", init_ckpt, "start from this checkpoint instead of a fresh model");
  train->add_option("--lr", lr, "learning rate (stage default: warmup 1e-3, align/cotrain 2e-5, manip 1e-5)");
  train->add_option("--weight-decay", wd, "AdamW weight decay (stage default: manip 0.1, others 0)");
  train->add_option("--epochs", epochs, "epochs (stage default: align 1, cotrain 2, manip 5, warmup 1)");
  train->add_option("--max-steps", max_steps, "stop after this many steps, 0 = whole epochs");
  train->add_option("--batch", batch, "samples per micro-batch")->check(CLI::PositiveNumber);
  train->add_option("--accumulate", accumulate, "micro-batches per optimizer step")->check(CLI::PositiveNumber);
  add_model_flags(*train, tm);

  // eval-manip
  Globals eg;
  std::string eval_ckpt, policy_name = "model";
  std::size_t episodes = 50;
  auto* eval = app.add_subcommand("eval-manip", "success rate of a policy on fresh simulator scenes");
  add_globals(*eval, eg, "", "JSONL per-episode log (empty: none)");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint for --policy model");
  eval->add_option("--policy", policy_name, "policy to evaluate")
      ->check(CLI::IsMember({"model", "center", "oracle"}));
  eval->add_option("--episodes", episodes, "episodes, scene seeds seed..seed+n-1")->check(CLI::PositiveNumber);

  // collect-data
  Globals cg;
  std::string set_name = "manip";
  std::size_t collect_n = 100;
  auto* collect = app.add_subcommand("collect-data", "write a dataset manifest with RMIM images");
  add_globals(*collect, cg, "data", "output directory");
  collect->add_option("--set", set_name, "manip episodes, or caption / cotrain text samples")
      ->check(CLI::IsMember({"manip", "caption", "cotrain"}));
  collect->add_option("--episodes", collect_n, "number of rows")->check(CLI::PositiveNumber);

  // generate
  Globals gg;
  std::string gen_ckpt, image_path, prompt = "describe the image.";
  std::size_t max_new = 24;
  auto* gen = app.add_subcommand("generate", "greedy text from an image and a prompt");
  add_globals(*gen, gg, "", "write the text here instead of stdout");
  gen->add_option("--ckpt", gen_ckpt, "checkpoint")->required();
  gen->add_option("--image", image_path, "RMIM image; empty renders the scene for --seed");
  gen->add_option("--prompt", prompt, "prompt text");
  gen->add_option("--max-new", max_new, "maximum new tokens");

  // bench-scan
  Globals bg;
  std::vector<std::size_t> lengths{512, 1024, 2048, 4096, 8192};
  std::vector<std::string> mechanisms{"scan-seq", "scan-par", "attention"};
  std::size_t bench_d = 64, repeats = 5, warmup = 1;
  auto* bench = app.add_subcommand("bench-scan", "forward time of scan vs attention over sequence lengths");
  add_globals(*bench, bg, "bench.csv", "CSV path");
  bench->add_option("--lengths", lengths, "sequence lengths")->delimiter(',');
  bench->add_option("--mechanisms", mechanisms, "mechanisms")
      ->delimiter(',')
      ->check(CLI::IsMember({"scan-seq", "scan-par", "attention"}));
  bench->add_option("--d-model", bench_d, "model width")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", repeats, "timed repeats per point, median reported")
      ->check(CLI::Range(std::size_t{5}, std::size_t{1000000}));
  bench->add_option("--warmup", warmup, "untimed runs before timing");

  // param-report
  Globals pg;
  std::string report_ckpt, report_stage = "manip";
  ModelFlags pm;
  auto* report = app.add_subcommand("param-report", "parameter counts per group and trainable ratio");
  add_globals(*report, pg, "", "CSV path group,total,trainable (empty: none)");
  report->add_option("--ckpt", report_ckpt, "checkpoint; empty builds a fresh model");
  report->add_option("--stage", report_stage, "stage whose trainable set is reported")
      ->check(CLI::IsMember({"warmup", "align", "cotrain", "manip"}));
  add_model_flags(*report, pm);

  try {
    const auto full = with_config(args, app);
    std::vector<const char*> argv{"robomamba"};
    for (const auto& a : full) argv.push_back(a.c_str());
    try {
      app.parse(int(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e, out, err) == 0 ? kOk : kUsage;
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e, out, err) == 0 ? kOk : kUsage;
    } catch (const CLI::ParseError& e) {
      app.exit(e, out, err);
      err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return kUsage;
    }

    if (train->parsed()) {
      const Stage stage = parse_stage(stage_name);
      RoboMambaModel model = init_ckpt.empty() ? RoboMambaModel(model_config(tm, tg.seed), toy_tokenizer())
                                               : load_checkpoint(init_ckpt);
      Dataset data;
      if (!data_path.empty()) {
        data = read_manifest(data_path);
      } else if (stage == Stage::manip) {
        data = make_manip_dataset(samples, tg.seed);
      } else if (stage == Stage::cotrain) {
        data = make_cotrain_dataset(samples, tg.seed);
      } else {
        data = make_caption_dataset(samples, tg.seed);
      }
      TrainOptions o = stage_defaults(stage);
      if (lr) o.optim.lr = *lr;
      if (wd) o.optim.weight_decay = *wd;
      if (epochs) o.epochs = *epochs;
      o.max_steps = max_steps;
      o.batch = batch;
      o.accumulate = accumulate;
      o.seed = tg.seed;
      const fs::path dir = tg.out;
      ensure_dir(dir);
      o.metrics_csv = dir / "metrics.csv";
      o.checkpoint = dir / "model.rmck";
      const auto res = run_stage(model, stage, data, o);
      model.tokenizer().save(dir / "vocab.txt");
      out << "stage " << to_string(stage) << ": " << res.steps.size() << " steps, loss "
          << fmt("%.6g", res.steps.front().loss) << " -> " << fmt("%.6g", res.steps.back().loss) << "\n"
          << "wrote " << o.checkpoint.string() << "\n";
      return kOk;
    }

    if (eval->parsed()) {
      std::optional<RoboMambaModel> model;
      sim::Policy policy = sim::center_policy;
      if (policy_name == "model") {
        if (eval_ckpt.empty()) {
          err << "eval-manip: --policy model needs --ckpt\n" << eval->help();
          return kUsage;
        }
        model.emplace(load_checkpoint(eval_ckpt));
        policy = model_policy(*model);
      } else if (policy_name == "oracle") {
        policy = sim::oracle_policy;
      }
      const auto res = sim::evaluate(policy, episodes, eg.seed);
      if (!eg.out.empty()) {
        std::string text;
        for (const auto& r : res.log) {
          nlohmann::json row{{"seed", r.seed},   {"kind", sim::to_string(r.kind)},
                             {"u", r.u},         {"v", r.v},
                             {"valid", r.valid}, {"attached", r.attached},
                             {"success", r.success}, {"dq", r.dq},
                             {"note", r.note}};
          text += row.dump() + "\n";
        }
        binio::write_text_atomic(eg.out, text);
      }
      out << "policy " << policy_name << " episodes " << episodes << " success_rate "
          << fmt("%.4f", res.success_rate) << "\n";
      return kOk;
    }

    if (collect->parsed()) {
      const fs::path dir = cg.out;
      if (set_name == "manip") {
        std::vector<sim::ManipEpisode> eps;
        std::size_t wins = 0;
        for (std::size_t i = 0; i < collect_n; ++i) {
          eps.push_back(sim::collect_episode(cg.seed + i));
          wins += eps.back().success ? 1 : 0;
        }
        write_episode_manifest(eps, dir);
        out << "episodes " << eps.size() << " successful " << wins << "\n";
      } else {
        write_text_manifest(set_name == "caption" ? make_caption_dataset(collect_n, cg.seed)
                                                  : make_cotrain_dataset(collect_n, cg.seed),
                            dir);
        out << "samples " << collect_n << "\n";
      }
      toy_tokenizer().save(dir / "vocab.txt");
      out << "wrote " << (dir / "manifest.jsonl").string() << "\n";
      return kOk;
    }

    if (gen->parsed()) {
      const auto model = load_checkpoint(gen_ckpt);
      Image image;
      if (image_path.empty()) {
        image = sim::render(sim::spawn_scene(gg.seed)).image;
      } else {
        image = read_rmim(image_path);
      }
      const auto text = model.generate(image, prompt, max_new);
      if (gg.out.empty()) {
        out << text << "\n";
      } else {
        binio::write_text_atomic(gg.out, text + "\n");
      }
      return kOk;
    }

    if (bench->parsed()) {
      BenchConfig bc;
      bc.lengths = lengths;
      bc.d_model = bench_d;
      bc.repeats = repeats;
      bc.warmup = warmup;
      bc.seed = bg.seed;
      bc.mechanisms.clear();
      for (const auto& m : mechanisms) bc.mechanisms.push_back(parse_mechanism(m));
      const auto res = bench_scaling(bc);
      write_bench_csv(res, bg.out);
      for (const auto& r : res.records) {
        out << r.length << " " << to_string(r.mechanism) << " " << fmt("%.3f", r.median_ms) << " ms"
            << (r.flagged ? " (noisy)" : "") << "\n";
      }
      if (res.slopes.empty()) {
        out << "slopes: need >= 4 distinct lengths spanning >= 8x\n";
      }
      for (const auto& [m, s] : res.slopes) out << "slope " << to_string(m) << " " << fmt("%.3f", s) << "\n";
      out << "wrote " << bg.out << "\n";
      return kOk;
    }

    if (report->parsed()) {
      RoboMambaModel model = report_ckpt.empty() ? RoboMambaModel(model_config(pm, pg.seed), toy_tokenizer())
                                                 : load_checkpoint(report_ckpt);
      model.set_stage(parse_stage(report_stage));
      const auto r = model.param_report();
      std::string csv = "group,total,trainable\n";
      for (std::size_t g = 0; g < 4; ++g) {
        const char* name = to_string(static_cast<ParamGroup>(g));
        out << name << " " << r.total[g] << " trainable " << r.trainable[g] << "\n";
        csv += std::string(name) + "," + std::to_string(r.total[g]) + "," + std::to_string(r.trainable[g]) + "\n";
      }
      out << "total " << r.total_count << " trainable " << r.trainable_count << " ratio "
          << fmt("%.6f", r.ratio) << " (stage " << to_string(r.stage) << ")\n";
      if (!pg.out.empty()) binio::write_text_atomic(pg.out, csv);
      return kOk;
    }
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace robomamba::cli
