#pragma once

// Command-line front end. Every subcommand resolves a config (preset or
// key=value file, then --set overrides, then --seed), builds the aligned
// world, writes <out>/manifest.txt and only then trains or evaluates.
//
// Exit codes: 0 success, 1 invalid input, 2 numeric failure.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evoprompt/config.hpp"
#include "evoprompt/serialize.hpp"
#include "evoprompt/trainer.hpp"

namespace evoprompt::cli {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kExitOk = 0, kExitInput = 1, kExitNumeric = 2;

using Json = nlohmann::ordered_json;

/// A gradient check exceeded its tolerance.
class GradcheckFailure : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint64_t task_checksum(const SyntheticTask& task) {
  std::ostringstream os;
  export_csv(task, os);
  return evoprompt::detail::fnv1a(os.str());
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw InputError("cannot read '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Json eval_json(const EvalResult& r) {
  return Json{{"base_acc", r.base_acc}, {"novel_acc", r.novel_acc}, {"hm", r.hm}, {"per_class", r.per_class}};
}

inline void write_epochs_csv(std::ostream& os, const TrainReport& rep) {
  os << "epoch,loss_total,loss_nce,loss_fgr,loss_kcl,base_acc,novel_acc,hm,trainable_params\n";
  for (const auto& e : rep.epochs) {
    os << e.epoch << ',' << num(e.loss.total) << ',' << num(e.loss.nce) << ',' << num(e.loss.fgr) << ','
       << num(e.loss.kcl) << ',' << num(e.base_acc) << ',' << num(e.novel_acc) << ',' << num(e.hm) << ','
       << e.trainable_params << '\n';
  }
}

inline void write_alphas_csv(std::ostream& os, const std::vector<AlphaEntry>& alphas) {
  os << "epoch,layer,modality,alpha\n";
  for (const auto& a : alphas) os << a.epoch << ',' << a.layer << ',' << modality_name(a.modality) << ',' << num(a.alpha) << '\n';
}

inline Json report_json(const std::string& command, const TrainReport& rep) {
  Json epochs = Json::array();
  for (const auto& e : rep.epochs) {
    Json j{{"epoch", e.epoch},       {"loss_total", e.loss.total}, {"loss_nce", e.loss.nce},
           {"loss_fgr", e.loss.fgr}, {"loss_kcl", e.loss.kcl},     {"base_acc", e.base_acc},
           {"novel_acc", e.novel_acc}, {"hm", e.hm},               {"trainable_params", e.trainable_params}};
    if (e.gradcheck_error >= 0.0) j["gradcheck_max_rel_error"] = e.gradcheck_error;
    epochs.push_back(std::move(j));
  }
  Json alphas = Json::array();
  for (const auto& a : rep.alphas) {
    alphas.push_back({{"epoch", a.epoch}, {"layer", a.layer}, {"modality", modality_name(a.modality)}, {"alpha", a.alpha}});
  }
  const auto& fin = rep.final_epoch();
  return Json{{"schema_version", kSchemaVersion},
              {"command", command},
              {"variant", rep.variant},
              {"seed", rep.seed},
              {"evolution", rep.evolution},
              {"zero_shot", eval_json(rep.zero_shot)},
              {"final", {{"base_acc", fin.base_acc}, {"novel_acc", fin.novel_acc}, {"hm", fin.hm}}},
              {"epochs", std::move(epochs)},
              {"alphas", std::move(alphas)},
              {"encoder_checksum_before", hex(rep.encoder_checksum_before)},
              {"encoder_checksum_after", hex(rep.encoder_checksum_after)},
              {"encoder_unchanged", rep.encoder_checksum_before == rep.encoder_checksum_after},
              {"directions_intact", rep.directions_intact},
              {"max_direction_norm_error", rep.max_direction_norm_error}};
}

/// Output directory plus the manifest that indexes it.
class RunDir {
 public:
  RunDir(std::filesystem::path dir, std::ostream& log) : dir_(std::move(dir)), log_(log) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw InputError("cannot create output directory '" + dir_.string() + "': " + ec.message());
  }

  const std::filesystem::path& path() const { return dir_; }

  /// Written before any training step.
  void write_manifest(const std::string& command, const std::vector<std::pair<std::string, std::string>>& args,
                      const TrainConfig& cfg, const World& world) {
    std::ostringstream os;
    os << "# evoprompt run manifest; usable as --config\n";
    os << "manifest.command=" << command << '\n';
    for (const auto& [k, v] : args) os << "manifest.arg." << k << '=' << v << '\n';
    os << "manifest.seed=" << cfg.seed << '\n';
    os << "manifest.outdir=" << dir_.string() << '\n';
    os << "manifest.schema_version=" << kSchemaVersion << '\n';
    os << render_config(cfg);
    os << "manifest.encoder_checksum=" << hex(world.encoder.checksum()) << '\n';
    os << "manifest.task_checksum=" << hex(task_checksum(world.task)) << '\n';
    put("manifest.txt", os.str());
  }

  /// Writes `rel` and appends its checksum to the manifest.
  void artifact(const std::string& rel, const std::string& bytes) {
    put(rel, bytes);
    std::ofstream m(dir_ / "manifest.txt", std::ios::app);
    m << "artifact." << rel << '=' << hex(evoprompt::detail::fnv1a(bytes)) << '\n';
    if (!m) throw InputError("cannot append to manifest in '" + dir_.string() + "'");
    log_ << "wrote " << (dir_ / rel).string() << '\n';
  }

 private:
  void put(const std::string& rel, const std::string& bytes) const {
    const auto p = dir_ / rel;
    std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("cannot write '" + p.string() + "'");
  }

  std::filesystem::path dir_;
  std::ostream& log_;
};

/// Writes epochs.csv, alphas.csv and report.json under `prefix`.
inline void write_train_outputs(RunDir& dir, const std::string& prefix, const std::string& command,
                                const TrainReport& rep) {
  std::ostringstream ep, al;
  write_epochs_csv(ep, rep);
  write_alphas_csv(al, rep.alphas);
  dir.artifact(prefix + "epochs.csv", ep.str());
  dir.artifact(prefix + "alphas.csv", al.str());
  dir.artifact(prefix + "report.json", report_json(command, rep).dump(2) + "\n");
}

inline void print_epoch_table(std::ostream& out, const TrainReport& rep) {
  out << "epoch  loss      nce       fgr       kcl       base    novel   hm      params  sec\n";
  for (const auto& e : rep.epochs) {
    char line[160];
    std::snprintf(line, sizeof line, "%5d  %-8.5f  %-8.5f  %-8.5f  %-8.5f  %.4f  %.4f  %.4f  %6zu  %.2f\n", e.epoch,
                  e.loss.total, e.loss.nce, e.loss.fgr, e.loss.kcl, e.base_acc, e.novel_acc, e.hm,
                  e.trainable_params, e.seconds);
    out << line;
  }
}

struct Common {
  std::string config = "default";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = "evoprompt-out";
};

inline void add_common(CLI::App* sc, Common& c) {
  sc->add_option("--config", c.config, "preset (default, tiny) or key=value file")->capture_default_str();
  sc->add_option("--set", c.sets, "override one key, e.g. --set evolution.mu=4 (repeatable)")
      ->allow_extra_args(false);
  sc->add_option("--seed", c.seed, "master seed; encoder and task seeds follow unless pinned");
  sc->add_option("--out", c.out, "output directory")->capture_default_str();
}

inline TrainConfig resolve(const Common& c) {
  RunConfig rc = load_config(c.config);
  for (const auto& s : c.sets) apply_assignment(rc, s, "--set");
  if (c.seed) rc.train.seed = *c.seed;
  TrainConfig cfg = rc.resolved();
  cfg.validate();
  return cfg;
}

}  // namespace detail

/// Entry point behind the `evoprompt` binary.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"EvoPrompt on a small frozen dual encoder", "evoprompt"};
  app.require_subcommand(1, 1);

  Common common;
  std::string variant_arg, checkpoint;
  int extended = 0, seeds = 1;
  bool each_epoch = false;
  double tol = 1e-4, step = 1e-5;

  auto* train_cmd = app.add_subcommand("train", "train prompts and write epochs.csv, alphas.csv, report.json");
  add_common(train_cmd, common);
  train_cmd->add_option("--variant", variant_arg, "ablation variant (overrides ablation.* keys)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (or the initial prompts) and the frozen model");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.evpb written by train");

  auto* ablate_cmd = app.add_subcommand("ablate", "run Table 4a variants on one world");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--variant", variant_arg, "variant name, flags joined by '+', or 'all'")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  add_common(grad_cmd, common);
  grad_cmd->add_flag("--each-epoch", each_epoch, "train and check at the first step of every epoch");
  grad_cmd->add_option("--tol", tol, "maximum relative error")->capture_default_str();
  grad_cmd->add_option("--step", step, "central-difference step")->capture_default_str();

  auto* trace_cmd = app.add_subcommand("trace-alphas", "final magnitude of every frozen direction");
  add_common(trace_cmd, common);
  trace_cmd->add_option("--checkpoint", checkpoint, "read alphas from a checkpoint instead of training");

  auto* bp_cmd = app.add_subcommand("breakpoint", "full vs no_evolution over an extended horizon");
  add_common(bp_cmd, common);
  bp_cmd->add_option("--extended", extended, "epochs to train (default 2 * evolution.epochs)");
  bp_cmd->add_option("--seeds", seeds, "number of consecutive seeds starting at the master seed")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  auto* pc_cmd = app.add_subcommand("param-count", "itemized trainable-parameter count per epoch");
  add_common(pc_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitInput;
  }

  try {
    TrainConfig cfg = resolve(common);
    RunDir dir(common.out, out);
    auto make_world = [&](const TrainConfig& c) { return std::make_shared<const World>(build_world(c)); };

    if (*train_cmd) {
      if (!variant_arg.empty()) cfg.variant = Variant::parse(variant_arg);
      auto world = make_world(cfg);
      dir.write_manifest("train", {}, cfg, *world);
      Trainer trainer(cfg, world);
      TrainReport rep = trainer.run();
      print_epoch_table(out, rep);
      write_train_outputs(dir, "", "train", rep);
      dir.artifact("checkpoint.evpb", encode_snapshot(make_snapshot(trainer.encoder(), trainer.projector())));
      return kExitOk;
    }

    if (*eval_cmd) {
      auto world = make_world(cfg);
      dir.write_manifest("eval", {{"checkpoint", checkpoint}}, cfg, *world);
      Trainer trainer(cfg, world);
      Json rep{{"schema_version", kSchemaVersion}, {"command", "eval"}, {"variant", cfg.variant.name()},
               {"seed", cfg.seed}};
      if (!checkpoint.empty()) {
        const Snapshot snap = read_snapshot(checkpoint);
        FrozenEncoder saved = world->encoder;
        load_encoder(snap, saved);
        if (saved.checksum() != world->encoder.checksum()) {
          throw InputError("checkpoint encoder does not match the encoder built from this config "
                           "(pass the run's manifest.txt as --config)");
        }
        load_projector(snap, trainer.projector());
        rep["checkpoint_checksum"] = hex(evoprompt::detail::fnv1a(read_file(checkpoint)));
      }
      const EvalResult prompted = trainer.evaluate(), frozen = trainer.evaluate_frozen();
      rep["prompted"] = eval_json(prompted);
      rep["frozen"] = eval_json(frozen);
      char line[160];
      std::snprintf(line, sizeof line, "prompted base %.4f novel %.4f hm %.4f\nfrozen   base %.4f novel %.4f hm %.4f\n",
                    prompted.base_acc, prompted.novel_acc, prompted.hm, frozen.base_acc, frozen.novel_acc, frozen.hm);
      out << line;
      dir.artifact("report.json", rep.dump(2) + "\n");
      return kExitOk;
    }

    if (*ablate_cmd) {
      std::vector<std::string> names;
      if (variant_arg == "all") {
        names.push_back("full");
        for (const auto& n : table4a_variants()) names.push_back(n);
      } else {
        names.push_back(Variant::parse(variant_arg).name());
      }
      auto world = make_world(cfg);
      dir.write_manifest("ablate", {{"variant", variant_arg}}, cfg, *world);
      std::ostringstream summary;
      summary << "variant,base_acc,novel_acc,hm,loss_nce,loss_fgr,loss_kcl,trainable_params_final\n";
      Json rows = Json::array();
      for (const auto& name : names) {
        out << "== " << name << '\n';
        TrainReport rep = ablate(cfg, Variant::parse(name), world);
        print_epoch_table(out, rep);
        write_train_outputs(dir, name + "/", "ablate", rep);
        const auto& f = rep.final_epoch();
        summary << name << ',' << num(f.base_acc) << ',' << num(f.novel_acc) << ',' << num(f.hm) << ','
                << num(f.loss.nce) << ',' << num(f.loss.fgr) << ',' << num(f.loss.kcl) << ',' << f.trainable_params
                << '\n';
        rows.push_back({{"variant", name},
                        {"base_acc", f.base_acc},
                        {"novel_acc", f.novel_acc},
                        {"hm", f.hm},
                        {"loss_fgr", f.loss.fgr},
                        {"loss_kcl", f.loss.kcl},
                        {"trainable_params_final", f.trainable_params}});
      }
      dir.artifact("ablation.csv", summary.str());
      dir.artifact("report.json",
                   Json{{"schema_version", kSchemaVersion}, {"command", "ablate"}, {"seed", cfg.seed}, {"variants", rows}}
                           .dump(2) +
                       "\n");
      return kExitOk;
    }

    if (*grad_cmd) {
      auto world = make_world(cfg);
      dir.write_manifest("gradcheck",
                         {{"each_epoch", each_epoch ? "true" : "false"}, {"tol", num(tol)}, {"h", num(step)}}, cfg,
                         *world);
      std::ostringstream csv;
      csv << "epoch,params,checked,max_rel_error,worst_param,worst_entry,analytic,numeric\n";
      Json checks = Json::array();
      double worst = 0.0;
      Trainer trainer(cfg, world);
      const int last = each_epoch ? cfg.schedule.epochs : 1;
      for (int e = 1; e <= last; ++e) {
        std::vector<std::size_t> batch = trainer.next_batch();
        const std::size_t params = trainer.projector().trainable_count();
        const GradCheckResult g = trainer.gradcheck(batch, step);
        worst = std::max(worst, g.max_rel_error);
        csv << e << ',' << params << ',' << g.checked << ',' << num(g.max_rel_error) << ',' << g.worst_param << ','
            << g.worst_entry << ',' << num(g.worst_analytic) << ',' << num(g.worst_numeric) << '\n';
        checks.push_back({{"epoch", e}, {"params", params}, {"checked", g.checked}, {"max_rel_error", g.max_rel_error}});
        char line[128];
        std::snprintf(line, sizeof line, "epoch %d: %zu params, max relative error %.3e\n", e, params, g.max_rel_error);
        out << line;
        if (e < last) {
          trainer.step(batch);
          for (std::size_t s = 1; s < trainer.steps_per_epoch(); ++s) trainer.step(trainer.next_batch());
          trainer.end_epoch();
        }
      }
      dir.artifact("gradcheck.csv", csv.str());
      dir.artifact("report.json", Json{{"schema_version", kSchemaVersion},
                                       {"command", "gradcheck"},
                                       {"seed", cfg.seed},
                                       {"tolerance", tol},
                                       {"h", step},
                                       {"max_rel_error", worst},
                                       {"passed", worst <= tol},
                                       {"checks", checks}}
                                          .dump(2) +
                                      "\n");
      if (!(worst <= tol)) {
        throw GradcheckFailure("gradient check failed: max relative error " + num(worst) + " > " + num(tol));
      }
      return kExitOk;
    }

    if (*trace_cmd) {
      std::vector<AlphaEntry> alphas;
      bool evolving = true;
      if (!checkpoint.empty()) {
        PromptProjector proj(cfg.mpp, cfg.variant.layout(), cfg.schedule, 0);
        load_projector(read_snapshot(checkpoint), proj);
        evolving = proj.evolving();
        for (const auto& [key, ad] : proj.adapters()) {
          for (const auto& h : ad.history()) alphas.push_back({h.epoch, key.first, key.second, h.alpha[0]});
        }
        std::stable_sort(alphas.begin(), alphas.end(),
                         [](const AlphaEntry& a, const AlphaEntry& b) { return a.epoch < b.epoch; });
        std::ofstream m(dir.path() / "manifest.txt");
        m << "# evoprompt run manifest; usable as --config\nmanifest.command=trace-alphas\nmanifest.arg.checkpoint="
          << checkpoint << "\nmanifest.outdir=" << dir.path().string() << '\n'
          << render_config(cfg);
      } else {
        auto world = make_world(cfg);
        dir.write_manifest("trace-alphas", {}, cfg, *world);
        TrainReport rep = Trainer(cfg, world).run();
        alphas = rep.alphas;
        evolving = rep.evolution;
      }
      if (!evolving) err << "note: evolution is disabled for variant " << cfg.variant.name() << "; no alphas\n";
      for (const auto& a : alphas) {
        char line[96];
        std::snprintf(line, sizeof line, "t=%-3d layer %-3zu %-6s alpha %.6g\n", a.epoch, a.layer,
                      modality_name(a.modality), a.alpha);
        out << line;
      }
      std::ostringstream al;
      write_alphas_csv(al, alphas);
      dir.artifact("alphas.csv", al.str());
      return kExitOk;
    }

    if (*bp_cmd) {
      const int horizon = extended > 0 ? extended : 2 * cfg.schedule.epochs;
      if (horizon < 2 * cfg.schedule.epochs) throw ParameterError("--extended must be >= 2 * evolution.epochs");
      std::ostringstream curves, drops;
      curves << "seed,epoch,full_base_acc,full_novel_acc,full_hm,no_evolution_base_acc,no_evolution_novel_acc,"
                "no_evolution_hm\n";
      drops << "seed,full_novel_drop,no_evolution_novel_drop,full_final_hm,no_evolution_final_hm\n";
      std::vector<double> fd, nd, fh, nh;
      Json per_seed = Json::array();
      for (int k = 0; k < seeds; ++k) {
        Common ck = common;
        ck.seed = cfg.seed + static_cast<std::uint64_t>(k);
        TrainConfig c = resolve(ck);
        c.schedule.epochs = horizon;
        auto world = make_world(c);
        if (k == 0) dir.write_manifest("breakpoint", {{"extended", std::to_string(horizon)}, {"seeds", std::to_string(seeds)}}, cfg, *world);
        c.schedule.epochs = cfg.schedule.epochs;
        BreakpointResult r = breakpoint_experiment(c, horizon, world);
        for (std::size_t e = 0; e < r.full.epochs.size(); ++e) {
          const auto &a = r.full.epochs[e], &b = r.no_evolution.epochs[e];
          curves << c.seed << ',' << a.epoch << ',' << num(a.base_acc) << ',' << num(a.novel_acc) << ','
                 << num(a.hm) << ',' << num(b.base_acc) << ',' << num(b.novel_acc) << ',' << num(b.hm) << '\n';
        }
        drops << c.seed << ',' << num(r.full_curve.novel_drop) << ',' << num(r.no_evolution_curve.novel_drop) << ','
              << num(r.full_curve.final_hm) << ',' << num(r.no_evolution_curve.final_hm) << '\n';
        fd.push_back(r.full_curve.novel_drop);
        nd.push_back(r.no_evolution_curve.novel_drop);
        fh.push_back(r.full_curve.final_hm);
        nh.push_back(r.no_evolution_curve.final_hm);
        per_seed.push_back({{"seed", c.seed},
                            {"full_novel_drop", r.full_curve.novel_drop},
                            {"no_evolution_novel_drop", r.no_evolution_curve.novel_drop},
                            {"full_final_hm", r.full_curve.final_hm},
                            {"no_evolution_final_hm", r.no_evolution_curve.final_hm}});
        char line[160];
        std::snprintf(line, sizeof line, "seed %llu: drop full %.4f no_evolution %.4f | final hm full %.4f no_evolution %.4f\n",
                      static_cast<unsigned long long>(c.seed), r.full_curve.novel_drop, r.no_evolution_curve.novel_drop,
                      r.full_curve.final_hm, r.no_evolution_curve.final_hm);
        out << line;
      }
      auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
      };
      Json summary{{"full_novel_drop", median(fd)},
                   {"no_evolution_novel_drop", median(nd)},
                   {"full_final_hm", median(fh)},
                   {"no_evolution_final_hm", median(nh)}};
      dir.artifact("curves.csv", curves.str());
      dir.artifact("drops.csv", drops.str());
      dir.artifact("report.json", Json{{"schema_version", kSchemaVersion},
                                       {"command", "breakpoint"},
                                       {"seed", cfg.seed},
                                       {"seeds", seeds},
                                       {"epochs", horizon},
                                       {"median", summary},
                                       {"per_seed", per_seed}}
                                          .dump(2) +
                                      "\n");
      return kExitOk;
    }

    if (*pc_cmd) {
      auto world = make_world(cfg);
      dir.write_manifest("param-count", {}, cfg, *world);
      const ProjectorLayout layout = cfg.variant.layout();
      PromptProjector proj(cfg.mpp, layout, cfg.schedule, derive_seed(cfg.seed, {0x9A0}));
      const std::size_t span = cfg.mpp.span(), dr = cfg.mpp.shared_dim;
      const std::size_t baseline = span * dr * (cfg.mpp.vision_width + cfg.mpp.text_width);
      std::ostringstream csv;
      csv << "epoch,rank,embedding,shared,vision_adapters,text_adapters,free_prompts,closed_form,enumerated,"
             "full_weight_baseline\n";
      Json rows = Json::array();
      out << "epoch rank embedding shared vision_ad text_ad free closed enumerated baseline\n";
      for (int e = 1; e <= cfg.schedule.epochs; ++e) {
        const ParamCount pc = param_count(cfg.mpp, e, cfg.schedule, layout);
        const std::size_t enumerated = proj.trainable_count();
        const int rank = cfg.schedule.rank_at(e);
        csv << e << ',' << rank << ',' << pc.embedding << ',' << pc.shared << ',' << pc.vision_adapters << ','
            << pc.text_adapters << ',' << pc.free_prompts << ',' << pc.total() << ',' << enumerated << ',' << baseline
            << '\n';
        rows.push_back({{"epoch", e},
                        {"rank", rank},
                        {"embedding", pc.embedding},
                        {"shared", pc.shared},
                        {"vision_adapters", pc.vision_adapters},
                        {"text_adapters", pc.text_adapters},
                        {"free_prompts", pc.free_prompts},
                        {"closed_form", pc.total()},
                        {"enumerated", enumerated}});
        char line[160];
        std::snprintf(line, sizeof line, "%5d %4d %9zu %6zu %9zu %7zu %4zu %6zu %10zu %8zu\n", e, rank, pc.embedding,
                      pc.shared, pc.vision_adapters, pc.text_adapters, pc.free_prompts, pc.total(), enumerated,
                      baseline);
        out << line;
        if (enumerated != pc.total()) {
          throw ContractError("param-count: closed form " + std::to_string(pc.total()) + " != enumerated " +
                              std::to_string(enumerated) + " at epoch " + std::to_string(e));
        }
        if (e < cfg.schedule.epochs) proj.transition(e, cfg.schedule.rank_at(e + 1));
      }
      dir.artifact("param_count.csv", csv.str());
      dir.artifact("report.json", Json{{"schema_version", kSchemaVersion},
                                       {"command", "param-count"},
                                       {"variant", cfg.variant.name()},
                                       {"full_weight_baseline", baseline},
                                       {"epochs", rows}}
                                          .dump(2) +
                                      "\n");
      return kExitOk;
    }
    return kExitInput;
  } catch (const DivergenceError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const GradcheckFailure& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ContractError& e) {
    err << "internal check failed: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

}  // namespace evoprompt::cli
