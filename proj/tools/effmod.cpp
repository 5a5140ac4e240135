// effmod command-line front end.
//
// Exit codes: 0 ok, 2 usage, 3 precondition/config, 4 numerical failure.
// Errors go to stderr as a single line: "effmod: error: <kind>: <message>".

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "effmod/bench.hpp"
#include "effmod/context_map.hpp"
#include "effmod/gradcheck.hpp"
#include "effmod/serialize.hpp"
#include "effmod/spec_json.hpp"
#include "effmod/trainer.hpp"

using namespace effmod;

namespace {

constexpr std::uint64_t kDefaultModelSeed = 0;
constexpr std::uint64_t kDefaultTrainSeed = 0;
constexpr std::uint64_t kTrainDataSeed = 1;
constexpr std::uint64_t kEvalDataSeed = 2;

void write_csv(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  os << text;
  if (!os) throw ConfigError("write to '" + path + "' failed");
}

Architecture resolve_architecture(const std::string& arg) {
  const bool looks_like_file = arg.find('/') != std::string::npos || arg.ends_with(".json");
  if (looks_like_file || std::filesystem::exists(arg)) return load_architecture(arg);
  return preset(arg);
}

Shape parse_shape(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long x = std::stol(item, &used);
      if (used != item.size() || x <= 0) throw std::invalid_argument(item);
      v.push_back(static_cast<std::size_t>(x));
    } catch (const std::exception&) {
      throw ConfigError("shape '" + text + "': expected four positive integers n,c,h,w");
    }
  }
  if (v.size() != 4) throw ConfigError("shape '" + text + "': expected four positive integers n,c,h,w");
  return {v[0], v[1], v[2], v[3]};
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "effmod: error: " << kind << ": " << one_line(e.what()) << std::endl;
  return code;
}

// --- presets ----------------------------------------------------------------

void cmd_presets(const std::string& csv) {
  std::ostringstream out;
  out << "name,family,params_with_bias,resolution\n";
  auto row = [&](const std::string& name, const char* family) {
    const auto arch = preset(name);
    const std::size_t res = name == "micro" ? 32 : 224;
    const auto rep = analyze(arch, res);
    std::cout << std::left << std::setw(16) << name << std::setw(14) << family << std::right << std::fixed
              << std::setprecision(3) << std::setw(10) << rep.params_with_bias() / 1e6 << " M\n";
    out << name << ',' << family << ',' << rep.params_with_bias() << ',' << res << '\n';
  };
  for (const auto& n : hierarchical_preset_names()) row(n, "hierarchical");
  for (const auto& n : isotropic_preset_names()) row(n, "isotropic");
  write_csv(csv, out.str());
}

// --- analyze ----------------------------------------------------------------

void cmd_analyze(const std::string& target, std::size_t res, bool per_layer, const std::string& csv) {
  const auto arch = resolve_architecture(target);
  const auto rep = analyze(arch, res);
  std::cout << rep.table(per_layer);
  const auto stages = rep.stage_params();
  if (!arch.isotropic) {
    std::cout << "stage params        ";
    for (std::size_t s = 0; s < stages.size(); ++s) std::cout << (s ? " / " : " ") << stages[s];
    std::cout << "\n";
  }
  write_csv(csv, rep.csv());
}

// --- gradcheck --------------------------------------------------------------

bool cmd_gradcheck(const std::string& block, double tol, const std::string& shape_text, std::uint64_t seed,
                   const std::string& csv) {
  std::vector<BlockKind> kinds;
  if (block == "all")
    for (const auto& [name, kind] : block_kinds()) kinds.push_back(kind);
  else
    kinds.push_back(parse_block_kind(block));
  GradCheckOptions opt;
  opt.seed = seed;
  std::cout << "# gradcheck seed=" << seed << " tol=" << tol << "\n";
  std::ostringstream out;
  out << "block,shape,parameter,count,max_rel_err,pass\n" << std::scientific << std::setprecision(6);
  bool ok = true;
  for (BlockKind kind : kinds) {
    const auto shapes = shape_text.empty() ? gradcheck_shapes(kind) : std::vector<Shape>{parse_shape(shape_text)};
    for (const Shape& s : shapes) {
      const auto rep = grad_check(kind, s, tol, opt);
      std::cout << rep.table();
      ok = ok && rep.pass();
      for (const auto& e : rep.entries)
        out << rep.block << ",\"" << to_string(s) << "\"," << e.name << ',' << e.count << ',' << e.max_rel_err << ','
            << (e.max_rel_err < tol ? 1 : 0) << '\n';
    }
  }
  write_csv(csv, out.str());
  return ok;
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
  std::string experiment;
  BenchProtocol proto;
  std::string preset = "s";
  std::size_t res = 224;
  std::size_t channels = 64, ratio = 6, side = 28;
  std::uint64_t seed = kDefaultModelSeed;
  std::string csv;
};

void cmd_bench(const BenchArgs& a) {
  std::cout << "# bench " << a.experiment << " seed=" << a.seed << " threads=" << a.proto.threads
            << " warmup=" << a.proto.warmup << " iters=" << a.proto.iters << "\n";
  std::vector<BenchResult> rows;
  if (a.experiment == "fusion") {
    const auto f = bench_fusion_modes(a.channels, a.ratio, a.side, a.side, a.proto, a.seed);
    rows = {f.repeat, f.reshape};
    std::cout << bench_line(f.repeat) << "\n" << bench_line(f.reshape) << "\n";
    std::cout << "repeat/reshape latency ratio " << std::fixed << std::setprecision(4) << f.ratio() << "\n";
  } else if (a.experiment == "pair256" || a.experiment == "pair196") {
    const auto p = bench_pair_mbconv(a.experiment.substr(4), a.proto, a.res, a.seed);
    rows = {p.efficient_mod, p.mbconv};
    std::cout << "params efficient_mod " << p.params_mod << ", mbconv " << p.params_mbconv << " (delta " << std::fixed
              << std::setprecision(2) << p.param_delta() * 100 << "%)\n";
    std::cout << bench_line(p.efficient_mod) << "\n" << bench_line(p.mbconv) << "\n";
    std::cout << "efficient_mod/mbconv latency ratio " << std::fixed << std::setprecision(4)
              << p.efficient_mod.mean_ms / p.mbconv.mean_ms << "\n";
  } else if (a.experiment == "model") {
    rows = {bench_model(resolve_architecture(a.preset), a.res, a.proto, a.seed)};
    std::cout << bench_line(rows[0]) << "\n";
  } else {
    throw ConfigError("unknown experiment '" + a.experiment + "' (fusion, pair256, pair196, model)");
  }
  for (const auto& r : rows)
    if (r.unstable()) std::cout << "warning: " << r.experiment << " [" << r.mode << "] CV above 20%\n";
  std::string out = bench_csv_header();
  for (const auto& r : rows) out += bench_csv_row(r);
  write_csv(a.csv, out);
}

// --- train / ablate ---------------------------------------------------------

struct TrainArgs {
  std::string preset = "micro";
  std::uint64_t seed = kDefaultTrainSeed;
  std::uint64_t model_seed = kDefaultModelSeed;
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 2e-3;
  double weight_decay = 0.05;
  std::size_t train_size = 2000;
  std::size_t eval_size = 400;
  std::string csv;
  std::string save;
};

TrainConfig train_config(const TrainArgs& a) {
  TrainConfig c;
  c.epochs = a.epochs;
  c.batch = a.batch;
  c.lr = a.lr;
  c.adamw.weight_decay = a.weight_decay;
  c.seed = a.seed;
  return c;
}

void print_epoch(const char* tag, const EpochRecord& e) {
  std::cout << tag << "epoch " << std::setw(3) << e.epoch << std::scientific << std::setprecision(3) << "  lr "
            << e.lr << std::fixed << std::setprecision(4) << "  train_loss " << e.train_loss << "  train_acc "
            << e.train_acc << "  eval_loss " << e.eval_loss << "  eval_acc " << e.eval_acc << std::endl;
}

void print_train_header(const char* cmd, const TrainArgs& a) {
  std::cout << "# " << cmd << " preset=" << a.preset << " seed=" << a.seed << " model_seed=" << a.model_seed
            << " data_seeds=" << kTrainDataSeed << "/" << kEvalDataSeed << " train=" << a.train_size
            << " eval=" << a.eval_size << " epochs=" << a.epochs << " batch=" << a.batch << " lr=" << a.lr
            << " weight_decay=" << a.weight_decay << " threads=" << worker_budget() << "\n";
}

void cmd_train(const TrainArgs& a) {
  const auto arch = resolve_architecture(a.preset);
  print_train_header("train", a);
  auto model = build_model<float>(arch, a.model_seed);
  const auto tr = gen_dataset(kTrainDataSeed, a.train_size, arch.classes());
  const auto ev = gen_dataset(kEvalDataSeed, a.eval_size, arch.classes());
  const auto hist = train(model, tr, ev, train_config(a), [](const EpochRecord& e) { print_epoch("", e); });
  std::cout << "final eval_acc " << std::fixed << std::setprecision(4) << hist.epochs.back().eval_acc << "\n";
  write_csv(a.csv, hist.csv());
  if (!a.save.empty()) save_params(a.save, model);
}

void cmd_ablate(const TrainArgs& a) {
  const auto arch = resolve_architecture(a.preset);
  print_train_header("ablate-fusion", a);
  const auto tr = gen_dataset(kTrainDataSeed, a.train_size, arch.classes());
  const auto ev = gen_dataset(kEvalDataSeed, a.eval_size, arch.classes());
  std::size_t seen = 0;
  const std::size_t per_run = a.epochs + 1;
  const auto r = ablate_fusion(arch, a.model_seed, tr, ev, train_config(a), [&](const EpochRecord& e) {
    print_epoch(seen++ < per_run ? "mul " : "sum ", e);
  });
  std::cout << "identical_init " << (r.identical_init ? "yes" : "no") << ", params " << r.params << "\n";
  std::cout << std::fixed << std::setprecision(4) << "final eval_acc mul " << r.mul.epochs.back().eval_acc << ", sum "
            << r.sum.epochs.back().eval_acc << "\n";
  write_csv(a.csv, ablation_csv(r));
}

// --- ctxmap -----------------------------------------------------------------

void cmd_ctxmap(const std::string& target, const std::string& image_path, std::size_t stage, std::size_t block,
                const std::string& out, const std::string& params, std::uint64_t seed, const std::string& csv) {
  const auto arch = resolve_architecture(target);
  auto model = build_model<float>(arch, seed);
  if (!params.empty()) load_params(params, model);
  const auto img = read_pnm(image_path);
  const auto map = context_map(model, image_to_tensor(img, arch.in_channels()), stage, block);
  write_pnm(out, map.image());
  std::cout << "# ctxmap " << arch.name() << " seed=" << seed << (params.empty() ? "" : " params=" + params) << "\n";
  std::cout << "stage " << stage << " block " << block << ": " << map.height << "x" << map.width << " map written to "
            << out << "\n";
  std::ostringstream os;
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) os << (x ? "," : "") << int(map.at(y, x)) << (x + 1 == map.width ? "\n" : "");
  write_csv(csv, os.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EfficientMod reference toolkit"};
  app.require_subcommand(1);

  auto* presets = app.add_subcommand("presets", "List built-in model presets");
  std::string csv;
  presets->add_option("--csv", csv, "Write the table as CSV");

  auto* analyze_cmd = app.add_subcommand("analyze", "Parameter and MAC report for a preset or JSON spec");
  std::string target;
  std::size_t res = 224;
  bool per_layer = false;
  analyze_cmd->add_option("model", target, "Preset name or path to a JSON spec")->required();
  analyze_cmd->add_option("--res", res, "Input resolution")->check(CLI::PositiveNumber);
  analyze_cmd->add_flag("--per-layer", per_layer, "Print every layer");
  analyze_cmd->add_option("--csv", csv, "Write per-layer rows as CSV");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check of a block kind");
  std::string block;
  double tol = 1e-5;
  std::string shape_text;
  std::uint64_t gc_seed = 7;
  gc->add_option("block", block, "Block kind or 'all'")->required();
  gc->add_option("--tol", tol, "Max relative error")->check(CLI::PositiveNumber);
  gc->add_option("--shape", shape_text, "Input shape n,c,h,w (attention: n,tokens,dim,1)");
  gc->add_option("--seed", gc_seed, "Parameter and input seed");
  gc->add_option("--csv", csv, "Write per-parameter errors as CSV");

  auto* bench_cmd = app.add_subcommand("bench", "Latency microbenchmarks");
  BenchArgs ba;
  ba.proto.threads = worker_budget();
  bench_cmd->add_option("experiment", ba.experiment, "fusion | pair256 | pair196 | model")->required();
  bench_cmd->add_option("--threads", ba.proto.threads, "Worker threads")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--iters", ba.proto.iters, "Timed iterations");
  bench_cmd->add_option("--warmup", ba.proto.warmup, "Untimed warmup iterations");
  bench_cmd->add_option("--preset", ba.preset, "Model for the 'model' experiment");
  bench_cmd->add_option("--res", ba.res, "Input resolution")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--channels", ba.channels, "Fusion block channels")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--ratio", ba.ratio, "Fusion expansion ratio")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--side", ba.side, "Fusion feature map side")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--seed", ba.seed, "Parameter and input seed");
  bench_cmd->add_option("--csv", ba.csv, "Write results as CSV");

  TrainArgs ta;
  auto add_train_options = [&](CLI::App* sub) {
    sub->add_option("--preset", ta.preset, "Preset name or JSON spec");
    sub->add_option("--seed", ta.seed, "Data order and stochastic depth seed");
    sub->add_option("--model-seed", ta.model_seed, "Initialization seed");
    sub->add_option("--epochs", ta.epochs, "Epochs")->check(CLI::PositiveNumber);
    sub->add_option("--batch", ta.batch, "Batch size")->check(CLI::PositiveNumber);
    sub->add_option("--lr", ta.lr, "Peak learning rate")->check(CLI::NonNegativeNumber);
    sub->add_option("--weight-decay", ta.weight_decay, "Decoupled weight decay")->check(CLI::NonNegativeNumber);
    sub->add_option("--train-size", ta.train_size, "Training samples");
    sub->add_option("--eval-size", ta.eval_size, "Evaluation samples");
    sub->add_option("--csv", ta.csv, "Write the history as CSV");
  };
  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic bar task");
  add_train_options(train_cmd);
  train_cmd->add_option("--save", ta.save, "Write final parameters to this file");
  auto* ablate_cmd = app.add_subcommand("ablate-fusion", "Train mul and sum fusion variants from one init");
  add_train_options(ablate_cmd);

  auto* ctx_cmd = app.add_subcommand("ctxmap", "Channel-mean context map of an EfficientMod block as P5");
  std::string image, out = "ctxmap.pgm", params;
  std::size_t stage = 1, blk = 1;
  std::uint64_t ctx_seed = kDefaultModelSeed;
  ctx_cmd->add_option("model", target, "Preset name or JSON spec")->required();
  ctx_cmd->add_option("image", image, "P5 or P6 image")->required();
  ctx_cmd->add_option("--stage", stage, "Stage, 1-based")->check(CLI::PositiveNumber);
  ctx_cmd->add_option("--block", blk, "Block within the stage, 1-based")->check(CLI::PositiveNumber);
  ctx_cmd->add_option("--out", out, "Output P5 path");
  ctx_cmd->add_option("--params", params, "Parameter file from 'train --save'");
  ctx_cmd->add_option("--seed", ctx_seed, "Initialization seed when no parameter file is given");
  ctx_cmd->add_option("--csv", csv, "Write the map values as CSV");

  auto* degree = app.add_subcommand("degree-probe", "Polynomial degree of a stack of scalar modulation layers");
  std::size_t layers = 0;
  std::uint64_t degree_seed = 0;
  degree->add_option("--layers", layers, "Number of layers (0..12)")->required();
  degree->add_option("--seed", degree_seed, "Coefficient seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "effmod: error: usage: " << one_line(e.what()) << std::endl;
    return 2;
  }

  try {
    if (*presets) {
      cmd_presets(csv);
    } else if (*analyze_cmd) {
      cmd_analyze(target, res, per_layer, csv);
    } else if (*gc) {
      if (!cmd_gradcheck(block, tol, shape_text, gc_seed, csv)) {
        std::cerr << "effmod: error: numerical: gradient check failed" << std::endl;
        return 4;
      }
    } else if (*bench_cmd) {
      cmd_bench(ba);
    } else if (*train_cmd) {
      cmd_train(ta);
    } else if (*ablate_cmd) {
      cmd_ablate(ta);
    } else if (*ctx_cmd) {
      cmd_ctxmap(target, image, stage, blk, out, params, ctx_seed, csv);
    } else if (*degree) {
      std::cout << "# degree-probe layers=" << layers << " seed=" << degree_seed << "\n";
      std::cout << degree_probe(layers, degree_seed) << "\n";
    }
  } catch (const ConfigError& e) {
    return report("config", e, 3);
  } catch (const PreconditionError& e) {
    return report("precondition", e, 3);
  } catch (const NumericalError& e) {
    return report("numerical", e, 4);
  } catch (const std::exception& e) {
    return report("internal", e, 1);
  }
  return 0;
}
