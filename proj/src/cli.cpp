#include "ddsa/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "ddsa/gradcheck.hpp"
#include "ddsa/io.hpp"
#include "ddsa/metrics.hpp"
#include "ddsa/model.hpp"
#include "ddsa/nn.hpp"
#include "ddsa/ops.hpp"
#include "ddsa/training.hpp"

namespace ddsa::cli {

namespace fs = std::filesystem;

namespace {

class UnmatchedFiles : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config;
  std::string ckpt;
  std::string in;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string preset = "desk";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON config applied over the preset");
  cmd->add_option("--ckpt", a.ckpt, "checkpoint file");
  cmd->add_option("--in", a.in, "input file or directory");
  cmd->add_option("--out", a.out, "output file or directory");
  cmd->add_option("--seed", a.seed, "random seed");
  cmd->add_option("--preset", a.preset, "desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
}

RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg = RunConfig::preset(a.preset);
  if (!a.config.empty()) cfg = load_run_config(a.config, cfg);
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.train.seed = *a.seed;
  }
  cfg.validate();
  return cfg;
}

std::string format_loss_row(const LossRecord& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n", static_cast<long long>(r.step), r.lr,
                r.loss);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

// Names present in both directories; throws UnmatchedFiles otherwise.
std::vector<std::string> matched_names(const fs::path& a, const fs::path& b) {
  if (!fs::is_directory(a)) throw UnmatchedFiles("not a directory: " + a.string());
  if (!fs::is_directory(b)) throw UnmatchedFiles("not a directory: " + b.string());
  const auto left = list_pngs(a);
  const auto right = list_pngs(b);
  std::vector<std::string> only;
  std::set_symmetric_difference(left.begin(), left.end(), right.begin(), right.end(),
                                std::back_inserter(only));
  if (!only.empty()) {
    std::string msg = "unmatched files:";
    for (const auto& n : only) msg += " " + n;
    throw UnmatchedFiles(msg);
  }
  if (left.empty()) throw UnmatchedFiles("no PNG files in " + a.string());
  return left;
}

std::vector<ImagePair> load_dataset(const RunConfig& cfg) {
  std::vector<ImagePair> out;
  if (!cfg.data.pairs_dir.empty()) {
    const fs::path root = cfg.data.pairs_dir;
    for (const auto& name : matched_names(root / "rainy", root / "clean")) {
      out.push_back({read_png(root / "rainy" / name), read_png(root / "clean" / name)});
    }
  } else if (!cfg.data.clean_dir.empty()) {
    const fs::path root = cfg.data.clean_dir;
    std::int64_t i = 0;
    for (const auto& name : list_pngs(root)) {
      Rng rng = step_rng(cfg.seed, 0xda7a, i++);
      out.push_back(synth_rain(read_png(root / name), rng, cfg.data.severity));
    }
    if (out.empty()) throw ConfigError("data.clean_dir: no PNG files in " + root.string());
  } else {
    return synthetic_dataset(cfg.data.num_images, cfg.data.image_size, cfg.data.severity, cfg.seed);
  }
  for (const auto& p : out) {
    if (p.rainy.shape() != p.clean.shape()) throw ConfigError("data: rainy/clean size mismatch");
    if (p.rainy.dim(1) < cfg.train.patch_size || p.rainy.dim(2) < cfg.train.patch_size) {
      throw ConfigError("data: images must be at least train.patch_size on each side");
    }
  }
  return out;
}

void require_same_model(const ModelConfig& ckpt, const ModelConfig& wanted) {
  if (!(ckpt == wanted)) {
    throw CheckpointMismatch("checkpoint model config differs from the requested config");
  }
}

int cmd_train(const CommonArgs& a, bool dry_run) {
  const RunConfig cfg = resolve_config(a);
  const fs::path out = a.out.empty() ? fs::path("run") : fs::path(a.out);
  fs::create_directories(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  if (dry_run) {
    std::cout << "resolved config written to " << (out / "config.json").string() << "\n";
    return kOk;
  }

  const auto dataset = load_dataset(cfg);
  DerainNet model(cfg.model, cfg.seed);
  OptState state;
  std::int64_t start = 0;
  if (!a.ckpt.empty()) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    require_same_model(ck.model, cfg.model);
    apply_checkpoint(ck, model, &state);
    start = ck.step;
    state.step = start;
  }

  // Keep rows from before the resume point.
  std::string csv = "step,lr,loss\n";
  if (start > 0 && fs::exists(out / "loss.csv")) {
    std::istringstream prev(read_text(out / "loss.csv"));
    std::string line;
    std::getline(prev, line);
    while (std::getline(prev, line)) {
      if (!line.empty() && std::stoll(line.substr(0, line.find(','))) < start) csv += line + "\n";
    }
  }
  std::ofstream loss_file(out / "loss.csv", std::ios::binary | std::ios::trunc);
  loss_file << csv << std::flush;

  TrainHooks hooks;
  hooks.on_step = [&](const LossRecord& r) {
    loss_file << format_loss_row(r) << std::flush;
    if ((r.step + 1) % 50 == 0 || r.step + 1 == cfg.train.total_steps) {
      std::printf("step %lld  lr %.3e  loss %.6f\n", static_cast<long long>(r.step + 1), r.lr,
                  r.loss);
    }
  };
  hooks.on_checkpoint = [&](std::int64_t done, const OptState& s) {
    const fs::path p = out / ("ckpt_" + std::to_string(done) + ".bin");
    save_checkpoint(p, make_checkpoint(model, cfg.train, &s, done));
  };
  train_loop(model, dataset, cfg.train, state, hooks);
  return kOk;
}

Tensor derain_image(const DerainNet& model, const Tensor& img) {
  const std::int64_t m = model.config().spatial_multiple();
  const std::int64_t h = img.dim(1), w = img.dim(2);
  const std::int64_t ph = (m - h % m) % m, pw = (m - w % m) % m;
  const Tensor x = reflect_pad(reshape(img, Shape{1, 3, h, w}), ph, pw);
  return reshape(crop(model.forward(x), h, w), Shape{3, h, w});
}

DerainNet load_model(const CommonArgs& a, bool explicit_config) {
  if (a.ckpt.empty()) throw ConfigError("--ckpt is required");
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (explicit_config) require_same_model(ck.model, resolve_config(a).model);
  return model_from_checkpoint(ck);
}

int cmd_derain(const CommonArgs& a, bool explicit_config) {
  if (a.in.empty() || a.out.empty()) throw ConfigError("--in and --out are required");
  const DerainNet model = load_model(a, explicit_config);
  const fs::path in = a.in, out = a.out;
  if (fs::is_directory(in)) {
    fs::create_directories(out);
    for (const auto& name : list_pngs(in)) {
      write_png(out / name, derain_image(model, read_png(in / name)));
    }
  } else {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_png(out, derain_image(model, read_png(in)));
  }
  return kOk;
}

int cmd_eval(const CommonArgs& a, const std::string& gt, bool explicit_config) {
  if (a.in.empty()) throw ConfigError("--in is required");
  MetricReport report;
  if (a.ckpt.empty()) {
    if (gt.empty()) throw ConfigError("--gt is required without --ckpt");
    for (const auto& name : matched_names(a.in, gt)) {
      report.rows.push_back(
          evaluate_pair(name, read_png(fs::path(a.in) / name), read_png(fs::path(gt) / name)));
    }
  } else {
    const DerainNet model = load_model(a, explicit_config);
    const fs::path rainy = fs::path(a.in) / "rainy";
    const fs::path clean = gt.empty() ? fs::path(a.in) / "clean" : fs::path(gt);
    for (const auto& name : matched_names(rainy, clean)) {
      const Tensor pred = derain_image(model, read_png(rainy / name));
      // score what would be written to disk
      Tensor q(pred.shape());
      auto qd = q.mutable_data();
      const auto pd = pred.data();
      for (std::size_t i = 0; i < qd.size(); ++i) qd[i] = from_u8(to_u8(pd[i]));
      report.rows.push_back(evaluate_pair(name, q, read_png(clean / name)));
    }
  }
  if (a.out.empty()) {
    report.write_csv(std::cout);
  } else {
    std::ostringstream ss;
    report.write_csv(ss);
    write_text(a.out, ss.str());
    std::printf("mean PSNR %.4f dB  mean SSIM %.6f  (%zu images)\n", report.mean_psnr(),
                report.mean_ssim(), report.rows.size());
  }
  return kOk;
}

int cmd_gen_data(const CommonArgs& a, std::optional<std::int64_t> n, std::optional<double> sev,
                 std::optional<std::int64_t> size) {
  const RunConfig cfg = resolve_config(a);
  if (a.out.empty()) throw ConfigError("--out is required");
  const std::int64_t count = n.value_or(cfg.data.num_images);
  const double severity = sev.value_or(cfg.data.severity);
  const std::int64_t side = size.value_or(cfg.data.image_size);
  if (count <= 0 || side <= 0 || severity < 0.0) {
    throw ConfigError("--n and --size must be positive and --severity non-negative");
  }
  const fs::path out = a.out;
  fs::create_directories(out / "rainy");
  fs::create_directories(out / "clean");
  const auto pairs = synthetic_dataset(count, side, severity, cfg.seed);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    write_png(out / "rainy" / name, pairs[i].rainy);
    write_png(out / "clean" / name, pairs[i].clean);
  }
  std::printf("wrote %lld pairs to %s\n", static_cast<long long>(count), out.string().c_str());
  return kOk;
}

int cmd_check_grad(const CommonArgs& a) {
  const RunConfig cfg = resolve_config(a);
  GradCheckOptions opts;
  if (a.seed) opts.seed = *a.seed;
  const GradCheckReport report = run_gradcheck_suite(cfg.model, opts);
  std::ostringstream ss;
  report.write(ss);
  std::cout << ss.str();
  if (!a.out.empty()) write_text(a.out, ss.str());
  std::printf("%s: %zu checks, max relative error %.3e\n", report.passed() ? "PASS" : "FAIL",
              report.rows.size(), report.max_rel_error());
  return report.passed() ? kOk : kFailure;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Rain streak removal with a dynamic dual self-attention Transformer"};
  app.require_subcommand(1);

  CommonArgs train_a, derain_a, eval_a, gen_a, grad_a;
  bool dry_run = false;
  std::string gt;
  std::optional<std::int64_t> gen_n, gen_size;
  std::optional<double> gen_sev;

  auto* train = app.add_subcommand("train", "train a model and write checkpoints");
  add_common(train, train_a);
  train->add_flag("--dry-run", dry_run, "only write the resolved config");

  auto* derain = app.add_subcommand("derain", "derain a PNG file or a directory of PNGs");
  add_common(derain, derain_a);

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM on the luma channel");
  add_common(eval, eval_a);
  eval->add_option("--gt", gt, "ground-truth directory");

  auto* gen = app.add_subcommand("gen-data", "write synthetic rainy/clean pairs");
  add_common(gen, gen_a);
  gen->add_option("--n", gen_n, "number of pairs");
  gen->add_option("--severity", gen_sev, "rain severity, 0 for none");
  gen->add_option("--size", gen_size, "image side length");

  auto* grad = app.add_subcommand("check-grad", "finite-difference gradient report");
  add_common(grad, grad_a);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadConfig;
  }

  auto explicit_model = [](CLI::App* cmd) {
    return cmd->count("--config") > 0 || cmd->count("--preset") > 0;
  };

  try {
    if (train->parsed()) return cmd_train(train_a, dry_run);
    if (derain->parsed()) return cmd_derain(derain_a, explicit_model(derain));
    if (eval->parsed()) return cmd_eval(eval_a, gt, explicit_model(eval));
    if (gen->parsed()) return cmd_gen_data(gen_a, gen_n, gen_sev, gen_size);
    if (grad->parsed()) return cmd_check_grad(grad_a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNonFiniteLoss;
  } catch (const ImageError& e) {
    std::cerr << "image error: " << e.what() << "\n";
    return kBadImage;
  } catch (const CheckpointMismatch& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kCheckpointMismatch;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpointMismatch;
  } catch (const UnmatchedFiles& e) {
    std::cerr << "eval: " << e.what() << "\n";
    return kUnmatchedFiles;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

}  // namespace ddsa::cli
