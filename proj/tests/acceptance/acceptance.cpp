// Acceptance checks A1-A7; prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ddsa/attention.hpp"
#include "ddsa/gradcheck.hpp"
#include "ddsa/io.hpp"
#include "ddsa/metrics.hpp"
#include "ddsa/model.hpp"
#include "ddsa/ops.hpp"
#include "ddsa/training.hpp"
#include "support.hpp"

using namespace ddsa;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + DDSA_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

Outcome a1_gradcheck() {
  const auto t0 = Clock::now();
  const GradCheckReport report = run_gradcheck_suite(ModelConfig::desk(), GradCheckOptions{});
  const double secs = seconds_since(t0);
  double layer_max = 0.0, model_max = 0.0;
  bool topk_row = false;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    double& slot = i < report.layer_rows ? layer_max : model_max;
    slot = std::max(slot, r.max_rel_error);
    topk_row |= r.name.rfind("ddsa:", 0) == 0 || r.name.rfind("softmax_rows.masked", 0) == 0;
  }
  const bool pass = report.passed() && layer_max < 1e-4 && model_max < 1e-3 && topk_row && secs < 120;
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "%zu checks, layer max rel err %.2e, model max rel err %.2e, control %s, %.1f s",
                report.rows.size(), layer_max, model_max,
                report.control.passed() ? "undetected" : "detected", secs);
  return {pass, buf};
}

Outcome a2_ddsa_algebra() {
  bool ok = true;
  const Tensor qq = testing::rand_tensor({2, 2, 20, 4}, 1), kk = testing::rand_tensor({2, 2, 20, 4}, 2),
               vv = testing::rand_tensor({2, 2, 20, 4}, 3);
  const std::vector<double> ratios{0.3, 0.5, 0.7, 1.0};
  double worst_sum = 0.0;
  std::vector<std::vector<std::uint8_t>> masks;
  for (double r : ratios) {
    const AttentionScores sc = attention_scores(qq, kk, r);
    const Tensor dense = softmax_rows(sc.p), sparse = softmax_rows(sc.masked);
    const std::int64_t n = 20, rows = dense.numel() / n;
    for (std::int64_t row = 0; row < rows; ++row) {
      double sd = 0, ss = 0;
      int kept = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        const auto i = static_cast<std::size_t>(row * n + j);
        sd += dense.data()[i];
        ss += sparse.data()[i];
        kept += sc.masked.keep[i];
        if (!sc.masked.keep[i] && sparse.data()[i] != 0.0) ok = false;  // (i) exact zeros
      }
      worst_sum = std::max({worst_sum, std::abs(sd - 1), std::abs(ss - 1)});
      if (kept != static_cast<int>(std::ceil(r * n - 1e-9))) ok = false;  // (iv) no ties
    }
    masks.push_back(sc.masked.keep);
  }
  if (worst_sum > 1e-9) ok = false;  // (i)
  for (std::size_t a = 0; a + 1 < masks.size(); ++a)  // (iii)
    for (std::size_t i = 0; i < masks[a].size(); ++i)
      if (masks[a][i] && !masks[a + 1][i]) ok = false;
  const double dual_gap = testing::max_abs_diff(dual_attention(qq, kk, vv, 1.0, {0.5, 0.5}),
                                                dense_attention(qq, kk, vv));
  if (dual_gap > 1e-9) ok = false;  // (ii)
  // (iv) ties widen the kept set
  const MaskedScores tied = topk_mask(testing::from_values({1, 10}, {5, 4, 4, 4, 4, 3, 2, 1, 0, -1}), 0.3);
  const int tied_kept = std::accumulate(tied.keep.begin(), tied.keep.end(), 0);
  if (tied_kept < 3) ok = false;
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "row-sum err %.1e, k=1 dual vs dense %.1e, nested masks over {0.3,0.5,0.7,1}, "
                "tied row keeps %d >= 3",
                worst_sum, dual_gap, tied_kept);
  return {ok, buf};
}

Outcome a3_overfit() {
  const auto t0 = Clock::now();
  const auto data = synthetic_dataset(1, 32, 0.5, 2024);
  TrainConfig cfg = TrainConfig::desk();
  cfg.total_steps = 300;
  cfg.fixed_lr_steps = 300;
  cfg.lr = 1e-4;
  cfg.batch_size = 1;
  cfg.patch_size = 32;
  cfg.augment = false;
  cfg.seed = 2024;
  const DerainNet net(ModelConfig::desk(), 2024);
  const Tensor rainy = reshape(data[0].rainy, {1, 3, 32, 32});
  const Tensor clean = reshape(data[0].clean, {1, 3, 32, 32});
  const double l1_initial = l1_loss(net.forward(rainy), clean).item();
  OptState st;
  train_loop(net, data, cfg, st);
  const Tensor out = reshape(net.forward(rainy), {3, 32, 32});
  const double l1_final = l1_loss(out, data[0].clean).item();
  const double p_out = evaluate_pair("o", out, data[0].clean).psnr_db;
  const double p_in = evaluate_pair("i", data[0].rainy, data[0].clean).psnr_db;
  const double secs = seconds_since(t0);
  const bool pass = l1_final < 0.25 * l1_initial && p_out - p_in >= 3.0 && secs < 600;
  char buf[200];
  std::snprintf(buf, sizeof buf, "L1 %.4f -> %.4f (ratio %.3f), PSNR gain %.2f dB, %.1f s",
                l1_initial, l1_final, l1_final / l1_initial, p_out - p_in, secs);
  return {pass, buf};
}

Outcome a4_ablations() {
  const Tensor x = testing::rand_tensor({1, 3, 16, 16}, 5, 0, 1);
  std::vector<Tensor> outs;
  for (char row : {'a', 'b', 'c', 'd'}) outs.push_back(DerainNet(ModelConfig::ablation(row), 7).forward(x));
  double min_gap = INFINITY;
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t j = i + 1; j < outs.size(); ++j)
      min_gap = std::min(min_gap, testing::max_abs_diff(outs[i], outs[j]));
  char buf[120];
  std::snprintf(buf, sizeof buf, "rows a,b,c,d built; smallest pairwise max-diff %.2e", min_gap);
  return {min_gap > 1e-9, buf};
}

double naive_ssim(const Tensor& a, const Tensor& b) {
  const std::int64_t H = a.dim(1), W = a.dim(2);
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) gs += (g[i] = std::exp(-((i - 5.0) * (i - 5.0)) / 4.5));
  double total = 0;
  std::int64_t count = 0;
  for (std::int64_t y = 0; y + 11 <= H; ++y)
    for (std::int64_t x = 0; x + 11 <= W; ++x) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i] * g[j] / (gs * gs);
          mx += wgt * a.at({0, y + i, x + j});
          my += wgt * b.at({0, y + i, x + j});
        }
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i] * g[j] / (gs * gs);
          const double u = a.at({0, y + i, x + j}) - mx, v = b.at({0, y + i, x + j}) - my;
          sxx += wgt * u * u;
          syy += wgt * v * v;
          sxy += wgt * u * v;
        }
      total += ((2 * mx * my + 1e-4) * (2 * sxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (sxx + syy + 9e-4));
      ++count;
    }
  return total / static_cast<double>(count);
}

Outcome a5_metrics() {
  const double p = psnr(Tensor({1, 16, 16}, 0.25), Tensor({1, 16, 16}, 0.75));
  const Tensor img = testing::rand_tensor({1, 16, 16}, 11, 0, 1);
  const double self = ssim(img, img);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor a = testing::rand_tensor({1, 16, 16}, 300 + s, 0, 1);
    const Tensor b = testing::rand_tensor({1, 16, 16}, 400 + s, 0, 1);
    worst = std::max(worst, std::abs(ssim(a, b) - naive_ssim(a, b)));
  }
  const bool pass = std::abs(p - 6.0206) <= 1e-3 && std::abs(self - 1.0) < 1e-12 && worst < 1e-6;
  char buf[160];
  std::snprintf(buf, sizeof buf, "PSNR %.5f dB, SSIM(x,x) %.15f, SSIM vs naive max diff %.1e", p,
                self, worst);
  return {pass, buf};
}

Outcome a6_determinism(const fs::path& root) {
  const fs::path cfg = root / "a6.json";
  testing::spit(cfg, R"({"seed": 11,
    "data": {"num_images": 2, "image_size": 32},
    "train": {"total_steps": 6, "fixed_lr_steps": 3, "batch_size": 1, "patch_size": 32,
              "checkpoint_every": 3}})");
  const fs::path r1 = root / "r1", r2 = root / "r2", r3 = root / "r3";
  bool ok = run_cli("train --config " + q(cfg) + " --out " + q(r1)) == 0 &&
            run_cli("train --config " + q(cfg) + " --out " + q(r2)) == 0;
  const bool same_log = ok && testing::slurp(r1 / "loss.csv") == testing::slurp(r2 / "loss.csv");

  bool roundtrip = false;
  if (ok) {
    const Checkpoint ck = load_checkpoint(r1 / "ckpt_6.bin");
    save_checkpoint(root / "resaved.bin", ck);
    roundtrip = testing::slurp(r1 / "ckpt_6.bin") == testing::slurp(root / "resaved.bin");
  }

  bool resumed = false;
  if (ok) {
    fs::create_directories(r3);
    // header plus steps 0..2, as left behind by an interrupted run
    const std::string log = testing::slurp(r1 / "loss.csv");
    std::size_t cut = 0;
    for (int i = 0; i < 4; ++i) cut = log.find('\n', cut) + 1;
    testing::spit(r3 / "loss.csv", log.substr(0, cut));
    resumed = run_cli("train --config " + q(cfg) + " --out " + q(r3) + " --ckpt " +
                      q(r1 / "ckpt_3.bin")) == 0 &&
              testing::slurp(r3 / "loss.csv") == testing::slurp(r1 / "loss.csv") &&
              testing::slurp(r3 / "ckpt_6.bin") == testing::slurp(r1 / "ckpt_6.bin");
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "loss.csv identical: %s, save-load-save identical: %s, resume replays: %s",
                same_log ? "yes" : "no", roundtrip ? "yes" : "no", resumed ? "yes" : "no");
  return {same_log && roundtrip && resumed, buf};
}

Outcome a7_identity(const fs::path& root) {
  DerainNet net(ModelConfig::desk(), 13);
  net.zero_output_head();
  save_checkpoint(root / "zero.bin", make_checkpoint(net, TrainConfig::desk(), nullptr, 0));
  Tensor img({3, 37, 41});
  std::mt19937_64 g(17);
  for (auto& v : img.mutable_data()) v = from_u8(static_cast<std::uint8_t>(g() % 256));
  write_png(root / "in.png", img);
  const int rc = run_cli("derain --ckpt " + q(root / "zero.bin") + " --in " + q(root / "in.png") +
                         " --out " + q(root / "out.png"));
  bool same = false;
  if (rc == 0) same = testing::bitwise_equal(read_png(root / "out.png"), read_png(root / "in.png"));
  return {rc == 0 && same, "37x41 PNG through a zero-head checkpoint: " +
                               std::string(same ? "pixel-identical" : "differs")};
}

}  // namespace

int main() {
  const fs::path root = testing::temp_dir("acceptance");
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"A1 gradient check", a1_gradcheck},
      {"A2 DDSA algebra", a2_ddsa_algebra},
      {"A3 overfit one pair", a3_overfit},
      {"A4 ablation rows", a4_ablations},
      {"A5 metrics", a5_metrics},
      {"A6 determinism and persistence", [&] { return a6_determinism(root); }},
      {"A7 zero residual identity", [&] { return a7_identity(root); }},
  };
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    Outcome o{false, ""};
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(root);
  return failed == 0 ? 0 : 1;
}
