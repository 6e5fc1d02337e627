#include "ddsa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <optional>

#include "ddsa/attention.hpp"
#include "ddsa/ops.hpp"
#include "ddsa/sefn.hpp"

namespace ddsa {

double gradient_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

namespace {

std::vector<std::size_t> sample_indices(std::int64_t numel, int samples, Rng& rng) {
  std::vector<std::size_t> all(static_cast<std::size_t>(numel));
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (numel <= samples) return all;
  // partial Fisher-Yates
  for (int i = 0; i < samples; ++i) {
    const auto j = static_cast<std::size_t>(i) +
                   static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(numel - i));
    std::swap(all[static_cast<std::size_t>(i)], all[j]);
  }
  all.resize(static_cast<std::size_t>(samples));
  std::sort(all.begin(), all.end());
  return all;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = uniform(rng, lo, hi);
  return t;
}

// Randomizes a conv or norm parameter set that was built with special values.
void randomize(const ParamList& params, Rng& rng, double scale = 0.5) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v = uniform(rng, -scale, scale);
  }
}

}  // namespace

std::vector<GradCheckRow> check_gradients(const std::function<Tensor()>& loss_fn,
                                          const ParamList& wrt, const GradCheckOptions& opts,
                                          double tolerance, bool freeze_topk) {
  std::optional<TopkMaskFreeze> freeze;
  if (freeze_topk) freeze.emplace();

  for (const auto& p : wrt) {
    Tensor t = p.tensor;
    t.set_requires_grad();
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_fn();
    tape.backward(loss);
    for (const auto& p : wrt) {
      const auto g = p.tensor.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  if (freeze) freeze->start_replay();

  auto eval = [&]() {
    if (freeze) freeze->start_replay();
    return loss_fn().item();
  };

  Rng rng(opts.seed);
  std::vector<GradCheckRow> rows;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    Tensor t = wrt[i].tensor;
    GradCheckRow row;
    row.name = wrt[i].name;
    row.tolerance = tolerance;
    for (std::size_t idx : sample_indices(t.numel(), opts.samples_per_tensor, rng)) {
      auto d = t.mutable_data();
      const double orig = d[idx];
      d[idx] = orig + opts.step;
      const double plus = eval();
      d[idx] = orig - opts.step;
      const double minus = eval();
      d[idx] = orig;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      const double a = analytic[i][idx];
      row.max_rel_error = std::max(row.max_rel_error, gradient_relative_error(a, numeric));
      row.max_abs_error = std::max(row.max_abs_error, std::abs(a - numeric));
      ++row.checked;
    }
    rows.push_back(row);
  }
  return rows;
}

std::function<Tensor()> weighted_sum_loss(std::function<Tensor()> forward, std::uint64_t seed) {
  auto weights = std::make_shared<std::optional<Tensor>>();
  return [forward = std::move(forward), weights, seed]() {
    const Tensor out = forward();
    if (!weights->has_value() || (*weights)->shape() != out.shape()) {
      Rng rng(seed);
      *weights = random_tensor(out.shape(), rng);
    }
    return mean(mul(out, **weights));
  };
}

Tensor corrupted_square(const Tensor& x) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * d[i];
  return detail::make_result(x.shape(), std::move(out), {x},
                             [x](const detail::TensorImpl& node) {
                               const auto xd = x.data();
                               std::vector<double> g(xd.size());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] = 3.0 * xd[i] * node.grad[i];
                               }
                               detail::accumulate(x, g);
                             });
}

GradCheckRow negative_control(const GradCheckOptions& opts) {
  Rng rng(opts.seed ^ 0x5eedULL);
  Tensor x = random_tensor({2, 3}, rng, 0.5, 1.5);
  auto rows = check_gradients(weighted_sum_loss([=] { return corrupted_square(x); }, rng()),
                              {{"input", x}}, opts, opts.tolerance);
  rows.front().name = "control:corrupted_backward";
  return rows.front();
}

bool GradCheckReport::passed() const {
  return !rows.empty() && control.checked > 0 && !control.passed() &&
         std::all_of(rows.begin(), rows.end(), [](const GradCheckRow& r) { return r.passed(); });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.max_rel_error);
  return m;
}

void GradCheckReport::write(std::ostream& os) const {
  char buf[256];
  os << "check,entries,max_rel_err,max_abs_err,tolerance,status\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%lld,%.3e,%.3e,%.0e,%s\n", static_cast<long long>(r.checked),
                  r.max_rel_error, r.max_abs_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
    os << r.name << buf;
  }
  std::snprintf(buf, sizeof buf, ",%lld,%.3e,%.3e,%.0e,%s\n", static_cast<long long>(control.checked),
                control.max_rel_error, control.max_abs_error, control.tolerance,
                control.passed() ? "UNDETECTED" : "DETECTED");
  os << control.name << buf;
}

GradCheckReport run_gradcheck_suite(const ModelConfig& model_cfg, const GradCheckOptions& opts) {
  GradCheckReport report;
  Rng rng(opts.seed);
  auto run = [&](const std::string& layer, std::function<Tensor()> forward, ParamList wrt,
                 bool freeze = false, double tol = -1.0) {
    for (auto& p : wrt) p.name = layer + ":" + p.name;
    auto rows = check_gradients(weighted_sum_loss(std::move(forward), rng()), wrt, opts,
                                tol > 0 ? tol : opts.tolerance, freeze);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  };

  {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng);
    run("matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  }
  {
    Tensor p = random_tensor({3, 5}, rng, -2.0, 2.0);
    run("softmax_rows", [=] { return softmax_rows(p); }, {{"p", p}});
  }
  {
    Tensor p = random_tensor({2, 3, 6}, rng, -2.0, 2.0);
    run("softmax_rows.masked", [=] { return softmax_rows(topk_mask(p, 0.5)); }, {{"p", p}});
  }
  {
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Conv2dParams conv = make_conv(2, 3, 3, 1, true, rng);
    ParamList wrt{{"input", x}};
    conv.collect(wrt, "conv");
    run("conv2d", [=] { return conv2d(x, conv); }, wrt);
  }
  {
    Tensor x = random_tensor({1, 3, 4, 4}, rng);
    Conv2dParams conv = make_conv(3, 3, 3, 3, true, rng);
    ParamList wrt{{"input", x}};
    conv.collect(wrt, "conv");
    run("conv2d.depthwise", [=] { return conv2d(x, conv); }, wrt);
  }
  {
    Tensor x = random_tensor({2, 5, 3, 3}, rng);
    LayerNormParams ln = make_layer_norm(5);
    ParamList lp;
    ln.collect(lp, "ln");
    randomize(lp, rng);
    ParamList wrt{{"input", x}};
    wrt.insert(wrt.end(), lp.begin(), lp.end());
    run("layer_norm", [=] { return layer_norm(x, ln); }, wrt);
  }
  {
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Conv2dParams down = make_conv(8, 4, 1, 1, false, rng);
    Conv2dParams up = make_conv(4, 8, 1, 1, false, rng);
    ParamList wrt{{"input", x}};
    down.collect(wrt, "down");
    up.collect(wrt, "up");
    run("resample", [=] { return upsample(downsample(x, down), up); }, wrt);
  }
  {
    Tensor x = random_tensor({1, 4, 3, 3}, rng, -2.0, 2.0);
    run("gelu_sigmoid", [=] { return mul(gelu(x), sigmoid(x)); }, {{"input", x}});
  }
  {
    Tensor x = random_tensor({1, 4, 2, 2}, rng);
    DdsaOptions o;
    o.heads = 1;
    o.k_ratio = 0.5;
    DdsaParams p = make_ddsa(4, o, rng);
    ParamList wrt{{"input", x}};
    p.collect(wrt, "ddsa");
    run("ddsa", [=] { return ddsa_forward(x, p); }, wrt);
  }
  {
    Tensor x = random_tensor({1, 4, 3, 3}, rng);
    DdsaOptions o;
    o.heads = 2;
    o.k_ratio = 0.7;
    o.learnable_weights = true;
    DdsaParams p = make_ddsa(4, o, rng);
    ParamList wrt{{"input", x}};
    p.collect(wrt, "ddsa");
    run("ddsa.learnable", [=] { return ddsa_forward(x, p); }, wrt);
  }
  {
    Tensor x = random_tensor({1, 6, 3, 3}, rng);
    SefnOptions o;
    o.expansion = 1.0;
    SefnParams p = make_sefn(6, o, rng);
    ParamList wrt{{"input", x}};
    p.collect(wrt, "sefn");
    run("sefn", [=] { return sefn_forward(x, p); }, wrt);
  }
  {
    Tensor x = random_tensor({1, 4, 4, 4}, rng);
    ModelConfig cfg = model_cfg;
    cfg.k_ratio = 0.5;
    DatbBlock b = make_datb(4, 2, cfg, rng);
    ParamList wrt{{"input", x}};
    b.collect(wrt, "datb");
    randomize({{"g1", b.ln1.gamma}, {"b1", b.ln1.beta}, {"g2", b.ln2.gamma}, {"b2", b.ln2.beta}},
              rng);
    run("datb", [=] { return datb_forward(x, b); }, wrt);
  }
  report.layer_rows = report.rows.size();
  report.control = negative_control(opts);

  {
    const DerainNet model(model_cfg, rng());
    const std::int64_t side = std::max<std::int64_t>(16, model_cfg.spatial_multiple());
    Tensor x = random_tensor({1, 3, side, side}, rng, 0.0, 1.0);
    ParamList wrt = model.parameters();
    auto rows = check_gradients(weighted_sum_loss([=] { return model.forward(x); }, rng()), wrt,
                                opts, opts.model_tolerance, true);
    for (auto& r : rows) r.name = "model:" + r.name;
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

}  // namespace ddsa
