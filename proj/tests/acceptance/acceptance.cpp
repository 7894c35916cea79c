// Acceptance run: one PASS/FAIL line per criterion. Arguments restrict the run
// to the listed criterion numbers; without arguments all eight run.
//
// Criteria 3-5 train the desk-scale model (several minutes each on one core).

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "strega/cevae.hpp"
#include "strega/cli.hpp"
#include "strega/evaluate.hpp"
#include "strega/gradcheck.hpp"
#include "strega/io.hpp"
#include "strega/kernels.hpp"
#include "strega/postprocess.hpp"
#include "strega/reference.hpp"
#include "strega/rng.hpp"

namespace fs = std::filesystem;
using namespace strega;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path work_root() {
  static const fs::path root = [] {
    const auto p = fs::temp_directory_path() / "strega_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

// Runs one CLI invocation; throws with the captured stderr on a non-zero exit.
void run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_run(args, out, err);
  if (code != 0) {
    std::string line;
    for (const auto& a : args) line += a + " ";
    throw std::runtime_error("strega " + line + "exited " + std::to_string(code) + ": " + err.str());
  }
}

// A desk-scale pipeline run with default configuration. Stages are run one by
// one so the training stage can be timed.
struct DeskRun {
  fs::path dir;
  double train_seconds = 0;
  json report;
};

std::map<std::string, DeskRun> g_runs;

const DeskRun& desk_run(std::uint64_t seed, const std::string& weights = "") {
  const std::string key = std::to_string(seed) + "/" + weights;
  if (auto it = g_runs.find(key); it != g_runs.end()) return it->second;
  DeskRun run;
  run.dir = work_root() / ("seed" + std::to_string(seed) + (weights.empty() ? "" : "_ablation"));
  std::vector<std::string> common{"--seed", std::to_string(seed), "--out", run.dir.string()};
  for (const std::string stage : {"phantom", "inject", "preprocess", "train", "infer", "eval", "report"}) {
    std::vector<std::string> args{stage};
    args.insert(args.end(), common.begin(), common.end());
    if (stage == "train" && !weights.empty()) args.insert(args.end(), {"--weights", weights});
    const auto t0 = std::chrono::steady_clock::now();
    run_cli(args);
    if (stage == "train") run.train_seconds = seconds_since(t0);
  }
  run.report = json::parse(io::read_text(run.dir / "report.json"));
  return g_runs[key] = std::move(run);
}

std::vector<double> anomalous_dice(const json& report) {
  std::vector<double> d;
  for (const auto& c : report.at("cases")) {
    if (c.at("kind") != "healthy") d.push_back(c.at("dice").get<double>());
  }
  return d;
}

// 1. Gradient correctness on a fresh 32x32 model, 2-image batch, 64-bit path.
Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  RngStream rng(2024);
  const auto model = vae::init_model(32, rng);
  ImageTensor batch({2, 1, 32, 32});
  for (auto& v : batch.values()) v = static_cast<float>(rng.normal());
  RngStream check_rng(5);
  const auto rep = vae::finite_diff_check(model, batch, check_rng);
  const double secs = seconds_since(t0);
  return {rep.max_relative_error < 1e-4 && secs < 120.0,
          "max relative error " + fmt("%.3g", rep.max_relative_error) + " over " + std::to_string(rep.n_checked) +
              " entries (bound 1e-4), " + fmt("%.1f", secs) + " s (bound 120 s)"};
}

// 2. KL closed form on 1000 random pairs; exact loss bookkeeping.
Outcome loss_identities() {
  RngStream rng(11);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t b = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 256));
    Tensor<double> mu({b, d}), lv({b, d});
    long double oracle = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
      mu[i] = rng.uniform(-3, 3);
      lv[i] = rng.uniform(-4, 4);
      const long double m = mu[i], l = lv[i];
      oracle += 0.5L * (m * m + std::exp(l) - 1.0L - l);
    }
    oracle /= static_cast<long double>(b);
    const double got = vae::kl_loss(mu, lv);
    worst = std::max(worst, std::abs(got - static_cast<double>(oracle)) / std::max(1e-300, std::abs(static_cast<double>(oracle))));
  }
  bool exact = true;
  RngStream mrng(12);
  auto model = vae::init_model(16, mrng);
  ImageTensor x({3, 1, 16, 16});
  for (auto& v : x.values()) v = static_cast<float>(mrng.normal());
  for (const vae::LossWeights w : {vae::LossWeights{1, 1, 1}, vae::LossWeights{1, 1, 0}, vae::LossWeights{0.25, 3, 0.5}}) {
    RngStream lr(13);
    const auto lb = vae::cevae_loss(x, model, vae::MaskSpec{}, w, lr).loss;
    exact = exact && lb.total == w.kl * lb.kl + w.vae * lb.rec_vae + w.ce * lb.rec_ce;
  }
  return {worst < 1e-9 && exact, "KL worst relative error " + fmt("%.3g", worst) + " (bound 1e-9); bookkeeping " +
                                     (exact ? "exact" : "NOT exact")};
}

// 3. Desk fixture training progress.
Outcome training_progress() {
  const auto& run = desk_run(7);
  std::vector<double> totals;
  std::istringstream in(io::read_text(run.dir / "metrics.jsonl"));
  bool finite = true;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    for (const char* k : {"total", "kl", "rec_vae", "rec_ce"}) {
      if (!j.at(k).is_number() || !std::isfinite(j.at(k).get<double>())) finite = false;
    }
    if (j.at("total").is_number()) totals.push_back(j.at("total").get<double>());
  }
  if (totals.size() != 30) return {false, "expected 30 epochs of metrics, got " + std::to_string(totals.size())};
  const double ratio = totals.back() / totals.front();
  return {finite && ratio < 0.5 && run.train_seconds < 900.0,
          "epoch 0 total " + fmt("%.4g", totals.front()) + ", epoch 29 total " + fmt("%.4g", totals.back()) +
              " (ratio " + fmt("%.3f", ratio) + ", bound 0.5), all finite: " + (finite ? "yes" : "no") + ", training " +
              fmt("%.0f", run.train_seconds) + " s (bound 900 s)"};
}

// 4. End-to-end detection on the 20-case suite, three seeds.
Outcome detection() {
  const std::uint64_t seeds[3] = {7, 11, 23};
  double dice[3], sup[3], healthy[3];
  for (int i = 0; i < 3; ++i) {
    const auto& r = desk_run(seeds[i]).report;
    dice[i] = r.at("anomalous").at("dice").at("mean").get<double>();
    sup[i] = r.at("per_kind").at("superimpose").at("dice").at("mean").get<double>();
    healthy[i] = r.at("healthy").at("pred_fraction_of_brain").at("mean").get<double>();
  }
  const auto mean3 = [](const double* v) { return (v[0] + v[1] + v[2]) / 3.0; };
  const double md = mean3(dice), ms = mean3(sup), mh = mean3(healthy);
  double spread = 0;
  for (double d : dice) spread = std::max(spread, std::abs(d - md));
  std::string detail = "mean Dice " + fmt("%.3f", md) + " (bound >= 0.50), superimposition Dice " + fmt("%.3f", ms) +
                       " (bound >= 0.60), healthy predicted area " + fmt("%.2f", 100 * mh) +
                       "% of brain (bound < 2%), per-seed Dice";
  for (double d : dice) detail += " " + fmt("%.3f", d);
  detail += " (max deviation " + fmt("%.3f", spread) + ", bound 0.1)";
  return {md >= 0.5 && ms >= 0.6 && mh < 0.02 && spread <= 0.1, detail};
}

// 5. Ablation direction and the paired t-test against the direct formula. The
// plain VAE zeroes the CE weight and keeps the default KL balance (1/64^2).
Outcome ablation() {
  const auto& full = desk_run(7);
  const auto& abl = desk_run(7, "0.000244140625,1,0");
  const auto a = anomalous_dice(full.report), b = anomalous_dice(abl.report);
  const double fm = full.report.at("anomalous").at("dice").at("mean").get<double>();
  const double am = abl.report.at("anomalous").at("dice").at("mean").get<double>();

  std::ostringstream out, err;
  if (cli_run({"report", "--out", full.dir.string(), "--baseline", abl.dir.string()}, out, err) != 0) {
    return {false, "report --baseline failed: " + err.str()};
  }
  const auto tt = json::parse(out.str()).at("paired_t_test");
  const std::size_t n = a.size();
  double mean = 0, ss = 0;
  for (std::size_t i = 0; i < n; ++i) mean += (a[i] - b[i]) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double se = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
  double t = 0, p = 1;
  if (se > 0) {
    t = mean / se;
    const boost::math::students_t dist(static_cast<double>(n - 1));
    p = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  const bool consistent = tt.at("df").get<std::size_t>() == n - 1 && std::abs(tt.at("t").get<double>() - t) < 1e-6 &&
                          std::abs(tt.at("p").get<double>() - p) < 1e-6;
  return {fm >= am - 0.02 && consistent,
          "full Dice " + fmt("%.3f", fm) + " vs plain-VAE Dice " + fmt("%.3f", am) + " (need full >= ablation - 0.02); t " +
              fmt("%.4f", tt.at("t").get<double>()) + " df " + std::to_string(tt.at("df").get<std::size_t>()) + " p " +
              fmt("%.4f", tt.at("p").get<double>()) + ", direct formula t " + fmt("%.4f", t) + " p " + fmt("%.4f", p) +
              (consistent ? " (agree within 1e-6)" : " (DISAGREE)")};
}

// 6. Oracle equivalences.
Outcome oracles() {
  RngStream rng(31);
  std::size_t otsu_bad = 0, open_bad = 0, area_bad = 0, ap_bad = 0;
  for (int t = 0; t < 100; ++t) {
    ImageTensor s({16, 16});
    if (t % 2 == 0) {
      for (auto& v : s.values()) v = static_cast<float>(rng.uniform(-1, 1));
    } else {
      const double split = rng.uniform(0.2, 0.8);
      for (auto& v : s.values()) v = static_cast<float>(rng.bernoulli(split) ? rng.normal() * 0.5 : 2 + rng.normal() * 0.7);
    }
    if (post::otsu_threshold(s).bin != oracle::otsu_bin(s)) ++otsu_bad;
  }
  for (int t = 0; t < 100; ++t) {
    BinMask m({12, 12});
    const double p = rng.uniform(0.3, 0.9);
    for (auto& v : m.values()) v = rng.bernoulli(p);
    const std::size_t se = 2 * static_cast<std::size_t>(rng.uniform_int(0, 2)) + 1;
    if (post::morph_open(m, se) != oracle::naive_dilate(oracle::naive_erode(m, se), se)) ++open_bad;
    const std::size_t thr = static_cast<std::size_t>(rng.uniform_int(0, 12));
    if (post::area_filter(m, thr) != oracle::census_filter(m, thr)) ++area_bad;
  }
  double conv_err = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t b = 2, cin = static_cast<std::size_t>(rng.uniform_int(1, 4)),
                      cout = static_cast<std::size_t>(rng.uniform_int(1, 4)), h = static_cast<std::size_t>(rng.uniform_int(6, 12));
    const std::size_t k = t % 2 ? 4 : 3, s = t % 2 ? 2 : 1, pad = 1;
    ImageTensor x({b, cin, h, h}), w({cout, cin, k, k}), bias({cout});
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : bias.values()) v = static_cast<float>(rng.uniform(-1, 1));
    const auto fast = kernels::conv2d_forward(x, w, &bias, s, pad);
    const auto slow = reference::conv2d(x, w, &bias, s, pad);
    for (std::size_t i = 0; i < fast.size(); ++i) conv_err = std::max(conv_err, static_cast<double>(std::abs(fast[i] - slow[i])));
  }
  std::size_t ap_cases = 0;
  while (ap_cases < 50) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(5, 40));
    ImageTensor sc({n});
    BinMask g({n});
    std::vector<double> sv(n);
    std::vector<int> yv(n);
    for (std::size_t i = 0; i < n; ++i) {
      sc[i] = static_cast<float>(rng.uniform_int(0, 8)) / 8.0f;
      g[i] = rng.bernoulli(0.4);
      sv[i] = sc[i];
      yv[i] = g[i];
    }
    if (std::count(yv.begin(), yv.end(), 1) == 0) continue;
    ++ap_cases;
    if (!(std::abs(eval::auprc(sc, g) - oracle::brute_ap(sv, yv)) < 1e-9)) ++ap_bad;
  }
  const bool pass = otsu_bad == 0 && open_bad == 0 && area_bad == 0 && conv_err < 1e-5 && ap_bad == 0;
  return {pass, "Otsu mismatches " + std::to_string(otsu_bad) + "/100, opening " + std::to_string(open_bad) +
                    "/100, area filter " + std::to_string(area_bad) + "/100, conv2d max error " + fmt("%.2g", conv_err) +
                    " (bound 1e-5), AUPRC mismatches " + std::to_string(ap_bad) + "/50"};
}

// 7. Metric identities.
Outcome metric_identities() {
  RngStream rng(41);
  std::size_t dice_bad = 0, stats_bad = 0, box_bad = 0;
  for (int t = 0; t < 100; ++t) {
    BinMask a({9, 9}), b({9, 9});
    for (auto& v : a.values()) v = rng.bernoulli(0.3);
    for (auto& v : b.values()) v = rng.bernoulli(0.3);
    if (eval::dice(a, b) != eval::dice(b, a)) ++dice_bad;
    if (eval::dice(a, a) != 1.0) ++dice_bad;
    BinMask c({9, 9});
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = !a[i];
    const bool a_empty = std::count(a.span().begin(), a.span().end(), 1) == 0;
    if (!a_empty && eval::dice(a, c) != 0.0) ++dice_bad;
  }
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(static_cast<std::size_t>(rng.uniform_int(1, 30)));
    for (auto& x : v) x = rng.normal() * rng.uniform(0.1, 10);
    const auto s = eval::summary_stats(v);
    if (!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max)) ++stats_bad;
  }
  for (int t = 0; t < 100; ++t) {
    BinMask m({10, 11});
    for (auto& v : m.values()) v = rng.bernoulli(0.25);
    std::vector<std::size_t> lab;
    const std::size_t n = eval::label_components_nd(m, lab);
    const auto boxes = eval::bounding_boxes(m);
    if (boxes.size() != n) {
      ++box_bad;
      continue;
    }
    for (std::size_t comp = 0; comp < n; ++comp) {
      std::size_t lo[2] = {SIZE_MAX, SIZE_MAX}, hi[2] = {0, 0};
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (lab[i] != comp + 1) continue;
        const std::size_t yx[2] = {i / 11, i % 11};
        for (int ax = 0; ax < 2; ++ax) {
          lo[ax] = std::min(lo[ax], yx[ax]);
          hi[ax] = std::max(hi[ax], yx[ax] + 1);
        }
      }
      const auto& bx = boxes[comp];
      if (bx.lo[0] != lo[0] || bx.lo[1] != lo[1] || bx.hi[0] != hi[0] || bx.hi[1] != hi[1]) ++box_bad;
    }
  }
  return {dice_bad == 0 && stats_bad == 0 && box_bad == 0,
          "Dice identity failures " + std::to_string(dice_bad) + ", summary ordering failures " + std::to_string(stats_bad) +
              "/1000, non-minimal boxes " + std::to_string(box_bad)};
}

// 8. Determinism and formats.
Outcome determinism() {
  const auto cfg = work_root() / "small.cfg";
  io::write_text(cfg,
                 "side = 16\nphantom_side = 32\nn_train_phantoms = 3\nslices_per_phantom = 8\nepochs = 3\nbatch = 8\n"
                 "n_cases = 8\nn_healthy = 2\nlr = 1e-3\n");
  std::string reports[2];
  for (int i = 0; i < 2; ++i) {
    const auto dir = work_root() / ("determinism" + std::to_string(i));
    run_cli({"all", "--config", cfg.string(), "--seed", "5", "--out", dir.string()});
    reports[i] = io::read_text(dir / "report.json");
  }
  const bool same = reports[0] == reports[1];

  RngStream rng(51);
  std::size_t bad = 0;
  for (int t = 0; t < 100; ++t) {
    Dims d;
    const auto rank = static_cast<std::size_t>(rng.uniform_int(1, 5));
    for (std::size_t a = 0; a < rank; ++a) d.push_back(static_cast<std::size_t>(rng.uniform_int(1, 5)));
    ImageTensor x(d);
    for (auto& v : x.values()) {
      const auto bits = static_cast<std::uint32_t>(rng.next_u64());
      std::memcpy(&v, &bits, 4);  // any bit pattern, NaN payloads included
    }
    const auto back = io::stf_decode_f32(io::stf_encode(x));
    if (back.dims() != x.dims() || std::memcmp(back.data(), x.data(), 4 * x.size()) != 0) ++bad;
  }
  bool rank0_rejected = false;
  try {
    (void)ImageTensor(Dims{});
  } catch (const ShapeError&) {
    rank0_rejected = true;
  }
  bool rank0_file_rejected = false;
  try {
    std::vector<std::uint8_t> bytes{'S', 'T', 'R', 'G', 1, 0, 0, 0};
    (void)io::stf_decode_f32(bytes);
  } catch (const FormatError&) {
    rank0_file_rejected = true;
  }
  return {same && bad == 0 && rank0_rejected && rank0_file_rejected,
          std::string("report JSON ") + (same ? "byte-identical" : "DIFFERS") + " across two runs; STF round-trip failures " +
              std::to_string(bad) + "/100; rank-0 tensor " + (rank0_rejected ? "rejected" : "ACCEPTED") +
              ", rank-0 STF " + (rank0_file_rejected ? "rejected" : "ACCEPTED")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_check},  {"loss identities", loss_identities},
      {"training progress", training_progress}, {"end-to-end detection", detection},
      {"ablation direction", ablation},         {"oracle equivalence", oracles},
      {"metric identities", metric_identities}, {"determinism and formats", determinism}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
