#include "strega/cli.hpp"

#include <algorithm>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "strega/config.hpp"
#include "strega/io.hpp"
#include "strega/pipeline.hpp"

namespace strega {

namespace {

struct Flags {
  std::string config;
  std::string out = "run";
  std::string checkpoint;
  std::string baseline;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> side, epochs, batch, se_size, n;
  std::optional<double> lr;
  std::optional<std::string> weights, kinds, area_threshold;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "key = value config file");
  sub->add_option("--seed", f.seed, "root seed");
  sub->add_option("--out", f.out, "run directory")->capture_default_str();
  sub->add_option("--side", f.side, "image side (model input and phantom extent)");
  sub->add_option("--epochs", f.epochs, "training epochs");
  sub->add_option("--batch", f.batch, "mini-batch size");
  sub->add_option("--lr", f.lr, "Adam learning rate");
  sub->add_option("--weights", f.weights, "loss weights kl,vae,ce, or auto");
  sub->add_option("--se-size", f.se_size, "opening structuring element side (odd)");
  sub->add_option("--area-threshold", f.area_threshold, "minimum component area, or auto");
  sub->add_option("--n", f.n, "phantom: training phantoms; inject: anomalous cases");
  sub->add_option("--kinds", f.kinds, "comma-separated injectors: random,deform,copy_altered,superimpose");
  sub->add_option("--checkpoint", f.checkpoint, "checkpoint directory for infer (default <out>/checkpoint)");
  sub->add_option("--baseline", f.baseline, "report: run directory to t-test per-case Dice against");
}

RunConfig resolve(const Flags& f, const std::string& stage) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : RunConfig::parse(io::read_text(f.config));
  if (f.seed) cfg.seed = *f.seed;
  if (f.side) cfg.side = cfg.phantom_side = *f.side;
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.batch) cfg.batch = *f.batch;
  if (f.lr) cfg.lr = *f.lr;
  if (f.weights) cfg.set("weights", *f.weights);
  if (f.se_size) cfg.se_size = *f.se_size;
  if (f.area_threshold) cfg.set("area_threshold", *f.area_threshold);
  if (f.kinds) cfg.set("kinds", *f.kinds);
  if (f.n) {
    if (stage == "phantom") cfg.n_train_phantoms = *f.n;
    else if (stage == "inject") cfg.n_cases = *f.n;
    else throw ValidationError("--n applies to phantom and inject only");
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"strega: unsupervised anomaly detection on brain-like phantoms", "strega"};
  app.require_subcommand(1, 1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> stages{
      {"phantom", "generate training phantom volumes"},
      {"inject", "build the held-out anomaly test suite"},
      {"preprocess", "segment, normalise and stack training slices; segment test cases"},
      {"train", "train the context-encoding VAE"},
      {"infer", "residuals and anomaly masks for every test case"},
      {"eval", "per-case Dice, AUPRC and boxes"},
      {"report", "aggregate eval records into report.json"},
      {"all", "run every stage in order"}};
  for (const auto& [name, help] : stages) add_common(app.add_subcommand(name, help), flags);

  std::vector<std::string> reversed(args.rbegin(), args.rend());  // CLI11 consumes from the back
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }
  const std::string stage = app.get_subcommands().front()->get_name();

  try {
    const RunConfig cfg = resolve(flags, stage);
    const std::filesystem::path run = flags.out;
    if (stage == "phantom") pipeline::stage_phantom(cfg, run);
    else if (stage == "inject") pipeline::stage_inject(cfg, run);
    else if (stage == "preprocess") pipeline::stage_preprocess(cfg, run);
    else if (stage == "train") pipeline::stage_train(cfg, run, &err);
    else if (stage == "infer") pipeline::stage_infer(cfg, run, flags.checkpoint);
    else if (stage == "eval") pipeline::stage_eval(cfg, run);
    else if (stage == "report") out << pipeline::stage_report(cfg, run, flags.baseline);
    else out << pipeline::run_all(cfg, run, &err);
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace strega
