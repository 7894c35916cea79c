#include "strega/config.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <sstream>

namespace strega {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_uint(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError("'" + key + "' needs a non-negative integer, got '" + v + "'");
  }
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ValidationError("'" + key + "' needs an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("'" + key + "' needs a real number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ValidationError("'" + key + "' needs true or false, got '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_real(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

const char* bool_text(bool b) { return b ? "true" : "false"; }

}  // namespace

vae::LossWeights parse_weights(const std::string& text) {
  const auto parts = split(text, ',');
  if (parts.size() != 3) throw ValidationError("weights must be three comma-separated reals kl,vae,ce, got '" + text + "'");
  vae::LossWeights w{parse_real("weights", parts[0]), parse_real("weights", parts[1]), parse_real("weights", parts[2])};
  if (w.kl < 0 || w.vae < 0 || w.ce < 0) throw ValidationError("loss weights must be >= 0");
  return w;
}

std::vector<synth::InjectKind> parse_kinds(const std::string& text) {
  std::vector<synth::InjectKind> out;
  for (const auto& p : split(text, ',')) {
    if (!p.empty()) out.push_back(synth::kind_from_name(p));
  }
  if (out.empty()) throw ValidationError("kinds must name at least one anomaly kind");
  return out;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "seed") seed = parse_uint<std::uint64_t>(key, v);
  else if (key == "side") side = parse_uint<std::size_t>(key, v);
  else if (key == "phantom_side") phantom_side = parse_uint<std::size_t>(key, v);
  else if (key == "n_train_phantoms") n_train_phantoms = parse_uint<std::size_t>(key, v);
  else if (key == "slices_per_phantom") slices_per_phantom = parse_uint<std::size_t>(key, v);
  else if (key == "latent") {
    if (parse_uint<std::size_t>(key, v) != vae::kLatentSize) throw ValidationError("latent size is fixed at 256");
  } else if (key == "weights") {
    if (v == "auto") weights.reset();
    else weights = parse_weights(v);
  }
  else if (key == "lr") lr = parse_real(key, v);
  else if (key == "batch") batch = parse_uint<std::size_t>(key, v);
  else if (key == "epochs") epochs = parse_uint<std::size_t>(key, v);
  else if (key == "recalibrate_bn") recalibrate_bn = parse_bool(key, v);
  else if (key == "aug_bias_field") aug_bias_field = parse_bool(key, v);
  else if (key == "aug_noise") aug_noise = parse_bool(key, v);
  else if (key == "aug_gamma") aug_gamma = parse_bool(key, v);
  else if (key == "aug_ghosting") aug_ghosting = parse_bool(key, v);
  else if (key == "aug_flips") aug_flips = parse_bool(key, v);
  else if (key == "aug_affine") aug_affine = parse_bool(key, v);
  else if (key == "aug_rotation") aug_rotation = parse_bool(key, v);
  else if (key == "icm_iters") icm_iters = parse_int(key, v);
  else if (key == "icm_beta") icm_beta = parse_real(key, v);
  else if (key == "se_size") se_size = parse_uint<std::size_t>(key, v);
  else if (key == "area_threshold") {
    if (v == "auto") area_threshold.reset();
    else area_threshold = parse_uint<std::size_t>(key, v);
  } else if (key == "restrict_to_brain") restrict_to_brain = parse_bool(key, v);
  else if (key == "n_cases") n_cases = parse_uint<std::size_t>(key, v);
  else if (key == "n_healthy") n_healthy = parse_uint<std::size_t>(key, v);
  else if (key == "kinds") kinds = parse_kinds(v);
  else if (key == "shape") {
    if (v == "sphere") shape = synth::Shape::kSphere;
    else if (v == "cube") shape = synth::Shape::kCube;
    else throw ValidationError("shape must be sphere or cube, got '" + v + "'");
  } else if (key == "superimpose_scale") superimpose_scale = parse_real(key, v);
  else if (key == "gt_min_change") gt_min_change = parse_real(key, v);
  else throw ValidationError("unknown config key '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    try {
      c.set(key, line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << "seed = " << seed << "\n";
  o << "side = " << side << "\n";
  o << "phantom_side = " << phantom_side << "\n";
  o << "n_train_phantoms = " << n_train_phantoms << "\n";
  o << "slices_per_phantom = " << slices_per_phantom << "\n";
  o << "latent = " << vae::kLatentSize << "\n";
  if (weights) o << "weights = " << fmt_real(weights->kl) << "," << fmt_real(weights->vae) << "," << fmt_real(weights->ce) << "\n";
  else o << "weights = auto\n";
  o << "lr = " << fmt_real(lr) << "\n";
  o << "batch = " << batch << "\n";
  o << "epochs = " << epochs << "\n";
  o << "recalibrate_bn = " << bool_text(recalibrate_bn) << "\n";
  o << "aug_bias_field = " << bool_text(aug_bias_field) << "\n";
  o << "aug_noise = " << bool_text(aug_noise) << "\n";
  o << "aug_gamma = " << bool_text(aug_gamma) << "\n";
  o << "aug_ghosting = " << bool_text(aug_ghosting) << "\n";
  o << "aug_flips = " << bool_text(aug_flips) << "\n";
  o << "aug_affine = " << bool_text(aug_affine) << "\n";
  o << "aug_rotation = " << bool_text(aug_rotation) << "\n";
  o << "icm_iters = " << icm_iters << "\n";
  o << "icm_beta = " << fmt_real(icm_beta) << "\n";
  o << "se_size = " << se_size << "\n";
  o << "area_threshold = " << (area_threshold ? std::to_string(*area_threshold) : std::string("auto")) << "\n";
  o << "restrict_to_brain = " << bool_text(restrict_to_brain) << "\n";
  o << "n_cases = " << n_cases << "\n";
  o << "n_healthy = " << n_healthy << "\n";
  o << "kinds = ";
  for (std::size_t i = 0; i < kinds.size(); ++i) o << (i ? "," : "") << synth::kind_name(kinds[i]);
  o << "\n";
  o << "shape = " << (shape == synth::Shape::kCube ? "cube" : "sphere") << "\n";
  o << "superimpose_scale = " << fmt_real(superimpose_scale) << "\n";
  o << "gt_min_change = " << fmt_real(gt_min_change) << "\n";
  return o.str();
}

void RunConfig::validate() const {
  if (side < 16 || !std::has_single_bit(side)) throw ValidationError("side must be a power of two >= 16, got " + std::to_string(side));
  if (phantom_side < 16) throw ValidationError("phantom_side must be >= 16");
  if (n_train_phantoms == 0 || slices_per_phantom == 0) throw ValidationError("training set must be non-empty");
  if (batch == 0) throw ValidationError("batch must be >= 1");
  if (!(lr > 0)) throw ValidationError("lr must be positive");
  if (se_size == 0 || se_size % 2 == 0) throw ValidationError("se_size must be odd and >= 1");
  if (icm_iters < 0) throw ValidationError("icm_iters must be >= 0");
  if (icm_beta < 0) throw ValidationError("icm_beta must be >= 0");
  if (kinds.empty()) throw ValidationError("kinds must not be empty");
  if (superimpose_scale < 0) throw ValidationError("superimpose_scale must be >= 0");
  if (gt_min_change < 0) throw ValidationError("gt_min_change must be >= 0");
}

vae::LossWeights RunConfig::effective_weights() const {
  if (weights) return *weights;
  return {1.0 / static_cast<double>(side * side), 1.0, 1.0};
}

std::size_t RunConfig::effective_area_threshold() const {
  return area_threshold ? *area_threshold : post::PostprocConfig::for_side(side).area_threshold;
}

vae::TrainConfig RunConfig::train_config() const {
  vae::TrainConfig t;
  t.epochs = epochs;
  t.batch = batch;
  t.lr = lr;
  t.weights = effective_weights();
  t.recalibrate_bn = recalibrate_bn;
  return t;
}

prep::AugmentSpec RunConfig::augment_spec() const {
  prep::AugmentSpec a;
  a.bias_field = aug_bias_field;
  a.noise = aug_noise;
  a.gamma = aug_gamma;
  a.ghosting = aug_ghosting;
  a.flips = aug_flips;
  a.affine = aug_affine;
  a.rotation = aug_rotation;
  return a;
}

post::PostprocConfig RunConfig::postproc_config() const {
  post::PostprocConfig p;
  p.se_size = se_size;
  p.area_threshold = effective_area_threshold();
  return p;
}

synth::PhantomConfig RunConfig::phantom_config() const {
  synth::PhantomConfig p;
  p.depth = p.height = p.width = phantom_side;
  return p;
}

synth::SuiteConfig RunConfig::suite_config() const {
  synth::SuiteConfig s;
  s.n_cases = n_cases;
  s.n_healthy = n_healthy;
  s.kinds = kinds;
  s.phantom = phantom_config();
  s.inject.shape = shape;
  s.inject.superimpose_scale = superimpose_scale;
  s.inject.gt_min_change = gt_min_change;
  return s;
}

prep::SegmentOptions RunConfig::segment_options() const {
  prep::SegmentOptions s;
  s.icm_iters = icm_iters;
  s.beta = icm_beta;
  return s;
}

}  // namespace strega
