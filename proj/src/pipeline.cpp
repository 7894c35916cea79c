#include "strega/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "strega/io.hpp"
#include "strega/postprocess.hpp"
#include "strega/synth.hpp"

namespace strega::pipeline {

using ojson = nlohmann::ordered_json;

namespace {

std::string idx3(std::size_t i) {
  std::string s = std::to_string(i);
  return std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

void snapshot(const RunConfig& cfg, const fs::path& run, const std::string& stage) {
  io::write_text(run / "config" / (stage + ".txt"), cfg.to_text());
}

ojson read_manifest(const fs::path& path) {
  try {
    return ojson::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
}

void write_manifest(const fs::path& path, const ojson& j) { io::write_text(path, j.dump(2) + "\n"); }

BinMask nonzero(const SegMask& seg) {
  BinMask out(seg.dims());
  for (std::size_t i = 0; i < seg.size(); ++i) out[i] = seg[i] != 0;
  return out;
}

/// Axial index with the most gt voxels, or the middle slice for an empty gt.
std::size_t preview_slice(const BinMask& gt) {
  const std::size_t d = gt.dim(0), plane = gt.dim(1) * gt.dim(2);
  std::size_t best = d / 2, best_count = 0;
  for (std::size_t z = 0; z < d; ++z) {
    const auto first = gt.span().begin() + static_cast<std::ptrdiff_t>(z * plane);
    const auto count = static_cast<std::size_t>(std::count(first, first + static_cast<std::ptrdiff_t>(plane), std::uint8_t{1}));
    if (count > best_count) {
      best = z;
      best_count = count;
    }
  }
  return best;
}

ImageTensor as_image(const BinMask& m) {
  ImageTensor out(m.dims());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i];
  return out;
}

ojson stats_json(const std::vector<double>& v) {
  ojson j;
  j["n"] = v.size();
  if (v.empty()) return j;
  const auto s = eval::summary_stats(v);
  j["mean"] = s.mean;
  j["std"] = s.std;
  j["median"] = s.median;
  j["q1"] = s.q1;
  j["q3"] = s.q3;
  j["min"] = s.min;
  j["max"] = s.max;
  return j;
}

ojson box_json(const eval::Box& b) { return ojson{{"lo", b.lo}, {"hi", b.hi}}; }

eval::Box box_from(const nlohmann::json& j) {
  return {j.at("lo").get<std::vector<std::size_t>>(), j.at("hi").get<std::vector<std::size_t>>()};
}

double pred_fraction(const eval::EvalRecord& r) {
  return r.brain_voxels ? static_cast<double>(r.pred_voxels) / static_cast<double>(r.brain_voxels) : 0.0;
}

}  // namespace

bool is_sphere_injector(const std::string& kind) {
  return kind == "random" || kind == "deform" || kind == "copy_altered";
}

std::vector<std::size_t> pick_slices(const SegMask& seg, std::size_t count) {
  if (seg.rank() != 3) throw ShapeError("expected a [D,H,W] segmentation, got " + dims_to_string(seg.dims()));
  const std::size_t d = seg.dim(0), plane = seg.dim(1) * seg.dim(2);
  std::size_t z0 = d, z1 = 0;
  for (std::size_t z = 0; z < d; ++z) {
    const auto first = seg.span().begin() + static_cast<std::ptrdiff_t>(z * plane);
    if (std::any_of(first, first + static_cast<std::ptrdiff_t>(plane), [](std::uint8_t v) { return v != 0; })) {
      z0 = std::min(z0, z);
      z1 = z;
    }
  }
  if (z0 == d) throw DegenerateInputError("segmentation contains no brain voxels");
  // The caps are kept: a model that never saw them flags them at inference.
  const std::size_t a = z0, b = z1;
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = count == 1 ? (a + b) / 2
                        : a + static_cast<std::size_t>(std::lround(static_cast<double>(i) * static_cast<double>(b - a) /
                                                                   static_cast<double>(count - 1)));
  }
  return out;
}

ImageTensor model_input_volume(const SegMask& seg, std::size_t side) {
  return prep::resize_volume(prep::labels_to_intensity(seg), side, side);
}

TrainingSet build_training_set(const std::vector<SegMask>& segs, const RunConfig& cfg) {
  const std::size_t side = cfg.side, plane = side * side;
  ImageTensor stack({segs.size() * cfg.slices_per_phantom, side, side});
  std::size_t row = 0;
  for (const SegMask& seg : segs) {
    const ImageTensor input = model_input_volume(seg, side);
    for (std::size_t z : pick_slices(seg, cfg.slices_per_phantom)) {
      std::copy_n(input.data() + z * plane, plane, stack.data() + row * plane);
      ++row;
    }
  }
  TrainingSet ts;
  ts.zscore = prep::fit_zscore(stack);
  ts.slices = prep::apply_zscore(stack, ts.zscore);
  return ts;
}

CaseInference infer_volume(const SegMask& seg, const vae::ModelParams<float>& params, const prep::ZScoreStats& zscore,
                           const RunConfig& cfg) {
  if (seg.rank() != 3) throw ShapeError("expected a [D,H,W] segmentation, got " + dims_to_string(seg.dims()));
  if (params.input_side != cfg.side) {
    throw ValidationError("checkpoint expects side " + std::to_string(params.input_side) + ", config has " +
                          std::to_string(cfg.side));
  }
  const std::size_t d = seg.dim(0), h = seg.dim(1), w = seg.dim(2), side = cfg.side;
  const ImageTensor x = prep::apply_zscore(model_input_volume(seg, side), zscore);
  ImageTensor residual = vae::anomaly_residual(x, params);
  if (cfg.restrict_to_brain) {
    const BinMask brain = nonzero(seg);
    for (std::size_t z = 0; z < d; ++z) {
      const BinMask small = post::resize_nearest(brain.slice(z), side, side);
      float* r = residual.data() + z * side * side;
      for (std::size_t i = 0; i < small.size(); ++i) {
        if (!small[i]) r[i] = 0.0f;
      }
    }
  }
  post::PostprocConfig pc = cfg.postproc_config();
  pc.out_h = h;
  pc.out_w = w;
  CaseInference out;
  out.pred = post::run_postprocess(residual, pc);
  out.residual = prep::resize_volume(residual, h, w);
  return out;
}

vae::BatchTransform make_augmenter(const prep::AugmentSpec& spec) {
  return [spec](ImageTensor& batch, RngStream& rng) {
    const std::size_t b = batch.dim(0), h = batch.dim(2), w = batch.dim(3), plane = h * w;
    const SegMask blank({h, w});
    for (std::size_t i = 0; i < b; ++i) {
      ImageTensor slice({h, w}, std::vector<float>(batch.data() + i * plane, batch.data() + (i + 1) * plane));
      const prep::Augmented a = prep::augment(slice, blank, spec, rng);
      std::copy_n(a.slice.data(), plane, batch.data() + i * plane);
    }
  };
}

void stage_phantom(const RunConfig& cfg, const fs::path& run) {
  snapshot(cfg, run, "phantom");
  const RngStream root = RngStream(cfg.seed).child("phantom");
  const fs::path dir = run / "phantoms";
  ojson entries = ojson::array();
  for (std::size_t i = 0; i < cfg.n_train_phantoms; ++i) {
    const std::string id = "phantom_" + idx3(i);
    const std::string label = "train/" + std::to_string(i);
    RngStream rng = root.child(label);
    const synth::Phantom p = synth::make_phantom(cfg.phantom_config(), rng);
    io::stf_write(p.volume, dir / (id + ".stf"));
    io::stf_write(p.tissue, dir / (id + "_tissue.stf"));
    entries.push_back({{"id", id}, {"seed", root.child_seed(label)}, {"volume", id + ".stf"},
                       {"tissue", id + "_tissue.stf"}, {"dims", p.volume.dims()}});
  }
  write_manifest(dir / "manifest.json", ojson{{"kind", "phantoms"}, {"seed", cfg.seed}, {"phantoms", entries}});
}

void stage_inject(const RunConfig& cfg, const fs::path& run) {
  snapshot(cfg, run, "inject");
  RngStream rng = RngStream(cfg.seed).child("inject");
  const auto suite = synth::build_test_suite(cfg.suite_config(), rng);
  const fs::path dir = run / "cases";
  ojson entries = ojson::array();
  for (const auto& c : suite) {
    const std::string id = "case_" + idx3(c.case_id);
    io::stf_write(c.anomaly.image, dir / (id + "_image.stf"));
    io::stf_write(c.anomaly.gt, dir / (id + "_gt.stf"));
    io::stf_write(c.source.brain, dir / (id + "_brain.stf"));
    ojson params = ojson::object();
    for (const auto& [k, v] : c.anomaly.params) params[k] = v;
    entries.push_back({{"case_id", c.case_id}, {"kind", c.kind}, {"seed", c.seed}, {"image", id + "_image.stf"},
                       {"gt", id + "_gt.stf"}, {"brain", id + "_brain.stf"}, {"params", params}});
  }
  write_manifest(dir / "manifest.json", ojson{{"kind", "cases"}, {"seed", cfg.seed}, {"cases", entries}});
}

void stage_preprocess(const RunConfig& cfg, const fs::path& run) {
  snapshot(cfg, run, "preprocess");
  const RngStream root = RngStream(cfg.seed).child("segment");
  const fs::path out = run / "preprocessed";
  const ojson phantoms = read_manifest(run / "phantoms" / "manifest.json");
  std::vector<SegMask> segs;
  ojson seg_entries = ojson::array();
  for (const auto& e : phantoms.at("phantoms")) {
    const std::string id = e.at("id").get<std::string>();
    const ImageTensor vol = io::stf_read_f32(run / "phantoms" / e.at("volume").get<std::string>());
    RngStream rng = root.child(id);
    segs.push_back(prep::segment_tissues(vol, rng, cfg.segment_options()));
    io::stf_write(segs.back(), out / (id + "_seg.stf"));
    seg_entries.push_back({{"id", id}, {"seg", id + "_seg.stf"}});
  }
  const TrainingSet ts = build_training_set(segs, cfg);
  io::stf_write(ts.slices, out / "train.stf");

  ojson case_entries = ojson::array();
  const fs::path cases_manifest = run / "cases" / "manifest.json";
  if (fs::exists(cases_manifest)) {
    const ojson cases = read_manifest(cases_manifest);
    for (const auto& e : cases.at("cases")) {
      const std::string id = "case_" + idx3(e.at("case_id").get<std::size_t>());
      const ImageTensor vol = io::stf_read_f32(run / "cases" / e.at("image").get<std::string>());
      RngStream rng = root.child(id);
      io::stf_write(prep::segment_tissues(vol, rng, cfg.segment_options()), out / (id + "_seg.stf"));
      case_entries.push_back({{"case_id", e.at("case_id")}, {"seg", id + "_seg.stf"}});
    }
  }
  write_manifest(out / "manifest.json",
                 ojson{{"kind", "preprocessed"},
                       {"side", cfg.side},
                       {"train", "train.stf"},
                       {"train_dims", ts.slices.dims()},
                       {"zscore", {{"mean", ts.zscore.mean}, {"std", ts.zscore.std}}},
                       {"phantoms", seg_entries},
                       {"cases", case_entries}});
}

vae::TrainResult stage_train(const RunConfig& cfg, const fs::path& run, std::ostream* log) {
  snapshot(cfg, run, "train");
  const ojson manifest = read_manifest(run / "preprocessed" / "manifest.json");
  if (manifest.at("side").get<std::size_t>() != cfg.side) {
    throw ValidationError("preprocessed data has side " + std::to_string(manifest.at("side").get<std::size_t>()) +
                          ", config has " + std::to_string(cfg.side) + "; rerun preprocess");
  }
  const ImageTensor data = io::stf_read_f32(run / "preprocessed" / manifest.at("train").get<std::string>());
  io::CheckpointMeta meta;
  meta.input_side = cfg.side;
  meta.zscore.mean = manifest.at("zscore").at("mean").get<double>();
  meta.zscore.std = manifest.at("zscore").at("std").get<double>();

  const RngStream root(cfg.seed);
  RngStream init_rng = root.child("init");
  RngStream train_rng = root.child("train");
  vae::TrainConfig tc = cfg.train_config();
  const prep::AugmentSpec aug = cfg.augment_spec();
  const bool any_aug = aug.bias_field || aug.noise || aug.gamma || aug.ghosting || aug.flips || aug.affine || aug.rotation;

  const fs::path metrics_path = run / "metrics.jsonl";
  fs::create_directories(run);
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw Error("cannot write " + metrics_path.string());
  auto on_epoch = [&](const vae::EpochMetrics& m) {
    ojson j{{"epoch", m.epoch}, {"total", m.loss.total}, {"kl", m.loss.kl}, {"rec_vae", m.loss.rec_vae},
            {"rec_ce", m.loss.rec_ce}};
    metrics << j.dump() << "\n" << std::flush;
    if (log) *log << "epoch " << (m.epoch + 1) << "/" << tc.epochs << " total " << m.loss.total << "\n" << std::flush;
  };
  vae::TrainResult result = vae::train(data, vae::init_model(cfg.side, init_rng), tc, train_rng,
                                       any_aug ? make_augmenter(aug) : vae::BatchTransform{}, on_epoch);
  io::save_checkpoint(run / "checkpoint", result.params, meta);
  return result;
}

void stage_infer(const RunConfig& cfg, const fs::path& run, const fs::path& checkpoint) {
  const fs::path ckpt = checkpoint.empty() ? run / "checkpoint" : checkpoint;
  io::CheckpointMeta meta;
  const vae::ModelParams<float> params = io::load_checkpoint(ckpt, &meta);
  snapshot(cfg, run, "infer");
  const ojson cases = read_manifest(run / "cases" / "manifest.json");
  const ojson pre = read_manifest(run / "preprocessed" / "manifest.json");
  std::map<std::size_t, std::string> seg_files;
  for (const auto& e : pre.at("cases")) seg_files[e.at("case_id").get<std::size_t>()] = e.at("seg").get<std::string>();

  const fs::path out = run / "infer";
  ojson entries = ojson::array();
  for (const auto& e : cases.at("cases")) {
    const auto case_id = e.at("case_id").get<std::size_t>();
    const auto it = seg_files.find(case_id);
    if (it == seg_files.end()) throw ValidationError("no segmentation for case " + std::to_string(case_id) + "; rerun preprocess");
    const SegMask seg = io::stf_read_u8(run / "preprocessed" / it->second);
    const CaseInference ci = infer_volume(seg, params, meta.zscore, cfg);
    const std::string id = "case_" + idx3(case_id);
    io::stf_write(ci.residual, out / (id + "_residual.stf"));
    io::stf_write(ci.pred, out / (id + "_pred.stf"));

    const BinMask gt = io::stf_read_u8(run / "cases" / e.at("gt").get<std::string>());
    const std::size_t z = preview_slice(gt);
    const ImageTensor image = io::stf_read_f32(run / "cases" / e.at("image").get<std::string>());
    io::pgm_write(image.slice(z), out / "preview" / (id + "_image.pgm"));
    io::pgm_write(ci.residual.slice(z), out / "preview" / (id + "_residual.pgm"));
    io::pgm_write(as_image(ci.pred.slice(z)), out / "preview" / (id + "_pred.pgm"));
    entries.push_back({{"case_id", case_id}, {"residual", id + "_residual.stf"}, {"pred", id + "_pred.stf"},
                       {"preview_slice", z}});
  }
  write_manifest(out / "manifest.json", ojson{{"kind", "inference"}, {"checkpoint", ckpt.string()}, {"cases", entries}});
}

std::string record_to_json(const eval::EvalRecord& r) {
  ojson j;
  j["case_id"] = r.case_id;
  j["kind"] = r.kind;
  j["dice"] = r.dice;
  j["auprc"] = r.auprc ? ojson(*r.auprc) : ojson(nullptr);
  j["n_pred_components"] = r.n_pred_components;
  j["pred_voxels"] = r.pred_voxels;
  j["gt_voxels"] = r.gt_voxels;
  j["brain_voxels"] = r.brain_voxels;
  ojson bp = ojson::array(), bg = ojson::array();
  for (const auto& b : r.boxes_pred) bp.push_back(box_json(b));
  for (const auto& b : r.boxes_gt) bg.push_back(box_json(b));
  j["boxes_pred"] = bp;
  j["boxes_gt"] = bg;
  j["gt_box_iou"] = r.gt_box_iou;
  return j.dump();
}

eval::EvalRecord record_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
    eval::EvalRecord r;
    r.case_id = j.at("case_id").get<std::size_t>();
    r.kind = j.at("kind").get<std::string>();
    r.dice = j.at("dice").get<double>();
    if (!j.at("auprc").is_null()) r.auprc = j.at("auprc").get<double>();
    r.n_pred_components = j.at("n_pred_components").get<std::size_t>();
    r.pred_voxels = j.at("pred_voxels").get<std::size_t>();
    r.gt_voxels = j.at("gt_voxels").get<std::size_t>();
    r.brain_voxels = j.at("brain_voxels").get<std::size_t>();
    for (const auto& b : j.at("boxes_pred")) r.boxes_pred.push_back(box_from(b));
    for (const auto& b : j.at("boxes_gt")) r.boxes_gt.push_back(box_from(b));
    r.gt_box_iou = j.at("gt_box_iou").get<std::vector<double>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad eval record: ") + e.what(), 0);
  }
}

std::vector<eval::EvalRecord> stage_eval(const RunConfig& cfg, const fs::path& run) {
  snapshot(cfg, run, "eval");
  const ojson cases = read_manifest(run / "cases" / "manifest.json");
  const ojson inf = read_manifest(run / "infer" / "manifest.json");
  std::map<std::size_t, ojson> by_id;
  for (const auto& e : inf.at("cases")) by_id[e.at("case_id").get<std::size_t>()] = e;

  std::vector<eval::EvalRecord> records;
  std::string jsonl;
  std::string csv = "case_id,kind,dice,auprc\n";
  for (const auto& e : cases.at("cases")) {
    const auto case_id = e.at("case_id").get<std::size_t>();
    const auto it = by_id.find(case_id);
    if (it == by_id.end()) throw ValidationError("no inference output for case " + std::to_string(case_id) + "; rerun infer");
    const BinMask gt = io::stf_read_u8(run / "cases" / e.at("gt").get<std::string>());
    const BinMask brain = io::stf_read_u8(run / "cases" / e.at("brain").get<std::string>());
    const BinMask pred = io::stf_read_u8(run / "infer" / it->second.at("pred").get<std::string>());
    const ImageTensor residual = io::stf_read_f32(run / "infer" / it->second.at("residual").get<std::string>());
    records.push_back(eval::evaluate_case(case_id, e.at("kind").get<std::string>(), pred, gt, residual, brain));
    const auto& r = records.back();
    jsonl += record_to_json(r) + "\n";
    csv += std::to_string(r.case_id) + "," + r.kind + "," + ojson(r.dice).dump() + "," +
           (r.auprc ? ojson(*r.auprc).dump() : std::string()) + "\n";
  }
  io::write_text(run / "eval" / "eval.jsonl", jsonl);
  io::write_text(run / "eval" / "dice.csv", csv);
  return records;
}

std::vector<eval::EvalRecord> read_eval_records(const fs::path& run) {
  std::istringstream in(io::read_text(run / "eval" / "eval.jsonl"));
  std::vector<eval::EvalRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(record_from_json(line));
  }
  return out;
}

std::string build_report(const std::vector<eval::EvalRecord>& records, const std::vector<eval::EvalRecord>* baseline) {
  static const std::vector<std::string> kKindOrder{"random", "deform", "copy_altered", "superimpose"};
  std::vector<double> all_dice, sphere_dice, all_auprc, healthy_frac;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> per_kind;
  ojson cases = ojson::array();
  for (const auto& r : records) {
    const double frac = pred_fraction(r);
    cases.push_back({{"case_id", r.case_id}, {"kind", r.kind}, {"dice", r.dice},
                     {"auprc", r.auprc ? ojson(*r.auprc) : ojson(nullptr)}, {"pred_fraction_of_brain", frac}});
    if (r.kind == "healthy") {
      healthy_frac.push_back(frac);
      continue;
    }
    all_dice.push_back(r.dice);
    if (is_sphere_injector(r.kind)) sphere_dice.push_back(r.dice);
    per_kind[r.kind].first.push_back(r.dice);
    if (r.auprc) {
      all_auprc.push_back(*r.auprc);
      per_kind[r.kind].second.push_back(*r.auprc);
    }
  }
  ojson kinds = ojson::object();
  auto add_kind = [&](const std::string& k) {
    const auto& [d, a] = per_kind.at(k);
    kinds[k] = {{"dice", stats_json(d)}, {"auprc", stats_json(a)}};
  };
  for (const auto& k : kKindOrder) {
    if (per_kind.count(k)) add_kind(k);
  }
  for (const auto& [k, v] : per_kind) {
    if (std::find(kKindOrder.begin(), kKindOrder.end(), k) == kKindOrder.end()) add_kind(k);
  }

  ojson rep;
  rep["n_cases"] = records.size();
  rep["anomalous"] = {{"dice", stats_json(all_dice)}, {"auprc", stats_json(all_auprc)}};
  rep["sphere_injectors"] = {{"dice", stats_json(sphere_dice)}};
  rep["per_kind"] = kinds;
  rep["healthy"] = {{"pred_fraction_of_brain", stats_json(healthy_frac)}};
  if (baseline) {
    std::map<std::size_t, double> base;
    for (const auto& r : *baseline) base[r.case_id] = r.dice;
    std::vector<double> a, b;
    for (const auto& r : records) {
      if (r.kind == "healthy") continue;
      const auto it = base.find(r.case_id);
      if (it == base.end()) throw ValidationError("baseline run lacks case " + std::to_string(r.case_id));
      a.push_back(r.dice);
      b.push_back(it->second);
    }
    const auto t = eval::paired_t_test(a, b);
    rep["paired_t_test"] = {{"n", a.size()}, {"t", t.t}, {"df", t.df}, {"p", t.p}};
  }
  rep["cases"] = cases;
  return rep.dump(2) + "\n";
}

std::string stage_report(const RunConfig& cfg, const fs::path& run, const fs::path& baseline) {
  snapshot(cfg, run, "report");
  const auto records = read_eval_records(run);
  std::string text;
  if (baseline.empty()) {
    text = build_report(records);
  } else {
    const auto base = read_eval_records(baseline);
    text = build_report(records, &base);
  }
  io::write_text(run / "report.json", text);
  return text;
}

std::string run_all(const RunConfig& cfg, const fs::path& run, std::ostream* log) {
  auto say = [&](const char* s) {
    if (log) *log << "[" << s << "]\n" << std::flush;
  };
  say("phantom");
  stage_phantom(cfg, run);
  say("inject");
  stage_inject(cfg, run);
  say("preprocess");
  stage_preprocess(cfg, run);
  say("train");
  stage_train(cfg, run, log);
  say("infer");
  stage_infer(cfg, run);
  say("eval");
  stage_eval(cfg, run);
  say("report");
  return stage_report(cfg, run);
}

}  // namespace strega::pipeline
