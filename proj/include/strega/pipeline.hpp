#pragma once

// End-to-end stages over a run directory:
//
//   config/<stage>.txt       config snapshot of every stage invocation
//   phantoms/                training phantoms + manifest.json
//   cases/                   held-out test suite (image, gt, brain) + manifest.json
//   preprocessed/            segmentations, z-scored training stack, manifest.json
//   checkpoint/              trained model (see io::save_checkpoint)
//   metrics.jsonl            one line per training epoch
//   infer/                   residual and predicted mask per case, PGM previews
//   eval/eval.jsonl, dice.csv
//   report.json

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "strega/cevae.hpp"
#include "strega/config.hpp"
#include "strega/evaluate.hpp"
#include "strega/preprocess.hpp"

namespace strega::pipeline {

namespace fs = std::filesystem;

/// Axial slices evenly spaced over the brain extent of seg (label > 0), both
/// end slices included. Throws DegenerateInputError on an empty seg.
std::vector<std::size_t> pick_slices(const SegMask& seg, std::size_t count);

/// Label image of every axial slice, resized to side x side: [D,side,side].
ImageTensor model_input_volume(const SegMask& seg, std::size_t side);

struct TrainingSet {
  ImageTensor slices;  // [N,side,side], z-scored
  prep::ZScoreStats zscore;
};

/// Segmentations must match the volumes one to one.
TrainingSet build_training_set(const std::vector<SegMask>& segs, const RunConfig& cfg);

struct CaseInference {
  ImageTensor residual;  // [D,H,W], raw x - g(mu(x)) resized back to the volume
  BinMask pred;          // [D,H,W]
};

/// Residual and anomaly mask of one segmented volume.
CaseInference infer_volume(const SegMask& seg, const vae::ModelParams<float>& params, const prep::ZScoreStats& zscore,
                           const RunConfig& cfg);

/// Slice-stack augmentation hook for vae::train.
vae::BatchTransform make_augmenter(const prep::AugmentSpec& spec);

// Stages. Each reads the artifacts of its predecessors from `run`.
void stage_phantom(const RunConfig& cfg, const fs::path& run);
void stage_inject(const RunConfig& cfg, const fs::path& run);
void stage_preprocess(const RunConfig& cfg, const fs::path& run);
vae::TrainResult stage_train(const RunConfig& cfg, const fs::path& run, std::ostream* log = nullptr);
/// `checkpoint` empty means run/checkpoint.
void stage_infer(const RunConfig& cfg, const fs::path& run, const fs::path& checkpoint = {});
std::vector<eval::EvalRecord> stage_eval(const RunConfig& cfg, const fs::path& run);
/// Writes report.json and returns its text. A non-empty `baseline` run adds a
/// paired t-test of per-case Dice against that run's eval records.
std::string stage_report(const RunConfig& cfg, const fs::path& run, const fs::path& baseline = {});

/// phantom -> inject -> preprocess -> train -> infer -> eval -> report.
std::string run_all(const RunConfig& cfg, const fs::path& run, std::ostream* log = nullptr);

std::string record_to_json(const eval::EvalRecord& r);
eval::EvalRecord record_from_json(const std::string& line);
std::vector<eval::EvalRecord> read_eval_records(const fs::path& run);

/// Report text for a set of records (what stage_report writes).
std::string build_report(const std::vector<eval::EvalRecord>& records,
                         const std::vector<eval::EvalRecord>* baseline = nullptr);

/// Anomaly kinds that add a sphere-shaped signal straight into the image.
bool is_sphere_injector(const std::string& kind);

}  // namespace strega::pipeline
