#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "strega/rng.hpp"
#include "strega/tensor.hpp"

namespace strega::synth {

/// Canonical phantom intensities. Label order follows intensity, which is what
/// the segmentation stage reproduces: 1 = grey matter, 2 = white matter, 3 = CSF.
inline constexpr float kGreyMatter = 0.45f;
inline constexpr float kWhiteMatter = 0.65f;
inline constexpr float kCsf = 0.9f;

struct PhantomConfig {
  std::size_t depth = 64, height = 64, width = 64;
  /// Brain semi-axes as fractions of each extent, before jitter.
  double radius_frac = 0.4;
  double wm_rho = 0.6;   // white matter inside this normalised radius
  double csf_rho = 0.88; // grey matter up to here, CSF ring beyond
  bool jitter = true;        // centre shift and +-15% axis scaling
  double center_jitter_frac = 0.05;
  double axis_scale = 0.15;
  bool modulation = true;    // smooth +-0.05 intensity field
  double modulation_amp = 0.05;
  bool noise = true;
  double noise_sigma = 0.02;
};

struct Phantom {
  ImageTensor volume;  // [D,H,W] in [0,1]
  SegMask tissue;      // 0 background, 1 GM, 2 WM, 3 CSF
  BinMask brain;       // tissue != 0
};

/// Smooth concentric-ellipsoid head. Throws ValidationError if any dim < 16.
Phantom make_phantom(const PhantomConfig& cfg, RngStream& rng);

/// M = B * S scaled by the support maximum so the range [0, max] lands on
/// [0, 1]; a constant support maps to 1 and support(M) == support(S) for a
/// positive donor. Throws DegenerateInputError on an empty S or an all-zero
/// donor, ValidationError on negative donor values.
ImageTensor extract_anomaly(const ImageTensor& donor, const BinMask& support);

/// clamp(A + scale * M, 0, 1).
ImageTensor superimpose(const ImageTensor& healthy, const ImageTensor& anomaly, double scale = 0.6);

enum class InjectKind { kRandom, kDeform, kCopyAltered, kSuperimpose };

std::string kind_name(InjectKind kind);
/// Throws ValidationError on an unknown name.
InjectKind kind_from_name(const std::string& name);

enum class Shape { kSphere, kCube };

struct InjectOptions {
  Shape shape = Shape::kSphere;
  double radius_min_frac = 0.05;  // of the smallest volume dim
  double radius_max_frac = 0.15;
  std::optional<double> radius;   // overrides the draw (voxels)
  double random_lo = 0.3, random_hi = 1.0;
  double deform_lo = 0.4, deform_hi = 0.8;
  double superimpose_scale = 0.6;
  /// A voxel joins the ground truth only if the injection changed it by more
  /// than this (clamping at 1 can swallow an addition entirely).
  double gt_min_change = 0.05;
  int max_attempts = 20;
};

struct AnomalyCase {
  ImageTensor image;
  BinMask gt;
  InjectKind kind = InjectKind::kRandom;
  /// Provenance: numeric parameters of the draw (centre, radius, ...).
  std::map<std::string, double> params;
};

/// Sphere (or cube) anomaly centred inside the brain. Only brain voxels are
/// modified; gt = shape & brain & |change| > gt_min_change. Throws Error if no
/// placement leaves a non-empty ground truth within max_attempts.
AnomalyCase inject(const Phantom& phantom, InjectKind kind, RngStream& rng, const InjectOptions& options = {});

struct SuiteConfig {
  std::size_t n_cases = 20;
  std::size_t n_healthy = 5;
  std::vector<InjectKind> kinds{InjectKind::kRandom, InjectKind::kDeform, InjectKind::kCopyAltered,
                                InjectKind::kSuperimpose};
  PhantomConfig phantom;
  InjectOptions inject;
};

struct SuiteCase {
  std::size_t case_id = 0;
  std::string kind;  // injector name or "healthy"
  std::uint64_t seed = 0;
  Phantom source;
  AnomalyCase anomaly;  // healthy cases carry the phantom volume and an empty gt
};

/// Cases 0..n_cases-1 cycle through `kinds`; n_healthy unmodified phantoms
/// follow. Every case draws from its own child stream "case/<id>".
std::vector<SuiteCase> build_test_suite(const SuiteConfig& cfg, RngStream& rng);

}  // namespace strega::synth
