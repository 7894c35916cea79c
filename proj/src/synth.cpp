#include "strega/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace strega::synth {

Phantom make_phantom(const PhantomConfig& cfg, RngStream& rng) {
  const std::array<std::size_t, 3> dim{cfg.depth, cfg.height, cfg.width};
  for (std::size_t d : dim) {
    if (d < 16) throw ValidationError("phantom dims must be >= 16, got " + std::to_string(d));
  }
  if (!(cfg.wm_rho > 0 && cfg.wm_rho < cfg.csf_rho && cfg.csf_rho < 1)) {
    throw ValidationError("phantom tissue radii must satisfy 0 < wm_rho < csf_rho < 1");
  }
  std::array<double, 3> centre{}, semi{}, mod_amp{}, mod_phase{};
  for (std::size_t a = 0; a < 3; ++a) {
    const double n = static_cast<double>(dim[a]);
    centre[a] = (n - 1) / 2;
    semi[a] = cfg.radius_frac * n;
    if (cfg.jitter) {
      centre[a] += rng.uniform(-cfg.center_jitter_frac, cfg.center_jitter_frac) * n;
      semi[a] *= 1.0 + rng.uniform(-cfg.axis_scale, cfg.axis_scale);
    }
    if (cfg.modulation) {
      mod_amp[a] = rng.uniform(-1.0, 1.0);
      mod_phase[a] = rng.uniform(0.0, 2 * std::numbers::pi);
    }
  }

  Phantom p{ImageTensor({dim[0], dim[1], dim[2]}), SegMask({dim[0], dim[1], dim[2]}),
            BinMask({dim[0], dim[1], dim[2]})};
  std::size_t i = 0;
  for (std::size_t z = 0; z < dim[0]; ++z)
    for (std::size_t y = 0; y < dim[1]; ++y)
      for (std::size_t x = 0; x < dim[2]; ++x, ++i) {
        const std::array<double, 3> pos{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        double rho2 = 0, field = 0;
        for (std::size_t a = 0; a < 3; ++a) {
          const double u = (pos[a] - centre[a]) / semi[a];
          rho2 += u * u;
          field += mod_amp[a] * std::cos(std::numbers::pi * pos[a] / static_cast<double>(dim[a]) + mod_phase[a]);
        }
        const double rho = std::sqrt(rho2);
        std::uint8_t label = 0;
        float base = 0;
        if (rho <= cfg.wm_rho) {
          label = 2;
          base = kWhiteMatter;
        } else if (rho <= cfg.csf_rho) {
          label = 1;
          base = kGreyMatter;
        } else if (rho <= 1.0) {
          label = 3;
          base = kCsf;
        }
        p.tissue[i] = label;
        p.brain[i] = label != 0;
        if (label == 0) continue;
        double v = base;
        if (cfg.modulation) v += cfg.modulation_amp * field / 3.0;
        if (cfg.noise) v += cfg.noise_sigma * rng.normal();
        p.volume[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return p;
}

ImageTensor extract_anomaly(const ImageTensor& donor, const BinMask& support) {
  require_same_dims(donor.dims(), support.dims(), "extract_anomaly");
  float lo = 0, hi = 0;
  bool any = false;
  for (std::size_t i = 0; i < donor.size(); ++i) {
    if (!support[i]) continue;
    if (!any) lo = hi = donor[i];
    lo = std::min(lo, donor[i]);
    hi = std::max(hi, donor[i]);
    any = true;
  }
  if (!any) throw DegenerateInputError("anomaly support mask is empty");
  if (lo < 0) throw ValidationError("donor intensities must be >= 0 on the support");
  if (!(hi > 0)) throw DegenerateInputError("donor is zero over the whole support");
  // The range [0, max] maps onto [0, 1], so every supported voxel stays nonzero.
  ImageTensor m(donor.dims(), 0.0f);
  for (std::size_t i = 0; i < donor.size(); ++i) {
    if (!support[i]) continue;
    m[i] = hi > lo ? static_cast<float>(static_cast<double>(donor[i]) / hi) : 1.0f;
  }
  return m;
}

ImageTensor superimpose(const ImageTensor& healthy, const ImageTensor& anomaly, double scale) {
  require_same_dims(healthy.dims(), anomaly.dims(), "superimpose");
  ImageTensor out = healthy;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (anomaly[i] == 0.0f) continue;  // untouched pixels stay bit-identical
    out[i] = static_cast<float>(std::clamp(healthy[i] + scale * anomaly[i], 0.0, 1.0));
  }
  return out;
}

std::string kind_name(InjectKind kind) {
  switch (kind) {
    case InjectKind::kRandom: return "random";
    case InjectKind::kDeform: return "deform";
    case InjectKind::kCopyAltered: return "copy_altered";
    case InjectKind::kSuperimpose: return "superimpose";
  }
  return "unknown";
}

InjectKind kind_from_name(const std::string& name) {
  for (InjectKind k : {InjectKind::kRandom, InjectKind::kDeform, InjectKind::kCopyAltered, InjectKind::kSuperimpose}) {
    if (kind_name(k) == name) return k;
  }
  throw ValidationError("unknown anomaly kind '" + name + "' (expected random, deform, copy_altered or superimpose)");
}

namespace {

struct Placement {
  std::array<double, 3> centre;
  double radius;
};

// Distance of a voxel from the centre in units where the shape boundary is R.
double shape_distance(const std::array<double, 3>& d, Shape shape) {
  if (shape == Shape::kCube) return std::max({std::abs(d[0]), std::abs(d[1]), std::abs(d[2])});
  return std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
}

}  // namespace

AnomalyCase inject(const Phantom& phantom, InjectKind kind, RngStream& rng, const InjectOptions& opt) {
  const ImageTensor& vol = phantom.volume;
  if (vol.rank() != 3) throw ShapeError("inject expects a [D,H,W] phantom");
  require_same_dims(vol.dims(), phantom.brain.dims(), "inject");
  const std::array<std::size_t, 3> dim{vol.dim(0), vol.dim(1), vol.dim(2)};
  std::vector<std::size_t> brain_idx;
  for (std::size_t i = 0; i < phantom.brain.size(); ++i) {
    if (phantom.brain[i]) brain_idx.push_back(i);
  }
  if (brain_idx.empty()) throw DegenerateInputError("phantom has an empty brain mask");
  const double min_dim = static_cast<double>(*std::min_element(dim.begin(), dim.end()));
  auto coords = [&](std::size_t i) {
    return std::array<double, 3>{static_cast<double>(i / (dim[1] * dim[2])),
                                 static_cast<double>((i / dim[2]) % dim[1]), static_cast<double>(i % dim[2])};
  };
  auto index_of = [&](const std::array<long, 3>& c) {
    return (static_cast<std::size_t>(c[0]) * dim[1] + static_cast<std::size_t>(c[1])) * dim[2] +
           static_cast<std::size_t>(c[2]);
  };

  for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
    Placement pl;
    pl.centre = coords(brain_idx[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(brain_idx.size()) - 1))]);
    pl.radius = opt.radius ? *opt.radius : rng.uniform(opt.radius_min_frac, opt.radius_max_frac) * min_dim;
    bool fits = true;
    for (std::size_t a = 0; a < 3; ++a) {
      if (pl.centre[a] - pl.radius < -0.5 || pl.centre[a] + pl.radius > static_cast<double>(dim[a]) - 0.5) fits = false;
    }

    AnomalyCase c;
    c.kind = kind;
    c.params = {{"center_z", pl.centre[0]}, {"center_y", pl.centre[1]}, {"center_x", pl.centre[2]},
                {"radius", pl.radius}, {"attempt", attempt}};
    // Kind-specific draws happen before the fit test so the stream advances
    // the same way on every attempt.
    double amp = 0;
    std::array<double, 3> shift{};
    if (kind == InjectKind::kDeform) {
      amp = rng.uniform(opt.deform_lo, opt.deform_hi);
      c.params["amplitude"] = amp;
    } else if (kind == InjectKind::kCopyAltered) {
      double norm = 0;
      for (auto& s : shift) {
        s = rng.normal();
        norm += s * s;
      }
      norm = std::sqrt(norm);
      const double len = rng.uniform(pl.radius, 3 * pl.radius);
      for (auto& s : shift) s = norm > 0 ? s / norm * len : len;
      c.params["shift_z"] = shift[0];
      c.params["shift_y"] = shift[1];
      c.params["shift_x"] = shift[2];
    } else if (kind == InjectKind::kSuperimpose) {
      c.params["scale"] = opt.superimpose_scale;
    }
    if (!fits) continue;
    if (kind == InjectKind::kCopyAltered) {
      std::array<long, 3> src{};
      bool inside = true;
      for (std::size_t a = 0; a < 3; ++a) {
        src[a] = std::lround(pl.centre[a] + shift[a]);
        if (src[a] < 0 || src[a] >= static_cast<long>(dim[a])) inside = false;
      }
      if (!inside || !phantom.brain[index_of(src)]) continue;
    }

    // Voxels of the shape inside the brain, scanned over the bounding box.
    std::vector<std::size_t> region;
    std::vector<double> rel;  // distance / radius
    std::array<long, 3> lo{}, hi{};
    for (std::size_t a = 0; a < 3; ++a) {
      lo[a] = std::max(0L, static_cast<long>(std::floor(pl.centre[a] - pl.radius)));
      hi[a] = std::min(static_cast<long>(dim[a]) - 1, static_cast<long>(std::ceil(pl.centre[a] + pl.radius)));
    }
    for (long z = lo[0]; z <= hi[0]; ++z)
      for (long y = lo[1]; y <= hi[1]; ++y)
        for (long x = lo[2]; x <= hi[2]; ++x) {
          const std::array<double, 3> d{z - pl.centre[0], y - pl.centre[1], x - pl.centre[2]};
          const double r = shape_distance(d, opt.shape);
          const std::size_t i = index_of({z, y, x});
          if (r <= pl.radius && phantom.brain[i]) {
            region.push_back(i);
            rel.push_back(pl.radius > 0 ? r / pl.radius : 0.0);
          }
        }
    if (region.empty()) continue;

    c.image = vol;
    if (kind == InjectKind::kSuperimpose) {
      // Donor lesion: bright core fading towards the rim, mildly textured.
      ImageTensor donor(vol.dims(), 0.0f);
      BinMask support(vol.dims(), 0);
      for (std::size_t j = 0; j < region.size(); ++j) {
        donor[region[j]] = static_cast<float>(std::max(0.0, 1.0 - 0.5 * std::pow(rel[j], 4) + 0.05 * rng.normal()));
        support[region[j]] = 1;
      }
      c.image = superimpose(vol, extract_anomaly(donor, support), opt.superimpose_scale);
    } else {
      for (std::size_t j = 0; j < region.size(); ++j) {
        const std::size_t i = region[j];
        double add = 0;
        switch (kind) {
          case InjectKind::kRandom: add = rng.uniform(opt.random_lo, opt.random_hi); break;
          case InjectKind::kDeform: add = amp * rel[j]; break;
          case InjectKind::kCopyAltered: {
            const auto p = coords(i);
            std::array<long, 3> s{};
            for (std::size_t a = 0; a < 3; ++a) {
              s[a] = std::clamp(std::lround(p[a] + shift[a]), 0L, static_cast<long>(dim[a]) - 1);
            }
            add = vol[index_of(s)];
            break;
          }
          default: break;
        }
        c.image[i] = static_cast<float>(std::clamp(vol[i] + add, 0.0, 1.0));
      }
    }

    c.gt = BinMask(vol.dims(), 0);
    std::size_t n_gt = 0;
    for (std::size_t i : region) {
      if (std::abs(static_cast<double>(c.image[i]) - vol[i]) > opt.gt_min_change) {
        c.gt[i] = 1;
        ++n_gt;
      }
    }
    if (n_gt == 0) continue;
    c.params["gt_voxels"] = static_cast<double>(n_gt);
    return c;
  }
  throw Error("could not place a " + kind_name(kind) + " anomaly inside the brain after " +
              std::to_string(opt.max_attempts) + " attempts");
}

std::vector<SuiteCase> build_test_suite(const SuiteConfig& cfg, RngStream& rng) {
  if (cfg.n_cases > 0 && cfg.kinds.empty()) throw ValidationError("suite needs at least one anomaly kind");
  std::vector<SuiteCase> out;
  const std::size_t total = cfg.n_cases + cfg.n_healthy;
  for (std::size_t id = 0; id < total; ++id) {
    SuiteCase sc;
    sc.case_id = id;
    sc.seed = rng.child_seed("case/" + std::to_string(id));
    RngStream case_rng(sc.seed);
    RngStream phantom_rng = case_rng.child("phantom");
    sc.source = make_phantom(cfg.phantom, phantom_rng);
    if (id < cfg.n_cases) {
      const InjectKind kind = cfg.kinds[id % cfg.kinds.size()];
      sc.kind = kind_name(kind);
      RngStream inject_rng = case_rng.child("inject");
      sc.anomaly = inject(sc.source, kind, inject_rng, cfg.inject);
    } else {
      sc.kind = "healthy";
      sc.anomaly.image = sc.source.volume;
      sc.anomaly.gt = BinMask(sc.source.volume.dims(), 0);
    }
    out.push_back(std::move(sc));
  }
  return out;
}

}  // namespace strega::synth
