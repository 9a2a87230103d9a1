#pragma once

// Training presets and the on-disk model directory shared by the CLI and
// the acceptance run.
//
//   <models>/codec.ckpt         transform codec + hyperprior
//   <models>/denoiser.ckpt      base denoiser trained on all T steps
//   <models>/denoiser-s<S>.ckpt denoiser fine-tuned for S sampling steps
//   <models>/basis.kfdb         residual PCA basis

#include <filesystem>
#include <map>

#include "kfd/pipeline.hpp"

namespace kfd {

struct Preset {
  CodecConfig codec;
  RDTrainConfig rd;
  DenoiserConfig denoiser;
  DiffusionTrainConfig diffusion;
  int finetune_iters = 1000;
  int tile = 32;
};

/// Strategies mixed during denoiser training so one model serves the
/// interval sweep and the prediction / mixed variants.
inline std::vector<Strategy> training_strategies() {
  std::vector<Strategy> s;
  for (int d = 2; d <= 6; ++d) s.push_back({StrategyKind::interpolation, d, 0});
  s.push_back({StrategyKind::prediction, 0, 6});
  s.push_back({StrategyKind::mixed, 0, 6});
  return s;
}

inline Preset desk_preset() {
  Preset p;
  p.denoiser.latent_channels = p.codec.latent_channels;
  p.denoiser.schedule = ScheduleConfig::scaled(200);
  p.diffusion.iters = 3000;
  p.diffusion.batch = 4;
  p.diffusion.lr = 1e-3;
  p.diffusion.strategies = training_strategies();
  return p;
}

inline Preset paper_preset() {
  Preset p;
  p.codec = CodecConfig::paper();
  p.rd.lambda_init = 1e-5;
  p.rd.lambda_double_at = 250000;
  p.rd.lr_init = 1e-3;
  p.rd.lr_decay_every = 100000;
  p.rd.total_iters = 500000;
  p.rd.patch_h = p.rd.patch_w = 256;
  p.rd.batch = 16;
  p.denoiser = DenoiserConfig::paper(p.codec.latent_channels);
  p.diffusion.iters = 500000;
  p.diffusion.batch = 64;
  p.diffusion.lr = 1e-4;
  p.diffusion.warmup = 1000;
  p.diffusion.log_every = 1000;
  p.diffusion.strategies = training_strategies();
  p.finetune_iters = 200000;
  p.tile = 64;
  return p;
}

inline Preset preset(bool paper_mode) { return paper_mode ? paper_preset() : desk_preset(); }

/// Schedule for continuing a trained denoiser: same lr, short warmup.
inline DiffusionTrainConfig finetune_config(const Preset& p, int iters = 0) {
  DiffusionTrainConfig c = p.diffusion;
  c.iters = iters > 0 ? iters : p.finetune_iters;
  c.warmup = std::min(c.warmup, c.iters / 10);
  return c;
}

/// Principal directions of the decoder's own residuals on `x`, B = D.
inline ResidualBasis fit_residual_basis(const ScalarField& x, const ModelBundle& mb, const Strategy& s, int steps,
                                        int tile, int threads = 0) {
  CompressOptions o;
  o.strategy = s;
  o.steps = steps;
  o.tile = tile;
  o.threads = threads;
  const CompressResult r = compress_base(x, mb, o);
  const auto corpus = residual_corpus(x, r.xr, tile, true);
  if (corpus.empty()) throw DataError("fit-basis: no full tiles in the field");
  return fit_basis(corpus, tile * tile);
}

class ModelDir {
 public:
  explicit ModelDir(std::string root) : root_(std::move(root)) {}

  std::string codec_path() const { return path("codec.ckpt"); }
  std::string denoiser_path(int steps = 0) const {
    return steps > 0 ? path("denoiser-s" + std::to_string(steps) + ".ckpt") : path("denoiser.ckpt");
  }
  std::string basis_path() const { return path("basis.kfdb"); }

  void ensure() const { std::filesystem::create_directories(root_); }
  bool has(const std::string& p) const { return std::filesystem::exists(p); }

  /// The fine-tuned denoiser for S steps when present, else the base one.
  std::string denoiser_for_steps(int steps) const {
    const auto ft = denoiser_path(steps);
    return has(ft) ? ft : denoiser_path();
  }

  ModelBundle bundle(const std::string& denoiser, bool with_basis = true) const {
    require_file(codec_path(), "train-transform");
    require_file(denoiser, "train-diffusion");
    const bool b = with_basis && has(basis_path());
    return ModelBundle::from_files(codec_path(), denoiser, b ? basis_path() : "");
  }

  ModelBundle bundle_for_steps(int steps, bool with_basis = true) const {
    return bundle(denoiser_for_steps(steps), with_basis);
  }

  /// Models whose fingerprints match a container header.
  ModelBundle bundle_for(const ContainerHeader& h) const {
    require_file(codec_path(), "train-transform");
    std::string match;
    if (std::filesystem::is_directory(root_))
      for (auto& e : std::filesystem::directory_iterator(root_)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("denoiser", 0) != 0 || e.path().extension() != ".ckpt") continue;
        if (sha256(nn::read_file(e.path().string())) == h.denoiser_fp) {
          match = e.path().string();
          break;
        }
      }
    if (match.empty())
      throw ConfigError("no denoiser checkpoint in " + root_ + " matches the container (fingerprint " +
                        hex(h.denoiser_fp).substr(0, 16) + ")");
    return bundle(match, h.tau_nrmse > 0);
  }

 private:
  std::string path(const std::string& f) const { return (std::filesystem::path(root_) / f).string(); }
  void require_file(const std::string& p, const std::string& producer) const {
    if (!has(p)) throw ConfigError("missing checkpoint " + p + " (run " + producer + " first)");
  }
  std::string root_;
};

}  // namespace kfd
