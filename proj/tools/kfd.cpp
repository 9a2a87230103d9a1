// kfd: keyframe latent diffusion compressor command line.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 bound not
// reachable, 1 anything else (training divergence, internal failure).

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "kfd/raw_tensor.hpp"
#include "kfd/synth.hpp"
#include "kfd/workflow.hpp"

using namespace kfd;

namespace {

void note(const std::string& s) { std::cerr << s << "\n"; }

struct StrategyArgs {
  std::string kind = "interpolation";
  int interval = 3;
  int k = 6;

  void add(CLI::App* c) {
    c->add_option("--strategy", kind, "keyframe strategy")->check(CLI::IsMember({"prediction", "interpolation", "mixed"}));
    c->add_option("--interval", interval, "keyframe interval d (interpolation)");
    c->add_option("--k", k, "keyframe count (prediction, mixed)");
  }
  Strategy get() const {
    Strategy s{parse_strategy(kind), interval, k};
    s.validate();
    return s;
  }
};

void print_trace(const std::vector<TrainTracePoint>& t) {
  std::cout << "iter,lambda,train_loss,val_loss,val_mse,val_bpp\n";
  for (auto& p : t)
    std::printf("%d,%.6g,%.8g,%.8g,%.8g,%.8g\n", p.iter, p.lambda, p.train_loss, p.val_loss, p.val_mse, p.val_bpp);
}

void print_trace(const std::vector<DiffusionTracePoint>& t) {
  std::cout << "iter,loss\n";
  for (auto& p : t) std::printf("%d,%.8g\n", p.iter, p.loss);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Error-bounded compression of spatiotemporal fields with keyframe latent diffusion"};
  app.require_subcommand(1);
  app.fallthrough();
  bool paper_mode = false;
  app.add_flag("--paper-mode", paper_mode, "paper-scale model and training configuration")->configurable();
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0: hardware concurrency)");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a synthetic spatiotemporal field");
  SynthConfig sc;
  std::string synth_kind = "advecting-blobs", synth_out;
  synth->add_option("--kind", synth_kind)->check(CLI::IsMember({"advecting-blobs", "smooth-random-field"}));
  synth->add_option("--vars", sc.vars);
  synth->add_option("--times", sc.times);
  synth->add_option("--height", sc.height);
  synth->add_option("--width", sc.width);
  synth->add_option("--dtype", sc.dtype_bits, "32 or 64");
  synth->add_option("--seed", sc.seed);
  synth->add_option("--speed", sc.speed, "blob speed, pixels per frame");
  synth->add_option("--blobs", sc.blobs);
  synth->add_option("-o,--output", synth_out)->required();

  // train-transform
  auto* tt = app.add_subcommand("train-transform", "rate-distortion training of the transform codec");
  std::string input, models = "models", output;
  int iters = 0, batch = 0;
  uint64_t seed = 0;
  bool seed_set = false;
  tt->add_option("-i,--input", input)->required();
  tt->add_option("--models", models);
  tt->add_option("--iters", iters);
  tt->add_option("--batch", batch);
  tt->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });

  // train-diffusion
  auto* td = app.add_subcommand("train-diffusion", "train the conditional latent denoiser on all T steps");
  StrategyArgs td_strategy;
  double lr = 0;
  td->add_option("-i,--input", input)->required();
  td->add_option("--models", models);
  td->add_option("--iters", iters);
  td->add_option("--batch", batch);
  td->add_option("--lr", lr);
  td->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });
  td_strategy.add(td);

  // finetune-steps
  auto* ft = app.add_subcommand("finetune-steps", "fine-tune the denoiser on an S-step subsampled schedule");
  int steps = 32;
  ft->add_option("-i,--input", input)->required();
  ft->add_option("--models", models);
  ft->add_option("--steps", steps)->required();
  ft->add_option("--iters", iters);
  ft->add_option("--batch", batch);
  ft->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });

  // fit-basis
  auto* fb = app.add_subcommand("fit-basis", "fit the residual PCA basis on the decoder's own reconstruction");
  StrategyArgs fb_strategy;
  int tile = 0;
  fb->add_option("-i,--input", input)->required();
  fb->add_option("--models", models);
  fb->add_option("--steps", steps);
  fb->add_option("--tile", tile);
  fb_strategy.add(fb);

  // compress
  auto* cx = app.add_subcommand("compress", "compress a raw tensor into a container");
  StrategyArgs cx_strategy;
  double tau = 0;
  cx->add_option("-i,--input", input)->required();
  cx->add_option("-o,--output", output)->required();
  cx->add_option("--models", models);
  cx->add_option("--steps", steps);
  cx->add_option("--tau", tau, "error bound as NRMSE-equivalent (0: none)");
  cx->add_option("--seed", seed, "sampler seed");
  cx->add_option("--tile", tile);
  cx_strategy.add(cx);

  // decompress
  auto* dx = app.add_subcommand("decompress", "reconstruct a raw tensor from a container");
  dx->add_option("-i,--input", input)->required();
  dx->add_option("-o,--output", output)->required();
  dx->add_option("--models", models);

  // eval
  auto* ev = app.add_subcommand("eval", "compare a reconstruction with the original");
  std::string recon, container, frames_csv;
  ev->add_option("--original", input)->required();
  ev->add_option("--reconstructed", recon)->required();
  ev->add_option("--container", container, "container for size accounting");
  ev->add_option("--frames", frames_csv, "per-frame NRMSE CSV output");

  // sweep
  auto* sw = app.add_subcommand("sweep", "evaluate a grid of strategies, step counts and bounds");
  std::vector<std::string> sw_kinds = {"interpolation"};
  std::vector<int> sw_intervals = {3}, sw_k = {6}, sw_steps = {32};
  std::vector<double> sw_taus = {0.0};
  sw->add_option("-i,--input", input)->required();
  sw->add_option("-o,--output", output, "CSV path (default: stdout)");
  sw->add_option("--models", models);
  sw->add_option("--strategy", sw_kinds)->check(CLI::IsMember({"prediction", "interpolation", "mixed"}))->delimiter(',');
  sw->add_option("--interval", sw_intervals)->delimiter(',');
  sw->add_option("--k", sw_k)->delimiter(',');
  sw->add_option("--steps", sw_steps)->delimiter(',');
  sw->add_option("--tau", sw_taus)->delimiter(',');
  sw->add_option("--seed", seed);
  sw->add_option("--tile", tile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const Preset P = preset(paper_mode);
    const ModelDir md(models);
    if (!tile) tile = P.tile;

    if (*synth) {
      sc.kind = parse_synth_kind(synth_kind);
      const ScalarField f = synth_data(sc);
      write_raw_tensor(synth_out, f);
      std::cout << "output,vars,times,height,width,dtype_bits,autocorrelation\n";
      std::printf("%s,%zu,%zu,%zu,%zu,%d,%.6f\n", synth_out.c_str(), f.vars, f.times, f.height, f.width, f.dtype_bits,
                  f.times > 1 ? temporal_autocorrelation(f) : 1.0);
    } else if (*tt) {
      const ScalarField x = read_raw_tensor(input);
      RDTrainConfig rc = P.rd;
      if (iters) {
        // Keep the lambda and lr milestones at the same fractions of the run.
        rc.lambda_double_at = std::max(1, static_cast<int>(1.0 * rc.lambda_double_at * iters / rc.total_iters));
        rc.lr_decay_every = std::max(1, static_cast<int>(1.0 * rc.lr_decay_every * iters / rc.total_iters));
        rc.total_iters = iters;
      }
      if (batch) rc.batch = batch;
      if (seed_set) rc.seed = seed;
      auto res = train_stage1(FrameCorpus::from_field(x), P.codec, rc, note);
      md.ensure();
      nn::write_file(md.codec_path(), res.model.save());
      note("wrote " + md.codec_path() + " (val loss " + std::to_string(res.init_val_loss) + " -> " +
          std::to_string(res.final_val_loss) + ")");
      print_trace(res.trace);
    } else if (*td) {
      const ScalarField x = read_raw_tensor(input);
      require(md.has(md.codec_path()), "missing " + md.codec_path() + " (run train-transform first)");
      const CodecModel codec = CodecModel::load(nn::read_file(md.codec_path()));
      Preset p = P;
      p.denoiser.latent_channels = codec.config().latent_channels;
      if (iters) p.diffusion.iters = iters;
      if (batch) p.diffusion.batch = batch;
      if (lr > 0) p.diffusion.lr = lr;
      if (seed_set) p.diffusion.seed = seed;
      if (td->count("--strategy") || td->count("--interval") || td->count("--k"))
        p.diffusion.strategies = {td_strategy.get()};
      const auto tracks = latent_tracks(x, codec, tile, threads);
      Rng rng(p.diffusion.seed);
      Denoiser d(p.denoiser, rng);
      const auto trace = train_denoiser(d, tracks, p.diffusion, note);
      md.ensure();
      nn::write_file(md.denoiser_path(), d.save({{"steps", 0}}));
      note("wrote " + md.denoiser_path());
      print_trace(trace);
    } else if (*ft) {
      const ScalarField x = read_raw_tensor(input);
      const ModelBundle mb = md.bundle(md.denoiser_path(), false);
      if (steps < 1 || steps > mb.denoiser.cfg.schedule.T)
        throw ConfigError("--steps must be in [1, " + std::to_string(mb.denoiser.cfg.schedule.T) + "]");
      DiffusionTrainConfig dc = finetune_config(P, iters);
      if (batch) dc.batch = batch;
      if (seed_set) dc.seed = seed;
      Denoiser d = mb.denoiser.clone();
      const auto tracks = latent_tracks(x, mb.codec, tile, threads);
      const auto trace = finetune_reduced_steps(d, steps, tracks, dc, note);
      nn::write_file(md.denoiser_path(steps), d.save({{"steps", steps}}));
      note("wrote " + md.denoiser_path(steps));
      print_trace(trace);
    } else if (*fb) {
      const ScalarField x = read_raw_tensor(input);
      const ModelBundle mb = md.bundle_for_steps(steps, false);
      const ResidualBasis b = fit_residual_basis(x, mb, fb_strategy.get(), steps, tile, threads);
      nn::write_file(md.basis_path(), b.save());
      note("wrote " + md.basis_path());
      std::cout << "component,eigenvalue\n";
      for (size_t i = 0; i < b.eigenvalues.size(); ++i) std::printf("%zu,%.10g\n", i, b.eigenvalues[i]);
    } else if (*cx) {
      const ScalarField x = read_raw_tensor(input);
      const ModelBundle mb = md.bundle_for_steps(steps, tau > 0);
      CompressOptions o;
      o.strategy = cx_strategy.get();
      o.steps = steps;
      o.tau_nrmse = tau;
      o.seed = seed;
      o.tile = tile;
      o.threads = threads;
      const CompressResult r = compress(x, mb, o);
      if (!r.bound.holds()) throw BoundError("bound check failed after correction");
      nn::write_file(output, r.bytes);
      const double raw = static_cast<double>(x.data.size()) * x.dtype_bits / 8;
      std::cout << "output,strategy,steps,tau,ratio,file_ratio,size_L,size_G,file_bytes,keyframes,fallback_blocks,"
                   "seconds\n";
      std::printf("%s,%s,%d,%.6g,%.6g,%.6g,%zu,%zu,%zu,%zu,%zu,%.3f\n", output.c_str(), o.strategy.label().c_str(),
                  steps, tau, r.acct.ratio(raw), raw / r.bytes.size(), r.acct.size_L(), r.acct.size_G(),
                  r.bytes.size(), make_layout(r.container.header, mb.codec).plan.stored.size(), r.bound.fallback,
                  r.seconds);
    } else if (*dx) {
      const auto bytes = nn::read_file(input);
      const Container c = read_container(bytes);
      const ModelBundle mb = md.bundle_for(c.header);
      const DecodeResult d = decompress(bytes, mb, threads);
      write_raw_tensor(output, d.xg);
      std::cout << "output,vars,times,height,width,seconds,correction_seconds\n";
      std::printf("%s,%zu,%zu,%zu,%zu,%.3f,%.3f\n", output.c_str(), d.xg.vars, d.xg.times, d.xg.height, d.xg.width,
                  d.seconds, d.bound_seconds);
    } else if (*ev) {
      const ScalarField x = read_raw_tensor(input), y = read_raw_tensor(recon);
      if (x.dims() != y.dims()) throw DataError("eval: original and reconstruction differ in shape");
      double max_abs = 0;
      for (size_t i = 0; i < x.data.size(); ++i) max_abs = std::max(max_abs, std::abs(x.data[i] - y.data[i]));
      const double e = nrmse(x, y);
      std::cout << "nrmse,max_abs_error,psnr_db,ratio,file_ratio,size_L,size_G,file_bytes\n";
      std::printf("%.8g,%.8g,%.4f", e, max_abs, e > 0 ? -20 * std::log10(e) : INFINITY);
      if (!container.empty()) {
        const auto bytes = nn::read_file(container);
        Accounting a;
        read_container(bytes, &a);
        const double raw = static_cast<double>(x.data.size()) * x.dtype_bits / 8;
        std::printf(",%.6g,%.6g,%zu,%zu,%zu\n", a.ratio(raw), raw / bytes.size(), a.size_L(), a.size_G(), bytes.size());
      } else {
        std::printf(",,,,,\n");
      }
      if (!frames_csv.empty()) {
        std::ofstream f(frames_csv);
        if (!f) throw DataError("cannot write " + frames_csv);
        f << "frame,nrmse\n";
        for (size_t t = 0; t < x.times; ++t) f << t << "," << frame_nrmse(x, y, t) << "\n";
      }
    } else if (*sw) {
      const ScalarField x = read_raw_tensor(input);
      SweepGrid g;
      for (auto& k : sw_kinds) {
        const StrategyKind kind = parse_strategy(k);
        if (kind == StrategyKind::interpolation)
          for (int d : sw_intervals) g.strategies.push_back({kind, d, 0});
        else
          for (int k2 : sw_k) g.strategies.push_back({kind, 0, k2});
      }
      g.steps = sw_steps;
      g.taus = sw_taus;
      g.seed = seed;
      g.tile = tile;
      g.threads = threads;
      const bool need_basis = std::any_of(g.taus.begin(), g.taus.end(), [](double t) { return t > 0; });
      std::map<int, ModelBundle> bundles;
      auto bundle_for = [&](int s) -> const ModelBundle& {
        auto it = bundles.find(s);
        if (it == bundles.end()) it = bundles.emplace(s, md.bundle_for_steps(s, need_basis)).first;
        return it->second;
      };
      std::ofstream file;
      if (!output.empty()) {
        file.open(output);
        if (!file) throw DataError("cannot write " + output);
        file << csv_header() << "\n";
      }
      std::cout << csv_header() << "\n";
      const auto rows = eval_sweep(x, g, bundle_for, [&](const EvalRow& r) {
        std::cout << csv_row(r) << std::endl;
        if (file) file << csv_row(r) << std::endl;
      });
      for (auto& r : rows)
        if (!r.bound_ok) throw BoundError("sweep: bound violated for " + r.strategy);
    }
  } catch (const BoundError& e) {
    std::cerr << "bound error: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: malformed checkpoint manifest: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
