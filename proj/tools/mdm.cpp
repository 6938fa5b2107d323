// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mdm/checkpoint.hpp"
#include "mdm/colormap.hpp"
#include "mdm/config_io.hpp"
#include "mdm/dataio.hpp"
#include "mdm/degrade.hpp"
#include "mdm/eval.hpp"
#include "mdm/model.hpp"
#include "mdm/png.hpp"
#include "mdm/synth.hpp"
#include "mdm/train.hpp"

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int default_threads() {
  if (const char* env = std::getenv("MDM_BENCH_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

/// Runs job(i) for i in [0, n) on up to `threads` workers; the first exception is rethrown.
template <typename F>
void parallel_for(int n, int threads, F job) {
  const int workers = std::max(1, std::min(threads, n));
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string sample_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

std::pair<int, int> parse_cell(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw UsageError("--query expects 'row,col'");
  try {
    return {std::stoi(s.substr(0, comma)), std::stoi(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw UsageError("--query expects 'row,col'");
  }
}

// ---- gen-synth ----

struct GenSynthArgs {
  int count = 1;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<int> rgb_size{960, 1280};
  std::vector<int> stereo_size{720, 960};
  int max_disparity = 128;
};

void run_gen_synth(const GenSynthArgs& a, int threads) {
  if (a.count < 1) throw UsageError("--count must be >= 1");
  mdm::GenerateConfig gc;
  gc.render.rgb_h = a.rgb_size[0];
  gc.render.rgb_w = a.rgb_size[1];
  gc.render.stereo_h = a.stereo_size[0];
  gc.render.stereo_w = a.stereo_size[1];
  gc.sgm.max_disparity = a.max_disparity;
  gc.sgm.validate();
  fs::create_directories(a.out);
  std::vector<double> ratios(static_cast<std::size_t>(a.count));
  parallel_for(a.count, threads, [&](int i) {
    const auto g = mdm::generate_sample(a.seed, static_cast<std::uint64_t>(i), gc);
    const auto m = mdm::write_sample(fs::path(a.out) / sample_id(i), sample_id(i), a.seed, g);
    ratios[static_cast<std::size_t>(i)] = m.invalid_ratio;
  });
  std::ostringstream csv;
  mdm::write_mask_histogram_csv(csv, mdm::mask_histogram(ratios));
  mdm::bin::write_file_atomic(fs::path(a.out) / "mask_histogram.csv", csv.str());
}

// ---- corrupt ----

struct CorruptArgs {
  std::string in;
  std::string level;
  std::uint64_t seed = 0;
  std::string out;
  std::string levels;
};

void run_corrupt(const CorruptArgs& a, int threads) {
  const auto level = mdm::parse_level(a.level);
  const auto table = a.levels.empty() ? mdm::default_level_table() : mdm::load_level_table(a.levels);
  const std::string suffix = "corrupt_" + std::string(mdm::level_name(level)) + ".dmap";
  if (fs::is_directory(a.in)) {
    const auto samples = mdm::list_samples(a.in);
    if (samples.empty()) throw std::runtime_error("no samples in '" + a.in + "'");
    parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
      const auto& dir = samples[static_cast<std::size_t>(i)];
      const auto m = mdm::read_manifest(dir);
      const auto clean = mdm::read_dmap<mdm::DepthMap>(dir / m.perfect_depth);
      const auto seed = mdm::Rng::derive(a.seed, static_cast<std::uint64_t>(i));
      const fs::path target = a.out.empty() ? dir / suffix : fs::path(a.out) / (m.id + "_" + suffix);
      if (!a.out.empty()) fs::create_directories(a.out);
      mdm::write_dmap(target, mdm::corrupt(clean, level, seed, table));
    });
    return;
  }
  const auto clean = mdm::read_dmap<mdm::DepthMap>(a.in);
  fs::path target = a.out;
  if (target.empty()) target = fs::path(a.in).replace_extension("").string() + "." + suffix;
  mdm::write_dmap(target, mdm::corrupt(clean, level, a.seed, table));
}

// ---- train-toy ----

struct TrainArgs {
  std::string data;
  std::int64_t steps = 500;
  std::uint64_t seed = 0;
  std::string config;
  std::string ckpt_out;
  std::string resume;
  std::string loss_csv;
  int max_samples = 0;
};

std::vector<mdm::TrainSample> load_dataset(const std::string& root, int max_samples) {
  auto dirs = mdm::list_samples(root);
  if (dirs.empty()) throw std::runtime_error("no samples in '" + root + "'");
  if (max_samples > 0 && static_cast<int>(dirs.size()) > max_samples) dirs.resize(static_cast<std::size_t>(max_samples));
  std::vector<mdm::TrainSample> data;
  for (const auto& dir : dirs) {
    const auto m = mdm::read_manifest(dir);
    data.push_back({mdm::read_png(dir / m.rgb), mdm::read_dmap<mdm::DepthMap>(dir / m.sensor_depth),
                    mdm::read_dmap<mdm::DepthMap>(dir / m.perfect_depth)});
  }
  return data;
}

void run_train(const TrainArgs& a, int threads) {
  mdm::RunConfig rc = a.config.empty() ? mdm::RunConfig{} : mdm::load_run_config(a.config);
  rc.train.steps = a.steps;
  rc.train.seed = a.seed;
  rc.train.threads = threads;
  const auto data = load_dataset(a.data, a.max_samples);
  mdm::TrainState state;
  if (!a.resume.empty()) {
    auto ck = mdm::load_checkpoint(a.resume);
    if (!(ck.config == rc.model) && !a.config.empty())
      throw std::runtime_error("resume checkpoint was trained with a different model config");
    rc.model = ck.config;
    state.params = std::move(ck.params);
    state.optim = ck.optimizer ? std::move(*ck.optimizer) : mdm::AdamState::zeros_like(state.params);
  } else {
    state.params = mdm::init_params(rc.model, mdm::Rng::derive(a.seed, 0xC0FFEEull));
    state.optim = mdm::AdamState::zeros_like(state.params);
  }
  const std::string csv_path = a.loss_csv.empty() ? a.ckpt_out + ".loss.csv" : a.loss_csv;
  std::ostringstream csv;
  mdm::write_loss_csv_header(csv);
  const auto trace = mdm::train_loop(data, rc.model, rc.train, state,
                                     [&](const mdm::TraceRow& r) { mdm::write_loss_csv_row(csv, r); });
  mdm::bin::write_file_atomic(csv_path, csv.str());
  mdm::save_checkpoint(a.ckpt_out, {rc.model, state.params, state.optim});
  if (!trace.rows.empty())
    std::printf("trained %zu steps: loss %.6g -> %.6g\n", trace.rows.size(), trace.rows.front().loss,
                trace.rows.back().loss);
}

// ---- infer ----

struct InferArgs {
  std::string ckpt;
  std::string rgb;
  std::string depth;
  std::optional<double> mask_ratio;
  std::uint64_t seed = 0;
  std::string out;
};

struct PreparedInput {
  mdm::RgbImage rgb;
  std::optional<mdm::DepthMap> depth;
  mdm::TokenMask mask;
};

/// Resizes to the model input and picks the token mask: completion mode (only empty
/// patches masked) unless a mask ratio is given.
PreparedInput prepare_input(const mdm::RgbImage& rgb, const mdm::DepthMap* depth, const mdm::ModelConfig& cfg,
                            std::optional<double> mask_ratio, std::uint64_t seed) {
  PreparedInput p;
  p.rgb = rgb.height() == cfg.image_h && rgb.width() == cfg.image_w ? rgb
                                                                     : mdm::bilinear_resize(rgb, cfg.image_h, cfg.image_w);
  if (depth) {
    if (!depth->same_shape(rgb)) throw std::runtime_error("depth and RGB sizes differ");
    p.depth = mdm::nearest_resize(*depth, cfg.image_h, cfg.image_w);
    const auto pv = mdm::patch_validity(mdm::validity_of(*p.depth), cfg.patch);
    if (mask_ratio) {
      mdm::MaskingConfig mc;
      mc.patch = cfg.patch;
      mc.ratio_lo = mc.ratio_hi = *mask_ratio;
      mdm::Rng rng(seed);
      p.mask = mdm::sample_token_mask(pv, *mask_ratio, mc, rng);
    } else {
      p.mask = mdm::invalid_token_mask(pv);
    }
  }
  return p;
}

void run_infer(const InferArgs& a) {
  if (a.mask_ratio && !(*a.mask_ratio > 0.0 && *a.mask_ratio <= 1.0)) throw UsageError("--mask-ratio must be in (0, 1]");
  const auto ck = mdm::load_checkpoint(a.ckpt);
  const auto rgb = mdm::read_png(a.rgb);
  std::optional<mdm::DepthMap> depth;
  if (!a.depth.empty()) depth = mdm::read_dmap<mdm::DepthMap>(a.depth);
  const auto in = prepare_input(rgb, depth ? &*depth : nullptr, ck.config, a.mask_ratio, a.seed);
  const auto r = mdm::forward(in.rgb, in.depth ? &*in.depth : nullptr, in.mask, ck.params, ck.config);
  mdm::DepthMap pred = r.prediction;
  if (!pred.same_shape(rgb)) pred = mdm::bilinear_resize(pred, rgb.height(), rgb.width());
  mdm::write_dmap(a.out + ".dmap", pred);
  mdm::write_png(a.out + ".png", mdm::colorize_depth(pred));
}

// ---- eval ----

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string align = "none";
  std::string out;
  std::string sample;
};

void run_eval(const EvalArgs& a) {
  const auto mode = mdm::parse_align(a.align);
  if (!fs::exists(a.gt)) throw std::runtime_error("ground truth '" + a.gt + "' not found");
  const auto pred = mdm::read_dmap<mdm::DepthMap>(a.pred);
  const auto gt = mdm::read_dmap<mdm::DepthMap>(a.gt);
  if (!pred.same_shape(gt)) throw std::runtime_error("prediction and ground truth sizes differ");
  const auto report = mdm::depth_metrics(mdm::align(pred, gt, mode), gt);
  std::ostringstream csv;
  mdm::write_metrics_header(csv);
  mdm::write_metrics_row(csv, a.sample.empty() ? fs::path(a.pred).stem().string() : a.sample, mode, report);
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    mdm::bin::write_file_atomic(a.out, csv.str());
  }
}

// ---- attn-vis ----

struct AttnArgs {
  std::string ckpt;
  std::string sample;
  std::string query;
  std::string out;
};

void run_attn_vis(const AttnArgs& a) {
  const auto [row, col] = parse_cell(a.query);
  const auto ck = mdm::load_checkpoint(a.ckpt);
  const auto m = mdm::read_manifest(a.sample);
  const auto rgb = mdm::read_png(fs::path(a.sample) / m.rgb);
  const auto depth = mdm::read_dmap<mdm::DepthMap>(fs::path(a.sample) / m.sensor_depth);
  const auto in = prepare_input(rgb, &depth, ck.config, std::nullopt, 0);
  if (ck.config.encoder_layers < 1) throw std::runtime_error("model has no attention layers");
  const auto r = mdm::forward(in.rgb, &*in.depth, in.mask, ck.params, ck.config);
  const auto heat = mdm::extract_attention(r.attention, row, col, rgb.height(), rgb.width());
  mdm::write_png(a.out, mdm::overlay_heatmap(rgb, heat.map));
  mdm::write_dmap(fs::path(a.out).replace_extension(".dmap"), heat.map);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdm: masked depth modeling toolkit"};
  app.require_subcommand(1);
  int threads = default_threads();
  app.add_option("--threads", threads, "Worker threads (default: $MDM_BENCH_THREADS or 1)")->check(CLI::PositiveNumber);

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Render a synthetic RGB-D dataset with SGM sensor depth");
  gen_cmd->add_option("--count", gen.count, "Number of samples")->required();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->required();
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--rgb-size", gen.rgb_size, "RGB height width")->expected(2);
  gen_cmd->add_option("--stereo-size", gen.stereo_size, "Stereo height width")->expected(2);
  gen_cmd->add_option("--max-disparity", gen.max_disparity, "SGM disparity range");

  CorruptArgs cor;
  auto* cor_cmd = app.add_subcommand("corrupt", "Degrade depth maps at a difficulty level");
  cor_cmd->add_option("--in", cor.in, "Depth DMAP or dataset directory")->required();
  cor_cmd->add_option("--level", cor.level, "easy|medium|hard|extreme")
      ->required()
      ->check(CLI::IsMember({"easy", "medium", "hard", "extreme"}));
  cor_cmd->add_option("--seed", cor.seed, "Random seed")->required();
  cor_cmd->add_option("--out", cor.out, "Output file (or directory for a dataset)");
  cor_cmd->add_option("--levels", cor.levels, "Level table file");

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train-toy", "Train the toy model");
  tr_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  tr_cmd->add_option("--steps", tr.steps, "Total optimizer steps")->required()->check(CLI::NonNegativeNumber);
  tr_cmd->add_option("--seed", tr.seed, "Random seed")->required();
  tr_cmd->add_option("--config", tr.config, "Run config JSON");
  tr_cmd->add_option("--ckpt-out", tr.ckpt_out, "Checkpoint to write")->required();
  tr_cmd->add_option("--resume", tr.resume, "Checkpoint to continue from");
  tr_cmd->add_option("--loss-csv", tr.loss_csv, "Loss trace CSV (default: <ckpt-out>.loss.csv)");
  tr_cmd->add_option("--max-samples", tr.max_samples, "Use only the first N samples");

  InferArgs inf;
  auto* inf_cmd = app.add_subcommand("infer", "Predict dense depth");
  inf_cmd->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
  inf_cmd->add_option("--rgb", inf.rgb, "RGB PNG")->required();
  inf_cmd->add_option("--depth", inf.depth, "Input depth DMAP (omit for RGB-only)");
  inf_cmd->add_option("--mask-ratio", inf.mask_ratio, "Mask this fraction of depth tokens");
  inf_cmd->add_option("--seed", inf.seed, "Seed for --mask-ratio");
  inf_cmd->add_option("--out", inf.out, "Output prefix (writes .dmap and .png)")->required();

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Depth metrics as CSV");
  ev_cmd->add_option("--pred", ev.pred, "Predicted depth DMAP")->required();
  ev_cmd->add_option("--gt", ev.gt, "Ground-truth depth DMAP")->required();
  ev_cmd->add_option("--align", ev.align, "none|affine|scale|disparity")
      ->check(CLI::IsMember({"none", "affine", "scale", "disparity"}));
  ev_cmd->add_option("--out", ev.out, "CSV file (default: stdout)");
  ev_cmd->add_option("--sample", ev.sample, "Sample name for the CSV row");

  AttnArgs at;
  auto* at_cmd = app.add_subcommand("attn-vis", "Attention heatmap of one depth token");
  at_cmd->add_option("--ckpt", at.ckpt, "Checkpoint")->required();
  at_cmd->add_option("--sample", at.sample, "Sample directory")->required();
  at_cmd->add_option("--query", at.query, "Token grid cell 'row,col'")->required();
  at_cmd->add_option("--out", at.out, "Heatmap PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "mdm: usage error: %s\n", e.what());
    return 2;
  }

  try {
    if (*gen_cmd) run_gen_synth(gen, threads);
    if (*cor_cmd) run_corrupt(cor, threads);
    if (*tr_cmd) run_train(tr, threads);
    if (*inf_cmd) run_infer(inf);
    if (*ev_cmd) run_eval(ev);
    if (*at_cmd) run_attn_vis(at);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "mdm: usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    std::fprintf(stderr, "mdm: error: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
