// Command-line front end: kernel-point tools, subsampling, synthetic data,
// training, evaluation, micro-benchmarks and parameter audits.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kpx/bench.hpp"
#include "kpx/data.hpp"
#include "kpx/kernel_points.hpp"
#include "kpx/network.hpp"
#include "kpx/ply.hpp"
#include "kpx/train.hpp"

namespace {

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

// Threads are capped by KPX_THREADS; every code path here is single-threaded,
// so any cap >= 1 is honored trivially.
std::size_t thread_cap() {
  if (const char* env = std::getenv("KPX_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v >= 1) return std::size_t(v);
  }
  return 1;
}

kpx::ArchitectureConfig resolve_config(const std::string& preset,
                                       const std::string& config_path) {
  kpx::ArchitectureConfig cfg =
      preset.empty() ? kpx::ArchitectureConfig{} : kpx::preset_config(preset);
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw std::runtime_error("cannot open config " + config_path);
    nlohmann::json base = kpx::to_json(cfg);
    nlohmann::json overrides = nlohmann::json::parse(f);
    base.merge_patch(overrides);
    cfg = kpx::config_from_json(base);
  }
  cfg.finalize();
  return cfg;
}

kpx::Dataset make_synth(const kpx::ArchitectureConfig& cfg, std::size_t scenes,
                        std::size_t points, std::uint64_t seed, double noise) {
  return kpx::synth_dataset(cfg.head, scenes, points, seed, noise);
}

int cmd_kernel_init(const std::string& shells, double radius,
                    std::uint64_t seed, const std::string& out) {
  auto disp = kpx::optimize_disposition(parse_size_list(shells), radius, seed);
  kpx::save_disposition(disp, out);
  auto rep = kpx::verify_disposition(disp);
  std::cout << "K=" << disp.K() << " converged=" << (disp.converged ? 1 : 0)
            << " shell_error_max=" << rep.shell_error_max
            << " min_pairwise_distance=" << rep.min_pairwise_distance << "\n";
  return 0;
}

int cmd_kernel_check(const std::string& path) {
  auto disp = kpx::load_disposition(path);
  auto rep = kpx::verify_disposition(disp);
  std::cout << "K=" << disp.K() << " shell_error_max=" << rep.shell_error_max
            << " center_offset=" << rep.center_offset
            << " min_pairwise_distance=" << rep.min_pairwise_distance << "\n";
  const bool ok = rep.shell_error_max < 1e-6 && rep.center_offset == 0.0;
  std::cout << (ok ? "ok" : "invariants violated") << "\n";
  if (!ok) throw std::runtime_error("disposition invariants violated");
  return 0;
}

int cmd_kernel_regions(const std::string& path, std::size_t resolution,
                       const std::string& out) {
  auto disp = kpx::load_disposition(path);
  auto regions = kpx::nearest_kernel_regions(disp, resolution);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot open " + out + " for writing");
  f << "x,y,z,kernel_index\n";
  for (const auto& r : regions)
    f << r.position[0] << "," << r.position[1] << "," << r.position[2] << ","
      << r.kernel_index << "\n";
  std::cout << regions.size() << " probes written to " << out << "\n";
  return 0;
}

int cmd_subsample(const std::string& in, double cell, const std::string& out) {
  auto cloud = kpx::read_ply(in);
  auto [sub, map] = kpx::grid_subsample(cloud, cell);
  (void)map;
  kpx::write_ply(sub, out);
  std::cout << cloud.total() << " -> " << sub.total() << " points\n";
  return 0;
}

int cmd_synth(const std::string& task, std::size_t scenes, std::size_t points,
              std::uint64_t seed, double noise, const std::string& prefix) {
  kpx::HeadKind head = task == "classification" ? kpx::HeadKind::classification
                                                : kpx::HeadKind::segmentation;
  auto data = kpx::synth_dataset(head, scenes, points, seed, noise);
  for (std::size_t e = 0; e < data.scenes(); ++e) {
    auto one = kpx::slice_element(data.cloud, e);
    if (head == kpx::HeadKind::classification)
      one.labels.assign(one.total(), data.element_labels[e]);
    char name[32];
    std::snprintf(name, sizeof(name), "_%03zu.ply", e);
    kpx::write_ply(one, prefix + name);
  }
  std::cout << data.scenes() << " scenes written with prefix " << prefix
            << "\n";
  return 0;
}

int cmd_params(const std::string& arch, const std::string& config_path,
               std::size_t classes) {
  auto cfg = resolve_config(arch, config_path);
  if (classes) cfg.n_class = classes;
  kpx::Model<float> model(cfg, 0);
  auto audit = model.audit();
  std::cout << "architecture: " << cfg.name << " (" << kpx::to_string(cfg.op)
            << ", " << kpx::to_string(cfg.head) << ", " << cfg.n_class
            << " classes)\n";
  for (const auto& line : audit.by_tag)
    std::cout << "  " << line.tag << ": " << line.count << "\n";
  std::cout << "total: " << audit.total << " ("
            << double(audit.total) / 1e6 << " M)\n";
  return 0;
}

int cmd_train(const std::string& preset, const std::string& config_path,
              std::uint64_t seed, std::size_t epochs, std::size_t steps,
              std::size_t accum, std::size_t scenes, std::size_t points,
              double noise, const std::string& out, const std::string& log) {
  auto cfg = resolve_config(preset, config_path);
  cfg.n_class = kpx::kSynthClasses;
  kpx::Model<float> model(cfg, seed);
  kpx::Dataset data = make_synth(cfg, scenes, points, seed + 1, noise);
  kpx::TrainConfig tc;
  tc.epochs = epochs;
  tc.steps_per_epoch = steps;
  tc.accum_steps = accum;
  tc.batch_elements = cfg.head == kpx::HeadKind::classification ? 4 : 1;
  tc.smoothing = cfg.head == kpx::HeadKind::classification ? 0.2 : 0.0;
  tc.seed = seed;
  tc.csv_path = log;
  auto res = kpx::train_loop(model, data, tc);
  std::cout << "final epoch loss " << res.epoch_loss.back()
            << " train acc " << res.epoch_accuracy.back() << "\n";
  if (!out.empty()) {
    model.save(out);
    std::cout << "checkpoint written to " << out << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& model_path, std::uint64_t seed,
             std::size_t scenes, std::size_t points, double noise,
             std::size_t votes) {
  auto cfg = kpx::Model<float>::config_from_checkpoint(model_path);
  kpx::Model<float> model(cfg, 0);
  model.load(model_path);
  kpx::Dataset data = make_synth(cfg, scenes, points, seed, noise);
  auto m = kpx::evaluate_voting(model, data, votes);
  std::cout << "accuracy " << m.accuracy << " mAcc " << m.mean_class_accuracy
            << " mIoU " << m.mean_iou << "\n";
  return 0;
}

int cmd_bench(const std::string& op_name, const std::string& sweep,
              std::size_t n, std::size_t h, std::size_t c, std::size_t g,
              std::size_t trials, std::uint64_t seed, const std::string& out) {
  kpx::BenchOp op = kpx::bench_op_from_string(op_name);
  std::vector<std::size_t> ks;
  if (sweep.rfind("K=", 0) == 0)
    ks = parse_size_list(sweep.substr(2));
  else if (!sweep.empty())
    ks = parse_size_list(sweep);
  else
    ks = {43};
  const double radius = 2.1;
  auto scene = kpx::make_bench_scene(n, h, radius, seed);
  std::ofstream csv;
  if (!out.empty()) {
    csv.open(out);
    if (!csv) throw std::runtime_error("cannot open " + out + " for writing");
    csv << "op,N,H,C,K,G,real_pairs,op_ms,influence_ms,macs,predicted\n";
  }
  for (auto k : ks) {
    std::vector<std::size_t> shells;
    if (k == 43)
      shells = {1, 14, 28};
    else if (k < 2)
      throw std::runtime_error("sweep K must be >= 2");
    else
      shells = {1, k - 1};
    auto disp = kpx::optimize_disposition(shells, radius, seed);
    auto r = kpx::bench_operator<float>(op, scene, disp, c, g, trials, seed);
    std::cout << kpx::to_string(op) << " K=" << r.K << " median "
              << r.op_ms << " ms, influence " << r.influence_ms
              << " ms, macs " << r.macs << " (predicted " << r.predicted
              << ")\n";
    if (csv)
      csv << kpx::to_string(op) << "," << r.N << "," << r.H << "," << r.C
          << "," << r.K << "," << r.G << "," << r.real_pairs << "," << r.op_ms
          << "," << r.influence_ms << "," << r.macs << "," << r.predicted
          << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  (void)thread_cap();
  CLI::App app{"kernel-point convolution toolkit"};
  app.require_subcommand(1);

  auto* kernel = app.add_subcommand("kernel", "kernel disposition tools");
  kernel->require_subcommand(1);
  std::string shells = "1,14,28", kfile, kout = "kernel.txt", rout =
      "regions.csv";
  double kradius = 2.1;
  std::uint64_t kseed = 42;
  std::size_t resolution = 32;
  auto* kinit = kernel->add_subcommand("init", "optimize a disposition");
  kinit->add_option("--shells", shells, "comma-separated shell counts");
  kinit->add_option("--radius", kradius, "kernel sphere radius");
  kinit->add_option("--seed", kseed, "random seed");
  kinit->add_option("--out", kout, "output file");
  auto* kcheck = kernel->add_subcommand("check", "verify a disposition file");
  kcheck->add_option("file", kfile, "disposition file")->required();
  auto* kregions =
      kernel->add_subcommand("regions", "nearest-kernel region probe");
  kregions->add_option("file", kfile, "disposition file")->required();
  kregions->add_option("--resolution", resolution, "probe grid resolution");
  kregions->add_option("--out", rout, "output CSV");

  std::string sin, sout = "subsampled.ply";
  double cell = 0.04;
  auto* sub = app.add_subcommand("subsample", "grid-subsample a PLY cloud");
  sub->add_option("--in", sin, "input PLY")->required();
  sub->add_option("--cell", cell, "grid cell size");
  sub->add_option("--out", sout, "output PLY");

  std::string stask = "segmentation", sprefix = "synth";
  std::size_t sscenes = 4, spoints = 400;
  std::uint64_t sseed = 0;
  double snoise = 0.0;
  auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
  synth->add_option("--task", stask, "segmentation or classification");
  synth->add_option("--scenes", sscenes, "scene count");
  synth->add_option("--points", spoints, "points per primitive");
  synth->add_option("--seed", sseed, "random seed");
  synth->add_option("--noise", snoise, "surface noise sigma");
  synth->add_option("--out", sprefix, "output file prefix");

  std::string parch = "kpconvx-l", pconfig;
  std::size_t pclasses = 0;
  auto* params = app.add_subcommand("params", "parameter-count audit");
  params->add_option("--arch", parch, "architecture preset");
  params->add_option("--config", pconfig, "JSON config overriding the preset");
  params->add_option("--classes", pclasses, "override class count");

  std::string tpreset = "tiny-seg", tconfig, tckpt = "model.ckpt", tlog;
  std::uint64_t tseed = 0;
  std::size_t tepochs = 30, tsteps = 50, taccum = 2, tscenes = 16,
              tpoints = 400;
  double tnoise = 0.0;
  auto* train = app.add_subcommand("train", "train on synthetic data");
  train->add_option("--preset", tpreset, "architecture preset");
  train->add_option("--config", tconfig, "JSON config overriding the preset");
  train->add_option("--seed", tseed, "random seed");
  train->add_option("--epochs", tepochs, "epochs");
  train->add_option("--steps", tsteps, "steps per epoch");
  train->add_option("--accum", taccum, "gradient accumulation steps");
  train->add_option("--scenes", tscenes, "training scenes");
  train->add_option("--points", tpoints, "points per primitive");
  train->add_option("--noise", tnoise, "surface noise sigma");
  train->add_option("--out", tckpt, "checkpoint output");
  train->add_option("--log", tlog, "metrics CSV output");

  std::string emodel;
  std::uint64_t eseed = 99;
  std::size_t escenes = 8, epoints = 400, evotes = 1;
  double enoise = 0.0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--model", emodel, "checkpoint file")->required();
  eval->add_option("--seed", eseed, "validation set seed");
  eval->add_option("--scenes", escenes, "validation scenes");
  eval->add_option("--points", epoints, "points per primitive");
  eval->add_option("--noise", enoise, "surface noise sigma");
  eval->add_option("--votes", evotes, "rotation votes");

  std::string bop = "kpconvd", bsweep = "K=43", bout;
  std::size_t bn = 4096, bh = 16, bc = 128, bg = 8, btrials = 7;
  std::uint64_t bseed = 0;
  auto* bench = app.add_subcommand("bench", "operator micro-benchmark");
  bench->set_help_flag("--help", "print help");  // frees -h for --h below
  bench->add_option("--op", bop, "operator name");
  bench->add_option("--sweep", bsweep, "K sweep, e.g. K=15,27,43");
  bench->add_option("--n", bn, "point count");
  bench->add_option("--h", bh, "neighbors per point");
  bench->add_option("--c", bc, "channels");
  bench->add_option("--g", bg, "modulation group size");
  bench->add_option("--trials", btrials, "timed trials");
  bench->add_option("--seed", bseed, "random seed");
  bench->add_option("--out", bout, "report CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (kinit->parsed()) return cmd_kernel_init(shells, kradius, kseed, kout);
    if (kcheck->parsed()) return cmd_kernel_check(kfile);
    if (kregions->parsed()) return cmd_kernel_regions(kfile, resolution, rout);
    if (sub->parsed()) return cmd_subsample(sin, cell, sout);
    if (synth->parsed())
      return cmd_synth(stask, sscenes, spoints, sseed, snoise, sprefix);
    if (params->parsed()) return cmd_params(parch, pconfig, pclasses);
    if (train->parsed())
      return cmd_train(tpreset, tconfig, tseed, tepochs, tsteps, taccum,
                       tscenes, tpoints, tnoise, tckpt, tlog);
    if (eval->parsed()) return cmd_eval(emodel, eseed, escenes, epoints,
                                        enoise, evotes);
    if (bench->parsed())
      return cmd_bench(bop, bsweep, bn, bh, bc, bg, btrials, bseed, bout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
