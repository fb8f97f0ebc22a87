// clipin: corpus generation, training, ablation, evaluation and checks.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "clipin/checkpoint.hpp"
#include "clipin/data.hpp"
#include "clipin/error.hpp"
#include "clipin/eval.hpp"
#include "clipin/gradcheck.hpp"
#include "clipin/train.hpp"

namespace fs = std::filesystem;
using namespace clipin;

namespace {

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string hex(std::uint64_t x) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

// Per-file hashes of a directory tree (sorted relative paths), plus one
// combined digest over names and contents.
std::pair<std::map<std::string, std::string>, std::string> hash_tree(const fs::path& dir,
                                                                     const std::string& skip) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel != skip) files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::string> out;
  std::uint64_t all = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const std::uint64_t h = fnv1a(read_file(dir / f));
    out[f] = hex(h);
    all = fnv1a(f + ":" + hex(h) + "\n", all);
  }
  return {out, hex(all)};
}

void write_manifest(const fs::path& out, const std::string& command, const std::vector<std::string>& argv,
                    const TrainConfig& cfg) {
  auto [files, digest] = hash_tree(out, "manifest.json");
  nlohmann::json j;
  j["command"] = command;
  j["argv"] = argv;
  j["seed"] = cfg.seed;
  j["config"] = config_echo(cfg);
  j["files"] = files;
  j["digest"] = digest;
  std::ofstream(out / "manifest.json") << j.dump(2) << '\n';
}

std::string flag_name(const std::string& key) {
  std::string s = key;
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

// Every TrainConfig key as a CLI flag; values are applied after --config so
// that command-line settings win.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app, const std::vector<std::string>& skip = {}) {
    app->add_option("--config", config_path, "key = value config file");
    for (const auto& key : config_keys()) {
      if (std::find(skip.begin(), skip.end(), key) != skip.end()) continue;
      app->add_option_function<std::string>(
          flag_name(key), [this, key](const std::string& v) { values[key] = v; }, "config: " + key);
    }
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& [k, v] : values) set_config_value(cfg, k, v);
    cfg.validate();
    return cfg;
  }
};

TrainConfig config_from_echo(const std::string& echo) {
  TrainConfig cfg;
  std::istringstream in(echo);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    set_config_value(cfg, line.substr(0, eq), line.substr(eq + 3));
  }
  return cfg;
}

std::vector<std::string> g_argv;

int cmd_gen_data(const ConfigFlags& flags, std::uint64_t seed, bool seed_set, std::size_t n, bool n_set,
                 const fs::path& out) {
  TrainConfig cfg = flags.resolve();
  if (seed_set) cfg.corpus_seed = seed;
  if (n_set) cfg.n_samples = n;
  const Dataset d = generate_corpus(cfg.latent_spec(), cfg.n_samples, cfg.corpus_seed);
  fs::create_directories(out);
  write_corpus(d, out, cfg.corpus_seed);
  const std::string digest = hash_tree(out, "manifest.json").second;
  write_manifest(out, "gen-data", g_argv, cfg);
  std::cout << "samples\t" << d.size() << "\ncorpus_hash\t" << digest << '\n';
  return 0;
}

int cmd_train(const ConfigFlags& flags, const fs::path& out, const std::string& resume, bool quiet) {
  TrainConfig cfg = flags.resolve();
  RunOptions run;
  run.out_dir = out;
  run.quiet = quiet;
  if (!resume.empty()) run.resume_from = fs::path(resume);
  const TrainResult r = run_training(cfg, run);
  const double last = r.trace.empty() ? 0.0 : r.trace.back().loss.total;
  std::cout << "steps\t" << r.state.step << "\nfinal_total\t" << last << "\ncheckpoint\t"
            << (r.checkpoints.empty() ? "" : r.checkpoints.back().string()) << '\n';
  write_manifest(out, "train", g_argv, cfg);
  return 0;
}

struct EvalInputs {
  TrainConfig cfg;
  ModelState state;
  Dataset dataset;
};

EvalInputs load_for_eval(const ConfigFlags& flags, const std::string& ckpt, bool random_init) {
  EvalInputs in;
  if (!ckpt.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt);
    in.cfg = config_from_echo(loaded.info.config_echo);
    if (!flags.config_path.empty()) apply_config_file(in.cfg, flags.config_path);
    for (const auto& [k, v] : flags.values) set_config_value(in.cfg, k, v);
    in.state = std::move(loaded.state);
    in.dataset = make_dataset(in.cfg);
  } else {
    if (!random_init) throw Error(ErrorCode::InvalidConfig, "pass --ckpt or --random-init");
    in.cfg = flags.resolve();
    in.dataset = make_dataset(in.cfg);
    in.state = init_model_for(in.cfg, in.dataset);
  }
  return in;
}

int cmd_eval_probe(const ConfigFlags& flags, const std::string& ckpt, bool random_init, const std::string& branch,
                   const fs::path& out) {
  EvalInputs in = load_for_eval(flags, ckpt, random_init);
  EvalOptions opts;
  opts.branch = parse_branch(branch);
  opts.probe.seed = in.cfg.seed;
  const EvalReport report = evaluate_model(in.state, in.dataset, opts);
  std::cout << report.to_tsv();
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(out / "eval_report.tsv") << report.to_tsv();
    std::ofstream(out / "eval_report.jsonl", std::ios::app) << report.to_jsonl() << '\n';
    write_manifest(out, "eval-probe", g_argv, in.cfg);
  }
  return 0;
}

int cmd_eval_zsc(const ConfigFlags& flags, const std::string& ckpt, bool random_init, const fs::path& out) {
  EvalInputs in = load_for_eval(flags, ckpt, random_init);
  BitMatrix labels;
  std::vector<int> primary;
  for (const auto& s : in.dataset.samples) {
    labels.push_back(s.labels);
    primary.push_back(s.primary);
  }
  const TokenBatch prompts = class_prompts(in.dataset.codebook(), in.dataset.spec.classes, in.state.dims.max_text_len);
  const ZscResult z = score_zero_shot(zero_shot_classify(in.state, stack_images(in.dataset), prompts), labels, primary);
  std::ostringstream tsv;
  tsv.precision(17);
  tsv << "zsc_top1\tchance\tmean_auc\tmap\n"
      << z.top1 << '\t' << 1.0 / static_cast<double>(in.dataset.spec.classes) << '\t' << z.mean_auc << '\t' << z.map
      << '\n';
  std::cout << tsv.str();
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(out / "zsc_report.tsv") << tsv.str();
    write_manifest(out, "eval-zsc", g_argv, in.cfg);
  }
  return 0;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& branch, const fs::path& out) {
  TrainConfig cfg = flags.resolve();
  EvalOptions opts;
  opts.branch = parse_branch(branch);
  opts.probe.seed = cfg.seed;
  const auto rows = run_ablation_suite(cfg, opts, out);
  const std::string tsv = ablation_tsv(rows);
  std::cout << tsv;
  if (!out.empty()) {
    std::ofstream(out / "ablation.tsv") << tsv;
    write_manifest(out, "ablate", g_argv, cfg);
  }
  return 0;
}

int cmd_grad_check(const std::string& dims, std::size_t trials, std::uint64_t seed, std::size_t coords,
                   bool coords_set, std::size_t batch, double tolerance, const fs::path& out) {
  GradCheckOptions opts;
  opts.dims = dims;
  opts.batch = batch;
  opts.coords_per_tensor = coords_set ? coords : (dims == "tiny" ? 0 : 2);
  std::ostringstream tsv;
  tsv.precision(6);
  tsv << "loss\ttrials\tcoordinates\tmax_rel_error\tworst\n";
  bool ok = true;
  for (LossKind kind : kAllLossKinds) {
    double worst = 0.0;
    std::string where;
    std::size_t count = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      opts.seed = seed + t;
      const GradCheckRow row = grad_check(kind, opts);
      count += row.coordinates;
      if (row.max_rel_error >= worst) {
        worst = row.max_rel_error;
        where = row.worst + "@seed" + std::to_string(opts.seed);
      }
    }
    ok = ok && worst < tolerance;
    tsv << loss_kind_name(kind) << '\t' << trials << '\t' << count << '\t' << worst << '\t' << where << '\n';
  }
  std::cout << tsv.str();
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(out / "grad_check.tsv") << tsv.str();
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.dims = dims;
    write_manifest(out, "grad-check", g_argv, cfg);
  }
  if (!ok) std::cerr << "grad-check: relative error above " << tolerance << '\n';
  return ok ? 0 : 2;
}

int cmd_inspect(const std::string& ckpt) {
  const CheckpointInfo info = read_checkpoint_info(ckpt);
  const auto& d = info.dims;
  std::cout << "version\t" << info.version << "\nstep\t" << info.step << "\nadam_t\t" << info.adam_t
            << "\ncorpus_seed\t" << info.corpus_seed << "\nshared_pre\t" << (info.shared_pre ? "true" : "false")
            << "\ndims\timage_side=" << d.image_side << " channels=" << d.channels << " vocab=" << d.vocab_size
            << " max_text_len=" << d.max_text_len << " image_hidden=" << d.image_hidden << " d_enc=" << d.d_enc
            << " d_pre=" << d.d_pre << " d_cl=" << d.d_cl << " d_ncl=" << d.d_ncl
            << " bottleneck=" << d.predictor_bottleneck << "\n\n[tensors]\n";
  for (const auto& t : info.tensors) std::cout << t.name << '\t' << shape_string(t.shape) << '\n';
  std::cout << "\n[config]\n" << info.config_echo;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  g_argv.assign(argv, argv + argc);
  CLI::App app{"CLIP-style contrastive training with an online/target non-contrastive plug-in"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic paired corpus");
  ConfigFlags gen_flags;
  std::uint64_t gen_seed = 0;
  std::size_t gen_n = 0;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen_flags.attach(gen, {"seed"});

  // train
  auto* train = app.add_subcommand("train", "train a model");
  ConfigFlags train_flags;
  std::string train_out, resume;
  bool quiet = false;
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_flag("--quiet", quiet, "no progress on stderr");
  train_flags.attach(train);

  // eval-probe / eval-zsc
  auto* probe = app.add_subcommand("eval-probe", "linear probe, zero-shot and collapse report");
  ConfigFlags probe_flags;
  std::string probe_ckpt, probe_out, branch = "cl";
  bool probe_random = false;
  probe->add_option("--ckpt", probe_ckpt, "checkpoint");
  probe->add_flag("--random-init", probe_random, "evaluate an untrained model");
  probe->add_option("--branch", branch, "feature tap: encoder|pre|cl");
  probe->add_option("--out", probe_out, "output directory");
  probe_flags.attach(probe);

  auto* zsc = app.add_subcommand("eval-zsc", "prompt-based zero-shot classification");
  ConfigFlags zsc_flags;
  std::string zsc_ckpt, zsc_out;
  bool zsc_random = false;
  zsc->add_option("--ckpt", zsc_ckpt, "checkpoint");
  zsc->add_flag("--random-init", zsc_random, "evaluate an untrained model");
  zsc->add_option("--out", zsc_out, "output directory");
  zsc_flags.attach(zsc);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the four ablation rows");
  ConfigFlags ablate_flags;
  std::string ablate_out, ablate_branch = "cl";
  ablate->add_option("--out", ablate_out, "output directory");
  ablate->add_option("--branch", ablate_branch, "probe tap: encoder|pre|cl");
  ablate_flags.attach(ablate);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "analytic vs finite-difference gradients");
  std::string gc_dims = "tiny", gc_out, gc_config;
  std::size_t trials = 20, coords = 0, gc_batch = 4;
  std::uint64_t gc_seed = 0;
  double tolerance = 1e-4;
  gc->add_option("--dims", gc_dims, "dims preset: tiny|desk|paper-ratio");
  gc->add_option("--trials", trials, "random seeds to check");
  gc->add_option("--seed", gc_seed, "first seed");
  auto* coords_opt = gc->add_option("--coords", coords, "coordinates sampled per tensor (0 = all)");
  gc->add_option("--batch", gc_batch, "batch size");
  gc->add_option("--tolerance", tolerance, "max relative error");
  gc->add_option("--out", gc_out, "output directory");
  gc->add_option("--config", gc_config, "accepted for uniformity; unused");

  // inspect-ckpt
  auto* inspect = app.add_subcommand("inspect-ckpt", "print a checkpoint's tensor table and config echo");
  std::string inspect_ckpt, inspect_out, inspect_config;
  std::uint64_t inspect_seed = 0;
  inspect->add_option("ckpt", inspect_ckpt, "checkpoint file")->required();
  inspect->add_option("--seed", inspect_seed, "accepted for uniformity; unused");
  inspect->add_option("--config", inspect_config, "accepted for uniformity; unused");
  inspect->add_option("--out", inspect_out, "accepted for uniformity; unused");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      return cmd_gen_data(gen_flags, gen_seed, gen->count("--seed") > 0, gen_n, gen->count("--n") > 0, gen_out);
    }
    if (*train) return cmd_train(train_flags, train_out, resume, quiet);
    if (*probe) return cmd_eval_probe(probe_flags, probe_ckpt, probe_random, branch, probe_out);
    if (*zsc) return cmd_eval_zsc(zsc_flags, zsc_ckpt, zsc_random, zsc_out);
    if (*ablate) return cmd_ablate(ablate_flags, ablate_branch, ablate_out);
    if (*gc) return cmd_grad_check(gc_dims, trials, gc_seed, coords, coords_opt->count() > 0, gc_batch, tolerance, gc_out);
    if (*inspect) return cmd_inspect(inspect_ckpt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
