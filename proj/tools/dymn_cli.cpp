// dymn: profiling, training, evaluation, inference and dynamic-component
// inspection for the DyMN audio tagging family.
//
// Exit codes: 0 success, 2 usage, 3 config/data problem, 4 corrupt container.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dymn/gradcheck_suite.hpp"
#include "dymn/inspection.hpp"
#include "dymn/metrics.hpp"
#include "dymn/profiler.hpp"
#include "dymn/serialize.hpp"
#include "dymn/training.hpp"

namespace fs = std::filesystem;
using namespace dymn;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kConfig = 3;
constexpr int kCorrupt = 4;

ScheduleConfig schedule_from_kv(const KvFile& kv) {
  ScheduleConfig s;
  s.warmup_epochs = kv.get("warmup_epochs", s.warmup_epochs);
  s.constant_epochs = kv.get("constant_epochs", s.constant_epochs);
  s.rampdown_epochs = kv.get("rampdown_epochs", s.rampdown_epochs);
  s.tail_epochs = kv.get("tail_epochs", s.tail_epochs);
  s.peak_lr = kv.get("peak_lr", s.peak_lr);
  s.tau_start = kv.get("tau_start", s.tau_start);
  s.tau_end = kv.get("tau_end", s.tau_end);
  s.tau_anneal_epochs = kv.get("tau_anneal_epochs", s.tau_anneal_epochs);
  s.lambda = kv.get("lambda", s.lambda);
  s.mixup_coef = kv.get("mixup_coef", s.mixup_coef);
  s.weight_decay = kv.get("weight_decay", s.weight_decay);
  s.spectrogram_mixup = kv.get("spectrogram_mixup", s.spectrogram_mixup);
  s.waveform_mixup = kv.get("waveform_mixup", s.waveform_mixup);
  s.waveform_roll_ms = kv.get("waveform_roll_ms", s.waveform_roll_ms);
  s.gain_db = kv.get("gain_db", s.gain_db);
  s.perturb_mel = kv.get("perturb_mel", s.perturb_mel);
  s.batch_size = kv.get("batch_size", s.batch_size);
  s.epochs = kv.get("epochs", s.epochs);
  s.loader_threads = kv.get("loader_threads", s.loader_threads);
  if (!kv.has("loader_threads")) {
    if (const char* env = std::getenv("DYMN_THREADS"))
      s.loader_threads = std::max(0, std::atoi(env) - 1);  // one thread stays on compute
  }
  s.validate();
  return s;
}

MelConfig mel_from_kv(const KvFile& kv) {
  MelConfig m;
  m.n_mels = kv.get("n_mels", m.n_mels);
  m.win_ms = kv.get("win_ms", m.win_ms);
  m.hop_ms = kv.get("hop_ms", m.hop_ms);
  m.n_fft = kv.get("n_fft", m.n_fft);
  m.f_min = kv.get("f_min", m.f_min);
  m.f_max = kv.get("f_max", m.f_max);
  m.f_min_jitter = kv.get("f_min_jitter", m.f_min_jitter);
  m.f_max_jitter = kv.get("f_max_jitter", m.f_max_jitter);
  m.log_floor = kv.get("log_floor", m.log_floor);
  m.validate();
  return m;
}

// Label file: one `id,i;j;k` line per clip (semicolon-separated class
// indices); audio lives at <dir>/<id>.wav.
std::vector<ClipExample> load_dataset_dir(const std::string& dir, int n_classes) {
  const fs::path labels_path = fs::path(dir) / "labels.csv";
  std::ifstream is(labels_path);
  if (!is) throw ConfigError("no labels.csv in data directory: " + dir);
  std::vector<ClipExample> data;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "id,labels") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw ConfigError("labels.csv line " + std::to_string(lineno) + ": expected id,indices");
    ClipExample ex;
    ex.id = line.substr(0, comma);
    ex.labels.assign(static_cast<std::size_t>(n_classes), 0.0f);
    std::istringstream idx(line.substr(comma + 1));
    std::string tok;
    while (std::getline(idx, tok, ';')) {
      if (tok.empty()) continue;
      const int c = std::stoi(tok);
      if (c < 0 || c >= n_classes)
        throw ConfigError("labels.csv line " + std::to_string(lineno) + ": class index " + tok +
                          " out of range for n_classes=" + std::to_string(n_classes));
      ex.labels[static_cast<std::size_t>(c)] = 1.0f;
    }
    const fs::path wav = fs::path(dir) / (ex.id + ".wav");
    try {
      ex.wav = read_wav(wav.string());
    } catch (const IoError& e) {
      throw ConfigError(std::string("while loading dataset: ") + e.what());
    }
    data.push_back(std::move(ex));
  }
  if (data.empty()) throw ConfigError("labels.csv lists no clips: " + dir);
  return data;
}

void save_checkpoint(const std::string& path, const Model<float>& model) {
  Container c = store_to_container(model.store);
  c.meta["model_config"] = model.cfg.to_kv().dump();
  c.meta["kind"] = "dymn-checkpoint";
  save_container(path, c);
}

Model<float> load_checkpoint(const std::string& path) {
  Container c = load_container(path);
  auto it = c.meta.find("model_config");
  if (it == c.meta.end()) throw IoError("checkpoint has no embedded model config: " + path);
  ModelConfig cfg = ModelConfig::from_kv(KvFile::parse_text(it->second));
  std::mt19937 rng(0);
  Model<float> model = Model<float>::build(cfg, rng);
  container_to_store(c, model.store);
  return model;
}

struct DataFlags {
  std::string data_dir;
  int synth = 0;
  unsigned synth_seed = 2024;
  double synth_seconds = 1.0;
  double synth_noise = 0.1;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data_dir, "dataset directory (labels.csv + <id>.wav)");
    cmd->add_option("--synth", synth, "use N synthetic low-band/high-band clips instead");
    cmd->add_option("--synth-seed", synth_seed, "seed for the synthetic dataset");
    cmd->add_option("--synth-seconds", synth_seconds, "synthetic clip length in seconds");
    cmd->add_option("--synth-noise", synth_noise, "synthetic noise level");
  }

  std::vector<ClipExample> load(int n_classes) const {
    if (synth > 0) return make_synthetic_dataset(synth, synth_seed, synth_seconds, synth_noise);
    if (data_dir.empty())
      throw ConfigError("either --data or --synth is required");
    return load_dataset_dir(data_dir, n_classes);
  }
};

int cmd_profile(const std::string& preset, double alpha, const std::string& placement,
                int frames, int n_classes, const std::string& out_prefix) {
  ModelConfig cfg;
  if (preset == "dymn-s")
    cfg = ModelConfig::make(0.4, n_classes);
  else if (preset == "dymn-m")
    cfg = ModelConfig::make(1.0, n_classes);
  else if (preset == "dymn-l")
    cfg = ModelConfig::make(2.0, n_classes);
  else if (preset == "mn")
    cfg = ModelConfig::make(1.0, n_classes, Placement::none);
  else
    throw ConfigError("unknown model preset: " + preset);
  if (alpha > 0) cfg.alpha = alpha;
  if (!placement.empty()) cfg.placement = placement_from_string(placement);
  cfg.finalize();

  MacReport r = mac_report(cfg, frames);
  const std::string text = report_text(r);
  std::cout << text;
  {
    std::ofstream os(out_prefix + ".txt");
    os << text;
  }
  {
    std::ofstream os(out_prefix + ".csv");
    os << report_csv(r);
  }
  std::cout << "wrote " << out_prefix << ".txt and " << out_prefix << ".csv\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const DataFlags& dataf,
              const std::string& teacher_path, unsigned seed, int epochs_flag,
              const std::string& out_dir) {
  KvFile kv = config_path.empty() ? KvFile() : KvFile::parse_file(config_path);
  ScheduleConfig sched = schedule_from_kv(kv);
  if (epochs_flag > 0) sched.epochs = epochs_flag;
  MelConfig mel = mel_from_kv(kv);

  ModelConfig cfg = ModelConfig::from_kv(kv);
  if (!kv.has("n_classes") && dataf.synth > 0) cfg.n_classes = 2;
  if (!kv.has("in_freq")) cfg.in_freq = mel.n_mels;
  if (cfg.in_freq != mel.n_mels)
    throw ConfigError("model in_freq must match n_mels (" + std::to_string(cfg.in_freq) +
                      " vs " + std::to_string(mel.n_mels) + ")");
  cfg.finalize();

  std::vector<ClipExample> data = dataf.load(cfg.n_classes);
  if (sched.lambda < 1.0) {
    if (teacher_path.empty())
      throw ConfigError("lambda = " + std::to_string(sched.lambda) +
                        " requires --teacher-logits");
    attach_teacher_logits(data, load_teacher_logits(teacher_path));
  }

  std::cout << "dymn train: " << data.size() << " clips, " << sched.epochs << " epochs, "
            << "alpha " << cfg.alpha << ", placement " << placement_to_string(cfg.placement)
            << ", lambda " << sched.lambda << ", peak_lr " << sched.peak_lr << ", batch "
            << sched.batch_size << ", seed " << seed << "\n";

  fs::create_directories(out_dir);
  std::mt19937 rng(seed);
  Model<float> model = Model<float>::build(cfg, rng);

  auto on_epoch_end = [&](int epoch) {
    save_checkpoint((fs::path(out_dir) / ("checkpoint_epoch" + std::to_string(epoch + 1) +
                                          ".dymn")).string(),
                    model);
  };
  TrainResult r = train_loop(model, data, mel, sched, sched.epochs, rng, nullptr, on_epoch_end);

  save_checkpoint((fs::path(out_dir) / "checkpoint.dymn").string(), model);
  {
    std::ofstream os(fs::path(out_dir) / "trace.csv");
    os << "step,epoch,lr,tau,loss\n";
    os.precision(10);
    for (const auto& s : r.steps)
      os << s.step << "," << s.epoch << "," << s.lr << "," << s.tau << "," << s.loss << "\n";
  }
  std::cout << "final epoch loss " << r.epoch_loss.back() << "; wrote " << out_dir
            << "/checkpoint.dymn and trace.csv\n";
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const DataFlags& dataf) {
  Model<float> model = load_checkpoint(checkpoint);
  MelConfig mel;
  mel.n_mels = model.cfg.in_freq;
  std::vector<ClipExample> data = dataf.load(model.cfg.n_classes);
  Tensor scores = score_dataset(model, data, mel);
  Tensor labels = labels_tensor(data, model.cfg.n_classes);
  std::cout << "items " << data.size() << "\naccuracy " << accuracy(scores, labels)
            << "\nmAP " << mean_average_precision(scores, labels) << "\n";
  return kOk;
}

int cmd_infer(const std::string& checkpoint, const std::string& wav_path, int topk) {
  Model<float> model = load_checkpoint(checkpoint);
  MelConfig mel;
  mel.n_mels = model.cfg.in_freq;
  Waveform w = read_wav(wav_path);
  Tensor x = mel_spectrogram(w, mel);
  Tensor logits = model.logits(x);
  std::vector<std::pair<float, int>> ranked;
  for (int c = 0; c < model.cfg.n_classes; ++c)
    ranked.emplace_back(act_eval(ActKind::sigmoid, logits.at2(0, c)), c);
  std::sort(ranked.rbegin(), ranked.rend());
  const int k = std::min<int>(topk, static_cast<int>(ranked.size()));
  for (int i = 0; i < k; ++i)
    std::cout << "class " << ranked[static_cast<std::size_t>(i)].second << "  p="
              << ranked[static_cast<std::size_t>(i)].first << "\n";
  return kOk;
}

int cmd_inspect(const std::string& checkpoint, const std::string& target_s,
                const std::string& method_s, const std::string& blocks_s, unsigned seed,
                int samples, const DataFlags& dataf, const std::string& out_prefix) {
  Model<float> model = load_checkpoint(checkpoint);
  MelConfig mel;
  mel.n_mels = model.cfg.in_freq;
  std::vector<ClipExample> data = dataf.load(model.cfg.n_classes);

  std::vector<int> blocks;
  if (!blocks_s.empty()) {
    std::istringstream is(blocks_s);
    std::string tok;
    while (std::getline(is, tok, ',')) blocks.push_back(std::stoi(tok));
  }

  if (method_s == "mapping") {
    if (target_s != "dyrelu") {
      std::cerr << "mapping capture applies to --target dyrelu only\n";
      return kUsage;
    }
    if (blocks.empty())
      for (int i = 0; i < 15; ++i)
        if (model.cfg.blocks[static_cast<std::size_t>(i)].any_dyrelu()) blocks.push_back(i + 1);
    auto all = capture_dyrelu_mappings(model, data, mel, blocks, samples, seed);
    for (int b : blocks) {
      std::vector<MappingSample> one;
      for (const auto& s : all)
        if (s.block == b) one.push_back(s);
      const std::string path = out_prefix + "dyrelu_mapping_block" + std::to_string(b) + ".csv";
      std::ofstream os(path);
      os << mappings_csv(one);
      std::cout << "wrote " << path << " (" << one.size() << " pairs)\n";
    }
    return kOk;
  }

  InspectionConfig cfg;
  cfg.target = inspect_target_from_string(target_s);
  cfg.method = inspect_method_from_string(method_s);
  cfg.seed = seed;
  cfg.blocks = blocks;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  }
  PerturbedEval r = perturbed_eval(model, data, mel, cfg);
  std::cout << "target " << target_s << ", method " << method_s << ", seed " << seed << "\n";
  std::cout << "baseline  accuracy " << r.baseline_accuracy << "  mAP " << r.baseline_map
            << "\n";
  std::cout << "perturbed accuracy " << r.perturbed_accuracy << "  mAP " << r.perturbed_map
            << "\n";
  std::cout << "delta     accuracy " << r.perturbed_accuracy - r.baseline_accuracy << "  mAP "
            << r.perturbed_map - r.baseline_map << "\n";
  return kOk;
}

int cmd_gradcheck(const std::string& scope) {
  std::vector<GradcheckCase> cases;
  auto append = [&](std::vector<GradcheckCase> v) {
    cases.insert(cases.end(), v.begin(), v.end());
  };
  if (scope == "ops" || scope == "all") append(gradcheck_ops());
  if (scope == "blocks" || scope == "all") append(gradcheck_blocks());
  if (scope == "loss" || scope == "all") append(gradcheck_loss());
  if (cases.empty()) throw ConfigError("unknown gradcheck scope: " + scope);

  bool all_pass = true;
  for (const auto& c : cases) {
    std::cout << (c.pass ? "PASS  " : "FAIL  ") << c.name << "  max_rel_err=" << c.max_rel_err
              << " (tol " << c.tolerance << ")\n";
    all_pass = all_pass && c.pass;
  }
  std::cout << (all_pass ? "gradcheck: all cases passed\n" : "gradcheck: FAILURES above\n");
  return all_pass ? kOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DyMN dynamic audio tagging toolkit"};
  app.require_subcommand(1);

  // profile
  auto* profile = app.add_subcommand("profile", "closed-form MAC/parameter report");
  std::string pf_model = "dymn-m", pf_placement, pf_out = "dymn_profile";
  double pf_alpha = 0;
  int pf_frames = 1000, pf_classes = 527;
  profile->add_option("--model", pf_model, "dymn-s | dymn-m | dymn-l | mn")
      ->check(CLI::IsMember({"dymn-s", "dymn-m", "dymn-l", "mn"}));
  profile->add_option("--alpha", pf_alpha, "width multiplier override");
  profile->add_option("--placement", pf_placement,
                      "all | first5 | mid5 | last5 | replace_se | none");
  profile->add_option("--frames", pf_frames, "input time frames (default 1000)");
  profile->add_option("--n-classes", pf_classes, "classifier width");
  profile->add_option("--out", pf_out, "output file prefix");

  // train
  auto* train = app.add_subcommand("train", "toy-scale training run");
  std::string tr_config, tr_teacher, tr_out = "run";
  unsigned tr_seed = 0;
  int tr_epochs = 0;
  DataFlags tr_data;
  train->add_option("--config", tr_config, "key=value config file");
  tr_data.attach(train);
  train->add_option("--teacher-logits", tr_teacher, "teacher logit container");
  train->add_option("--seed", tr_seed, "training seed");
  train->add_option("--epochs", tr_epochs, "override epoch count");
  train->add_option("--out", tr_out, "output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "metrics on a labeled dataset");
  std::string ev_checkpoint;
  DataFlags ev_data;
  eval->add_option("--checkpoint", ev_checkpoint, "weight container")->required();
  ev_data.attach(eval);

  // infer
  auto* infer = app.add_subcommand("infer", "per-class scores for one clip");
  std::string in_checkpoint, in_wav;
  int in_topk = 5;
  infer->add_option("--checkpoint", in_checkpoint, "weight container")->required();
  infer->add_option("--wav", in_wav, "mono 32 kHz WAV file")->required();
  infer->add_option("--topk", in_topk, "classes to print");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "dynamic-component probing");
  std::string is_checkpoint, is_target = "ca", is_method = "identity", is_blocks,
              is_out = "";
  unsigned is_seed = 0;
  int is_samples = 10000;
  DataFlags is_data;
  inspect->add_option("--checkpoint", is_checkpoint, "weight container")->required();
  inspect->add_option("--target", is_target, "ca | dyconv | dyrelu");
  inspect->add_option("--method", is_method,
                      "identity | context_shuffle | channel_shuffle | spatial_shuffle | "
                      "time_shuffle | frequency_shuffle | attention_shuffle | "
                      "uniform_attention | max_attention | mapping");
  inspect->add_option("--blocks", is_blocks, "comma-separated 1-based block indices");
  inspect->add_option("--seed", is_seed, "shuffle seed");
  inspect->add_option("--samples", is_samples, "mapping pairs per block");
  inspect->add_option("--out", is_out, "output prefix for mapping CSVs");
  is_data.attach(inspect);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "64-bit finite-difference suite");
  std::string gc_scope = "all";
  gradcheck->add_option("--scope", gc_scope, "ops | blocks | loss | all")
      ->check(CLI::IsMember({"ops", "blocks", "loss", "all"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (profile->parsed())
      return cmd_profile(pf_model, pf_alpha, pf_placement, pf_frames, pf_classes, pf_out);
    if (train->parsed())
      return cmd_train(tr_config, tr_data, tr_teacher, tr_seed, tr_epochs, tr_out);
    if (eval->parsed()) return cmd_eval(ev_checkpoint, ev_data);
    if (infer->parsed()) return cmd_infer(in_checkpoint, in_wav, in_topk);
    if (inspect->parsed())
      return cmd_inspect(is_checkpoint, is_target, is_method, is_blocks, is_seed, is_samples,
                         is_data, is_out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_scope);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCorrupt;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kUsage;
}
