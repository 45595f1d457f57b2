// Command-line front end: dataset synthesis, pre-training, backdoor
// injection, downstream training, evaluation, defenses, POR comparison,
// representation export, and the full staged pipeline.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "rfbd/pipeline.hpp"

namespace {

using namespace rfbd;

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitStageFailure = 3;

// Per-device carving for the standalone subcommands: skip `skip` frames of
// each device, then take up to `take`.
std::vector<const IQFrame*> carve(const Dataset& ds, int skip, int take) {
  std::vector<int> seen(1024, 0);
  std::vector<const IQFrame*> out;
  for (const auto& f : ds.frames) {
    if (f.device_id < 0 || f.device_id >= 1024) continue;
    int& n = seen[static_cast<std::size_t>(f.device_id)];
    if (n >= skip && (take < 0 || n < skip + take)) out.push_back(&f);
    ++n;
  }
  if (out.empty()) throw std::invalid_argument("no frames selected; check --skip/--take");
  return out;
}

int device_count(const Dataset& ds) {
  int mx = -1;
  for (const auto& f : ds.frames) mx = std::max(mx, f.device_id);
  return mx + 1;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Backdoor laboratory for self-supervised RF-fingerprinting encoders"};
  app.require_subcommand(1);

  std::string g_config, g_out_dir;
  std::uint64_t g_seed = 0;
  bool g_seed_set = false, g_force = false;
  app.add_option("--config", g_config, "Experiment config (.json or .toml)");
  app.add_option("--seed", g_seed, "Seed override")
      ->each([&](const std::string&) { g_seed_set = true; });
  app.add_option("--out-dir", g_out_dir, "Output directory override");
  app.add_flag("--force", g_force, "Recompute cached stages");

  auto load_cfg = [&]() {
    if (g_config.empty()) throw std::invalid_argument("this subcommand needs --config");
    ExperimentConfig cfg = load_config(g_config);
    if (g_seed_set) cfg.seeds = {g_seed};
    if (!g_out_dir.empty()) cfg.out_dir = g_out_dir;
    return cfg;
  };

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Synthesize a labeled device dataset");
  struct {
    int devices = 12, frames = 500, width = 256;
    std::string protocol = "wifi_like", out;
    double snr = 20.0;
    std::uint64_t seed = 1;
  } gd;
  gen->add_option("--devices", gd.devices, "Number of devices");
  gen->add_option("--frames", gd.frames, "Frames per device");
  gen->add_option("--protocol", gd.protocol, "wifi_like or lora_like");
  gen->add_option("--snr", gd.snr, "Channel SNR in dB");
  gen->add_option("--width", gd.width, "Samples per frame");
  gen->add_option("--gen-seed", gd.seed, "Dataset seed");
  gen->add_option("--dataset-out", gd.out, "Output path")->required();
  gen->callback([&]() {
    DatasetSpec spec;
    spec.num_devices = gd.devices;
    spec.frames_per_device = gd.frames;
    spec.protocol = protocol_from_name(gd.protocol);
    spec.channel_snr_db = gd.snr;
    spec.seed = gd.seed;
    save_dataset(build_dataset(spec, gd.width), gd.out);
    std::cout << "wrote " << gd.out << "\n";
  });

  // pretrain ---------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Contrastive pre-training of a benign encoder");
  struct {
    std::string dataset, preset = "small", out, domain = "time";
    int epochs = 30, batch = 128, rep_dim = 64;
    double tau = 0.2, lr = 3e-4, wd = 0.0, jitter = 0.05;
    int shift = 128;
    bool rotate = false;
    std::uint64_t seed = 1;
  } pt;
  pre->add_option("--dataset", pt.dataset, "Dataset container")->required();
  pre->add_option("--preset", pt.preset, "small | medium | large");
  pre->add_option("--epochs", pt.epochs, "Pre-training epochs");
  pre->add_option("--tau", pt.tau, "NT-Xent temperature");
  pre->add_option("--batch", pt.batch, "Pairs per batch (K)");
  pre->add_option("--lr", pt.lr, "Learning rate");
  pre->add_option("--weight-decay", pt.wd, "Decoupled weight decay");
  pre->add_option("--rep-dim", pt.rep_dim, "Representation dimension");
  pre->add_option("--domain", pt.domain, "time | spectrogram");
  pre->add_option("--jitter", pt.jitter, "Augmentation jitter sigma");
  pre->add_option("--time-shift", pt.shift, "Max circular shift");
  pre->add_flag("--phase-rotation", pt.rotate, "Random joint I/Q rotation");
  pre->add_option("--train-seed", pt.seed, "Training seed");
  pre->add_option("--out", pt.out, "Checkpoint output")->required();
  pre->callback([&]() {
    const Dataset ds = load_dataset(pt.dataset);
    Encoder<float> enc(preset_channels(preset_from_name(pt.preset)), pt.rep_dim, ds.width,
                       derive_seed(pt.seed, 0x454E4349ULL), preset_from_name(pt.preset));
    PretrainConfig cfg;
    cfg.epochs = pt.epochs;
    cfg.temperature = pt.tau;
    cfg.batch_size = pt.batch;
    cfg.lr = pt.lr;
    cfg.weight_decay = pt.wd;
    AugmentationConfig aug;
    aug.jitter_sigma = pt.jitter;
    aug.time_shift_max = pt.shift;
    aug.phase_rotation = pt.rotate;
    const auto losses =
        pretrain(enc, frame_ptrs(ds.frames), cfg, aug, pt.seed, domain_from_name(pt.domain));
    save_encoder(enc, pt.out);
    std::cout << "wrote " << pt.out << " (final loss " << (losses.empty() ? 0.0 : losses.back())
              << ")\n";
  });

  // backdoor ---------------------------------------------------------------
  auto* bd = app.add_subcommand("backdoor", "Inject trigger/POR backdoors into a benign encoder");
  struct {
    std::string benign, substitute, out, attack_out, por = "orthogonal", domain = "time";
    int nt = 4, len = 48, offset = 0, epochs = 200, batch = 128;
    double sigma = 0.1, phi = 0.1, lr = 1e-3, amplitude = 0.0, threshold = 0.05;
    std::uint64_t seed = 1;
  } bda;
  bd->add_option("--benign", bda.benign, "Benign encoder checkpoint")->required();
  bd->add_option("--substitute", bda.substitute, "Substitute dataset container")->required();
  bd->add_option("--nt", bda.nt, "Number of trigger/POR pairs");
  bd->add_option("--sigma", bda.sigma, "Trigger noise sigma");
  bd->add_option("--len", bda.len, "Trigger length in samples");
  bd->add_option("--offset", bda.offset, "Trigger window offset");
  bd->add_option("--phi", bda.phi, "Poisoning rate");
  bd->add_option("--amplitude", bda.amplitude, "POR amplitude (0 = calibrate)");
  bd->add_option("--epochs", bda.epochs, "Backdoor training epochs");
  bd->add_option("--lr", bda.lr, "Learning rate");
  bd->add_option("--batch", bda.batch, "Batch size");
  bd->add_option("--por", bda.por, "orthogonal | sign_pattern");
  bd->add_option("--convergence-threshold", bda.threshold, "Relative poisoned-MSE target");
  bd->add_option("--domain", bda.domain, "time | spectrogram");
  bd->add_option("--train-seed", bda.seed, "Training seed");
  bd->add_option("--out", bda.out, "Backdoored checkpoint output")->required();
  bd->add_option("--attack-out", bda.attack_out, "Trigger/POR artifact output");
  bd->callback([&]() {
    Encoder<float> benign = load_encoder(bda.benign);
    const Dataset substitute = load_dataset(bda.substitute);
    const Domain domain = domain_from_name(bda.domain);
    TriggerSet triggers = gen_trigger_set(bda.nt, bda.len, bda.sigma, bda.offset,
                                          derive_seed(bda.seed, 0x54524947ULL), substitute.width);
    const std::uint64_t plan_seed = derive_seed(bda.seed, 0x504F4953ULL);
    double amplitude = bda.amplitude;
    if (amplitude <= 0.0) {
      const PoisonSplit split =
          poison_split(static_cast<int>(substitute.frames.size()), bda.phi, bda.nt, plan_seed);
      std::vector<const IQFrame*> clean_side;
      for (std::size_t i = static_cast<std::size_t>(split.assigned(bda.nt));
           i < split.order.size(); ++i)
        clean_side.push_back(&substitute.frames[split.order[i]]);
      amplitude = calibrate_amplitude(benign, clean_side, domain);
    }
    const PORSet pors = bda.por == "orthogonal"
                            ? gen_pors(bda.nt, benign.rep_dim(), amplitude)
                            : gen_sign_pattern_pors(bda.nt, benign.rep_dim(), amplitude);
    const PoisonPlan plan =
        build_poison_plan(substitute, bda.phi, triggers, pors, benign, plan_seed, domain);
    BackdoorResult result =
        backdoor_train(benign, plan, pors, bda.lr, bda.epochs,
                       derive_seed(bda.seed, 0x42445452ULL), bda.batch, bda.threshold);
    save_encoder(result.model, bda.out);
    const std::string attack_path =
        bda.attack_out.empty() ? bda.out + ".attack.bin" : bda.attack_out;
    save_attack_artifacts(triggers, pors, attack_path, "");
    std::cout << "wrote " << bda.out << " and " << attack_path << " (poison mse "
              << (result.epochs.empty() ? 0.0 : result.epochs.back().poison_mse) << ")\n";
  });

  // train-downstream ---------------------------------------------------------
  auto* td = app.add_subcommand("train-downstream", "Train a linear head on a frozen encoder");
  struct {
    std::string encoder, dataset, out, domain = "time";
    int skip = 0, take = 50, classes = 0, epochs = 200, batch = 64;
    double lr = 0.01;
    std::uint64_t seed = 1;
  } tda;
  td->add_option("--encoder", tda.encoder, "Encoder checkpoint")->required();
  td->add_option("--dataset", tda.dataset, "Labeled dataset container")->required();
  td->add_option("--skip", tda.skip, "Frames to skip per device");
  td->add_option("--take", tda.take, "Frames to use per device (-1 = all)");
  td->add_option("--classes", tda.classes, "Class count (0 = infer)");
  td->add_option("--epochs", tda.epochs, "Head training epochs");
  td->add_option("--lr", tda.lr, "Learning rate");
  td->add_option("--batch", tda.batch, "Batch size");
  td->add_option("--domain", tda.domain, "time | spectrogram");
  td->add_option("--train-seed", tda.seed, "Training seed");
  td->add_option("--out", tda.out, "Head checkpoint output")->required();
  td->callback([&]() {
    Encoder<float> enc = load_encoder(tda.encoder);
    const Dataset ds = load_dataset(tda.dataset);
    const auto frames = carve(ds, tda.skip, tda.take);
    const int classes = tda.classes > 0 ? tda.classes : device_count(ds);
    DownstreamConfig cfg;
    cfg.epochs = tda.epochs;
    cfg.lr = tda.lr;
    cfg.batch_size = tda.batch;
    const auto head =
        train_downstream(enc, frames, classes, cfg, tda.seed, domain_from_name(tda.domain));
    save_head(head, tda.out);
    std::cout << "wrote " << tda.out << "\n";
  });

  // evaluate -----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Attack metrics for an encoder/head pair");
  struct {
    std::string encoder, head, triggers, dataset, report, domain = "time";
    std::string baseline_encoder, baseline_head;
    int skip = 400, take = 100;
  } eva;
  ev->add_option("--encoder", eva.encoder, "Encoder checkpoint")->required();
  ev->add_option("--head", eva.head, "Head checkpoint")->required();
  ev->add_option("--triggers", eva.triggers, "Trigger/POR artifact")->required();
  ev->add_option("--dataset", eva.dataset, "Labeled dataset container")->required();
  ev->add_option("--skip", eva.skip, "Test frames to skip per device");
  ev->add_option("--take", eva.take, "Test frames per device (-1 = all)");
  ev->add_option("--domain", eva.domain, "time | spectrogram");
  ev->add_option("--baseline-encoder", eva.baseline_encoder, "Benign encoder for drop metrics");
  ev->add_option("--baseline-head", eva.baseline_head, "Benign head for drop metrics");
  ev->add_option("--report", eva.report, "Report JSON output")->required();
  ev->callback([&]() {
    Encoder<float> enc = load_encoder(eva.encoder);
    ClassifierHead<float> head = load_head(eva.head);
    const AttackArtifacts attack = load_attack_artifacts(eva.triggers);
    const Dataset ds = load_dataset(eva.dataset);
    const auto test = carve(ds, eva.skip, eva.take);
    const Domain domain = domain_from_name(eva.domain);
    nlohmann::json rep;
    rep["ca_clean"] = classification_accuracy(head, enc, test, domain);
    const UasrResult u = uasr(head, enc, test, attack.triggers, domain);
    rep["uasr"] = u.value;
    rep["tr"] = targeted_ratio(u.wrong_histogram, u.correct_counts);
    rep["per_trigger_class_histogram"] = u.histogram;
    const StealthReport stealth = stealth_report(test, attack.triggers);
    rep["stealth_mean_delta_l2"] = stealth.mean_delta_l2;
    if (stealth.snr_infinite)
      rep["stealth_mean_snr_db"] = "inf";
    else
      rep["stealth_mean_snr_db"] = stealth.mean_snr_db;
    if (!eva.baseline_encoder.empty() && !eva.baseline_head.empty()) {
      Encoder<float> benc = load_encoder(eva.baseline_encoder);
      ClassifierHead<float> bhead = load_head(eva.baseline_head);
      rep["ca_benign_baseline"] = classification_accuracy(bhead, benc, test, domain);
      rep["trigger_only_drop"] = trigger_only_drop(benc, bhead, test, attack.triggers, domain);
    }
    rep["domain"] = eva.domain;
    write_json(eva.report, rep);
    std::cout << "wrote " << eva.report << "\n";
  });

  // defend ---------------------------------------------------------------
  auto* df = app.add_subcommand("defend", "Detection and mitigation battery");
  struct {
    std::string mode, encoder, head, dataset, triggers, report, out, domain = "time";
    std::string clean_encoder, clean_head;
    double rate = 0.2, lr = 1e-3, threshold = 0.5;
    int epochs = 30, overlays = 20, suspects = 64, trees = 100, subsample = 256;
    int skip = 350, take = 50, test_skip = 400, test_take = 100, classes = 0;
    std::uint64_t seed = 1;
  } dfa;
  df->add_option("--mode", dfa.mode, "finetune | strip | iforest | stealth")->required();
  df->add_option("--encoder", dfa.encoder, "Encoder checkpoint (suspect/backdoored)")->required();
  df->add_option("--head", dfa.head, "Head checkpoint for the suspect encoder");
  df->add_option("--clean-encoder", dfa.clean_encoder, "Reference clean encoder (strip)");
  df->add_option("--clean-head", dfa.clean_head, "Reference clean head (strip)");
  df->add_option("--dataset", dfa.dataset, "Labeled dataset container")->required();
  df->add_option("--triggers", dfa.triggers, "Trigger/POR artifact");
  df->add_option("--rate", dfa.rate, "Fine-tuning rate");
  df->add_option("--epochs", dfa.epochs, "Fine-tuning epochs");
  df->add_option("--lr", dfa.lr, "Fine-tuning learning rate");
  df->add_option("--overlays", dfa.overlays, "STRIP overlays per suspect");
  df->add_option("--suspects", dfa.suspects, "STRIP suspect count");
  df->add_option("--trees", dfa.trees, "Isolation forest trees");
  df->add_option("--subsample", dfa.subsample, "Isolation forest subsample");
  df->add_option("--threshold", dfa.threshold, "Isolation forest score threshold");
  df->add_option("--skip", dfa.skip, "Labeled frames to skip per device");
  df->add_option("--take", dfa.take, "Labeled frames per device");
  df->add_option("--test-skip", dfa.test_skip, "Test frames to skip per device");
  df->add_option("--test-take", dfa.test_take, "Test frames per device");
  df->add_option("--classes", dfa.classes, "Class count (0 = infer)");
  df->add_option("--domain", dfa.domain, "time | spectrogram");
  df->add_option("--defense-seed", dfa.seed, "Seed");
  df->add_option("--out", dfa.out, "Defended encoder output (finetune mode)");
  df->add_option("--report", dfa.report, "Report JSON output")->required();
  df->callback([&]() {
    const Dataset ds = load_dataset(dfa.dataset);
    const Domain domain = domain_from_name(dfa.domain);
    Encoder<float> enc = load_encoder(dfa.encoder);
    nlohmann::json rep;
    rep["mode"] = dfa.mode;
    if (dfa.mode == "finetune") {
      const auto labeled = carve(ds, dfa.skip, dfa.take);
      const int classes = dfa.classes > 0 ? dfa.classes : device_count(ds);
      FinetuneResult ft = finetune_defense(enc, labeled, classes, dfa.rate, dfa.epochs, dfa.lr,
                                           dfa.seed, domain);
      const auto test = carve(ds, dfa.test_skip, dfa.test_take);
      rep["rate"] = dfa.rate;
      rep["ca_after"] = classification_accuracy(ft.head, ft.encoder, test, domain);
      if (!dfa.triggers.empty()) {
        const AttackArtifacts attack = load_attack_artifacts(dfa.triggers);
        const UasrResult u = uasr(ft.head, ft.encoder, test, attack.triggers, domain);
        rep["uasr_after"] = u.value;
        rep["tr_after"] = targeted_ratio(u.wrong_histogram, u.correct_counts);
      }
      if (!dfa.out.empty()) save_encoder(ft.encoder, dfa.out);
    } else if (dfa.mode == "strip") {
      if (dfa.head.empty() || dfa.clean_encoder.empty() || dfa.clean_head.empty() ||
          dfa.triggers.empty())
        throw std::invalid_argument(
            "strip mode needs --head, --clean-encoder, --clean-head and --triggers");
      ClassifierHead<float> head = load_head(dfa.head);
      Encoder<float> clean_enc = load_encoder(dfa.clean_encoder);
      ClassifierHead<float> clean_head = load_head(dfa.clean_head);
      const AttackArtifacts attack = load_attack_artifacts(dfa.triggers);
      const auto pool = carve(ds, dfa.test_skip, dfa.test_take);
      const int n_sus = std::min<int>(dfa.suspects, static_cast<int>(pool.size()));
      std::vector<IQFrame> suspects;
      for (int i = 0; i < n_sus; ++i)
        suspects.push_back(apply_trigger(
            *pool[static_cast<std::size_t>(i)],
            attack.triggers.triggers[static_cast<std::size_t>(i % attack.triggers.size())]));
      const StripReport strip = strip_report(clean_head, clean_enc, head, enc,
                                             frame_ptrs(suspects), pool, dfa.overlays, dfa.seed,
                                             domain);
      rep["mean_entropy_clean_ptm"] = strip.mean_entropy_clean_ptm;
      rep["mean_entropy_backdoored_ptm"] = strip.mean_entropy_backdoored_ptm;
      rep["difference"] = strip.difference;
      rep["difference_times_100"] = 100.0 * strip.difference;
    } else if (dfa.mode == "iforest") {
      if (dfa.triggers.empty()) throw std::invalid_argument("iforest mode needs --triggers");
      const AttackArtifacts attack = load_attack_artifacts(dfa.triggers);
      const auto test = carve(ds, dfa.test_skip, dfa.test_take);
      IsolationForest forest(dfa.trees,
                             std::min<int>(dfa.subsample, static_cast<int>(test.size())),
                             dfa.seed);
      forest.fit(flatten_frames(test));
      std::vector<IQFrame> poisoned;
      for (std::size_t i = 0; i < test.size(); ++i)
        poisoned.push_back(apply_trigger(
            *test[i],
            attack.triggers.triggers[i % static_cast<std::size_t>(attack.triggers.size())]));
      rep["rate_clean"] = forest.anomaly_rate(flatten_frames(test), dfa.threshold);
      rep["rate_poisoned"] =
          forest.anomaly_rate(flatten_frames(frame_ptrs(poisoned)), dfa.threshold);
      rep["delta"] = rep["rate_poisoned"].get<double>() - rep["rate_clean"].get<double>();
    } else if (dfa.mode == "stealth") {
      if (dfa.triggers.empty()) throw std::invalid_argument("stealth mode needs --triggers");
      const AttackArtifacts attack = load_attack_artifacts(dfa.triggers);
      const auto test = carve(ds, dfa.test_skip, dfa.test_take);
      const StealthReport stealth = stealth_report(test, attack.triggers);
      rep["mean_delta_l2"] = stealth.mean_delta_l2;
      if (stealth.snr_infinite)
        rep["mean_snr_db"] = "inf";
      else
        rep["mean_snr_db"] = stealth.mean_snr_db;
    } else {
      throw std::invalid_argument("unknown defend mode: " + dfa.mode);
    }
    write_json(dfa.report, rep);
    std::cout << "wrote " << dfa.report << "\n";
  });

  // compare-pors -----------------------------------------------------------
  auto* cp = app.add_subcommand("compare-pors", "Orthogonal vs sign-pattern POR comparison");
  cp->callback([&]() {
    const ExperimentConfig cfg = load_cfg();
    RunOptions opts;
    opts.force = g_force;
    for (std::uint64_t seed : cfg.seeds) {
      const std::string dir = cfg.out_dir + "/seed_" + std::to_string(seed);
      const auto cmp = compare_por_designs(cfg, seed, dir, opts);
      std::cout << "seed " << seed << ": orthogonal TR " << cmp["orthogonal"]["tr"]
                << " vs sign_pattern TR " << cmp["sign_pattern"]["tr"] << "\n";
    }
  });

  // export-reprs -----------------------------------------------------------
  auto* ex = app.add_subcommand("export-reprs", "CSV export of encoder representations");
  struct {
    std::string encoder, dataset, out, domain = "time";
    int skip = 0, take = -1;
  } exa;
  ex->add_option("--encoder", exa.encoder, "Encoder checkpoint")->required();
  ex->add_option("--dataset", exa.dataset, "Dataset container")->required();
  ex->add_option("--skip", exa.skip, "Frames to skip per device");
  ex->add_option("--take", exa.take, "Frames per device (-1 = all)");
  ex->add_option("--domain", exa.domain, "time | spectrogram");
  ex->add_option("--out", exa.out, "CSV output")->required();
  ex->callback([&]() {
    Encoder<float> enc = load_encoder(exa.encoder);
    const Dataset ds = load_dataset(exa.dataset);
    export_representations(enc, carve(ds, exa.skip, exa.take), domain_from_name(exa.domain),
                           exa.out);
    std::cout << "wrote " << exa.out << "\n";
  });

  // run ----------------------------------------------------------------------
  auto* rn = app.add_subcommand("run", "Full pipeline: gen-data through defenses");
  rn->callback([&]() {
    const ExperimentConfig cfg = load_cfg();
    RunOptions opts;
    opts.force = g_force;
    if (!cfg.sweep.num_triggers.empty() || !cfg.sweep.presets.empty()) {
      run_sweep(cfg, opts);
      std::cout << "sweep grids written under " << cfg.out_dir << "\n";
      return;
    }
    const nlohmann::json agg = run_seeds(cfg, opts);
    std::cout << agg.dump(2) << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfigError;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep BLAS single-threaded unless the caller overrides; reports are then
  // reproducible run to run.
  setenv("OPENBLAS_NUM_THREADS", "1", /*overwrite=*/0);
  try {
    return run_cli(argc, argv);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kExitStageFailure;
  }
}
