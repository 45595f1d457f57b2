#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "rfbd/config.hpp"
#include "rfbd/defense.hpp"

namespace rfbd {

struct RunOptions {
  bool force = false;
  std::ostream* log = &std::cerr;
};

// ---------------------------------------------------------------------------
// Dataset role slicing

// Frames are device-major; roles are carved deterministically from the frame
// index within each device, so a reloaded dataset yields identical pools.
struct DataPools {
  std::vector<const IQFrame*> pretrain;     // downstream slice + attacker frames
  std::vector<const IQFrame*> labeled;      // downstream labeled training
  std::vector<const IQFrame*> test;         // downstream held-out evaluation
  std::vector<std::size_t> pretrain_index;  // indices into dataset.frames
};

inline DataPools slice_pools(const Dataset& ds, const DatasetStageConfig& cfg) {
  DataPools pools;
  const int per = cfg.frames_per_device;
  if (static_cast<int>(ds.frames.size()) != cfg.num_devices * per)
    throw std::invalid_argument("slice_pools: dataset does not match the configured pool layout");
  for (int d = 0; d < cfg.num_devices; ++d)
    for (int i = 0; i < per; ++i) {
      const std::size_t at = static_cast<std::size_t>(d * per + i);
      const IQFrame* f = &ds.frames[at];
      if (d >= cfg.downstream_devices) {
        if (i < cfg.attacker_frames_per_device) {
          pools.pretrain.push_back(f);
          pools.pretrain_index.push_back(at);
        }
        continue;
      }
      if (i < cfg.pretrain_per_device) {
        pools.pretrain.push_back(f);
        pools.pretrain_index.push_back(at);
      } else if (i < cfg.pretrain_per_device + cfg.labeled_per_device) {
        pools.labeled.push_back(f);
      } else if (i < cfg.pretrain_per_device + cfg.labeled_per_device + cfg.test_per_device) {
        pools.test.push_back(f);
      }
    }
  return pools;
}

// The substitute set is drawn from the pretraining corpus restricted to
// devices outside the downstream pool; its size is a ratio of the corpus.
inline Dataset substitute_from_pools(const Dataset& ds, const DataPools& pools,
                                     const ExperimentConfig& cfg, std::uint64_t seed) {
  Dataset corpus;
  corpus.spec = ds.spec;
  corpus.width = ds.width;
  corpus.frames.reserve(pools.pretrain.size());
  for (const IQFrame* f : pools.pretrain) corpus.frames.push_back(*f);
  std::set<int> downstream_ids;
  for (int d = 0; d < cfg.dataset.downstream_devices; ++d) downstream_ids.insert(d);
  return split_substitute(corpus, cfg.attack.substitute_ratio,
                          derive_seed(seed, 0x44535542ULL /* "DSUB" */), downstream_ids);
}

// ---------------------------------------------------------------------------
// Attack artifact container (triggers + PORs)

inline void save_attack_artifacts(const TriggerSet& triggers, const PORSet& pors,
                                  const std::string& path, const std::string& config_hash) {
  nlohmann::json meta;
  meta["kind"] = "attack";
  meta["num_triggers"] = triggers.size();
  meta["trigger_len"] = triggers.len;
  meta["sigma"] = triggers.sigma;
  meta["offset"] = triggers.offset;
  meta["seed"] = triggers.seed;
  meta["rep_dim"] = pors.dim;
  meta["amplitude"] = pors.amplitude;
  meta["por_design"] = por_design_name(pors.design);
  if (!config_hash.empty()) meta["config_hash"] = config_hash;
  std::vector<float> payload;
  for (const auto& t : triggers.triggers)
    payload.insert(payload.end(), t.pattern.begin(), t.pattern.end());
  for (const auto& e : pors.vectors)
    for (double v : e) payload.push_back(static_cast<float>(v));
  write_container(path, kMagicTriggers, meta, payload.data(), payload.size());
}

struct AttackArtifacts {
  TriggerSet triggers;
  PORSet pors;
};

inline AttackArtifacts load_attack_artifacts(const std::string& path) {
  const Container c = read_container(path, kMagicTriggers);
  AttackArtifacts a;
  const int nt = c.meta.at("num_triggers").get<int>();
  const int len = c.meta.at("trigger_len").get<int>();
  const int dim = c.meta.at("rep_dim").get<int>();
  a.triggers.sigma = c.meta.at("sigma").get<double>();
  a.triggers.len = len;
  a.triggers.offset = c.meta.at("offset").get<int>();
  a.triggers.seed = c.meta.at("seed").get<std::uint64_t>();
  a.pors.amplitude = c.meta.at("amplitude").get<double>();
  a.pors.dim = dim;
  a.pors.design = por_design_from_name(c.meta.at("por_design").get<std::string>());
  const std::size_t trig_floats = static_cast<std::size_t>(nt) * 2 * len;
  const std::size_t por_floats = static_cast<std::size_t>(nt) * dim;
  if (c.payload.size() != trig_floats + por_floats)
    throw std::runtime_error("attack artifact payload size mismatch: " + path);
  a.triggers.triggers.resize(static_cast<std::size_t>(nt));
  for (int j = 0; j < nt; ++j) {
    Trigger& t = a.triggers.triggers[static_cast<std::size_t>(j)];
    t.index = j + 1;
    t.offset = a.triggers.offset;
    t.len = len;
    t.pattern.assign(c.payload.begin() + static_cast<std::ptrdiff_t>(j * 2 * len),
                     c.payload.begin() + static_cast<std::ptrdiff_t>((j + 1) * 2 * len));
  }
  a.pors.vectors.assign(static_cast<std::size_t>(nt), std::vector<double>(dim));
  for (int j = 0; j < nt; ++j)
    for (int k = 0; k < dim; ++k)
      a.pors.vectors[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] =
          static_cast<double>(c.payload[trig_floats + static_cast<std::size_t>(j * dim + k)]);
  return a;
}

// ---------------------------------------------------------------------------
// Report schema

// Keep in sync with docs/report_schema.json.
inline void validate_report(const nlohmann::json& r) {
  static const char* required_numbers[] = {"ca_clean",
                                           "ca_benign_baseline",
                                           "uasr",
                                           "tr",
                                           "trigger_only_drop",
                                           "stealth_mean_delta_l2",
                                           "strip_mean_entropy_clean_ptm",
                                           "strip_mean_entropy_backdoored_ptm",
                                           "strip_difference",
                                           "strip_difference_times_100",
                                           "iforest_rate_clean",
                                           "iforest_rate_poisoned",
                                           "iforest_delta",
                                           "backdoor_clean_mse",
                                           "backdoor_poison_mse",
                                           "por_amplitude"};
  for (const char* k : required_numbers)
    if (!r.contains(k) || !r.at(k).is_number())
      throw std::runtime_error(std::string("report: missing numeric field ") + k);
  for (const char* k : {"schema_version", "seed"})
    if (!r.contains(k) || !r.at(k).is_number())
      throw std::runtime_error(std::string("report: missing field ") + k);
  for (const char* k : {"code_version", "domain", "por_design", "stealth_mean_snr_db"})
    if (!r.contains(k))
      throw std::runtime_error(std::string("report: missing field ") + k);
  if (!r.contains("per_trigger_class_histogram") || !r.at("per_trigger_class_histogram").is_array())
    throw std::runtime_error("report: missing per_trigger_class_histogram");
  if (!r.contains("defense") || !r.at("defense").is_array())
    throw std::runtime_error("report: missing defense sweep");
  if (!r.contains("config") || !r.at("config").is_object())
    throw std::runtime_error("report: missing config echo");
  const auto fractions = {"ca_clean", "ca_benign_baseline", "uasr", "tr", "iforest_rate_clean",
                          "iforest_rate_poisoned"};
  for (const char* k : fractions) {
    const double v = r.at(k).get<double>();
    if (v < 0.0 || v > 1.0)
      throw std::runtime_error(std::string("report: fraction out of range: ") + k);
  }
}

// ---------------------------------------------------------------------------
// Stage cache helpers

namespace detail {

inline bool artifact_fresh(const std::string& path, const char* magic, const std::string& hash) {
  if (!std::filesystem::exists(path)) return false;
  try {
    const Container c = read_container(path, magic);
    return c.meta.contains("config_hash") && c.meta.at("config_hash") == hash;
  } catch (const std::exception&) {
    return false;
  }
}

inline bool report_fresh(const std::string& path, const std::string& hash) {
  if (!std::filesystem::exists(path)) return false;
  try {
    std::ifstream in(path);
    const nlohmann::json j = nlohmann::json::parse(std::string(
        (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
    return j.contains("config_hash") && j.at("config_hash") == hash;
  } catch (const std::exception&) {
    return false;
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// The staged pipeline for one seed

// gen-data -> pretrain -> backdoor -> train-downstream -> evaluate -> defend.
// Every stage persists its artifact with an embedded config hash; a stage is
// skipped when its artifact exists with a matching hash unless force is set.
// Returns the validated report; writes report + manifest into out_dir.
inline nlohmann::json run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                                   const std::string& out_dir, const RunOptions& opts = {}) {
  validate_config(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto log = [&](const std::string& line) {
    if (opts.log) *opts.log << "[rfbd] " << line << "\n";
  };
  const Domain domain = cfg.domain_enum();
  const std::string design = cfg.attack.por_design;
  const std::string dataset_path = out_dir + "/dataset.bin";
  const std::string benign_path = out_dir + "/benign.ckpt";
  const std::string backdoor_path = out_dir + "/backdoor-" + design + ".ckpt";
  const std::string attack_path = out_dir + "/attack-" + design + ".bin";
  const std::string head_benign_path = out_dir + "/head_benign.ckpt";
  const std::string head_backdoor_path = out_dir + "/head_backdoor-" + design + ".ckpt";
  const std::string report_path = out_dir + "/report-" + design + ".json";
  const std::string manifest_path = out_dir + "/manifest.json";

  nlohmann::json manifest;
  manifest["code_version"] = kCodeVersion;
  manifest["seed"] = seed;
  manifest["out_dir"] = out_dir;
  nlohmann::json stages = nlohmann::json::array();
  const auto wall0 = std::chrono::steady_clock::now();

  // Stage: dataset.
  const std::string h_data = stage_hash(cfg, seed, "dataset");
  {
    const auto t0 = std::chrono::steady_clock::now();
    bool cached = !opts.force && detail::artifact_fresh(dataset_path, kMagicDataset, h_data);
    if (!cached) {
      DatasetSpec spec;
      spec.num_devices = cfg.dataset.num_devices;
      spec.frames_per_device = cfg.dataset.frames_per_device;
      spec.protocol = protocol_from_name(cfg.dataset.protocol);
      spec.channel_snr_db = cfg.dataset.channel_snr_db;
      spec.seed = derive_seed(seed, 0x44415441ULL /* "DATA" */);
      save_dataset(build_dataset(spec, cfg.dataset.width), dataset_path, h_data);
    }
    stages.push_back({{"name", "dataset"},
                      {"path", dataset_path},
                      {"cached", cached},
                      {"seconds", detail::seconds_since(t0)}});
    log(std::string("dataset ") + (cached ? "(cached)" : "built"));
  }
  // All numerical paths start from the float32 container contents, so cached
  // and freshly-built runs are bit-identical.
  const Dataset ds = load_dataset(dataset_path);
  const DataPools pools = slice_pools(ds, cfg.dataset);

  // Stage: pretrain.
  const std::string h_pre = stage_hash(cfg, seed, "pretrain");
  Encoder<float> benign;
  {
    const auto t0 = std::chrono::steady_clock::now();
    bool cached = !opts.force && detail::artifact_fresh(benign_path, kMagicCheckpoint, h_pre);
    if (cached) {
      benign = load_encoder(benign_path);
    } else {
      benign = Encoder<float>(preset_channels(preset_from_name(cfg.encoder.preset)),
                              cfg.encoder.rep_dim, cfg.dataset.width,
                              derive_seed(seed, 0x454E4349ULL /* "ENCI" */),
                              preset_from_name(cfg.encoder.preset));
      pretrain(benign, pools.pretrain, cfg.pretrain, cfg.augment,
               derive_seed(seed, 0x50524554ULL /* "PRET" */), domain);
      save_encoder(benign, benign_path, h_pre);
    }
    stages.push_back({{"name", "pretrain"},
                      {"path", benign_path},
                      {"cached", cached},
                      {"seconds", detail::seconds_since(t0)}});
    log(std::string("pretrain ") + (cached ? "(cached)" : "trained"));
  }

  // Stage: backdoor.
  const std::string h_bd = stage_hash(cfg, seed, "backdoor");
  Encoder<float> backdoored;
  AttackArtifacts attack;
  nlohmann::json backdoor_diag;
  {
    const auto t0 = std::chrono::steady_clock::now();
    bool cached = !opts.force && detail::artifact_fresh(backdoor_path, kMagicCheckpoint, h_bd) &&
                  detail::artifact_fresh(attack_path, kMagicTriggers, h_bd);
    if (cached) {
      backdoored = load_encoder(backdoor_path);
      attack = load_attack_artifacts(attack_path);
      backdoor_diag["cached"] = true;
    } else {
      const Dataset substitute = substitute_from_pools(ds, pools, cfg, seed);
      attack.triggers = gen_trigger_set(cfg.attack.num_triggers, cfg.attack.trigger_len,
                                        cfg.attack.sigma, cfg.attack.offset,
                                        derive_seed(seed, 0x54524947ULL /* "TRIG" */),
                                        cfg.dataset.width);
      // Amplitude from the clean side of the poison split unless overridden.
      const std::uint64_t plan_seed = derive_seed(seed, 0x504F4953ULL /* "POIS" */);
      double amplitude = cfg.attack.amplitude_override;
      if (amplitude <= 0.0) {
        const PoisonSplit split = poison_split(static_cast<int>(substitute.frames.size()),
                                               cfg.attack.phi, cfg.attack.num_triggers, plan_seed);
        std::vector<const IQFrame*> clean_side;
        for (std::size_t i = static_cast<std::size_t>(split.assigned(cfg.attack.num_triggers));
             i < split.order.size(); ++i)
          clean_side.push_back(&substitute.frames[split.order[i]]);
        amplitude = calibrate_amplitude(benign, clean_side, domain);
      }
      attack.pors = cfg.attack.por_design == "orthogonal"
                        ? gen_pors(cfg.attack.num_triggers, cfg.encoder.rep_dim, amplitude)
                        : gen_sign_pattern_pors(cfg.attack.num_triggers, cfg.encoder.rep_dim,
                                                amplitude);
      const PoisonPlan plan = build_poison_plan(substitute, cfg.attack.phi, attack.triggers,
                                                attack.pors, benign, plan_seed, domain);
      BackdoorResult result =
          backdoor_train(benign, plan, attack.pors, cfg.attack.lr, cfg.attack.epochs,
                         derive_seed(seed, 0x42445452ULL /* "BDTR" */), cfg.attack.batch_size,
                         cfg.attack.convergence_threshold);
      backdoored = std::move(result.model);
      save_encoder(backdoored, backdoor_path, h_bd);
      save_attack_artifacts(attack.triggers, attack.pors, attack_path, h_bd);
      backdoor_diag["cached"] = false;
      backdoor_diag["substitute_size"] = substitute.frames.size();
      backdoor_diag["poisoned"] = plan.poisoned_frames.size();
      backdoor_diag["clean"] = plan.clean_frames.size();
      backdoor_diag["remainder"] = plan.remainder;
      backdoor_diag["per_trigger"] = plan.per_trigger;
      backdoor_diag["converged"] = result.converged;
      backdoor_diag["per_trigger_mse"] = result.per_trigger_mse;
      backdoor_diag["per_trigger_norm_sq"] = result.per_trigger_norm_sq;
      backdoor_diag["final_clean_mse"] =
          result.epochs.empty() ? 0.0 : result.epochs.back().clean_mse;
      backdoor_diag["final_poison_mse"] =
          result.epochs.empty() ? 0.0 : result.epochs.back().poison_mse;
    }
    stages.push_back({{"name", "backdoor"},
                      {"path", backdoor_path},
                      {"cached", cached},
                      {"seconds", detail::seconds_since(t0)}});
    log(std::string("backdoor ") + (cached ? "(cached)" : "trained"));
  }

  // Stage: downstream heads (victim-side on both encoders).
  const std::string h_down = stage_hash(cfg, seed, "downstream");
  ClassifierHead<float> head_benign, head_backdoor;
  {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t head_seed = derive_seed(seed, 0x444F574EULL /* "DOWN" */);
    bool cached = !opts.force &&
                  detail::artifact_fresh(head_benign_path, kMagicCheckpoint, h_down) &&
                  detail::artifact_fresh(head_backdoor_path, kMagicCheckpoint, h_down);
    if (cached) {
      head_benign = load_head(head_benign_path);
      head_backdoor = load_head(head_backdoor_path);
    } else {
      head_benign = train_downstream(benign, pools.labeled, cfg.dataset.downstream_devices,
                                     cfg.downstream, head_seed, domain);
      head_backdoor = train_downstream(backdoored, pools.labeled, cfg.dataset.downstream_devices,
                                       cfg.downstream, head_seed, domain);
      save_head(head_benign, head_benign_path, h_down);
      save_head(head_backdoor, head_backdoor_path, h_down);
    }
    stages.push_back({{"name", "train-downstream"},
                      {"path", head_backdoor_path},
                      {"cached", cached},
                      {"seconds", detail::seconds_since(t0)}});
    log(std::string("downstream heads ") + (cached ? "(cached)" : "trained"));
  }

  // Stage: evaluate + defend (combined into the final report).
  const std::string h_rep = stage_hash(cfg, seed, "report");
  nlohmann::json report;
  {
    const auto t0 = std::chrono::steady_clock::now();
    if (!opts.force && detail::report_fresh(report_path, h_rep)) {
      std::ifstream in(report_path);
      report = nlohmann::json::parse(std::string((std::istreambuf_iterator<char>(in)),
                                                 std::istreambuf_iterator<char>()));
      stages.push_back({{"name", "evaluate+defend"},
                        {"path", report_path},
                        {"cached", true},
                        {"seconds", detail::seconds_since(t0)}});
      log("report (cached)");
    } else {
      report["schema_version"] = 1;
      report["code_version"] = kCodeVersion;
      report["seed"] = seed;
      report["domain"] = cfg.domain;
      report["por_design"] = design;
      report["config"] = to_json(cfg);
      report["config_hash"] = h_rep;
      report["ca_benign_baseline"] =
          classification_accuracy(head_benign, benign, pools.test, domain);
      report["ca_clean"] = classification_accuracy(head_backdoor, backdoored, pools.test, domain);
      const UasrResult u = uasr(head_backdoor, backdoored, pools.test, attack.triggers, domain);
      report["uasr"] = u.value;
      report["tr"] = targeted_ratio(u.wrong_histogram, u.correct_counts);
      report["per_trigger_class_histogram"] = u.histogram;
      report["trigger_only_drop"] =
          trigger_only_drop(benign, head_benign, pools.test, attack.triggers, domain);
      report["por_amplitude"] = attack.pors.amplitude;
      report["backdoor_clean_mse"] =
          backdoor_diag.contains("final_clean_mse") ? backdoor_diag["final_clean_mse"].get<double>() : 0.0;
      report["backdoor_poison_mse"] =
          backdoor_diag.contains("final_poison_mse") ? backdoor_diag["final_poison_mse"].get<double>() : 0.0;
      report["backdoor_diag"] = backdoor_diag;

      // Physical stealth.
      const StealthReport stealth = stealth_report(pools.test, attack.triggers);
      report["stealth_mean_delta_l2"] = stealth.mean_delta_l2;
      if (stealth.snr_infinite)
        report["stealth_mean_snr_db"] = "inf";
      else
        report["stealth_mean_snr_db"] = stealth.mean_snr_db;

      // STRIP over poisoned suspects, paired between the two pipelines.
      {
        const int n_sus =
            std::min<int>(cfg.defense.strip_suspects, static_cast<int>(pools.test.size()));
        std::vector<IQFrame> suspects;
        suspects.reserve(static_cast<std::size_t>(n_sus));
        for (int i = 0; i < n_sus; ++i)
          suspects.push_back(apply_trigger(
              *pools.test[static_cast<std::size_t>(i)],
              attack.triggers.triggers[static_cast<std::size_t>(i % attack.triggers.size())]));
        const StripReport strip =
            strip_report(head_benign, benign, head_backdoor, backdoored, frame_ptrs(suspects),
                         pools.test, cfg.defense.strip_overlays,
                         derive_seed(seed, 0x53545250ULL /* "STRP" */), domain);
        report["strip_mean_entropy_clean_ptm"] = strip.mean_entropy_clean_ptm;
        report["strip_mean_entropy_backdoored_ptm"] = strip.mean_entropy_backdoored_ptm;
        report["strip_difference"] = strip.difference;
        report["strip_difference_times_100"] = 100.0 * strip.difference;
      }

      // Isolation forest on flattened raw frames.
      {
        IsolationForest forest(cfg.defense.iforest_trees,
                               std::min<int>(cfg.defense.iforest_subsample,
                                             static_cast<int>(pools.test.size())),
                               derive_seed(seed, 0x49464F52ULL /* "IFOR" */));
        forest.fit(flatten_frames(pools.test));
        std::vector<IQFrame> poisoned;
        poisoned.reserve(pools.test.size());
        for (std::size_t i = 0; i < pools.test.size(); ++i)
          poisoned.push_back(apply_trigger(
              *pools.test[i],
              attack.triggers.triggers[i % static_cast<std::size_t>(attack.triggers.size())]));
        const double rate_clean =
            forest.anomaly_rate(flatten_frames(pools.test), cfg.defense.iforest_threshold);
        const double rate_poisoned =
            forest.anomaly_rate(flatten_frames(frame_ptrs(poisoned)), cfg.defense.iforest_threshold);
        report["iforest_rate_clean"] = rate_clean;
        report["iforest_rate_poisoned"] = rate_poisoned;
        report["iforest_delta"] = rate_poisoned - rate_clean;
      }

      // Fine-tuning defense sweep.
      {
        nlohmann::json sweep = nlohmann::json::array();
        const std::uint64_t head_seed = derive_seed(seed, 0x444F574EULL);
        for (double rate : cfg.defense.finetune_rates) {
          FinetuneResult ft = finetune_defense(
              backdoored, pools.labeled, cfg.dataset.downstream_devices, rate,
              cfg.defense.epochs, cfg.defense.lr,
              derive_seed(seed, 0x44454645ULL /* "DEFE" */), domain, cfg.downstream.batch_size);
          ClassifierHead<float> head_defended =
              train_downstream(ft.encoder, pools.labeled, cfg.dataset.downstream_devices,
                               cfg.downstream, head_seed, domain);
          const double ca = classification_accuracy(head_defended, ft.encoder, pools.test, domain);
          const UasrResult ud =
              uasr(head_defended, ft.encoder, pools.test, attack.triggers, domain);
          sweep.push_back({{"rate", rate},
                           {"ca", ca},
                           {"uasr", ud.value},
                           {"tr", targeted_ratio(ud.wrong_histogram, ud.correct_counts)}});
          log("defense rate " + std::to_string(rate) + " done");
        }
        report["defense"] = sweep;
      }

      validate_report(report);
      std::ofstream out(report_path);
      out << report.dump(2) << "\n";
      stages.push_back({{"name", "evaluate+defend"},
                        {"path", report_path},
                        {"cached", false},
                        {"seconds", detail::seconds_since(t0)}});
      log("report written");
    }
  }

  // Manifest with artifact checksums.
  manifest["stages"] = stages;
  manifest["total_seconds"] = detail::seconds_since(wall0);
  nlohmann::json artifacts = nlohmann::json::object();
  for (const std::string& p : {dataset_path, benign_path, backdoor_path, attack_path,
                               head_benign_path, head_backdoor_path, report_path})
    artifacts[p] = hash_hex(file_checksum(p));
  manifest["artifacts"] = artifacts;
  {
    std::ofstream out(manifest_path);
    out << manifest.dump(2) << "\n";
  }
  return report;
}

// Verifies that every artifact recorded in a manifest still exists and
// matches its checksum.
inline void verify_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path);
  const nlohmann::json manifest = nlohmann::json::parse(
      std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
  for (const auto& [path, checksum] : manifest.at("artifacts").items())
    if (hash_hex(file_checksum(path)) != checksum.get<std::string>())
      throw std::runtime_error("artifact checksum mismatch: " + path);
}

// ---------------------------------------------------------------------------
// Multi-seed driver, POR comparison, sweeps, exports

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs every configured seed, writes per-seed artifacts under
// out_dir/seed_<s>/ and an aggregate with medians.
inline nlohmann::json run_seeds(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  nlohmann::json per_seed = nlohmann::json::array();
  std::vector<double> ca, ca_benign, uasr_v, tr_v;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string dir = cfg.out_dir + "/seed_" + std::to_string(seed);
    const nlohmann::json rep = run_pipeline(cfg, seed, dir, opts);
    ca.push_back(rep.at("ca_clean").get<double>());
    ca_benign.push_back(rep.at("ca_benign_baseline").get<double>());
    uasr_v.push_back(rep.at("uasr").get<double>());
    tr_v.push_back(rep.at("tr").get<double>());
    per_seed.push_back({{"seed", seed},
                        {"ca_clean", ca.back()},
                        {"ca_benign_baseline", ca_benign.back()},
                        {"uasr", uasr_v.back()},
                        {"tr", tr_v.back()}});
  }
  nlohmann::json agg;
  agg["per_seed"] = per_seed;
  agg["median"] = {{"ca_clean", median(ca)},
                   {"ca_benign_baseline", median(ca_benign)},
                   {"uasr", median(uasr_v)},
                   {"tr", median(tr_v)}};
  std::ofstream out(cfg.out_dir + "/aggregate.json");
  out << agg.dump(2) << "\n";
  return agg;
}

// Two runs differing only in POR construction, reported side by side.
inline nlohmann::json compare_por_designs(const ExperimentConfig& cfg, std::uint64_t seed,
                                          const std::string& out_dir,
                                          const RunOptions& opts = {}) {
  ExperimentConfig orth = cfg;
  orth.attack.por_design = "orthogonal";
  ExperimentConfig sign = cfg;
  sign.attack.por_design = "sign_pattern";
  const nlohmann::json a = run_pipeline(orth, seed, out_dir, opts);
  const nlohmann::json b = run_pipeline(sign, seed, out_dir, opts);
  nlohmann::json cmp;
  for (const char* k : {"ca_clean", "uasr", "tr"}) {
    cmp["orthogonal"][k] = a.at(k);
    cmp["sign_pattern"][k] = b.at(k);
  }
  cmp["seed"] = seed;
  std::ofstream out(out_dir + "/por_compare.json");
  out << cmp.dump(2) << "\n";
  std::ofstream csv(out_dir + "/por_compare.csv");
  csv << "design,ca_clean,uasr,tr\n";
  csv << "orthogonal," << a.at("ca_clean") << "," << a.at("uasr") << "," << a.at("tr") << "\n";
  csv << "sign_pattern," << b.at("ca_clean") << "," << b.at("uasr") << "," << b.at("tr") << "\n";
  return cmp;
}

// Grid over encoder presets and trigger counts, one pipeline per cell.
inline void run_sweep(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  if (cfg.sweep.num_triggers.empty() && cfg.sweep.presets.empty())
    throw std::invalid_argument("run_sweep: config has no sweep lists");
  const std::vector<int> nts =
      cfg.sweep.num_triggers.empty() ? std::vector<int>{cfg.attack.num_triggers}
                                     : cfg.sweep.num_triggers;
  const std::vector<std::string> presets =
      cfg.sweep.presets.empty() ? std::vector<std::string>{cfg.encoder.preset} : cfg.sweep.presets;
  std::ofstream grid(cfg.out_dir + "/sweep_grid.csv");
  grid << "preset,num_triggers,seed,ca_clean,ca_benign_baseline,uasr,tr\n";
  std::ofstream summary(cfg.out_dir + "/sweep_summary.csv");
  summary << "preset,num_triggers,median_ca_clean,median_uasr,median_tr\n";
  for (const std::string& preset : presets)
    for (int nt : nts) {
      ExperimentConfig cell = cfg;
      cell.encoder.preset = preset;
      cell.attack.num_triggers = nt;
      cell.sweep = {};
      std::vector<double> ca, ua, tr;
      for (std::uint64_t seed : cfg.seeds) {
        const std::string dir =
            cfg.out_dir + "/sweep/" + preset + "_nt" + std::to_string(nt) + "/seed_" +
            std::to_string(seed);
        const nlohmann::json rep = run_pipeline(cell, seed, dir, opts);
        grid << preset << "," << nt << "," << seed << "," << rep.at("ca_clean") << ","
             << rep.at("ca_benign_baseline") << "," << rep.at("uasr") << "," << rep.at("tr")
             << "\n";
        ca.push_back(rep.at("ca_clean").get<double>());
        ua.push_back(rep.at("uasr").get<double>());
        tr.push_back(rep.at("tr").get<double>());
      }
      summary << preset << "," << nt << "," << median(ca) << "," << median(ua) << ","
              << median(tr) << "\n";
    }
}

// CSV export of (device_id, representation) rows for external embedding or
// plotting tools.
inline void export_representations(Encoder<float>& enc,
                                   const std::vector<const IQFrame*>& frames, Domain domain,
                                   const std::string& path) {
  const Tensor<float> reps = encode_frames(enc, frames, domain);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "device_id";
  for (int k = 0; k < enc.rep_dim(); ++k) out << ",r" << k;
  out << "\n";
  for (std::size_t i = 0; i < frames.size(); ++i) {
    out << frames[i]->device_id;
    for (int k = 0; k < enc.rep_dim(); ++k)
      out << "," << reps(static_cast<std::int64_t>(i), k);
    out << "\n";
  }
}

}  // namespace rfbd
