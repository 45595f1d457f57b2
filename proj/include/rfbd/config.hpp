#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rfbd/backdoor.hpp"
#include "rfbd/eval.hpp"
#include "rfbd/io.hpp"
#include "rfbd/nn.hpp"
#include "rfbd/signal.hpp"
#include "rfbd/ssl.hpp"
#include "rfbd/toml_lite.hpp"

namespace rfbd {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kCodeVersion = "rfbd 0.1.0";

// Dataset layout: one synthetic pool holds the downstream devices plus extra
// attacker-side devices. Per downstream device the frames split into
// pretrain / labeled-train / test slices; attacker devices contribute
// pretraining frames and are the only legal source of a disjoint substitute
// set.
struct DatasetStageConfig {
  int num_devices = 32;
  int downstream_devices = 8;
  int frames_per_device = 500;
  std::string protocol = "wifi_like";
  double channel_snr_db = 20.0;
  int width = 256;
  int pretrain_per_device = 350;
  int labeled_per_device = 50;
  int test_per_device = 100;
  int attacker_frames_per_device = 150;  // used from each attacker device
};

struct EncoderStageConfig {
  std::string preset = "small";
  int rep_dim = 64;
};

struct AttackStageConfig {
  int num_triggers = 4;
  int trigger_len = 48;
  double sigma = 0.1;
  int offset = 0;
  double phi = 0.1;
  double substitute_ratio = 0.2;
  double amplitude_override = 0.0;  // 0 = calibrate from clean substitute reps
  int epochs = 200;
  double lr = 1e-3;
  int batch_size = 128;
  std::string por_design = "orthogonal";
  double convergence_threshold = 0.05;
};

struct DefenseStageConfig {
  std::vector<double> finetune_rates = {0.2, 0.4, 0.6};
  int epochs = 30;
  double lr = 1e-3;
  int strip_overlays = 20;
  int strip_suspects = 64;
  int iforest_trees = 100;
  int iforest_subsample = 256;
  double iforest_threshold = 0.5;
};

struct SweepConfig {
  std::vector<int> num_triggers;       // empty = no sweep
  std::vector<std::string> presets;    // empty = no sweep
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  DatasetStageConfig dataset;
  EncoderStageConfig encoder;
  PretrainConfig pretrain;
  AugmentationConfig augment;
  AttackStageConfig attack;
  DownstreamConfig downstream;
  DefenseStageConfig defense;
  SweepConfig sweep;
  std::string domain = "time";
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "runs/default";

  Domain domain_enum() const { return domain_from_name(domain); }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization. Unknown keys are rejected so typos fail loudly.

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = c.schema_version;
  j["domain"] = c.domain;
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  j["dataset"] = {{"num_devices", c.dataset.num_devices},
                  {"downstream_devices", c.dataset.downstream_devices},
                  {"frames_per_device", c.dataset.frames_per_device},
                  {"protocol", c.dataset.protocol},
                  {"channel_snr_db", c.dataset.channel_snr_db},
                  {"width", c.dataset.width},
                  {"pretrain_per_device", c.dataset.pretrain_per_device},
                  {"labeled_per_device", c.dataset.labeled_per_device},
                  {"test_per_device", c.dataset.test_per_device},
                  {"attacker_frames_per_device", c.dataset.attacker_frames_per_device}};
  j["encoder"] = {{"preset", c.encoder.preset}, {"rep_dim", c.encoder.rep_dim}};
  j["pretrain"] = {{"batch_size", c.pretrain.batch_size},
                   {"temperature", c.pretrain.temperature},
                   {"epochs", c.pretrain.epochs},
                   {"lr", c.pretrain.lr},
                   {"weight_decay", c.pretrain.weight_decay},
                   {"projection_head", c.pretrain.projection_head},
                   {"restart_period", c.pretrain.restart_period}};
  j["augment"] = {{"time_shift_max", c.augment.time_shift_max},
                  {"jitter_sigma", c.augment.jitter_sigma},
                  {"scale_low", c.augment.scale_low},
                  {"scale_high", c.augment.scale_high},
                  {"phase_rotation", c.augment.phase_rotation}};
  j["attack"] = {{"num_triggers", c.attack.num_triggers},
                 {"trigger_len", c.attack.trigger_len},
                 {"sigma", c.attack.sigma},
                 {"offset", c.attack.offset},
                 {"phi", c.attack.phi},
                 {"substitute_ratio", c.attack.substitute_ratio},
                 {"amplitude_override", c.attack.amplitude_override},
                 {"epochs", c.attack.epochs},
                 {"lr", c.attack.lr},
                 {"batch_size", c.attack.batch_size},
                 {"por_design", c.attack.por_design},
                 {"convergence_threshold", c.attack.convergence_threshold}};
  j["downstream"] = {{"epochs", c.downstream.epochs},
                     {"lr", c.downstream.lr},
                     {"batch_size", c.downstream.batch_size}};
  j["defense"] = {{"finetune_rates", c.defense.finetune_rates},
                  {"epochs", c.defense.epochs},
                  {"lr", c.defense.lr},
                  {"strip_overlays", c.defense.strip_overlays},
                  {"strip_suspects", c.defense.strip_suspects},
                  {"iforest_trees", c.defense.iforest_trees},
                  {"iforest_subsample", c.defense.iforest_subsample},
                  {"iforest_threshold", c.defense.iforest_threshold}};
  j["sweep"] = {{"num_triggers", c.sweep.num_triggers}, {"presets", c.sweep.presets}};
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read_field;
  check_keys(j,
             {"schema_version", "domain", "seeds", "out_dir", "dataset", "encoder", "pretrain",
              "augment", "attack", "downstream", "defense", "sweep"},
             "root");
  ExperimentConfig c;
  read_field(j, "schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion)
    throw std::invalid_argument("config: unsupported schema_version");
  read_field(j, "domain", c.domain);
  read_field(j, "seeds", c.seeds);
  read_field(j, "out_dir", c.out_dir);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d,
               {"num_devices", "downstream_devices", "frames_per_device", "protocol",
                "channel_snr_db", "width", "pretrain_per_device", "labeled_per_device",
                "test_per_device", "attacker_frames_per_device"},
               "dataset");
    read_field(d, "num_devices", c.dataset.num_devices);
    read_field(d, "downstream_devices", c.dataset.downstream_devices);
    read_field(d, "frames_per_device", c.dataset.frames_per_device);
    read_field(d, "protocol", c.dataset.protocol);
    read_field(d, "channel_snr_db", c.dataset.channel_snr_db);
    read_field(d, "width", c.dataset.width);
    read_field(d, "pretrain_per_device", c.dataset.pretrain_per_device);
    read_field(d, "labeled_per_device", c.dataset.labeled_per_device);
    read_field(d, "test_per_device", c.dataset.test_per_device);
    read_field(d, "attacker_frames_per_device", c.dataset.attacker_frames_per_device);
  }
  if (j.contains("encoder")) {
    const auto& d = j.at("encoder");
    check_keys(d, {"preset", "rep_dim"}, "encoder");
    read_field(d, "preset", c.encoder.preset);
    read_field(d, "rep_dim", c.encoder.rep_dim);
  }
  if (j.contains("pretrain")) {
    const auto& d = j.at("pretrain");
    check_keys(d,
               {"batch_size", "temperature", "epochs", "lr", "weight_decay", "projection_head",
                "restart_period"},
               "pretrain");
    read_field(d, "batch_size", c.pretrain.batch_size);
    read_field(d, "temperature", c.pretrain.temperature);
    read_field(d, "epochs", c.pretrain.epochs);
    read_field(d, "lr", c.pretrain.lr);
    read_field(d, "weight_decay", c.pretrain.weight_decay);
    read_field(d, "projection_head", c.pretrain.projection_head);
    read_field(d, "restart_period", c.pretrain.restart_period);
  }
  if (j.contains("augment")) {
    const auto& d = j.at("augment");
    check_keys(d, {"time_shift_max", "jitter_sigma", "scale_low", "scale_high", "phase_rotation"},
               "augment");
    read_field(d, "time_shift_max", c.augment.time_shift_max);
    read_field(d, "jitter_sigma", c.augment.jitter_sigma);
    read_field(d, "scale_low", c.augment.scale_low);
    read_field(d, "scale_high", c.augment.scale_high);
    read_field(d, "phase_rotation", c.augment.phase_rotation);
  }
  if (j.contains("attack")) {
    const auto& d = j.at("attack");
    check_keys(d,
               {"num_triggers", "trigger_len", "sigma", "offset", "phi", "substitute_ratio",
                "amplitude_override", "epochs", "lr", "batch_size", "por_design",
                "convergence_threshold"},
               "attack");
    read_field(d, "num_triggers", c.attack.num_triggers);
    read_field(d, "trigger_len", c.attack.trigger_len);
    read_field(d, "sigma", c.attack.sigma);
    read_field(d, "offset", c.attack.offset);
    read_field(d, "phi", c.attack.phi);
    read_field(d, "substitute_ratio", c.attack.substitute_ratio);
    read_field(d, "amplitude_override", c.attack.amplitude_override);
    read_field(d, "epochs", c.attack.epochs);
    read_field(d, "lr", c.attack.lr);
    read_field(d, "batch_size", c.attack.batch_size);
    read_field(d, "por_design", c.attack.por_design);
    read_field(d, "convergence_threshold", c.attack.convergence_threshold);
  }
  if (j.contains("downstream")) {
    const auto& d = j.at("downstream");
    check_keys(d, {"epochs", "lr", "batch_size"}, "downstream");
    read_field(d, "epochs", c.downstream.epochs);
    read_field(d, "lr", c.downstream.lr);
    read_field(d, "batch_size", c.downstream.batch_size);
  }
  if (j.contains("defense")) {
    const auto& d = j.at("defense");
    check_keys(d,
               {"finetune_rates", "epochs", "lr", "strip_overlays", "strip_suspects",
                "iforest_trees", "iforest_subsample", "iforest_threshold"},
               "defense");
    read_field(d, "finetune_rates", c.defense.finetune_rates);
    read_field(d, "epochs", c.defense.epochs);
    read_field(d, "lr", c.defense.lr);
    read_field(d, "strip_overlays", c.defense.strip_overlays);
    read_field(d, "strip_suspects", c.defense.strip_suspects);
    read_field(d, "iforest_trees", c.defense.iforest_trees);
    read_field(d, "iforest_subsample", c.defense.iforest_subsample);
    read_field(d, "iforest_threshold", c.defense.iforest_threshold);
  }
  if (j.contains("sweep")) {
    const auto& d = j.at("sweep");
    check_keys(d, {"num_triggers", "presets"}, "sweep");
    read_field(d, "num_triggers", c.sweep.num_triggers);
    read_field(d, "presets", c.sweep.presets);
  }
  return c;
}

inline void validate_config(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  if (d.num_devices < 2 || d.frames_per_device < 1)
    throw std::invalid_argument("config: dataset pool must have >= 2 devices and >= 1 frame");
  if (d.downstream_devices < 2 || d.downstream_devices > d.num_devices)
    throw std::invalid_argument("config: downstream_devices out of range");
  if (d.num_devices == d.downstream_devices)
    throw std::invalid_argument(
        "config: need attacker devices beyond the downstream pool for a disjoint substitute set");
  if (d.pretrain_per_device + d.labeled_per_device + d.test_per_device > d.frames_per_device)
    throw std::invalid_argument("config: per-device split exceeds frames_per_device");
  if (d.attacker_frames_per_device > d.frames_per_device)
    throw std::invalid_argument("config: attacker_frames_per_device exceeds frames_per_device");
  if (d.labeled_per_device < 1 || d.test_per_device < 1 || d.pretrain_per_device < 1)
    throw std::invalid_argument("config: all per-device slices must be nonempty");
  if (d.width < 64) throw std::invalid_argument("config: width must be >= 64");
  protocol_from_name(d.protocol);
  domain_from_name(c.domain);
  preset_from_name(c.encoder.preset);
  por_design_from_name(c.attack.por_design);
  if (c.encoder.rep_dim < 2) throw std::invalid_argument("config: rep_dim too small");
  validate_pretrain(c.pretrain);
  validate_augmentation(c.augment);
  if (c.attack.num_triggers < 1 || c.attack.trigger_len < 1 || !(c.attack.sigma > 0.0))
    throw std::invalid_argument("config: bad trigger geometry");
  if (c.attack.offset < 0 || c.attack.offset + c.attack.trigger_len > d.width)
    throw std::invalid_argument("config: trigger window exceeds frame width");
  if (!(c.attack.phi > 0.0) || c.attack.phi >= 1.0)
    throw std::invalid_argument("config: poisoning rate must be in (0, 1)");
  if (!(c.attack.substitute_ratio > 0.0) || c.attack.substitute_ratio > 1.0)
    throw std::invalid_argument("config: substitute_ratio must be in (0, 1]");
  if (c.seeds.empty()) throw std::invalid_argument("config: need at least one seed");
  for (double r : c.defense.finetune_rates)
    if (!(r >= 0.0) || r > 1.0)
      throw std::invalid_argument("config: fine-tuning rates must be in [0, 1]");
}

// Loads JSON (canonical) or TOML (accepted) depending on the file suffix.
inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".toml")
    j = toml_lite::parse(text);
  else
    j = nlohmann::json::parse(text);
  ExperimentConfig c = config_from_json(j);
  validate_config(c);
  return c;
}

// Stage-scoped config hashes chain each stage onto its inputs, so any
// upstream change invalidates every artifact downstream of it.
inline std::string stage_hash(const ExperimentConfig& c, std::uint64_t seed,
                              const std::string& stage) {
  const nlohmann::json j = to_json(c);
  nlohmann::json h;
  h["code_version"] = kCodeVersion;
  h["seed"] = seed;
  h["dataset"] = j["dataset"];
  if (stage == "dataset") return hash_hex(fnv1a64(h.dump()));
  h["encoder"] = j["encoder"];
  h["pretrain"] = j["pretrain"];
  h["augment"] = j["augment"];
  h["domain"] = j["domain"];
  if (stage == "pretrain") return hash_hex(fnv1a64(h.dump()));
  h["attack"] = j["attack"];
  if (stage == "backdoor") return hash_hex(fnv1a64(h.dump()));
  h["downstream"] = j["downstream"];
  if (stage == "downstream") return hash_hex(fnv1a64(h.dump()));
  h["defense"] = j["defense"];
  if (stage == "report") return hash_hex(fnv1a64(h.dump()));
  throw std::logic_error("unknown stage: " + stage);
}

}  // namespace rfbd
