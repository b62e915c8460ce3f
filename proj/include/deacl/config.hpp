#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill.hpp"
#include "eval.hpp"
#include "hash.hpp"
#include "pretrain.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | cifar
  SyntheticSpec synthetic{};
  std::size_t test_per_class = 32;
  std::string train_path, test_path;
  std::size_t channels = 3, height = 32, width = 32, classes = 10;
  std::size_t limit = 0;  // keep the first N records of each file when > 0
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"source", c.source},     {"synthetic", c.synthetic}, {"test_per_class", c.test_per_class},
       {"train_path", c.train_path}, {"test_path", c.test_path}, {"channels", c.channels},
       {"height", c.height},     {"width", c.width},         {"classes", c.classes},
       {"limit", c.limit}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c.source = j.value("source", c.source);
  if (j.contains("synthetic")) j.at("synthetic").get_to(c.synthetic);
  c.test_per_class = j.value("test_per_class", c.test_per_class);
  c.train_path = j.value("train_path", c.train_path);
  c.test_path = j.value("test_path", c.test_path);
  c.channels = j.value("channels", c.channels);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.classes = j.value("classes", c.classes);
  c.limit = j.value("limit", c.limit);
}

struct EvalConfig {
  ProbeConfig slf{};
  AffConfig aff{};
  AttackConfig attack{8.0 / 255.0, 2.0 / 255.0, 20, 1, true, Objective::CrossEntropy};
  bool aa_proxy = false;
  std::vector<std::size_t> sweep_steps{1, 5, 10, 20};
  std::vector<double> sweep_eps{0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0};
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"slf", c.slf},           {"aff", c.aff},
       {"attack", c.attack},     {"aa_proxy", c.aa_proxy},
       {"sweep_steps", c.sweep_steps}, {"sweep_eps", c.sweep_eps}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  if (j.contains("slf")) j.at("slf").get_to(c.slf);
  if (j.contains("aff")) j.at("aff").get_to(c.aff);
  if (j.contains("attack")) j.at("attack").get_to(c.attack);
  c.aa_proxy = j.value("aa_proxy", c.aa_proxy);
  if (j.contains("sweep_steps")) j.at("sweep_steps").get_to(c.sweep_steps);
  if (j.contains("sweep_eps")) {
    c.sweep_eps.clear();
    for (const auto& e : j.at("sweep_eps")) c.sweep_eps.push_back(parse_fraction(e));
  }
}

struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DatasetConfig dataset{};
  EncoderConfig encoder{};
  Stage1Config stage1{};
  Stage2Config stage2{};
  EvalConfig eval{};
  bool record_timing = false;  // wall-clock columns in metrics.csv (breaks byte-identity)

  /// Sub-seeds are derived from the master seed; shapes follow the dataset.
  void resolve() {
    const SeedStreams streams(seed);
    stage1.seed = streams.stream_seed("stage1");
    stage2.seed = streams.stream_seed("stage2");
    eval.slf.seed = streams.stream_seed("slf");
    eval.aff.seed = streams.stream_seed("aff");
    dataset.synthetic.seed = streams.stream_seed("dataset");
    if (dataset.source == "synthetic") {
      encoder.channels = dataset.synthetic.channels;
      encoder.height = encoder.width = dataset.synthetic.size;
    } else {
      encoder.channels = dataset.channels;
      encoder.height = dataset.height;
      encoder.width = dataset.width;
    }
    validate();
  }

  void validate() const {
    if (dataset.source != "synthetic" && dataset.source != "cifar")
      throw ConfigError("dataset.source must be 'synthetic' or 'cifar'");
    if (dataset.source == "cifar" && (dataset.train_path.empty() || dataset.test_path.empty()))
      throw ConfigError("dataset: cifar source needs train_path and test_path");
    encoder.validate();
    stage1.validate();
    stage2.validate();
    eval.attack.validate();
    eval.aff.attack.validate();
  }

  /// Fingerprint of everything that affects results (the output location does not).
  std::uint64_t hash() const {
    nlohmann::json j = *this;
    j.erase("output_dir");
    return fnv1a64(j.dump());
  }

  friend void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"run_id", c.run_id},     {"seed", c.seed},     {"output_dir", c.output_dir},
         {"dataset", c.dataset},   {"encoder", c.encoder}, {"stage1", c.stage1},
         {"stage2", c.stage2},     {"eval", c.eval},     {"record_timing", c.record_timing}};
  }

  friend void from_json(const nlohmann::json& j, RunConfig& c) {
    static const char* known[] = {"run_id", "seed",   "output_dir", "dataset",      "encoder",
                                  "stage1", "stage2", "eval",       "record_timing"};
    for (const auto& [k, v] : j.items())
      if (std::find(std::begin(known), std::end(known), k) == std::end(known))
        throw ConfigError("unknown config key '" + k + "'");
    c.run_id = j.value("run_id", c.run_id);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
    if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
    if (j.contains("stage1")) j.at("stage1").get_to(c.stage1);
    if (j.contains("stage2")) j.at("stage2").get_to(c.stage2);
    if (j.contains("eval")) j.at("eval").get_to(c.eval);
    c.record_timing = j.value("record_timing", c.record_timing);
  }
};

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  try {
    nlohmann::json::parse(text).get_to(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.resolve();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

/// DEACL_OUT, when set, replaces the configured output directory.
inline std::filesystem::path output_dir(const RunConfig& cfg) {
  if (const char* env = std::getenv("DEACL_OUT"); env && *env) return env;
  return cfg.output_dir;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
