#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cisseg/calib/calib_distill.hpp"
#include "cisseg/dapd/dapd.hpp"
#include "cisseg/io.hpp"
#include "cisseg/model/segnet.hpp"
#include "cisseg/phantoms/phantom.hpp"
#include "cisseg/harness/schedule.hpp"
#include "cisseg/pseudo/pseudo.hpp"

namespace cisseg {

inline constexpr const char* kOutputRootEnv = "CISSEG_OUTPUT_ROOT";

enum class AffinityMode { Prototype, Uniform };

/// Every knob of a protocol run. Field comments give the config-file key.
struct RunConfig {
  std::string protocol = "2-2";          // protocol
  int num_classes = 4;                   // num_classes
  Size3 volume_size{64, 64, 1};          // volume_size  (H W D; D = 1 runs 2-d)
  std::uint64_t seed = 1;                // seed
  std::size_t num_volumes = 20;          // num_volumes  (split 8:2 into train/test)
  std::size_t feature_dim = 16;          // feature_dim
  LossWeights weights;                   // lambda_ll, lambda_lg, lambda_orcd, lambda_crcd
  double tau = kDefaultTau;              // tau
  double learning_rate = 0.05;           // learning_rate  (step 1)
  double incremental_learning_rate = 0.003;  // incremental_learning_rate  (steps >= 2)
  double momentum = 0.9;                 // momentum
  std::size_t epochs = 30;               // epochs
  std::size_t batch_size = 1;            // batch_size
  MergeMode merge_mode = MergeMode::Sum; // merge_mode  (sum | mean)
  KlDirection kl_direction = KlDirection::StudentTeacher;   // kl_direction (student_teacher | teacher_student)
  CrcdNewClassMode crcd_new_classes = CrcdNewClassMode::ZeroTarget;  // crcd_new_classes (zero_target | skip)
  AffinityMode affinity = AffinityMode::Prototype;  // affinity (prototype | uniform)
  double affinity_temperature = 1.0;     // affinity_temperature
  bool pseudo_labels = true;             // pseudo_labels
  CeMode ce = CeMode::Unbiased;          // ce (unbiased | standard)
  SegNet::NewBias head_bias_init = SegNet::NewBias::Background;  // head_bias_init (background | zero)
  bool joint_training = false;           // joint_training  (single step over all classes)
  std::string method = "ours";           // method  (tag written to the CSVs)
  std::string output_dir = "runs/default";  // output_dir
  bool save_artifacts = true;            // save_artifacts  (checkpoints, prototypes, plot)

  void validate() const {
    try {
      weights.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(e.what());
    }
    if (num_classes < 1 || num_classes > static_cast<int>(kMaxPhantomClasses)) {
      throw ConfigError("num_classes must be in 1..8");
    }
    if (!joint_training) ProtocolSchedule::parse(protocol, num_classes);
    if (!(tau >= 0.0)) throw ConfigError("tau must be non-negative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(incremental_learning_rate > 0.0)) throw ConfigError("incremental_learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (num_volumes < 2) throw ConfigError("num_volumes must be at least 2");
    if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
    if (!(affinity_temperature > 0.0)) throw ConfigError("affinity_temperature must be positive");
    if (method.empty() || method.find_first_of(", \t\n") != std::string::npos) {
      throw ConfigError("method tag must be a single word");
    }
  }

  Kernel kernel() const { return volume_size[2] == 1 ? kPlanarKernel : kVolumetricKernel; }

  /// Output directory, resolved against $CISSEG_OUTPUT_ROOT when set and relative.
  std::filesystem::path resolved_output_dir() const {
    std::filesystem::path p(output_dir);
    if (p.is_relative()) {
      if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::path(root) / p;
    }
    return p;
  }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline double parse_real(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "infinity") return std::numeric_limits<double>::infinity();
  try {
    return io::parse_double(v);
  } catch (const IoError&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

template <typename Int>
Int parse_count(const std::string& key, const std::string& v) {
  try {
    return io::parse_int<Int>(v);
  } catch (const IoError&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v, const std::map<std::string, E>& table) {
  auto it = table.find(v);
  if (it == table.end()) throw ConfigError(key + ": unknown value '" + v + "'");
  return it->second;
}

inline const std::map<std::string, MergeMode> kMergeModes{{"sum", MergeMode::Sum}, {"mean", MergeMode::WeightedMean}};
inline const std::map<std::string, KlDirection> kKlDirections{{"student_teacher", KlDirection::StudentTeacher},
                                                              {"teacher_student", KlDirection::TeacherStudent}};
inline const std::map<std::string, CrcdNewClassMode> kCrcdModes{{"zero_target", CrcdNewClassMode::ZeroTarget},
                                                                {"skip", CrcdNewClassMode::Skip}};
inline const std::map<std::string, AffinityMode> kAffinityModes{{"prototype", AffinityMode::Prototype},
                                                                {"uniform", AffinityMode::Uniform}};
inline const std::map<std::string, CeMode> kCeModes{{"unbiased", CeMode::Unbiased}, {"standard", CeMode::Standard}};
inline const std::map<std::string, SegNet::NewBias> kBiasInits{{"background", SegNet::NewBias::Background},
                                                               {"zero", SegNet::NewBias::Zero}};

template <typename E>
std::string enum_name(E value, const std::map<std::string, E>& table) {
  for (const auto& [name, e] : table)
    if (e == value) return name;
  return "?";
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table{
      {"protocol", [](RunConfig& c, const std::string&, const std::string& v) { c.protocol = v; }},
      {"num_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.num_classes = parse_count<int>(k, v); }},
      {"volume_size",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         std::istringstream is(v);
         std::string a, b, d, extra;
         if (!(is >> a >> b >> d) || (is >> extra)) throw ConfigError(k + ": expected three extents 'H W D'");
         c.volume_size = {parse_count<std::size_t>(k, a), parse_count<std::size_t>(k, b), parse_count<std::size_t>(k, d)};
       }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_count<std::uint64_t>(k, v); }},
      {"num_volumes", [](RunConfig& c, const std::string& k, const std::string& v) { c.num_volumes = parse_count<std::size_t>(k, v); }},
      {"feature_dim", [](RunConfig& c, const std::string& k, const std::string& v) { c.feature_dim = parse_count<std::size_t>(k, v); }},
      {"lambda_ll", [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.ll = parse_real(k, v); }},
      {"lambda_lg", [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.lg = parse_real(k, v); }},
      {"lambda_orcd", [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.orcd = parse_real(k, v); }},
      {"lambda_crcd", [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.crcd = parse_real(k, v); }},
      {"tau", [](RunConfig& c, const std::string& k, const std::string& v) { c.tau = parse_real(k, v); }},
      {"learning_rate", [](RunConfig& c, const std::string& k, const std::string& v) { c.learning_rate = parse_real(k, v); }},
      {"incremental_learning_rate", [](RunConfig& c, const std::string& k, const std::string& v) { c.incremental_learning_rate = parse_real(k, v); }},
      {"momentum", [](RunConfig& c, const std::string& k, const std::string& v) { c.momentum = parse_real(k, v); }},
      {"epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.epochs = parse_count<std::size_t>(k, v); }},
      {"batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.batch_size = parse_count<std::size_t>(k, v); }},
      {"merge_mode", [](RunConfig& c, const std::string& k, const std::string& v) { c.merge_mode = parse_enum(k, v, kMergeModes); }},
      {"kl_direction", [](RunConfig& c, const std::string& k, const std::string& v) { c.kl_direction = parse_enum(k, v, kKlDirections); }},
      {"crcd_new_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.crcd_new_classes = parse_enum(k, v, kCrcdModes); }},
      {"affinity", [](RunConfig& c, const std::string& k, const std::string& v) { c.affinity = parse_enum(k, v, kAffinityModes); }},
      {"affinity_temperature", [](RunConfig& c, const std::string& k, const std::string& v) { c.affinity_temperature = parse_real(k, v); }},
      {"pseudo_labels", [](RunConfig& c, const std::string& k, const std::string& v) { c.pseudo_labels = parse_bool(k, v); }},
      {"ce", [](RunConfig& c, const std::string& k, const std::string& v) { c.ce = parse_enum(k, v, kCeModes); }},
      {"head_bias_init", [](RunConfig& c, const std::string& k, const std::string& v) { c.head_bias_init = parse_enum(k, v, kBiasInits); }},
      {"joint_training", [](RunConfig& c, const std::string& k, const std::string& v) { c.joint_training = parse_bool(k, v); }},
      {"method", [](RunConfig& c, const std::string&, const std::string& v) { c.method = v; }},
      {"output_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
      {"save_artifacts", [](RunConfig& c, const std::string& k, const std::string& v) { c.save_artifacts = parse_bool(k, v); }},
  };
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys
/// are errors. Unset keys keep the RunConfig defaults.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  std::map<std::string, int> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = detail::setters().find(key);
    if (it == detail::setters().end()) {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (seen[key]++) throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' repeated");
    if (value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    it->second(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Writes every key, so the result re-parses to the same config.
inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream os;
  auto real = [](double v) { return std::isinf(v) ? std::string("inf") : io::format_double(v); };
  os << "protocol = " << c.protocol << '\n'
     << "num_classes = " << c.num_classes << '\n'
     << "volume_size = " << c.volume_size[0] << ' ' << c.volume_size[1] << ' ' << c.volume_size[2] << '\n'
     << "seed = " << c.seed << '\n'
     << "num_volumes = " << c.num_volumes << '\n'
     << "feature_dim = " << c.feature_dim << '\n'
     << "lambda_ll = " << real(c.weights.ll) << '\n'
     << "lambda_lg = " << real(c.weights.lg) << '\n'
     << "lambda_orcd = " << real(c.weights.orcd) << '\n'
     << "lambda_crcd = " << real(c.weights.crcd) << '\n'
     << "tau = " << real(c.tau) << '\n'
     << "learning_rate = " << real(c.learning_rate) << '\n'
     << "incremental_learning_rate = " << real(c.incremental_learning_rate) << '\n'
     << "momentum = " << real(c.momentum) << '\n'
     << "epochs = " << c.epochs << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "merge_mode = " << detail::enum_name(c.merge_mode, detail::kMergeModes) << '\n'
     << "kl_direction = " << detail::enum_name(c.kl_direction, detail::kKlDirections) << '\n'
     << "crcd_new_classes = " << detail::enum_name(c.crcd_new_classes, detail::kCrcdModes) << '\n'
     << "affinity = " << detail::enum_name(c.affinity, detail::kAffinityModes) << '\n'
     << "affinity_temperature = " << real(c.affinity_temperature) << '\n'
     << "pseudo_labels = " << (c.pseudo_labels ? "true" : "false") << '\n'
     << "ce = " << detail::enum_name(c.ce, detail::kCeModes) << '\n'
     << "head_bias_init = " << detail::enum_name(c.head_bias_init, detail::kBiasInits) << '\n'
     << "joint_training = " << (c.joint_training ? "true" : "false") << '\n'
     << "method = " << c.method << '\n'
     << "output_dir = " << c.output_dir << '\n'
     << "save_artifacts = " << (c.save_artifacts ? "true" : "false") << '\n';
  return os.str();
}

/// Baseline presets, reachable purely through config keys.
enum class Baseline { FineTune, PlainKd, Offline };

inline RunConfig apply_baseline(RunConfig c, Baseline b) {
  switch (b) {
    case Baseline::FineTune:
      c.weights = LossWeights{0.0, 0.0, 0.0, 0.0};
      c.pseudo_labels = false;
      c.ce = CeMode::Standard;
      c.method = "finetune";
      break;
    case Baseline::PlainKd:
      c.affinity = AffinityMode::Uniform;
      c.weights.ll = 0.0;
      c.weights.lg = 0.0;
      c.method = "plain-kd";
      break;
    case Baseline::Offline:
      c.joint_training = true;
      c.method = "offline";
      break;
  }
  return c;
}

}  // namespace cisseg
