#pragma once

// Plain-text key=value configuration with dotted sections, e.g.
//
//   # comment
//   encoder.L = 6
//   evolution.mu = 4
//   loss.gamma = 25
//
// Keys under manifest.* and artifact.* are ignored so a run manifest can be
// fed back as a config.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evoprompt/errors.hpp"
#include "evoprompt/trainer.hpp"

namespace evoprompt {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ConfigError("config: bad value '" + text + "' for " + key);
  return v;
}

inline double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad value '" + text + "' for " + key);
  }
  if (used != text.size()) throw ConfigError("config: bad value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: expected true/false for " + key + ", got '" + text + "'");
}

}  // namespace detail

/// Resolved configuration plus which seeds were pinned explicitly.
struct RunConfig {
  TrainConfig train;
  bool encoder_seed_set = false;
  bool task_seed_set = false;

  /// Encoder and task seeds follow the master seed unless pinned.
  TrainConfig resolved() const {
    TrainConfig c = train;
    if (!encoder_seed_set) c.encoder.seed = c.seed;
    if (!task_seed_set) c.task.seed = c.seed;
    c.sync();
    return c;
  }
};

struct ConfigKey {
  std::string name;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

/// Every recognised key, in manifest order.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::format_double;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add_size = [&k](const std::string& name, auto access) {
      k.push_back({name, [access](const TrainConfig& c) {
                     TrainConfig copy = c;
                     return std::to_string(access(copy));
                   },
                   [access, name](RunConfig& r, const std::string& v) {
                     access(r.train) = detail::parse_number<std::size_t>(name, v);
                   }});
    };
    auto add_int = [&k](const std::string& name, auto access) {
      k.push_back({name, [access](const TrainConfig& c) {
                     TrainConfig copy = c;
                     return std::to_string(access(copy));
                   },
                   [access, name](RunConfig& r, const std::string& v) { access(r.train) = detail::parse_number<int>(name, v); }});
    };
    auto add_double = [&k](const std::string& name, auto access) {
      k.push_back({name, [access](const TrainConfig& c) {
                     TrainConfig copy = c;
                     return format_double(access(copy));
                   },
                   [access, name](RunConfig& r, const std::string& v) { access(r.train) = detail::parse_double(name, v); }});
    };
    auto add_bool = [&k](const std::string& name, auto access) {
      k.push_back({name, [access](const TrainConfig& c) {
                     TrainConfig copy = c;
                     return std::string(access(copy) ? "true" : "false");
                   },
                   [access, name](RunConfig& r, const std::string& v) { access(r.train) = detail::parse_bool(name, v); }});
    };

    k.push_back({"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& r, const std::string& v) { r.train.seed = detail::parse_number<std::uint64_t>("seed", v); }});

    add_size("encoder.L", [](TrainConfig& c) -> std::size_t& { return c.encoder.layers; });
    add_size("encoder.M", [](TrainConfig& c) -> std::size_t& { return c.encoder.patches; });
    add_size("encoder.N", [](TrainConfig& c) -> std::size_t& { return c.encoder.text_tokens; });
    add_size("encoder.d_v", [](TrainConfig& c) -> std::size_t& { return c.encoder.vision_width; });
    add_size("encoder.d_t", [](TrainConfig& c) -> std::size_t& { return c.encoder.text_width; });
    add_size("encoder.d", [](TrainConfig& c) -> std::size_t& { return c.encoder.embed_dim; });
    add_size("encoder.heads", [](TrainConfig& c) -> std::size_t& { return c.encoder.heads; });
    add_size("encoder.vocab", [](TrainConfig& c) -> std::size_t& { return c.encoder.vocab; });
    add_size("encoder.patch_dim", [](TrainConfig& c) -> std::size_t& { return c.encoder.patch_dim; });
    add_size("encoder.mlp_ratio", [](TrainConfig& c) -> std::size_t& { return c.encoder.mlp_ratio; });
    add_bool("encoder.causal_text", [](TrainConfig& c) -> bool& { return c.encoder.causal_text; });
    add_double("encoder.init_std", [](TrainConfig& c) -> double& { return c.encoder.init_std; });
    k.push_back({"encoder.seed", [](const TrainConfig& c) { return std::to_string(c.encoder.seed); },
                 [](RunConfig& r, const std::string& v) {
                   r.train.encoder.seed = detail::parse_number<std::uint64_t>("encoder.seed", v);
                   r.encoder_seed_set = true;
                 }});

    add_size("mpp.J", [](TrainConfig& c) -> std::size_t& { return c.mpp.first_layer; });
    add_size("mpp.l", [](TrainConfig& c) -> std::size_t& { return c.mpp.prompt_length; });
    add_size("mpp.K", [](TrainConfig& c) -> std::size_t& { return c.mpp.vectors; });
    add_size("mpp.d_r", [](TrainConfig& c) -> std::size_t& { return c.mpp.shared_dim; });
    add_double("mpp.sigma", [](TrainConfig& c) -> double& { return c.mpp.sigma; });

    add_int("evolution.epochs", [](TrainConfig& c) -> int& { return c.schedule.epochs; });
    add_int("evolution.mu", [](TrainConfig& c) -> int& { return c.schedule.mu; });
    add_int("evolution.nu", [](TrainConfig& c) -> int& { return c.schedule.nu; });
    add_int("evolution.r_high", [](TrainConfig& c) -> int& { return c.schedule.r_high; });
    add_int("evolution.r_mid", [](TrainConfig& c) -> int& { return c.schedule.r_mid; });
    add_int("evolution.r_low", [](TrainConfig& c) -> int& { return c.schedule.r_low; });

    add_double("loss.gamma", [](TrainConfig& c) -> double& { return c.loss.gamma; });
    add_double("loss.eta", [](TrainConfig& c) -> double& { return c.loss.eta; });
    add_double("loss.tau", [](TrainConfig& c) -> double& { return c.loss.tau; });

    add_double("optim.lr", [](TrainConfig& c) -> double& { return c.optim.lr; });
    add_size("optim.batch", [](TrainConfig& c) -> std::size_t& { return c.optim.batch; });
    add_size("optim.steps_per_epoch", [](TrainConfig& c) -> std::size_t& { return c.optim.steps_per_epoch; });
    add_double("optim.momentum", [](TrainConfig& c) -> double& { return c.optim.momentum; });

    add_int("task.classes", [](TrainConfig& c) -> int& { return c.task.classes; });
    add_int("task.shots", [](TrainConfig& c) -> int& { return c.task.shots; });
    add_int("task.test_per_class", [](TrainConfig& c) -> int& { return c.task.test_per_class; });
    add_double("task.sigma_x", [](TrainConfig& c) -> double& { return c.task.sigma_x; });
    k.push_back({"task.seed", [](const TrainConfig& c) { return std::to_string(c.task.seed); },
                 [](RunConfig& r, const std::string& v) {
                   r.train.task.seed = detail::parse_number<std::uint64_t>("task.seed", v);
                   r.task_seed_set = true;
                 }});

    add_bool("ablation.no_mpp", [](TrainConfig& c) -> bool& { return c.variant.no_mpp; });
    add_bool("ablation.no_shared", [](TrainConfig& c) -> bool& { return c.variant.no_shared; });
    add_bool("ablation.full_rank", [](TrainConfig& c) -> bool& { return c.variant.full_rank; });
    add_bool("ablation.no_evolution", [](TrainConfig& c) -> bool& { return c.variant.no_evolution; });
    add_bool("ablation.no_kcl", [](TrainConfig& c) -> bool& { return c.variant.no_kcl; });
    add_bool("ablation.no_fgr", [](TrainConfig& c) -> bool& { return c.variant.no_fgr; });

    add_bool("diagnostics.gradcheck_each_epoch", [](TrainConfig& c) -> bool& { return c.gradcheck_each_epoch; });
    return k;
  }();
  return keys;
}

/// Applies one key=value pair.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
  if (key.rfind("manifest.", 0) == 0 || key.rfind("artifact.", 0) == 0) return;
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(rc, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

/// Parses "key=value" (whitespace around either side is ignored).
inline void apply_assignment(RunConfig& rc, const std::string& line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + line + "'");
  const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
  if (key.empty() || value.empty()) throw ConfigError(where + ": empty key or value in '" + line + "'");
  apply_setting(rc, key, value);
}

inline void apply_text(RunConfig& rc, std::istream& in, const std::string& source) {
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    apply_assignment(rc, t, source + ":" + std::to_string(n));
  }
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"default", "tiny"};
  return names;
}

/// A preset name or a path to a key=value file.
inline RunConfig load_config(const std::string& source) {
  RunConfig rc;
  if (source.empty() || source == "default") return rc;
  if (source == "tiny") {
    rc.train = tiny_config();
    return rc;
  }
  std::ifstream f(source);
  if (!f) throw InputError("cannot read config '" + source + "' (not a preset or readable file)");
  apply_text(rc, f, source);
  return rc;
}

/// key=value lines of the resolved config, in a fixed order.
inline std::string render_config(const TrainConfig& c) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.name << "=" << k.get(c) << "\n";
  return os.str();
}

}  // namespace evoprompt
