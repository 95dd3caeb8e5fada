#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evoprompt/encoder.hpp"
#include "evoprompt/evolution.hpp"
#include "evoprompt/tape.hpp"

namespace evoprompt {

struct MppConfig {
  std::size_t first_layer = 3;   // J
  std::size_t last_layer = 6;    // L
  std::size_t prompt_length = 5; // l
  std::size_t vectors = 5;       // K
  std::size_t shared_dim = 32;   // d_r
  std::size_t vision_width = 32;
  std::size_t text_width = 32;
  double sigma = 0.02;

  std::size_t width(Modality m) const { return m == Modality::vision ? vision_width : text_width; }
  std::size_t span() const { return last_layer - first_layer + 1; }

  void validate() const {
    if (first_layer < 1 || first_layer > last_layer) throw ConfigError("mpp: require 1 <= J <= L");
    if (prompt_length != vectors) throw ConfigError("mpp: prompt length l must equal K");
    if (vectors == 0 || shared_dim == 0 || vision_width == 0 || text_width == 0) {
      throw ConfigError("mpp: extents must be positive");
    }
    if (!(sigma > 0.0)) throw ParameterError("mpp: sigma must be positive");
  }
};

/// The learnable K x d_r embedding E.
struct EmbeddingSpace {
  Tensor values;
  double sigma = 0.0;
  std::size_t vectors() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
};

inline EmbeddingSpace init_embedding(std::size_t k, std::size_t d_r, double sigma, std::uint64_t seed) {
  if (k == 0 || d_r == 0) throw ParameterError("init_embedding: K and d_r must be positive");
  if (!(sigma > 0.0)) throw ParameterError("init_embedding: sigma must be positive");
  std::mt19937_64 rng(seed);
  EmbeddingSpace e{Tensor::gaussian({k, d_r}, sigma, rng), sigma};
  e.values.set_requires_grad(true);
  return e;
}

/// P = E W, a plain linear projection without bias.
inline Var project(const Var& e, const Var& w) {
  if (e.cols() != w.rows()) {
    throw DimensionError("project: E is " + shape_str(e.value().shape()) + " but W is " +
                         shape_str(w.value().shape()));
  }
  return matmul(e, w);
}

inline Tensor project(const Tensor& e, const Tensor& w) {
  Tape t;
  return project(t.constant_ref(e), t.constant_ref(w)).value();
}

/// Which structural pieces of the projector are present.
struct ProjectorLayout {
  bool use_projector = true;   // false: independent per-layer prompt matrices
  bool shared_weight = true;   // false: one full trainable W_i per layer
  AdapterMode adapter = AdapterMode::evolving;
};

struct ParamCount {
  std::size_t embedding = 0;
  std::size_t shared = 0;           // W_shared, or the per-layer full weights
  std::size_t vision_adapters = 0;
  std::size_t text_adapters = 0;
  std::size_t free_prompts = 0;     // only without a projector
  std::size_t total() const { return embedding + shared + vision_adapters + text_adapters + free_prompts; }
};

/// Closed-form count of trainable scalars during epoch `epoch` (1-based).
/// An evolving adapter holds `epoch` magnitudes plus the live factors of
/// rank r^epoch; retired factors are not trainable and not counted. A
/// zero rank means the adapter is disabled.
inline ParamCount param_count(const MppConfig& cfg, int epoch, const EvolutionSchedule& schedule,
                              const ProjectorLayout& layout = {}) {
  if (epoch < 1) throw ParameterError("param_count: epoch must be >= 1");
  ParamCount pc;
  const std::size_t n = cfg.span();
  const std::size_t dr = cfg.shared_dim;
  if (!layout.use_projector) {
    pc.free_prompts = n * cfg.prompt_length * (cfg.vision_width + cfg.text_width);
    return pc;
  }
  pc.embedding = cfg.vectors * dr;
  for (Modality m : kModalities) {
    const std::size_t dm = cfg.width(m);
    pc.shared += (layout.shared_weight ? 1 : n) * dr * dm;
    std::size_t per_state = 0;
    const auto t = static_cast<std::size_t>(epoch);
    switch (layout.adapter) {
      case AdapterMode::evolving: {
        const int r = (epoch < schedule.mu ? schedule.r_high : epoch < schedule.nu ? schedule.r_mid : schedule.r_low);
        per_state = r > 0 ? static_cast<std::size_t>(r) * (dr + dm) + t : 0;
        break;
      }
      case AdapterMode::dense_evolving:
        per_state = dr * dm + t;
        break;
      case AdapterMode::plain_lora:
        per_state = schedule.r_high > 0 ? static_cast<std::size_t>(schedule.r_high) * (dr + dm) : 0;
        break;
      case AdapterMode::plain_dense:
        per_state = dr * dm;
        break;
    }
    (m == Modality::vision ? pc.vision_adapters : pc.text_adapters) += n * per_state;
  }
  return pc;
}

/// All trainable prompt-side state: E, the shared weights and one adapter
/// per (layer, modality), or the ablation replacements for them.
class PromptProjector {
 public:
  using Key = std::pair<std::size_t, Modality>;

  PromptProjector(const MppConfig& cfg, const ProjectorLayout& layout, const EvolutionSchedule& schedule,
                  std::uint64_t seed)
      : cfg_(cfg), layout_(layout), seed_(seed) {
    cfg_.validate();
    if (!layout_.use_projector) {
      for (Modality m : kModalities) {
        for (std::size_t i = cfg_.first_layer; i <= cfg_.last_layer; ++i) {
          std::mt19937_64 rng(derive_seed(seed, {1, i, static_cast<std::uint64_t>(m)}));
          Tensor p = Tensor::gaussian({cfg_.prompt_length, cfg_.width(m)}, cfg_.sigma, rng);
          p.set_requires_grad(true);
          free_prompts_.emplace(Key{i, m}, std::move(p));
        }
      }
      return;
    }
    embedding_ = init_embedding(cfg_.vectors, cfg_.shared_dim, cfg_.sigma, derive_seed(seed, {2}));
    const double w_std = 1.0 / std::sqrt(static_cast<double>(cfg_.shared_dim));
    for (Modality m : kModalities) {
      if (layout_.shared_weight) {
        std::mt19937_64 rng(derive_seed(seed, {3, static_cast<std::uint64_t>(m)}));
        Tensor w = Tensor::gaussian({cfg_.shared_dim, cfg_.width(m)}, w_std, rng);
        w.set_requires_grad(true);
        shared_.emplace(Key{0, m}, std::move(w));
      }
      for (std::size_t i = cfg_.first_layer; i <= cfg_.last_layer; ++i) {
        if (!layout_.shared_weight) {
          std::mt19937_64 rng(derive_seed(seed, {4, i, static_cast<std::uint64_t>(m)}));
          Tensor w = Tensor::gaussian({cfg_.shared_dim, cfg_.width(m)}, w_std, rng);
          w.set_requires_grad(true);
          shared_.emplace(Key{i, m}, std::move(w));
        }
        adapters_.emplace(std::piecewise_construct, std::forward_as_tuple(i, m),
                          std::forward_as_tuple(i, m, cfg_.shared_dim, cfg_.width(m), schedule.rank_at(1),
                                                adapter_seed(i, m, 1), layout_.adapter));
      }
    }
  }

  const MppConfig& config() const { return cfg_; }
  const ProjectorLayout& layout() const { return layout_; }
  bool evolving() const { return layout_.use_projector && is_evolving(layout_.adapter); }

  Tensor& embedding() { return embedding_.values; }
  const Tensor& embedding() const { return embedding_.values; }

  /// W_shared^m, or the layer's own full weight when sharing is disabled.
  Tensor& base_weight(std::size_t layer, Modality m) {
    return shared_.at(Key{layout_.shared_weight ? 0 : layer, m});
  }

  std::map<Key, AdapterState>& adapters() { return adapters_; }
  const std::map<Key, AdapterState>& adapters() const { return adapters_; }
  AdapterState& adapter(std::size_t layer, Modality m) { return adapters_.at(Key{layer, m}); }
  std::map<Key, Tensor>& free_prompts() { return free_prompts_; }

  /// W_i = base + Delta W_i on the tape.
  Var composed_weight(Tape& t, std::size_t layer, Modality m) {
    return add(t.param(base_weight(layer, m)), adapter(layer, m).compose(t));
  }

  Tensor composed_weight_value(std::size_t layer, Modality m) {
    Tape t;
    return composed_weight(t, layer, m).value();
  }

  /// Every P_i^m for i in J..L, bound to the tape.
  PromptSet prompts(Tape& t) {
    PromptSet ps;
    if (!layout_.use_projector) {
      for (auto& [key, p] : free_prompts_) ps.set(key.first, key.second, t.param(p));
      return ps;
    }
    Var e = t.param(embedding_.values);
    // The shared weight is bound once so every layer reads one tape node.
    std::map<Key, Var> bases;
    for (auto& [key, w] : shared_) bases.emplace(key, t.param(w));
    for (auto& [key, ad] : adapters_) {
      const Var& base = bases.at(Key{layout_.shared_weight ? 0 : key.first, key.second});
      ps.set(key.first, key.second, project(e, add(base, ad.compose(t))));
    }
    return ps;
  }

  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    if (!layout_.use_projector) {
      for (auto& [k, p] : free_prompts_) out.push_back(&p);
      return out;
    }
    out.push_back(&embedding_.values);
    for (auto& [k, w] : shared_) out.push_back(&w);
    for (auto& [k, ad] : adapters_) {
      for (Tensor* p : ad.trainable()) out.push_back(p);
    }
    return out;
  }

  /// Exhaustive enumeration of trainable scalars.
  std::size_t trainable_count() {
    std::size_t n = 0;
    for (Tensor* p : trainable()) n += p->size();
    return n;
  }

  /// Epoch boundary: freeze every adapter direction of `finished_epoch`
  /// and spawn fresh factors at `next_rank`. No-op for non-evolving layouts.
  void transition(int finished_epoch, int next_rank) {
    if (!evolving()) return;
    for (auto& [key, ad] : adapters_) {
      ad.freeze(finished_epoch);
      ad.spawn(next_rank, adapter_seed(key.first, key.second, finished_epoch + 1));
    }
  }

  /// Stable name prefix of a (layer, modality) slot.
  static std::string slot_name(const Key& k) {
    return "layer" + std::to_string(k.first) + (k.second == Modality::vision ? ".vision" : ".text");
  }

  /// Live (non-history) state by name, in a fixed order.
  std::vector<std::pair<std::string, const Tensor*>> named_state() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const auto& [k, p] : free_prompts_) out.emplace_back(slot_name(k) + ".prompt", &p);
    if (!layout_.use_projector) return out;
    out.emplace_back("E", &embedding_.values);
    for (const auto& [k, w] : shared_) {
      out.emplace_back(k.first == 0 ? std::string(k.second == Modality::vision ? "shared.vision" : "shared.text")
                                    : slot_name(k) + ".W",
                       &w);
    }
    for (const auto& [k, ad] : adapters_) {
      if (!ad.active()) continue;
      out.emplace_back(slot_name(k) + ".A", &ad.factor_a());
      if (!is_dense(ad.mode())) out.emplace_back(slot_name(k) + ".B", &ad.factor_b());
      if (is_evolving(ad.mode())) out.emplace_back(slot_name(k) + ".alpha", &ad.alpha());
    }
    return out;
  }

  /// Frozen history by name: <slot>.t<k>.alpha and <slot>.t<k>.direction.
  std::vector<std::pair<std::string, const Tensor*>> named_history() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const auto& [k, ad] : adapters_) {
      for (const auto& h : ad.history()) {
        const std::string p = slot_name(k) + ".t" + std::to_string(h.epoch);
        out.emplace_back(p + ".alpha", &h.alpha);
        out.emplace_back(p + ".direction", &h.direction);
      }
    }
    return out;
  }

  /// Inverse of named_state / named_history for a projector built from the
  /// same config and layout.
  void restore(const std::map<std::string, Tensor>& state, const std::map<std::string, Tensor>& history) {
    std::size_t used = 0;
    auto take = [&](const std::string& name, Tensor& dst) {
      auto it = state.find(name);
      if (it == state.end()) throw InputError("projector restore: missing '" + name + "'");
      if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols()) {
        throw InputError("projector restore: shape mismatch for '" + name + "'");
      }
      std::copy(it->second.values().begin(), it->second.values().end(), dst.values().begin());
      ++used;
    };
    auto find = [&](const std::map<std::string, Tensor>& m, const std::string& name) -> const Tensor* {
      auto it = m.find(name);
      return it == m.end() ? nullptr : &it->second;
    };
    for (auto& [k, p] : free_prompts_) take(slot_name(k) + ".prompt", p);
    if (layout_.use_projector) {
      take("E", embedding_.values);
      for (auto& [k, w] : shared_) {
        take(k.first == 0 ? std::string(k.second == Modality::vision ? "shared.vision" : "shared.text")
                          : slot_name(k) + ".W",
             w);
      }
    }
    std::size_t hist_used = 0;
    for (auto& [k, ad] : adapters_) {
      const std::string p = slot_name(k);
      std::vector<HistoryEntry> hist;
      for (int t = 1;; ++t) {
        const Tensor* al = find(history, p + ".t" + std::to_string(t) + ".alpha");
        const Tensor* dir = find(history, p + ".t" + std::to_string(t) + ".direction");
        if (!al && !dir) break;
        if (!al || !dir) throw InputError("projector restore: incomplete history entry for " + p);
        HistoryEntry h;
        h.alpha = *al;
        h.direction = *dir;
        hist.push_back(std::move(h));
        hist_used += 2;
      }
      Tensor a, b, alpha;
      if (const Tensor* x = find(state, p + ".A")) a = *x, ++used;
      if (const Tensor* x = find(state, p + ".B")) b = *x, ++used;
      if (const Tensor* x = find(state, p + ".alpha")) alpha = *x, ++used;
      ad.restore(std::move(hist), std::move(a), std::move(b), std::move(alpha));
    }
    if (used != state.size() || hist_used != history.size()) {
      throw InputError("projector restore: snapshot has entries this layout does not use");
    }
  }

  bool history_intact() const {
    for (const auto& [k, ad] : adapters_) {
      if (!ad.history_intact()) return false;
    }
    return true;
  }

 private:
  std::uint64_t adapter_seed(std::size_t layer, Modality m, int epoch) const {
    return derive_seed(seed_, {5, layer, static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(epoch)});
  }

  MppConfig cfg_;
  ProjectorLayout layout_;
  std::uint64_t seed_;
  EmbeddingSpace embedding_;
  std::map<Key, Tensor> shared_;  // key layer 0 is the shared weight
  std::map<Key, AdapterState> adapters_;
  std::map<Key, Tensor> free_prompts_;
};

}  // namespace evoprompt
