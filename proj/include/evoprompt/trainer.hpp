#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "evoprompt/encoder.hpp"
#include "evoprompt/evolution.hpp"
#include "evoprompt/gradcheck.hpp"
#include "evoprompt/losses.hpp"
#include "evoprompt/mpp.hpp"
#include "evoprompt/tasks.hpp"

namespace evoprompt {

struct OptimConfig {
  double lr = 0.01;
  std::size_t batch = 32;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the base train set
  double momentum = 0.0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optim: lr must be finite and >= 0");
    if (batch < 2) throw ConfigError("optim: batch must be >= 2 (covariance needs two rows)");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim: momentum must lie in [0, 1)");
  }
};

/// Table 4a ablation switches.
struct Variant {
  bool no_mpp = false;
  bool no_shared = false;
  bool full_rank = false;
  bool no_evolution = false;
  bool no_kcl = false;
  bool no_fgr = false;

  void validate() const {
    if (no_mpp && (no_shared || full_rank || no_evolution)) {
      throw ConfigError("variant: no_mpp removes the projector, so no_shared/full_rank/no_evolution cannot apply");
    }
  }

  ProjectorLayout layout() const {
    ProjectorLayout l;
    l.use_projector = !no_mpp;
    l.shared_weight = !no_shared;
    if (full_rank) l.adapter = no_evolution ? AdapterMode::plain_dense : AdapterMode::dense_evolving;
    else l.adapter = no_evolution ? AdapterMode::plain_lora : AdapterMode::evolving;
    return l;
  }

  std::string name() const {
    std::string s;
    auto add = [&s](bool on, const char* n) {
      if (!on) return;
      if (!s.empty()) s += "+";
      s += n;
    };
    add(no_mpp, "no_mpp");
    add(no_shared, "no_shared");
    add(full_rank, "full_rank");
    add(no_evolution, "no_evolution");
    add(no_kcl, "no_kcl");
    add(no_fgr, "no_fgr");
    return s.empty() ? "full" : s;
  }

  /// "full", a single flag name, or flags joined with '+'.
  static Variant parse(const std::string& text) {
    Variant v;
    if (text == "full") return v;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('+', pos), text.size());
      const std::string flag = text.substr(pos, end - pos);
      if (flag == "no_mpp") v.no_mpp = true;
      else if (flag == "no_shared") v.no_shared = true;
      else if (flag == "full_rank") v.full_rank = true;
      else if (flag == "no_evolution") v.no_evolution = true;
      else if (flag == "no_kcl") v.no_kcl = true;
      else if (flag == "no_fgr") v.no_fgr = true;
      else throw ConfigError("unknown variant '" + flag + "'");
      pos = end + 1;
    }
    v.validate();
    return v;
  }
};

inline const std::vector<std::string>& table4a_variants() {
  static const std::vector<std::string> names = {"no_mpp",       "no_shared", "full_rank",
                                                 "no_evolution", "no_kcl",    "no_fgr"};
  return names;
}

struct TrainConfig {
  EncoderConfig encoder;
  MppConfig mpp;
  EvolutionSchedule schedule;
  LossWeights loss;
  OptimConfig optim;
  TaskConfig task;
  Variant variant;
  std::uint64_t seed = 0;
  bool gradcheck_each_epoch = false;

  /// Copies encoder-owned extents into the projector config.
  void sync() {
    mpp.vision_width = encoder.vision_width;
    mpp.text_width = encoder.text_width;
    mpp.last_layer = encoder.layers;
  }

  void validate() const {
    encoder.validate();
    mpp.validate();
    schedule.validate();
    loss.validate();
    optim.validate();
    task.validate();
    variant.validate();
    if (mpp.vision_width != encoder.vision_width || mpp.text_width != encoder.text_width ||
        mpp.last_layer != encoder.layers) {
      throw ConfigError("mpp widths and last layer must match the encoder");
    }
  }

  LossWeights effective_loss() const {
    LossWeights w = loss;
    if (variant.no_fgr) w.gamma = 0.0;
    if (variant.no_kcl) w.eta = 0.0;
    return w;
  }
};

/// Small enough for exhaustive gradient checks (a few hundred scalars).
inline TrainConfig tiny_config() {
  TrainConfig c;
  c.encoder.layers = 2;
  c.encoder.patches = 4;
  c.encoder.text_tokens = 3;
  c.encoder.vision_width = 8;
  c.encoder.text_width = 8;
  c.encoder.embed_dim = 8;
  c.encoder.heads = 2;
  c.encoder.vocab = 16;
  c.encoder.patch_dim = 4;
  c.encoder.mlp_ratio = 2;
  c.mpp.first_layer = 1;
  c.mpp.prompt_length = 2;
  c.mpp.vectors = 2;
  c.mpp.shared_dim = 4;
  c.schedule.epochs = 3;
  c.schedule.mu = 2;
  c.schedule.nu = 3;
  c.schedule.r_high = 3;
  c.schedule.r_mid = 2;
  c.schedule.r_low = 1;
  c.task.classes = 4;
  c.task.shots = 4;
  c.task.test_per_class = 5;
  c.optim.batch = 8;
  c.sync();
  return c;
}

struct LossValues {
  double total = 0.0, nce = 0.0, fgr = 0.0, kcl = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  LossValues loss;  // mean over the epoch's steps
  double base_acc = 0.0, novel_acc = 0.0, hm = 0.0;
  std::size_t trainable_params = 0;
  std::size_t audit_params = 0;
  double gradcheck_error = -1.0;  // < 0 when not checked
  double seconds = 0.0;
};

struct AlphaEntry {
  int epoch = 0;  // the frozen epoch t
  std::size_t layer = 0;
  Modality modality = Modality::vision;
  double alpha = 0.0;
};

struct TrainReport {
  std::string variant = "full";
  std::uint64_t seed = 0;
  EvalResult zero_shot;
  std::vector<EpochRecord> epochs;
  std::vector<AlphaEntry> alphas;  // final values of every frozen alpha
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
  bool directions_intact = true;
  double max_direction_norm_error = 0.0;
  bool evolution = true;

  const EpochRecord& final_epoch() const { return epochs.back(); }
};

/// Encoder aligned to the task before any prompt training.
struct World {
  FrozenEncoder encoder;
  SyntheticTask task;
};

inline constexpr std::size_t kAlignDraws = 64;
inline constexpr double kAlignRidge = 1e-3;

/// Encoder, task and alignment. Alignment perturbations are projector
/// initializations with seeds disjoint from any training run.
inline World build_world(const TrainConfig& cfg, std::size_t align_draws = kAlignDraws, double ridge = kAlignRidge) {
  TrainConfig c = cfg;
  c.sync();
  FrozenEncoder enc(c.encoder);
  SyntheticTask task = generate_task(c.task, c.encoder);
  std::vector<PromptProjector> draws;
  draws.reserve(align_draws);
  for (std::size_t k = 0; k < align_draws; ++k) {
    draws.emplace_back(c.mpp, ProjectorLayout{}, c.schedule, derive_seed(c.task.seed, {0xA11, k}));
  }
  auto sampler = [&draws](Tape& t, std::size_t k) { return draws[k].prompts(t); };
  align_encoder(enc, task, ridge, align_draws, sampler);
  return {std::move(enc), std::move(task)};
}

/// Owns the trainable prompt state for one run. Frozen-encoder work that
/// does not depend on prompts (layers before J, zero-prompt features) is
/// computed once and cached.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::shared_ptr<const World> world)
      : cfg_(synced(cfg)), world_(std::move(world)),
        projector_(cfg_.mpp, cfg_.variant.layout(), cfg_.schedule, derive_seed(cfg_.seed, {0x9A0})),
        weights_(cfg_.effective_loss()), shuffle_rng_(derive_seed(cfg_.seed, {0x5F1})) {
    cfg_.validate();
    const auto& task = world_->task;
    for (const Sample& s : task.train) {
      if (!task.is_base(s.label)) throw ContractError("trainer: novel-class sample in the training set");
    }
    for (std::size_t i = 0; i < task.base.size(); ++i) base_index_[task.base[i]] = static_cast<int>(i);
    for (const Sample& s : task.train) {
      train_prefix_.push_back(vision_prefix(s.patches));
      train_frozen_.push_back(encoder().encode_image(s.patches));
    }
    for (int c = 0; c < task.classes; ++c) {
      const auto& ids = task.class_tokens[static_cast<std::size_t>(c)];
      text_prefix_.push_back(text_prefix(ids));
      text_frozen_.push_back(encoder().encode_text(ids));
    }
    const std::size_t n = task.train.size();
    batch_ = std::min(cfg_.optim.batch, n);
    steps_ = cfg_.optim.steps_per_epoch ? cfg_.optim.steps_per_epoch : (n + batch_ - 1) / batch_;
  }

  const TrainConfig& config() const { return cfg_; }
  const FrozenEncoder& encoder() const { return world_->encoder; }
  const SyntheticTask& task() const { return world_->task; }
  PromptProjector& projector() { return projector_; }
  const LossWeights& weights() const { return weights_; }
  int epoch() const { return epoch_; }
  std::size_t steps_per_epoch() const { return steps_; }
  std::size_t batch_size() const { return batch_; }

  /// Next mini-batch of train indices; reshuffles after each full pass.
  std::vector<std::size_t> next_batch() {
    const std::size_t n = task().train.size();
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) {
        order_.resize(n);
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        std::shuffle(order_.begin(), order_.end(), shuffle_rng_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

  /// Eq. 13 on a batch, recorded on `t`.
  Var build_loss(Tape& t, std::span<const std::size_t> batch, LossValues* values = nullptr) {
    const auto& task = world_->task;
    const std::size_t j = cfg_.mpp.first_layer, last = cfg_.encoder.layers;
    PromptSet ps = projector_.prompts(t);

    std::vector<Var> class_rows;
    for (int c : task.base) {
      const auto k = static_cast<std::size_t>(c);
      class_rows.push_back(
          encoder().text_head(t, encoder().run_text(t, t.constant_ref(text_prefix_[k]), j, last, ps)));
    }
    Var class_feats = concat_rows(class_rows);

    std::vector<Var> image_rows;
    std::vector<int> labels;
    const std::size_t b = batch.size(), d = cfg_.encoder.embed_dim;
    Tensor select = Tensor::matrix(b, task.base.size());
    Tensor fv0 = Tensor::matrix(b, d), ft0 = Tensor::matrix(b, d);
    for (std::size_t r = 0; r < b; ++r) {
      const std::size_t idx = batch[r];
      image_rows.push_back(
          encoder().vision_head(t, encoder().run_vision(t, t.constant_ref(train_prefix_[idx]), j, last, ps)));
      const int label = task.train[idx].label;
      const int y = base_index_.at(label);
      labels.push_back(y);
      select(r, static_cast<std::size_t>(y)) = 1.0;
      for (std::size_t k = 0; k < d; ++k) {
        fv0(r, k) = train_frozen_[idx][k];
        ft0(r, k) = text_frozen_[static_cast<std::size_t>(label)][k];
      }
    }
    FeatureBatch fb{concat_rows(image_rows), matmul(t.constant(std::move(select)), class_feats), std::move(labels),
                    std::move(fv0), std::move(ft0)};
    LossTerms terms = total_loss(fb, class_feats, weights_);
    if (values) *values = {terms.total.item(), terms.nce, terms.fgr, terms.kcl};
    return terms.total;
  }

  LossValues batch_loss(std::span<const std::size_t> batch) {
    Tape t;
    LossValues v;
    build_loss(t, batch, &v);
    return v;
  }

  /// One gradient step; throws DivergenceError on a non-finite or
  /// exploding loss.
  LossValues step(std::span<const std::size_t> batch) {
    LossValues v;
    try {
      Tape t;
      Var loss = build_loss(t, batch, &v);
      guard(v);
      t.backward(loss);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("non-finite value during step in epoch ") + std::to_string(epoch_) + ": " +
                            e.what());
    }
    apply_update();
    return v;
  }

  /// Finite-difference check of Eq. 13 over every trainable scalar.
  GradCheckResult gradcheck(std::span<const std::size_t> batch, double h = 1e-5) {
    std::vector<std::size_t> idx(batch.begin(), batch.end());
    auto params = projector_.trainable();
    return finite_diff_check_detailed([this, idx](Tape& t) { return build_loss(t, idx); }, params, h);
  }

  /// Prompted base and novel accuracy; novel classes are scored only
  /// against novel-class text features.
  EvalResult evaluate() { return evaluate_with(prompt_values()); }

  /// The frozen model with no prompts injected.
  EvalResult evaluate_frozen() const { return evaluate_with({}); }

  EvalResult evaluate_with(const std::map<PromptProjector::Key, Tensor>& prompts) const {
    const auto& task = world_->task;
    auto feats = [&](const std::vector<int>& ids) {
      Tensor cls = Tensor::matrix(ids.size(), cfg_.encoder.embed_dim);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        Tensor f = prompted_text(task.class_tokens[static_cast<std::size_t>(ids[k])], prompts);
        for (std::size_t c = 0; c < cls.cols(); ++c) cls(k, c) = f[c];
      }
      return cls;
    };
    auto predict = [&](const Sample& s) { return prompted_image(s.patches, prompts); };
    Accuracy base = parallel_accuracy(predict, task.test_base, feats(task.base), task.base);
    Accuracy novel = parallel_accuracy(predict, task.test_novel, feats(task.novel), task.novel);
    EvalResult r;
    r.base_acc = base.accuracy;
    r.novel_acc = novel.accuracy;
    r.hm = harmonic_mean(r.base_acc, r.novel_acc);
    r.per_class.assign(static_cast<std::size_t>(task.classes), 0.0);
    for (std::size_t k = 0; k < task.base.size(); ++k) r.per_class[static_cast<std::size_t>(task.base[k])] = base.per_class[k];
    for (std::size_t k = 0; k < task.novel.size(); ++k)
      r.per_class[static_cast<std::size_t>(task.novel[k])] = novel.per_class[k];
    return r;
  }

  /// Epoch boundary: freeze and spawn at the next scheduled rank.
  void end_epoch() {
    if (epoch_ < cfg_.schedule.epochs) projector_.transition(epoch_, cfg_.schedule.rank_at(epoch_ + 1));
    velocity_.clear();  // tensors may have moved
    ++epoch_;
  }

  /// Runs every remaining epoch and returns the report.
  TrainReport run() {
    TrainReport rep;
    rep.variant = cfg_.variant.name();
    rep.seed = cfg_.seed;
    rep.evolution = projector_.evolving();
    rep.encoder_checksum_before = encoder().checksum();
    rep.zero_shot = evaluate();
    while (epoch_ <= cfg_.schedule.epochs) {
      const auto start = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.epoch = epoch_;
      rec.trainable_params = projector_.trainable_count();
      rec.audit_params = param_count(cfg_.mpp, epoch_, cfg_.schedule, cfg_.variant.layout()).total();
      if (rec.trainable_params != rec.audit_params) {
        throw ContractError("parameter audit failed in epoch " + std::to_string(epoch_) + ": enumerated " +
                            std::to_string(rec.trainable_params) + ", closed form " +
                            std::to_string(rec.audit_params));
      }
      for (std::size_t s = 0; s < steps_; ++s) {
        std::vector<std::size_t> batch = next_batch();
        if (s == 0 && cfg_.gradcheck_each_epoch) rec.gradcheck_error = gradcheck(batch).max_rel_error;
        LossValues v = step(batch);
        rec.loss.total += v.total;
        rec.loss.nce += v.nce;
        rec.loss.fgr += v.fgr;
        rec.loss.kcl += v.kcl;
      }
      const double inv = 1.0 / static_cast<double>(steps_);
      rec.loss.total *= inv;
      rec.loss.nce *= inv;
      rec.loss.fgr *= inv;
      rec.loss.kcl *= inv;
      EvalResult ev = evaluate();
      rec.base_acc = ev.base_acc;
      rec.novel_acc = ev.novel_acc;
      rec.hm = ev.hm;
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rep.epochs.push_back(rec);
      end_epoch();
    }
    rep.encoder_checksum_after = encoder().checksum();
    rep.directions_intact = projector_.history_intact();
    for (const auto& [key, ad] : projector_.adapters()) {
      for (const auto& h : ad.history()) {
        rep.max_direction_norm_error =
            std::max(rep.max_direction_norm_error, std::abs(frobenius_norm(h.direction) - 1.0));
        rep.alphas.push_back({h.epoch, key.first, key.second, h.alpha[0]});
      }
    }
    std::stable_sort(rep.alphas.begin(), rep.alphas.end(),
                     [](const AlphaEntry& a, const AlphaEntry& b) { return a.epoch < b.epoch; });
    return rep;
  }

 private:
  static TrainConfig synced(TrainConfig c) {
    c.sync();
    return c;
  }

  Tensor vision_prefix(const Tensor& patches) const {
    Tape t;
    Var x = encoder().embed_image(t, patches);
    if (cfg_.mpp.first_layer > 1) x = encoder().run_vision(t, x, 1, cfg_.mpp.first_layer - 1, PromptSet{});
    return x.value();
  }

  Tensor text_prefix(std::span<const int> ids) const {
    Tape t;
    Var x = encoder().embed_text(t, ids);
    if (cfg_.mpp.first_layer > 1) x = encoder().run_text(t, x, 1, cfg_.mpp.first_layer - 1, PromptSet{});
    return x.value();
  }

  std::map<PromptProjector::Key, Tensor> prompt_values() {
    Tape t;
    PromptSet ps = projector_.prompts(t);
    std::map<PromptProjector::Key, Tensor> out;
    for (Modality m : kModalities)
      for (const auto& [layer, v] : ps.layers(m)) out.emplace(PromptProjector::Key{layer, m}, v.value());
    return out;
  }

  static PromptSet bind(Tape& t, const std::map<PromptProjector::Key, Tensor>& prompts) {
    PromptSet ps;
    for (const auto& [key, p] : prompts) ps.set(key.first, key.second, t.constant_ref(p));
    return ps;
  }

  Tensor prompted_image(const Tensor& patches, const std::map<PromptProjector::Key, Tensor>& prompts) const {
    Tape t;
    return encoder().forward_vision(t, encoder().embed_image(t, patches), bind(t, prompts)).value();
  }

  Tensor prompted_text(std::span<const int> ids, const std::map<PromptProjector::Key, Tensor>& prompts) const {
    Tape t;
    return encoder().forward_text(t, ids, bind(t, prompts)).value();
  }

  // Features are computed on worker threads in fixed chunks, then scored
  // in order, so results do not depend on scheduling.
  static Accuracy parallel_accuracy(const std::function<Tensor(const Sample&)>& predict,
                                    const std::vector<Sample>& data, const Tensor& class_feats,
                                    const std::vector<int>& ids) {
    const std::size_t n = data.size();
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), 8));
    std::vector<Tensor> feats(n);
    if (workers == 1) {
      for (std::size_t i = 0; i < n; ++i) feats[i] = predict(data[i]);
    } else {
      std::vector<std::future<void>> jobs;
      const std::size_t chunk = (n + workers - 1) / workers;
      for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        jobs.push_back(std::async(std::launch::async, [&, lo, hi] {
          for (std::size_t i = lo; i < hi; ++i) feats[i] = predict(data[i]);
        }));
      }
      for (auto& j : jobs) j.get();
    }
    std::size_t i = 0;
    return evoprompt::evaluate([&](const Sample&) { return feats[i++]; }, data, class_feats, ids);
  }

  void guard(const LossValues& v) const {
    for (double x : {v.total, v.nce, v.fgr, v.kcl}) {
      if (!std::isfinite(x) || std::abs(x) > 1e6) {
        throw DivergenceError("loss diverged in epoch " + std::to_string(epoch_) + ": total=" +
                              std::to_string(v.total) + " nce=" + std::to_string(v.nce) +
                              " fgr=" + std::to_string(v.fgr) + " kcl=" + std::to_string(v.kcl));
      }
    }
  }

  void apply_update() {
    const double lr = cfg_.optim.lr, mom = cfg_.optim.momentum;
    for (Tensor* p : projector_.trainable()) {
      auto g = p->grad();
      if (mom > 0.0) {
        auto& vel = velocity_[p];
        vel.resize(p->size(), 0.0);
        for (std::size_t k = 0; k < p->size(); ++k) {
          vel[k] = mom * vel[k] + g[k];
          (*p)[k] -= lr * vel[k];
        }
      } else {
        for (std::size_t k = 0; k < p->size(); ++k) (*p)[k] -= lr * g[k];
      }
      if (!p->all_finite()) throw DivergenceError("parameter became non-finite in epoch " + std::to_string(epoch_));
      p->zero_grad();
    }
  }

  TrainConfig cfg_;
  std::shared_ptr<const World> world_;
  PromptProjector projector_;
  LossWeights weights_;
  std::mt19937_64 shuffle_rng_;
  std::map<int, int> base_index_;
  std::vector<Tensor> train_prefix_, train_frozen_;
  std::vector<Tensor> text_prefix_, text_frozen_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t batch_ = 0, steps_ = 0;
  int epoch_ = 1;
  std::map<Tensor*, std::vector<double>> velocity_;
};

inline TrainReport train(const TrainConfig& cfg, std::shared_ptr<const World> world) {
  Trainer t(cfg, std::move(world));
  return t.run();
}

inline TrainReport train(const TrainConfig& cfg) {
  return train(cfg, std::make_shared<const World>(build_world(cfg)));
}

inline TrainReport ablate(TrainConfig cfg, const Variant& v, std::shared_ptr<const World> world) {
  v.validate();
  cfg.variant = v;
  return train(cfg, std::move(world));
}

inline TrainReport ablate(TrainConfig cfg, const Variant& v) {
  cfg.variant = v;
  return train(cfg);
}

/// Final alpha of every frozen epoch, indexed [t-1][layer-J][modality].
using AlphaTrace = std::vector<std::vector<std::array<double, 2>>>;

inline AlphaTrace alpha_trace(const TrainReport& rep, const MppConfig& mpp) {
  AlphaTrace out;
  if (!rep.evolution) return out;
  for (const AlphaEntry& a : rep.alphas) {
    const auto t = static_cast<std::size_t>(a.epoch);
    if (out.size() < t) out.resize(t, std::vector<std::array<double, 2>>(mpp.span(), {0.0, 0.0}));
    out[t - 1][a.layer - mpp.first_layer][static_cast<std::size_t>(a.modality)] = a.alpha;
  }
  return out;
}

struct Curve {
  std::vector<double> base_acc, novel_acc;
  double novel_drop = 0.0;  // peak novel accuracy minus final novel accuracy
  double final_hm = 0.0;
};

inline Curve curve_of(const TrainReport& rep) {
  Curve c;
  for (const auto& e : rep.epochs) {
    c.base_acc.push_back(e.base_acc);
    c.novel_acc.push_back(e.novel_acc);
  }
  c.novel_drop = *std::max_element(c.novel_acc.begin(), c.novel_acc.end()) - c.novel_acc.back();
  c.final_hm = rep.final_epoch().hm;
  return c;
}

struct BreakpointResult {
  TrainReport full, no_evolution;
  Curve full_curve, no_evolution_curve;
};

/// Trains full EvoPrompt and the no_evolution variant for an extended
/// horizon on the same world.
inline BreakpointResult breakpoint_experiment(TrainConfig cfg, int extended_epochs,
                                              std::shared_ptr<const World> world = nullptr) {
  if (extended_epochs < 2 * cfg.schedule.epochs) {
    throw ParameterError("breakpoint_experiment: extended_epochs must be >= 2 * N_e");
  }
  cfg.schedule.epochs = extended_epochs;
  if (!world) world = std::make_shared<const World>(build_world(cfg));
  BreakpointResult r;
  cfg.variant = Variant{};
  r.full = train(cfg, world);
  Variant nv;
  nv.no_evolution = true;
  r.no_evolution = ablate(cfg, nv, world);
  r.full_curve = curve_of(r.full);
  r.no_evolution_curve = curve_of(r.no_evolution);
  return r;
}

}  // namespace evoprompt
