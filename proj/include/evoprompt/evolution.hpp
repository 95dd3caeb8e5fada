#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evoprompt/encoder.hpp"
#include "evoprompt/tape.hpp"

namespace evoprompt {

/// Stepwise rank plan over epochs 1..N_e with drops at mu and nu.
struct EvolutionSchedule {
  int epochs = 10;  // N_e
  int mu = 4;
  int nu = 8;
  int r_high = 4;
  int r_mid = 2;
  int r_low = 1;

  // nu may lie past the horizon so short runs stay expressible; the drop
  // is then never reached.
  void validate() const {
    if (epochs < 1) throw ParameterError("schedule: epochs must be >= 1");
    if (!(1 < mu && mu < nu)) throw ParameterError("schedule: require 1 < mu < nu");
    if (!(r_high > r_mid && r_mid > r_low && r_low > 0)) {
      throw ParameterError("schedule: ranks must be positive and strictly decreasing");
    }
  }

  int rank_at(int t) const {
    if (t < 1 || t > epochs) {
      throw ParameterError("rank_at: epoch " + std::to_string(t) + " outside [1, " + std::to_string(epochs) + "]");
    }
    if (t < mu) return r_high;
    if (t < nu) return r_mid;
    return r_low;
  }
};

inline int rank_at(const EvolutionSchedule& s, int t) { return s.rank_at(t); }

inline constexpr double kAlphaInit = 0.01;
inline constexpr double kFactorInitStd = 0.02;

/// Magnitude proxy ||AB||_F and direction AB / (||AB||_F + eps).
inline std::pair<Var, Var> decouple(const Var& a, const Var& b, double eps = kDefaultNormEps) {
  Var prod = matmul(a, b);
  return {frobenius_norm(prod), normalize_frobenius(prod, eps)};
}

inline std::pair<double, Tensor> decouple(const Tensor& a, const Tensor& b, double eps = kDefaultNormEps) {
  Tape t;
  auto [m, d] = decouple(t.constant_ref(a), t.constant_ref(b), eps);
  return {m.item(), d.value()};
}

/// How the active update of an adapter is parameterized.
enum class AdapterMode {
  evolving,        // alpha * normalize(A B) plus frozen history
  dense_evolving,  // alpha * normalize(G) plus frozen history, G dense d_r x d_m
  plain_lora,      // A B trained throughout; no alpha, no history
  plain_dense,     // G trained throughout; no alpha, no history
};

inline bool is_dense(AdapterMode m) { return m == AdapterMode::dense_evolving || m == AdapterMode::plain_dense; }
inline bool is_evolving(AdapterMode m) { return m == AdapterMode::evolving || m == AdapterMode::dense_evolving; }

/// One frozen history term: trainable magnitude, frozen unit direction.
struct HistoryEntry {
  Tensor alpha;
  Tensor direction;
  std::uint64_t direction_checksum = 0;
  int epoch = 0;
};

/// Adapter for one (layer, modality) projector.
class AdapterState {
 public:
  AdapterState(std::size_t layer, Modality m, std::size_t d_r, std::size_t d_m, int rank, std::uint64_t seed,
               AdapterMode mode = AdapterMode::evolving)
      : layer_(layer), modality_(m), d_r_(d_r), d_m_(d_m), mode_(mode) {
    spawn(rank, seed);
  }

  std::size_t layer() const { return layer_; }
  Modality modality() const { return modality_; }
  std::size_t rows() const { return d_r_; }
  std::size_t cols() const { return d_m_; }
  AdapterMode mode() const { return mode_; }
  bool active() const { return active_; }
  int rank() const { return rank_; }

  const std::vector<HistoryEntry>& history() const { return history_; }
  std::vector<HistoryEntry>& history() { return history_; }
  Tensor& factor_a() { return a_; }
  Tensor& factor_b() { return b_; }
  Tensor& dense() { return a_; }
  Tensor& alpha() { return alpha_; }
  const Tensor& factor_a() const { return a_; }
  const Tensor& factor_b() const { return b_; }
  const Tensor& alpha() const { return alpha_; }

  /// Parameters the optimizer may touch right now.
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    for (auto& h : history_) out.push_back(&h.alpha);
    if (active_) {
      out.push_back(&a_);
      if (!is_dense(mode_)) out.push_back(&b_);
      if (is_evolving(mode_)) out.push_back(&alpha_);
    }
    return out;
  }

  std::size_t trainable_count() {
    std::size_t n = 0;
    for (Tensor* t : trainable()) n += t->size();
    return n;
  }

  /// Delta W = sum_t alpha_t D_t + alpha_T normalize(current), d_r x d_m.
  Var compose(Tape& t, double eps = kDefaultNormEps) {
    if (!is_evolving(mode_)) return current(t);
    Var acc = t.constant(Tensor::matrix(d_r_, d_m_));
    for (auto& h : history_) acc = add(acc, scalar_mul(t.param(h.alpha), t.constant_ref(h.direction)));
    if (active_) acc = add(acc, scalar_mul(t.param(alpha_), normalize_frobenius(current(t), eps)));
    return acc;
  }

  Tensor compose_value(double eps = kDefaultNormEps) {
    Tape t;
    return compose(t, eps).value();
  }

  /// Moves the active (alpha, direction) into the frozen history and
  /// retires the factors. `epoch` is the epoch just finished. The stored
  /// direction is renormalized without eps so it is unit to rounding; eps
  /// only matters for a zero product, which stays zero.
  void freeze(int epoch, double eps = kDefaultNormEps) {
    if (!is_evolving(mode_)) throw ContractError("freeze_epoch: adapter does not evolve");
    if (!active_) throw ContractError("freeze_epoch: adapter already frozen this epoch");
    if (epoch != static_cast<int>(history_.size()) + 1) {
      throw ContractError("freeze_epoch: expected epoch " + std::to_string(history_.size() + 1) + ", got " +
                          std::to_string(epoch));
    }
    HistoryEntry h;
    {
      Tape t;
      h.direction = normalize_frobenius(current(t), eps).value();
    }
    if (const double n = frobenius_norm(h.direction); n > 0.0) {
      for (auto& v : h.direction.values()) v /= n;
    }
    h.direction_checksum = checksum(h.direction);
    h.alpha = alpha_;
    h.alpha.set_requires_grad(true);
    h.epoch = epoch;
    history_.push_back(std::move(h));
    a_ = Tensor();
    b_ = Tensor();
    alpha_ = Tensor();
    active_ = false;
    rank_ = 0;
  }

  /// Allocates fresh Gaussian factors of the given rank and alpha = alpha0.
  void spawn(int rank, std::uint64_t seed) {
    if (active_) throw ContractError("spawn_epoch: adapter still has active factors");
    if (rank <= 0) throw ParameterError("spawn_epoch: rank must be positive");
    std::mt19937_64 rng(seed);
    if (is_dense(mode_)) {
      a_ = Tensor::gaussian({d_r_, d_m_}, kFactorInitStd, rng);
    } else {
      a_ = Tensor::gaussian({d_r_, static_cast<std::size_t>(rank)}, kFactorInitStd, rng);
      b_ = Tensor::gaussian({static_cast<std::size_t>(rank), d_m_}, kFactorInitStd, rng);
      b_.set_requires_grad(true);
    }
    a_.set_requires_grad(true);
    if (is_evolving(mode_)) {
      alpha_ = Tensor::scalar(kAlphaInit);
      alpha_.set_requires_grad(true);
    }
    rank_ = rank;
    active_ = true;
  }

  /// Reinstates a saved state. An empty `a` leaves the adapter inactive.
  void restore(std::vector<HistoryEntry> history, Tensor a, Tensor b, Tensor alpha) {
    if (!is_evolving(mode_) && !history.empty()) throw InputError("adapter restore: history on a non-evolving adapter");
    for (std::size_t k = 0; k < history.size(); ++k) {
      auto& h = history[k];
      if (h.direction.rows() != d_r_ || h.direction.cols() != d_m_ || h.alpha.size() != 1) {
        throw InputError("adapter restore: bad history entry shape");
      }
      h.epoch = static_cast<int>(k) + 1;
      h.direction.set_requires_grad(false);
      h.direction_checksum = checksum(h.direction);
      h.alpha.set_requires_grad(true);
    }
    const bool active = a.size() > 0;
    int rank = 0;
    if (active) {
      if (a.rows() != d_r_) throw InputError("adapter restore: factor A has the wrong row count");
      if (is_dense(mode_)) {
        if (a.cols() != d_m_) throw InputError("adapter restore: dense update must be d_r x d_m");
      } else {
        if (b.rows() != a.cols() || b.cols() != d_m_) throw InputError("adapter restore: factor B shape mismatch");
        rank = static_cast<int>(a.cols());
        b.set_requires_grad(true);
      }
      a.set_requires_grad(true);
      if (is_evolving(mode_)) {
        if (alpha.size() != 1) throw InputError("adapter restore: missing alpha");
        alpha.set_requires_grad(true);
      }
    }
    history_ = std::move(history);
    a_ = std::move(a);
    b_ = active && !is_dense(mode_) ? std::move(b) : Tensor();
    alpha_ = active && is_evolving(mode_) ? std::move(alpha) : Tensor();
    rank_ = rank;
    active_ = active;
  }

  /// True when every stored direction still has its freeze-time checksum.
  bool history_intact() const {
    for (const auto& h : history_) {
      if (checksum(h.direction) != h.direction_checksum) return false;
    }
    return true;
  }

 private:
  Var current(Tape& t) {
    if (is_dense(mode_)) return t.param(a_);
    return matmul(t.param(a_), t.param(b_));
  }

  std::size_t layer_;
  Modality modality_;
  std::size_t d_r_, d_m_;
  AdapterMode mode_;
  std::vector<HistoryEntry> history_;
  Tensor a_, b_, alpha_;
  int rank_ = 0;
  bool active_ = false;
};

inline Var compose_adapter(Tape& t, AdapterState& s, double eps = kDefaultNormEps) { return s.compose(t, eps); }

inline void freeze_epoch(AdapterState& s, int epoch, double eps = kDefaultNormEps) { s.freeze(epoch, eps); }

inline void spawn_epoch(AdapterState& s, int rank, std::uint64_t seed) { s.spawn(rank, seed); }

}  // namespace evoprompt
