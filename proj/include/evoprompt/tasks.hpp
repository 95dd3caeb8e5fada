#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evoprompt/encoder.hpp"

namespace evoprompt {

struct TaskConfig {
  int classes = 8;
  int shots = 16;
  int test_per_class = 50;
  double sigma_x = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 4 || classes % 2 != 0) throw ParameterError("task: class count must be even and >= 4");
    static constexpr int kShots[] = {1, 2, 4, 8, 16};
    if (std::find(std::begin(kShots), std::end(kShots), shots) == std::end(kShots)) {
      throw ParameterError("task: shots must be one of 1, 2, 4, 8, 16");
    }
    if (test_per_class < 1) throw ParameterError("task: test_per_class must be >= 1");
    if (sigma_x < 0.0) throw ParameterError("task: sigma_x must be nonnegative");
  }
};

struct Sample {
  Tensor patches;  // M x p
  int label = 0;   // global class id
};

/// A synthetic few-shot world: orthogonal patch-space prototypes, one
/// token-id "class name" per class, and a base/novel split. The few-shot
/// pool holds `shots` samples of every class; the training set is its
/// base-class subset.
struct SyntheticTask {
  int classes = 0;
  double sigma_x = 0.0;
  std::vector<Tensor> prototypes;
  std::vector<std::vector<int>> class_tokens;
  std::vector<int> base;
  std::vector<int> novel;
  std::vector<Sample> train_pool;
  std::vector<Sample> train;
  std::vector<Sample> test_base;
  std::vector<Sample> test_novel;

  bool is_base(int c) const { return std::find(base.begin(), base.end(), c) != base.end(); }
};

/// Equal halves of 0..C-1 after a seeded shuffle; each half sorted.
inline std::pair<std::vector<int>, std::vector<int>> split_base_novel(int classes, std::uint64_t seed) {
  if (classes < 2 || classes % 2 != 0) throw ParameterError("split_base_novel: class count must be even");
  std::vector<int> ids(static_cast<std::size_t>(classes));
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0x5B1}));
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto half = ids.begin() + classes / 2;
  std::vector<int> base(ids.begin(), half), novel(half, ids.end());
  std::sort(base.begin(), base.end());
  std::sort(novel.begin(), novel.end());
  return {base, novel};
}

namespace detail {

inline Sample draw_sample(const Tensor& proto, int label, double sigma, std::mt19937_64& rng) {
  Sample s{proto, label};
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& v : s.patches.values()) v += noise(rng);
  }
  return s;
}

}  // namespace detail

/// Builds the task for an encoder of the given shape. Prototypes are an
/// orthogonalized Gaussian family scaled to unit RMS entries.
inline SyntheticTask generate_task(const TaskConfig& cfg, const EncoderConfig& enc) {
  cfg.validate();
  const std::size_t m = enc.patches, p = enc.patch_dim, dim = m * p;
  if (static_cast<std::size_t>(cfg.classes) > dim) {
    throw ParameterError("task: more classes than patch-space dimensions");
  }
  SyntheticTask task;
  task.classes = cfg.classes;
  task.sigma_x = cfg.sigma_x;

  std::mt19937_64 rng(derive_seed(cfg.seed, {0x7A5C}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd raw(static_cast<Eigen::Index>(dim), cfg.classes);
  for (Eigen::Index j = 0; j < raw.cols(); ++j)
    for (Eigen::Index i = 0; i < raw.rows(); ++i) raw(i, j) = gauss(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(raw.rows(), raw.cols());
  const double scale = std::sqrt(static_cast<double>(dim));
  for (int c = 0; c < cfg.classes; ++c) {
    Tensor proto = Tensor::matrix(m, p);
    for (std::size_t k = 0; k < dim; ++k) proto[k] = scale * q(static_cast<Eigen::Index>(k), c);
    task.prototypes.push_back(std::move(proto));
  }

  std::uniform_int_distribution<int> tok(0, static_cast<int>(enc.vocab) - 1);
  for (int c = 0; c < cfg.classes; ++c) {
    std::vector<int> ids(enc.text_tokens);
    for (auto& id : ids) id = tok(rng);
    task.class_tokens.push_back(std::move(ids));
  }

  std::tie(task.base, task.novel) = split_base_novel(cfg.classes, cfg.seed);

  std::mt19937_64 train_rng(derive_seed(cfg.seed, {0x7EA1}));
  for (int c = 0; c < cfg.classes; ++c)
    for (int s = 0; s < cfg.shots; ++s)
      task.train_pool.push_back(
          detail::draw_sample(task.prototypes[static_cast<std::size_t>(c)], c, cfg.sigma_x, train_rng));
  for (const Sample& s : task.train_pool)
    if (task.is_base(s.label)) task.train.push_back(s);

  std::mt19937_64 test_rng(derive_seed(cfg.seed, {0x7E57}));
  for (int c = 0; c < cfg.classes; ++c) {
    auto& dst = task.is_base(c) ? task.test_base : task.test_novel;
    for (int s = 0; s < cfg.test_per_class; ++s)
      dst.push_back(detail::draw_sample(task.prototypes[static_cast<std::size_t>(c)], c, cfg.sigma_x, test_rng));
  }
  return task;
}

/// Produces the k-th prompt perturbation used while aligning.
using PromptSampler = std::function<PromptSet(Tape&, std::size_t)>;

namespace detail {

/// Ridge least squares X * Phi ~= Y; lambda is relative to the mean Gram diagonal.
inline Tensor ridge_fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double ridge) {
  Eigen::MatrixXd phi;
  if (x.rows() <= x.cols()) {
    Eigen::MatrixXd gram = x * x.transpose();
    gram.diagonal().array() += ridge * gram.trace() / static_cast<double>(x.rows());
    phi = x.transpose() * gram.ldlt().solve(y);
  } else {
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += ridge * gram.trace() / static_cast<double>(x.cols());
    phi = gram.ldlt().solve(x.transpose() * y);
  }
  Tensor out = Tensor::matrix(static_cast<std::size_t>(phi.rows()), static_cast<std::size_t>(phi.cols()));
  for (Eigen::Index i = 0; i < phi.rows(); ++i)
    for (Eigen::Index j = 0; j < phi.cols(); ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = phi(i, j);
  return out;
}

}  // namespace detail

/// Produces the k-th prompt perturbation used while aligning.
using PromptSampler = std::function<PromptSet(Tape&, std::size_t)>;

/// Stand-in for pretraining. Refits both projection heads by ridge
/// regression so that every class's text feature and every clean
/// prototype's image feature land on that class's anchor, a row of a
/// seeded random orthonormal d-frame (C <= d). Rows come from the
/// zero-prompt forward and, when a sampler is given, from `draws` prompted
/// forwards, so zero-shot transfer survives prompts at their initial
/// scale. Covers base and novel classes alike.
inline void align_encoder(FrozenEncoder& enc, const SyntheticTask& task, double ridge = 1e-6,
                          std::size_t draws = 0, const PromptSampler& sampler = {}) {
  const auto c = static_cast<std::size_t>(task.classes);
  const auto& ec = enc.config();
  const auto dv = static_cast<Eigen::Index>(ec.vision_width);
  const auto dt = static_cast<Eigen::Index>(ec.text_width);
  const auto d = static_cast<Eigen::Index>(ec.embed_dim);
  if (static_cast<Eigen::Index>(c) > d) throw ParameterError("align_encoder: needs classes <= embed_dim");

  std::mt19937_64 rng(derive_seed(ec.seed, {0xA7C}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd g(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = gauss(rng);
  const Eigen::MatrixXd frame = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();

  const std::size_t sets = 1 + (sampler ? draws : 0);
  const auto rows = static_cast<Eigen::Index>(c * sets);
  Eigen::MatrixXd hv(rows, dv), ht(rows, dt), target(rows, d);
  for (std::size_t k = 0; k < sets; ++k) {
    Tape t;
    PromptSet ps = k == 0 ? PromptSet{} : sampler(t, k - 1);
    for (std::size_t cls = 0; cls < c; ++cls) {
      const auto r = static_cast<Eigen::Index>(k * c + cls);
      const Tensor pv = enc.vision_pooled(t, task.prototypes[cls], ps).value();
      const Tensor pt = enc.text_pooled(t, task.class_tokens[cls], ps).value();
      for (Eigen::Index j = 0; j < dv; ++j) hv(r, j) = pv[static_cast<std::size_t>(j)];
      for (Eigen::Index j = 0; j < dt; ++j) ht(r, j) = pt[static_cast<std::size_t>(j)];
      target.row(r) = frame.col(static_cast<Eigen::Index>(cls)).transpose();
    }
  }
  enc.set_vision_projection(detail::ridge_fit(hv, target, ridge));
  enc.set_text_projection(detail::ridge_fit(ht, target, ridge));
}

inline double harmonic_mean(double base_acc, double novel_acc) {
  if (base_acc < 0.0 || base_acc > 1.0 || novel_acc < 0.0 || novel_acc > 1.0) {
    throw ParameterError("harmonic_mean: accuracies must lie in [0, 1]");
  }
  const double s = base_acc + novel_acc;
  return s == 0.0 ? 0.0 : 2.0 * base_acc * novel_acc / s;
}

struct Accuracy {
  double accuracy = 0.0;
  std::vector<double> per_class;  // aligned with the candidate class list
};

/// Top-1 accuracy of `predict_feature` over `dataset`, choosing among the
/// rows of class_feats (one per entry of class_ids) by cosine similarity.
inline Accuracy evaluate(const std::function<Tensor(const Sample&)>& predict_feature, std::span<const Sample> dataset,
                         const Tensor& class_feats, std::span<const int> class_ids) {
  if (dataset.empty()) throw InputError("evaluate: empty dataset");
  if (class_feats.rows() != class_ids.size()) throw DimensionError("evaluate: one feature row per class id");
  const std::size_t c = class_ids.size(), d = class_feats.cols();
  std::vector<double> norms(c);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += class_feats(k, j) * class_feats(k, j);
    if (s == 0.0) throw NumericError("evaluate: zero-norm class feature");
    norms[k] = std::sqrt(s);
  }
  std::vector<std::size_t> hits(c, 0), seen(c, 0);
  std::size_t correct = 0;
  for (const Sample& s : dataset) {
    auto pos = std::find(class_ids.begin(), class_ids.end(), s.label);
    if (pos == class_ids.end()) throw InputError("evaluate: sample label not among candidate classes");
    const auto truth = static_cast<std::size_t>(pos - class_ids.begin());
    Tensor f = predict_feature(s);
    if (f.size() != d) throw DimensionError("evaluate: feature width mismatch");
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += f[j] * class_feats(k, j);
      const double score = dot / norms[k];
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    ++seen[truth];
    if (best == truth) {
      ++hits[truth];
      ++correct;
    }
  }
  Accuracy out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  for (std::size_t k = 0; k < c; ++k)
    out.per_class.push_back(seen[k] ? static_cast<double>(hits[k]) / static_cast<double>(seen[k]) : 0.0);
  return out;
}

struct EvalResult {
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double hm = 0.0;
  std::vector<double> per_class;  // indexed by global class id
};

/// Averages per-task harmonic means (not the harmonic mean of averages).
inline double average_hm(std::span<const EvalResult> results) {
  if (results.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : results) s += r.hm;
  return s / static_cast<double>(results.size());
}

/// One row per sample: split, class id, flattened patches, class token ids.
inline void export_csv(const SyntheticTask& task, std::ostream& os) {
  if (task.prototypes.empty()) return;
  const std::size_t dim = task.prototypes[0].size();
  const std::size_t ntok = task.class_tokens[0].size();
  os << "split,class_id";
  for (std::size_t k = 0; k < dim; ++k) os << ",x" << k;
  for (std::size_t k = 0; k < ntok; ++k) os << ",tok" << k;
  os << "\n";
  char buf[32];
  auto rows = [&](const char* split, const std::vector<Sample>& samples) {
    for (const Sample& s : samples) {
      os << split << "," << s.label;
      for (double v : s.patches.values()) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << "," << buf;
      }
      for (int id : task.class_tokens[static_cast<std::size_t>(s.label)]) os << "," << id;
      os << "\n";
    }
  };
  rows("train", task.train);
  rows("test_base", task.test_base);
  rows("test_novel", task.test_novel);
}

}  // namespace evoprompt
