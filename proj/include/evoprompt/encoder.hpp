#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evoprompt/tape.hpp"

namespace evoprompt {

enum class Modality { vision = 0, text = 1 };

inline const char* modality_name(Modality m) { return m == Modality::vision ? "vision" : "text"; }
inline constexpr Modality kModalities[] = {Modality::vision, Modality::text};

struct EncoderConfig {
  std::size_t layers = 6;        // L
  std::size_t patches = 16;      // M
  std::size_t text_tokens = 8;   // N
  std::size_t vision_width = 32; // d_v
  std::size_t text_width = 32;   // d_t
  std::size_t embed_dim = 16;    // d, joint feature space
  std::size_t heads = 4;
  std::size_t vocab = 64;
  std::size_t patch_dim = 8;     // raw values per patch
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;
  bool causal_text = true;
  double init_std = 0.02;

  std::size_t width(Modality m) const { return m == Modality::vision ? vision_width : text_width; }

  void validate() const {
    for (auto v : {layers, patches, text_tokens, vision_width, text_width, embed_dim, heads, vocab, patch_dim,
                   mlp_ratio}) {
      if (v == 0) throw ConfigError("encoder: all extents must be positive");
    }
    if (vision_width % heads != 0 || text_width % heads != 0) {
      throw ConfigError("encoder: widths must be divisible by the head count");
    }
    if (!(init_std > 0.0)) throw ConfigError("encoder: init_std must be positive");
  }
};

/// Prompt rows to inject, keyed by 1-based layer index. A modality is
/// either absent entirely or covers a contiguous range ending at layer L.
class PromptSet {
 public:
  void set(std::size_t layer, Modality m, Var prompt) { slot(m)[layer] = prompt; }
  const std::map<std::size_t, Var>& layers(Modality m) const { return m == Modality::vision ? vision_ : text_; }
  bool empty(Modality m) const { return layers(m).empty(); }
  const Var* find(std::size_t layer, Modality m) const {
    const auto& s = layers(m);
    auto it = s.find(layer);
    return it == s.end() ? nullptr : &it->second;
  }

  /// First prompted layer J, or 0 when the modality carries no prompts.
  std::size_t first_layer(Modality m) const { return empty(m) ? 0 : layers(m).begin()->first; }

  /// Prompt length l (0 when empty). Checks layer coverage and shapes.
  std::size_t validate(Modality m, std::size_t total_layers, std::size_t width) const {
    const auto& s = layers(m);
    if (s.empty()) return 0;
    const std::size_t first = s.begin()->first;
    if (first < 1 || s.rbegin()->first != total_layers || s.size() != total_layers - first + 1) {
      throw ConfigError(std::string("prompt set for ") + modality_name(m) + " must cover layers J..L without gaps");
    }
    const std::size_t l = s.begin()->second.rows();
    for (const auto& [layer, p] : s) {
      if (p.rows() != l || p.cols() != width) {
        throw ConfigError(std::string("prompt at layer ") + std::to_string(layer) + " has shape " +
                          shape_str(p.value().shape()) + ", expected " + std::to_string(l) + "x" +
                          std::to_string(width));
      }
    }
    return l;
  }

 private:
  std::map<std::size_t, Var>& slot(Modality m) { return m == Modality::vision ? vision_ : text_; }
  std::map<std::size_t, Var> vision_, text_;
};

struct BlockWeights {
  Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct TowerWeights {
  std::vector<BlockWeights> blocks;
  Tensor ln_g, ln_b, proj;  // final norm and output projection (Phi)
};

/// Sequence lengths seen entering each layer, for token accounting.
using LayerTrace = std::vector<std::size_t>;

/// A small CLIP-style dual encoder with frozen, seeded weights. Vision
/// tokens are [cls, patches] and text tokens are [sos, ids, eos]; deep
/// prompts are replaced (not accumulated) at every layer from J on.
class FrozenEncoder {
 public:
  explicit FrozenEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(derive_seed(cfg_.seed, {0xE4C0DE}));
    const double sd = cfg_.init_std;
    const std::size_t dv = cfg_.vision_width, dt = cfg_.text_width;
    patch_w_ = Tensor::gaussian({cfg_.patch_dim, dv}, sd, rng);
    patch_b_ = Tensor::gaussian({1, dv}, sd, rng);
    cls_ = Tensor::gaussian({1, dv}, sd, rng);
    pos_v_ = Tensor::gaussian({cfg_.patches + 1, dv}, sd, rng);
    vision_ = make_tower(dv, rng);
    token_table_ = Tensor::gaussian({cfg_.vocab, dt}, sd, rng);
    sos_ = Tensor::gaussian({1, dt}, sd, rng);
    eos_ = Tensor::gaussian({1, dt}, sd, rng);
    pos_t_ = Tensor::gaussian({cfg_.text_tokens + 2, dt}, sd, rng);
    text_ = make_tower(dt, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// [cls; patches W + b] + positional rows, shape (1+M) x d_v.
  Var embed_image(Tape& t, const Tensor& patches) const {
    if (patches.rows() != cfg_.patches || patches.cols() != cfg_.patch_dim) {
      throw DimensionError("embed_image: expected " + std::to_string(cfg_.patches) + "x" +
                           std::to_string(cfg_.patch_dim) + " patches, got " + shape_str(patches.shape()));
    }
    Var e = add_row(matmul(t.constant_ref(patches), t.constant_ref(patch_w_)), t.constant_ref(patch_b_));
    return add(concat_rows({t.constant_ref(cls_), e}), t.constant_ref(pos_v_));
  }

  /// [sos; table[ids]; eos] + positional rows, shape (N+2) x d_t.
  Var embed_text(Tape& t, std::span<const int> ids) const {
    if (ids.size() != cfg_.text_tokens) {
      throw InputError("embed_text: expected " + std::to_string(cfg_.text_tokens) + " token ids, got " +
                       std::to_string(ids.size()));
    }
    Tensor rows = Tensor::matrix(ids.size(), cfg_.text_width);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg_.vocab) {
        throw InputError("embed_text: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab));
      }
      const std::size_t id = static_cast<std::size_t>(ids[i]);
      for (std::size_t j = 0; j < cfg_.text_width; ++j) rows(i, j) = token_table_(id, j);
    }
    return add(concat_rows({t.constant_ref(sos_), t.constant(std::move(rows)), t.constant_ref(eos_)}),
               t.constant_ref(pos_t_));
  }

  /// Runs vision layers [first, last] (1-based, inclusive) on `x`, which
  /// must be the prompt-free state entering `first`. Returns the state
  /// after `last`, including any prompt rows.
  Var run_vision(Tape& t, Var x, std::size_t first, std::size_t last, const PromptSet& prompts,
                 LayerTrace* trace = nullptr) const {
    const std::size_t l = prompts.validate(Modality::vision, cfg_.layers, cfg_.vision_width);
    const std::size_t base = cfg_.patches + 1;
    if (x.rows() != base) throw DimensionError("run_vision: state must have 1+M rows");
    bool has_prompt = false;
    for (std::size_t i = first; i <= last; ++i) {
      if (const Var* p = prompts.find(i, Modality::vision)) {
        if (has_prompt) x = slice_rows(x, 0, base);
        x = concat_rows({x, *p});
        has_prompt = l > 0;
      }
      if (trace) trace->push_back(x.rows());
      x = block(t, vision_.blocks[i - 1], x, false);
    }
    return x;
  }

  /// Class-token readout: LN then Phi_v, a 1 x d feature.
  Var vision_head(Tape& t, const Var& x) const { return head(t, vision_, slice_rows(x, 0, 1)); }

  Var forward_vision(Tape& t, const Var& tokens, const PromptSet& prompts, LayerTrace* trace = nullptr) const {
    return vision_head(t, run_vision(t, tokens, 1, cfg_.layers, prompts, trace));
  }

  /// Reference path with no prompt handling at all.
  Var forward_vision_frozen(Tape& t, const Var& tokens) const {
    Var x = tokens;
    for (const auto& b : vision_.blocks) x = block(t, b, x, false);
    return head(t, vision_, slice_rows(x, 0, 1));
  }

  /// Text layers [first, last]; prompt rows sit right after the start token.
  Var run_text(Tape& t, Var x, std::size_t first, std::size_t last, const PromptSet& prompts,
               LayerTrace* trace = nullptr) const {
    const std::size_t l = prompts.validate(Modality::text, cfg_.layers, cfg_.text_width);
    const std::size_t body = cfg_.text_tokens + 1;  // content tokens + eos
    if (x.rows() != body + 1) throw DimensionError("run_text: state must have N+2 rows");
    bool has_prompt = false;
    for (std::size_t i = first; i <= last; ++i) {
      if (const Var* p = prompts.find(i, Modality::text)) {
        const std::size_t skip = has_prompt ? l : 0;
        x = concat_rows({slice_rows(x, 0, 1), *p, slice_rows(x, 1 + skip, body)});
        has_prompt = l > 0;
      }
      if (trace) trace->push_back(x.rows());
      x = block(t, text_.blocks[i - 1], x, cfg_.causal_text);
    }
    return x;
  }

  /// End-token readout: LN then Phi_t, a 1 x d feature.
  Var text_head(Tape& t, const Var& x) const { return head(t, text_, slice_rows(x, x.rows() - 1, 1)); }

  Var forward_text(Tape& t, std::span<const int> ids, const PromptSet& prompts, LayerTrace* trace = nullptr) const {
    return text_head(t, run_text(t, embed_text(t, ids), 1, cfg_.layers, prompts, trace));
  }

  Var forward_text_frozen(Tape& t, std::span<const int> ids) const {
    Var x = embed_text(t, ids);
    for (const auto& b : text_.blocks) x = block(t, b, x, cfg_.causal_text);
    return head(t, text_, slice_rows(x, x.rows() - 1, 1));
  }

  /// Value-only zero-prompt features.
  Tensor encode_image(const Tensor& patches) const {
    Tape t;
    return forward_vision_frozen(t, embed_image(t, patches)).value();
  }
  Tensor encode_text(std::span<const int> ids) const {
    Tape t;
    return forward_text_frozen(t, ids).value();
  }

  /// Pre-projection class-token vector (after the final norm); a 1 x d_v row.
  Var vision_pooled(Tape& t, const Tensor& patches, const PromptSet& prompts) const {
    Var x = run_vision(t, embed_image(t, patches), 1, cfg_.layers, prompts);
    return layer_norm(slice_rows(x, 0, 1), t.constant_ref(vision_.ln_g), t.constant_ref(vision_.ln_b));
  }

  /// Pre-projection end-token vector (after the final norm); a 1 x d_t row.
  Var text_pooled(Tape& t, std::span<const int> ids, const PromptSet& prompts) const {
    Var x = run_text(t, embed_text(t, ids), 1, cfg_.layers, prompts);
    return layer_norm(slice_rows(x, x.rows() - 1, 1), t.constant_ref(text_.ln_g), t.constant_ref(text_.ln_b));
  }

  Tensor vision_pooled(const Tensor& patches) const {
    Tape t;
    Var x = embed_image(t, patches);
    for (const auto& b : vision_.blocks) x = block(t, b, x, false);
    Var c = layer_norm(slice_rows(x, 0, 1), t.constant_ref(vision_.ln_g), t.constant_ref(vision_.ln_b));
    return c.value();
  }

  /// Replaces Phi_v. Only meaningful while the encoder is being built.
  void set_vision_projection(Tensor proj) {
    if (proj.rows() != cfg_.vision_width || proj.cols() != cfg_.embed_dim) {
      throw DimensionError("set_vision_projection: expected d_v x d");
    }
    vision_.proj = std::move(proj);
  }

  void set_text_projection(Tensor proj) {
    if (proj.rows() != cfg_.text_width || proj.cols() != cfg_.embed_dim) {
      throw DimensionError("set_text_projection: expected d_t x d");
    }
    text_.proj = std::move(proj);
  }

  /// Every weight with a stable name, in serialization order.
  std::vector<std::pair<std::string, const Tensor*>> named_weights() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    auto self = const_cast<FrozenEncoder*>(this);
    for (auto& [n, p] : self->named_weights_mut()) out.emplace_back(n, p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_weights_mut() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"vision.patch_w", &patch_w_}, {"vision.patch_b", &patch_b_}, {"vision.cls", &cls_},
        {"vision.pos", &pos_v_},       {"text.token_table", &token_table_}, {"text.sos", &sos_},
        {"text.eos", &eos_},           {"text.pos", &pos_t_}};
    auto tower = [&out](const std::string& pre, TowerWeights& tw) {
      for (std::size_t i = 0; i < tw.blocks.size(); ++i) {
        auto& b = tw.blocks[i];
        const std::string p = pre + ".block" + std::to_string(i + 1) + ".";
        for (auto [n, w] : std::initializer_list<std::pair<const char*, Tensor*>>{
                 {"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b}, {"wq", &b.wq}, {"bq", &b.bq}, {"wk", &b.wk},
                 {"bk", &b.bk}, {"wv", &b.wv}, {"bv", &b.bv}, {"wo", &b.wo}, {"bo", &b.bo},
                 {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b}, {"w1", &b.w1}, {"b1", &b.b1}, {"w2", &b.w2},
                 {"b2", &b.b2}}) {
          out.emplace_back(p + n, w);
        }
      }
      out.emplace_back(pre + ".ln_g", &tw.ln_g);
      out.emplace_back(pre + ".ln_b", &tw.ln_b);
      out.emplace_back(pre + ".proj", &tw.proj);
    };
    tower("vision", vision_);
    tower("text", text_);
    return out;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0;
    for (const auto& [name, w] : named_weights()) h = mix_seed(h ^ evoprompt::checksum(*w));
    return h;
  }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& [name, w] : named_weights()) n += w->size();
    return n;
  }

 private:
  TowerWeights make_tower(std::size_t width, std::mt19937_64& rng) const {
    const double sd = cfg_.init_std;
    const std::size_t hidden = width * cfg_.mlp_ratio;
    TowerWeights tw;
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
      BlockWeights b;
      b.ln1_g = Tensor({1, width}, 1.0);
      b.ln1_b = Tensor({1, width}, 0.0);
      b.wq = Tensor::gaussian({width, width}, sd, rng);
      b.bq = Tensor::gaussian({1, width}, sd, rng);
      b.wk = Tensor::gaussian({width, width}, sd, rng);
      b.bk = Tensor::gaussian({1, width}, sd, rng);
      b.wv = Tensor::gaussian({width, width}, sd, rng);
      b.bv = Tensor::gaussian({1, width}, sd, rng);
      b.wo = Tensor::gaussian({width, width}, sd, rng);
      b.bo = Tensor::gaussian({1, width}, sd, rng);
      b.ln2_g = Tensor({1, width}, 1.0);
      b.ln2_b = Tensor({1, width}, 0.0);
      b.w1 = Tensor::gaussian({width, hidden}, sd, rng);
      b.b1 = Tensor::gaussian({1, hidden}, sd, rng);
      b.w2 = Tensor::gaussian({hidden, width}, sd, rng);
      b.b2 = Tensor::gaussian({1, width}, sd, rng);
      tw.blocks.push_back(std::move(b));
    }
    tw.ln_g = Tensor({1, width}, 1.0);
    tw.ln_b = Tensor({1, width}, 0.0);
    tw.proj = Tensor::gaussian({width, cfg_.embed_dim}, sd, rng);
    return tw;
  }

  Var block(Tape& t, const BlockWeights& b, const Var& x, bool causal) const {
    auto lin = [&t](const Var& in, const Tensor& w, const Tensor& bias) {
      return add_row(matmul(in, t.constant_ref(w)), t.constant_ref(bias));
    };
    Var h = layer_norm(x, t.constant_ref(b.ln1_g), t.constant_ref(b.ln1_b));
    Var a = attention(lin(h, b.wq, b.bq), lin(h, b.wk, b.bk), lin(h, b.wv, b.bv), cfg_.heads, causal);
    Var x1 = add(x, lin(a, b.wo, b.bo));
    Var h2 = layer_norm(x1, t.constant_ref(b.ln2_g), t.constant_ref(b.ln2_b));
    return add(x1, lin(gelu(lin(h2, b.w1, b.b1)), b.w2, b.b2));
  }

  Var head(Tape& t, const TowerWeights& tw, const Var& token) const {
    return matmul(layer_norm(token, t.constant_ref(tw.ln_g), t.constant_ref(tw.ln_b)), t.constant_ref(tw.proj));
  }

  EncoderConfig cfg_;
  Tensor patch_w_, patch_b_, cls_, pos_v_;
  Tensor token_table_, sos_, eos_, pos_t_;
  TowerWeights vision_, text_;
};

/// Cosine similarities of f_v (1 x d) against class rows, then a
/// temperature softmax.
inline Var classify(const Var& f_v, const Var& class_feats, double tau) {
  if (class_feats.rows() < 2) throw DimensionError("classify: need at least two classes");
  Var s = matmul_nt(row_normalize(f_v), row_normalize(class_feats));
  return softmax_temperature(s, tau);
}

inline Tensor classify(const Tensor& f_v, const Tensor& class_feats, double tau) {
  Tape t;
  return classify(t.constant_ref(f_v), t.constant_ref(class_feats), tau).value();
}

}  // namespace evoprompt
