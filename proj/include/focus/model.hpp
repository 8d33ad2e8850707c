#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focus/autodiff.hpp"
#include "focus/carp.hpp"
#include "focus/fusion.hpp"
#include "focus/imaging.hpp"
#include "focus/nn.hpp"
#include "focus/objective.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"

namespace focus::model {

struct TrainConfig {
  int image_size = 224;
  int patch_size = 16;
  int embed_dim = 384;
  int depth = 12;
  int heads = 6;
  int carp_channels = 32;
  double tau = 1.0;
  double alpha = 0.1;
  double learning_rate = 1e-4;
  int batch_size = 128;
  int iterations = 30000;
  std::uint64_t seed = 0;
  bool use_class_token = false;

  int grid_side() const { return image_size / patch_size; }
  int n_tokens() const { return grid_side() * grid_side(); }

  void validate() const {
    if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (heads < 1 || embed_dim % (4 * heads) != 0)
      throw ConfigError("embed_dim must be divisible by 4*heads");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (carp_channels < 1) throw ConfigError("carp_channels must be >= 1");
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (alpha <= 0.0) throw ConfigError("alpha must be positive");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (batch_size < 2 || batch_size % 2 != 0)
      throw ConfigError("batch_size must be even and >= 2 (batches balance real/fake)");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"embed_dim", c.embed_dim},
                     {"depth", c.depth},
                     {"heads", c.heads},
                     {"carp_channels", c.carp_channels},
                     {"tau", c.tau},
                     {"alpha", c.alpha},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"iterations", c.iterations},
                     {"seed", c.seed},
                     {"use_class_token", c.use_class_token}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "image_size", "patch_size",    "embed_dim",  "depth",      "heads",
      "carp_channels", "tau",        "alpha",      "learning_rate", "batch_size",
      "iterations", "seed",          "use_class_token"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == item.key();
    if (!ok) throw ConfigError("unknown config field: " + item.key());
  }
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.carp_channels = j.value("carp_channels", c.carp_channels);
  c.tau = j.value("tau", c.tau);
  c.alpha = j.value("alpha", c.alpha);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.seed = j.value("seed", c.seed);
  c.use_class_token = j.value("use_class_token", c.use_class_token);
}

/// Named parameter tensors in a stable registration order; the flat layout
/// concatenates them in that order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    if (idx_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    idx_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(init));
    return values_.back();
  }

  bool has(const std::string& name) const { return idx_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = idx_.find(name);
    if (it == idx_.end()) throw ConfigError("unknown parameter: " + name);
    return values_[it->second];
  }
  const Tensor& at(const std::string& name) const {
    auto it = idx_.find(name);
    if (it == idx_.end()) throw ConfigError("unknown parameter: " + name);
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const { return values_.size(); }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }

  std::int64_t total_elems() const {
    std::int64_t n = 0;
    for (const auto& t : values_) n += t.numel();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_elems()));
    for (const auto& t : values_)
      for (std::int64_t i = 0; i < t.numel(); ++i) flat.push_back(t[i]);
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != static_cast<std::size_t>(total_elems()))
      throw ConfigError("flat parameter vector has wrong length");
    std::size_t k = 0;
    for (auto& t : values_)
      for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = flat[k++];
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> idx_;
};

/// All parameter nodes of one forward pass, leaves listed in ParamStore
/// order so gradients read back positionally.
struct TapeRefs {
  nn::EncoderRef rgb_enc;
  nn::EncoderRef sobel_enc;
  carp::CarpRef rgb_carp;
  carp::CarpRef sobel_carp;
  fusion::ScorePredictorsRef predictors;
  fusion::FusionHeadRef fusion_head;
  std::vector<ad::Node*> leaves;
};

/// Everything a single-sample pass produces. Maps are column vectors over
/// the h*w grid positions.
struct Forward {
  ad::Node* y_loc_rgb = nullptr;    // 1 x 2
  ad::Node* y_loc_sobel = nullptr;  // 1 x 2
  ad::Node* y_fus = nullptr;        // 1 x 2
  ad::Node* a_rgb = nullptr;        // N x 1
  ad::Node* a_sobel = nullptr;      // N x 1
  ad::Node* a_fus = nullptr;        // N x 1
  ad::Node* a_fake_only = nullptr;  // N x 1, fake-class banks only
  ad::Node* mask = nullptr;         // N x 2
  ad::Node* sample_loss = nullptr;  // 1 x 1: ce_rgb + ce_sobel + alpha * ce_fus
};

/// The twin-branch manipulation-map model: shared-structure RGB and Sobel
/// encoders with separate weights, per-branch class-attentive heads, and the
/// complementary token-selection fusion stage.
class FocusModel {
 public:
  explicit FocusModel(TrainConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    pos_enc_ = nn::fixed_pos_encoding(cfg_.grid_side(), cfg_.grid_side(), cfg_.embed_dim);
    Rng rng = Rng(cfg_.seed).child(0x1717);
    register_branch("rgb", rng);
    register_branch("sobel", rng);
    register_score_mlp("cl.rgb", rng);
    register_score_mlp("cl.sobel", rng);
    register_block("fus.block", rng);
    const int d = cfg_.embed_dim;
    params_.add("fus.cls_w", nn::trunc_normal_init({d, 2}, rng));
    params_.add("fus.cls_b", Tensor({2}));
  }

  const TrainConfig& config() const { return cfg_; }
  const Tensor& pos_enc() const { return pos_enc_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  TapeRefs instantiate(ad::Tape& tape, bool needs_grad) const {
    std::unordered_map<std::string, ad::Node*> nodes;
    TapeRefs refs;
    refs.leaves.reserve(params_.count());
    for (std::size_t i = 0; i < params_.count(); ++i) {
      ad::Node* n = tape.leaf(params_.value(i), needs_grad);
      nodes[params_.names()[i]] = n;
      refs.leaves.push_back(n);
    }
    auto at = [&nodes](const std::string& name) { return nodes.at(name); };

    auto block_ref = [&at](const std::string& p) {
      return nn::BlockRef{at(p + ".qkv_w"),  at(p + ".qkv_b"),  at(p + ".proj_w"),
                          at(p + ".proj_b"), at(p + ".ln1_g"),  at(p + ".ln1_b"),
                          at(p + ".ln2_g"),  at(p + ".ln2_b"),  at(p + ".mlp1_w"),
                          at(p + ".mlp1_b"), at(p + ".mlp2_w"), at(p + ".mlp2_b")};
    };
    auto encoder_ref = [&](const std::string& b) {
      nn::EncoderRef e;
      e.embed_w = at(b + ".embed.w");
      e.embed_b = at(b + ".embed.b");
      if (cfg_.use_class_token) e.class_token = at(b + ".class_token");
      e.pos_enc = pos_enc_;
      e.heads = cfg_.heads;
      for (int i = 0; i < cfg_.depth; ++i)
        e.blocks.push_back(block_ref(b + ".block" + std::to_string(i)));
      return e;
    };
    refs.rgb_enc = encoder_ref("rgb");
    refs.sobel_enc = encoder_ref("sobel");
    refs.rgb_carp = carp::CarpRef{at("rgb.carp.w"), at("rgb.carp.b"), cfg_.carp_channels};
    refs.sobel_carp = carp::CarpRef{at("sobel.carp.w"), at("sobel.carp.b"), cfg_.carp_channels};
    refs.predictors.rgb =
        fusion::ScoreMlpRef{at("cl.rgb.w1"), at("cl.rgb.b1"), at("cl.rgb.w2"), at("cl.rgb.b2")};
    refs.predictors.sobel = fusion::ScoreMlpRef{at("cl.sobel.w1"), at("cl.sobel.b1"),
                                                at("cl.sobel.w2"), at("cl.sobel.b2")};
    refs.fusion_head =
        fusion::FusionHeadRef{block_ref("fus.block"), at("fus.cls_w"), at("fus.cls_b"), cfg_.heads};
    return refs;
  }

  /// Full single-sample pass. `gumbel_rng` supplies the selection noise and
  /// may be null in inference mode.
  Forward forward(ad::Tape& tape, const TapeRefs& refs, const Tensor& image, int label,
                  Rng* gumbel_rng, fusion::MaskMode mode) const {
    if (image.ndim() != 3 || image.dim(0) != cfg_.image_size || image.dim(1) != cfg_.image_size)
      throw InputError("image does not match configured size");
    if (mode != fusion::MaskMode::kInference && gumbel_rng == nullptr)
      throw ConfigError("training-mode forward requires a noise stream");

    const Tensor sobel_img = imaging::sobel_map(image);
    nn::TokenGrid rgb_grid =
        nn::encoder_forward(nn::patchify_embed(tape, image, refs.rgb_enc, cfg_.patch_size),
                            refs.rgb_enc);
    nn::TokenGrid sobel_grid =
        nn::encoder_forward(nn::patchify_embed(tape, sobel_img, refs.sobel_enc, cfg_.patch_size),
                            refs.sobel_enc);

    Forward out;
    carp::ProjectedBanks rgb_banks = carp::grid_project(rgb_grid, refs.rgb_carp);
    carp::ProjectedBanks sobel_banks = carp::grid_project(sobel_grid, refs.sobel_carp);
    out.y_loc_rgb = carp::pool_scores(rgb_banks);
    out.y_loc_sobel = carp::pool_scores(sobel_banks);
    out.a_rgb = carp::car_map(rgb_banks, out.y_loc_rgb);
    out.a_sobel = carp::car_map(sobel_banks, out.y_loc_sobel);
    ad::Node* a_fake_rgb = carp::fake_only_map(rgb_banks, out.y_loc_rgb);
    ad::Node* a_fake_sobel = carp::fake_only_map(sobel_banks, out.y_loc_sobel);

    ad::Node* z_rgb = nn::image_tokens(rgb_grid);
    ad::Node* z_sobel = nn::image_tokens(sobel_grid);
    ad::Node* logits = fusion::predict_scores(z_rgb, z_sobel, refs.predictors);
    Rng unused(0);
    out.mask = fusion::gumbel_hard_mask(logits, cfg_.tau, gumbel_rng ? *gumbel_rng : unused, mode);

    ad::Node* z_fus = fusion::substitute(z_rgb, z_sobel, out.mask);
    nn::TokenGrid fus_grid{z_fus, rgb_grid.h, rgb_grid.w, false};
    out.y_fus = fusion::fusion_classify(fus_grid, refs.fusion_head);
    out.a_fus = fusion::fuse_maps(out.a_rgb, out.a_sobel, out.mask);
    out.a_fake_only = fusion::fuse_maps(a_fake_rgb, a_fake_sobel, out.mask);

    ad::Node* loc = ad::add(objective::ce_term(out.y_loc_rgb, label),
                            objective::ce_term(out.y_loc_sobel, label));
    ad::Node* fus = objective::ce_term(out.y_fus, label);
    out.sample_loss = ad::add(loc, ad::scale(fus, cfg_.alpha));
    return out;
  }

 private:
  void register_branch(const std::string& b, Rng& rng) {
    const int d = cfg_.embed_dim;
    const int plen = cfg_.patch_size * cfg_.patch_size * 3;
    params_.add(b + ".embed.w", nn::trunc_normal_init({plen, d}, rng));
    params_.add(b + ".embed.b", Tensor({d}));
    if (cfg_.use_class_token)
      params_.add(b + ".class_token", nn::trunc_normal_init({1, d}, rng));
    for (int i = 0; i < cfg_.depth; ++i) register_block(b + ".block" + std::to_string(i), rng);
    params_.add(b + ".carp.w", nn::trunc_normal_init({d, 2 * cfg_.carp_channels}, rng));
    params_.add(b + ".carp.b", Tensor({2 * cfg_.carp_channels}));
  }

  void register_block(const std::string& p, Rng& rng) {
    const int d = cfg_.embed_dim;
    params_.add(p + ".qkv_w", nn::trunc_normal_init({d, 3 * d}, rng));
    params_.add(p + ".qkv_b", Tensor({3 * d}));
    params_.add(p + ".proj_w", nn::trunc_normal_init({d, d}, rng));
    params_.add(p + ".proj_b", Tensor({d}));
    params_.add(p + ".ln1_g", Tensor::full({d}, 1.0));
    params_.add(p + ".ln1_b", Tensor({d}));
    params_.add(p + ".ln2_g", Tensor::full({d}, 1.0));
    params_.add(p + ".ln2_b", Tensor({d}));
    params_.add(p + ".mlp1_w", nn::trunc_normal_init({d, 4 * d}, rng));
    params_.add(p + ".mlp1_b", Tensor({4 * d}));
    params_.add(p + ".mlp2_w", nn::trunc_normal_init({4 * d, d}, rng));
    params_.add(p + ".mlp2_b", Tensor({d}));
  }

  void register_score_mlp(const std::string& p, Rng& rng) {
    const int d = cfg_.embed_dim;
    params_.add(p + ".w1", nn::trunc_normal_init({d, d}, rng));
    params_.add(p + ".b1", Tensor({d}));
    params_.add(p + ".w2", nn::trunc_normal_init({d, 1}, rng));
    params_.add(p + ".b2", Tensor({1}));
  }

  TrainConfig cfg_;
  Tensor pos_enc_;
  ParamStore params_;
};

}  // namespace focus::model
