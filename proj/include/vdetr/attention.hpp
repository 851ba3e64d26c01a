#pragma once

// Multi-head attention with an optional additive bias on the logits.
// Logits are scaled by 1/sqrt(d_head) before the bias is added; the bias
// magnitudes are learned, so the scaling convention is absorbed in training.

#include <cmath>
#include <string>
#include <vector>

#include "vdetr/tensor.hpp"

namespace vdetr {

struct AttentionConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;

  std::size_t d_head() const { return d_model / heads; }

  void validate() const {
    if (heads == 0 || d_model % heads != 0)
      throw std::invalid_argument("attention: heads (" + std::to_string(heads) +
                                  ") must divide d_model (" + std::to_string(d_model) + ")");
  }
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;

  MultiHeadAttention(ParamStore& store, const std::string& prefix, AttentionConfig cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    const std::size_t c = cfg.d_model;
    const double limit = std::sqrt(6.0 / (c + c));
    wq_ = &store.create(prefix + ".wq", {c, c}, rng, limit);
    bq_ = &store.create_zeros(prefix + ".bq", {c});
    wk_ = &store.create(prefix + ".wk", {c, c}, rng, limit);
    bk_ = &store.create_zeros(prefix + ".bk", {c});
    wv_ = &store.create(prefix + ".wv", {c, c}, rng, limit);
    bv_ = &store.create_zeros(prefix + ".bv", {c});
    wo_ = &store.create(prefix + ".wo", {c, c}, rng, limit);
    bo_ = &store.create_zeros(prefix + ".bo", {c});
  }

  const AttentionConfig& config() const { return cfg_; }

  // q_in [K x C], k_in/v_in [N x C]; bias per head [h x K x N] or shared
  // [K x N]. head_mean_attn, when non-null, receives the post-softmax rows
  // averaged over heads (K*N values).
  Tensor forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                 const Tensor* bias = nullptr, std::vector<double>* head_mean_attn = nullptr) const {
    const std::size_t k_rows = q_in.shape()[0];
    const std::size_t n_rows = k_in.shape()[0];
    const std::size_t h = cfg_.heads;
    const std::size_t dh = cfg_.d_head();
    if (bias) {
      const Shape& bs = bias->shape();
      const bool per_head = bs == Shape{h, k_rows, n_rows};
      const bool shared = bs == Shape{k_rows, n_rows};
      if (!per_head && !shared)
        throw std::invalid_argument("attention: bias " + shape_str(bs) + " does not match " +
                                    std::to_string(h) + " heads over [" + std::to_string(k_rows) +
                                    "x" + std::to_string(n_rows) + "]");
    }

    Tensor q = linear(q_in, wq_->tensor(), bq_->tensor());
    Tensor k = linear(k_in, wk_->tensor(), bk_->tensor());
    Tensor v = linear(v_in, wv_->tensor(), bv_->tensor());

    if (head_mean_attn) head_mean_attn->assign(k_rows * n_rows, 0.0);
    std::vector<Tensor> head_out;
    head_out.reserve(h);
    for (std::size_t i = 0; i < h; ++i) {
      Tensor qi = slice_cols(q, i * dh, dh);
      Tensor ki = slice_cols(k, i * dh, dh);
      Tensor vi = slice_cols(v, i * dh, dh);
      Tensor logits = scale(matmul(qi, transpose(ki)), 1.0 / std::sqrt(static_cast<double>(dh)));
      Tensor attn;
      if (!bias) {
        attn = softmax_rows(logits);
      } else if (bias->rank() == 2) {
        attn = softmax_rows(logits, *bias);
      } else {
        attn = softmax_rows(logits, slice_plane(*bias, i));
      }
      if (head_mean_attn)
        for (std::size_t j = 0; j < attn.size(); ++j) (*head_mean_attn)[j] += attn[j] / static_cast<double>(h);
      head_out.push_back(matmul(attn, vi));
    }
    return linear(concat_cols(head_out), wo_->tensor(), bo_->tensor());
  }

 private:
  AttentionConfig cfg_;
  Parameter *wq_ = nullptr, *bq_ = nullptr, *wk_ = nullptr, *bk_ = nullptr;
  Parameter *wv_ = nullptr, *bv_ = nullptr, *wo_ = nullptr, *bo_ = nullptr;
};

inline Tensor cross_attention(const MultiHeadAttention& attn, const Tensor& queries, const Tensor& keys,
                              const Tensor& values, const Tensor& bias,
                              std::vector<double>* head_mean_attn = nullptr) {
  return attn.forward(queries, keys, values, &bias, head_mean_attn);
}

inline Tensor self_attention(const MultiHeadAttention& attn, const Tensor& queries) {
  return attn.forward(queries, queries, queries);
}

}  // namespace vdetr
