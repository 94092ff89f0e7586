#pragma once

#include "diffender/common.hpp"

namespace diffender {

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int in, int out, int time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Residual cross-attention from image features to context tokens.
struct CrossAttentionImpl : torch::nn::Module {
  CrossAttentionImpl(int channels, int context_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention);

/// Token-wise MLP mapping prompt embeddings to conditioning vectors.
struct TextEncoderImpl : torch::nn::Module {
  explicit TextEncoderImpl(int dim);
  torch::Tensor forward(const torch::Tensor& tokens);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TextEncoder);

class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(int base_channels, int embed_dim, int vocab_size);

  /// x: [B,3,H,W]; t: [B] int64; tokens: [B,L,d] -> eps estimate [B,3,H,W].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& tokens);

  torch::nn::Embedding vocab{nullptr};

 private:
  torch::Tensor time_embedding(const torch::Tensor& t) const;

  int base_;
  TextEncoder text{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, down1{nullptr}, down2{nullptr}, conv_out{nullptr};
  ResBlock enc1{nullptr}, enc2{nullptr}, enc3{nullptr}, mid{nullptr}, dec2{nullptr}, dec1{nullptr};
  CrossAttention attn_enc2{nullptr}, attn_mid{nullptr}, attn_dec2{nullptr}, attn_dec1{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
};

}  // namespace diffender
