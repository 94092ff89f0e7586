#include "diffender/unet.hpp"

#include <cmath>

namespace nn = torch::nn;

namespace diffender {
namespace {

int groups_for(int channels) { return channels % 8 == 0 ? 8 : (channels % 4 == 0 ? 4 : 1); }

}  // namespace

ResBlockImpl::ResBlockImpl(int in, int out, int time_dim) {
  norm1 = register_module("norm1", nn::GroupNorm(groups_for(in), in));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(out), out));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) {
    skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return h + (skip ? skip(x) : x);
}

CrossAttentionImpl::CrossAttentionImpl(int channels, int context_dim) {
  norm = register_module("norm", nn::GroupNorm(groups_for(channels), channels));
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, channels).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, channels).bias(false)));
  to_out = register_module("to_out", nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto q = to_q(norm(x).flatten(2).transpose(1, 2));                        // [B,HW,C]
  auto scores = torch::bmm(q, to_k(context).transpose(1, 2)) / std::sqrt(static_cast<double>(c));
  auto out = to_out(torch::bmm(torch::softmax(scores, -1), to_v(context)));  // [B,HW,C]
  return x + out.transpose(1, 2).reshape({b, c, h, w});
}

TextEncoderImpl::TextEncoderImpl(int dim) {
  fc1 = register_module("fc1", nn::Linear(dim, dim));
  fc2 = register_module("fc2", nn::Linear(dim, dim));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& tokens) {
  return fc2(torch::gelu(fc1(tokens)));
}

UNetImpl::UNetImpl(int base_channels, int embed_dim, int vocab_size) : base_(base_channels) {
  const int c = base_channels;
  const int td = 4 * c;
  vocab = register_module("vocab", nn::Embedding(vocab_size, embed_dim));
  text = register_module("text", TextEncoder(embed_dim));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(c, td), nn::SiLU(), nn::Linear(td, td)));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(3, c, 3).padding(1)));
  enc1 = register_module("enc1", ResBlock(c, c, td));
  down1 = register_module("down1", nn::Conv2d(nn::Conv2dOptions(c, c, 3).stride(2).padding(1)));
  enc2 = register_module("enc2", ResBlock(c, 2 * c, td));
  attn_enc2 = register_module("attn_enc2", CrossAttention(2 * c, embed_dim));
  down2 = register_module("down2", nn::Conv2d(nn::Conv2dOptions(2 * c, 2 * c, 3).stride(2).padding(1)));
  enc3 = register_module("enc3", ResBlock(2 * c, 4 * c, td));
  attn_mid = register_module("attn_mid", CrossAttention(4 * c, embed_dim));
  mid = register_module("mid", ResBlock(4 * c, 4 * c, td));
  dec2 = register_module("dec2", ResBlock(6 * c, 2 * c, td));
  attn_dec2 = register_module("attn_dec2", CrossAttention(2 * c, embed_dim));
  dec1 = register_module("dec1", ResBlock(3 * c, c, td));
  attn_dec1 = register_module("attn_dec1", CrossAttention(c, embed_dim));
  norm_out = register_module("norm_out", nn::GroupNorm(groups_for(c), c));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1)));
}

torch::Tensor UNetImpl::time_embedding(const torch::Tensor& t) const {
  const int half = base_ / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat) / half);
  auto args = t.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({args.sin(), args.cos()}, 1);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& tokens) {
  const auto h = x.size(2), w = x.size(3);
  auto temb = time_mlp->forward(time_embedding(t));
  auto ctx = text(tokens.to(torch::kFloat));
  auto h1 = enc1(conv_in(x.to(torch::kFloat)), temb);
  auto h2 = attn_enc2(enc2(down1(h1), temb), ctx);
  auto h3 = attn_mid(enc3(down2(h2), temb), ctx);
  h3 = mid(h3, temb);
  auto u = torch::upsample_nearest2d(h3, std::vector<std::int64_t>{h2.size(2), h2.size(3)});
  u = attn_dec2(dec2(torch::cat({u, h2}, 1), temb), ctx);
  u = torch::upsample_nearest2d(u, std::vector<std::int64_t>{h, w});
  u = attn_dec1(dec1(torch::cat({u, h1}, 1), temb), ctx);
  return conv_out(torch::silu(norm_out(u)));
}

}  // namespace diffender
