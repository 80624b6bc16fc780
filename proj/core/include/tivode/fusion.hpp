// Caption tokenizer over a closed vocabulary plus the cross-attention
// transformer that fuses caption tokens with the encoder latent grid into the
// initial ODE state: image tokens attend as queries over text keys/values.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tivode/nn.hpp"
#include "tivode/rng.hpp"
#include "tivode/tensor.hpp"

namespace tivode {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kReserved = 2;

  Vocabulary() = default;
  explicit Vocabulary(const std::vector<std::string>& words);

  // Built from the dataset caption grammar.
  static Vocabulary standard();

  int id(const std::string& word) const;  // kUnk for out-of-vocabulary words
  const std::string& word(int id) const;
  std::size_t size() const { return kReserved + words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  // One token per line; line number = id - kReserved.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
};

// Lowercase, whitespace-split, map through vocab (unknown -> UNK), then pad
// or truncate to exactly max_len ids.
std::vector<int> tokenize(const std::string& caption, const Vocabulary& vocab,
                          std::size_t max_len);

struct FusionConfig {
  std::size_t d_model = 64;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t ffn_width = 128;
  std::size_t max_len = 12;
  std::size_t latent_dim = 32;  // c of the VQ latent grid
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
};

class Fusion {
 public:
  Fusion() = default;
  Fusion(const FusionConfig& cfg, std::size_t vocab_size, Rng& rng);

  // [max_len x d_model]: word embedding + learned positional embedding.
  Tensor embed_text(const std::vector<int>& ids) const;

  // Additive attention logit mask, [grid_h*grid_w x max_len]: 0 on real
  // tokens, -1e30 on PAD columns.
  Tensor pad_mask(const std::vector<int>& ids) const;

  // [c x h x w] -> [(h*w) x d_model]: linear content projection plus a 2-D
  // positional embedding (learned row and column tables, concatenated and
  // projected).
  Tensor embed_image_tokens(const Tensor& z_e) const;

  // Cross-attention transformer; output reshaped back to [c x h x w].
  Tensor fuse(const Tensor& image_tokens, const Tensor& text_tokens,
              const Tensor& mask) const;

  // tokenize -> embed -> fuse for one sample.
  Tensor fuse_caption(const Tensor& z_e, const std::vector<int>& ids) const;

  std::vector<Tensor*> parameters();
  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix);

  struct Block {
    nn::LayerNorm ln_q, ln_kv;
    nn::Linear wq, wk, wv, wo;
    nn::LayerNorm ln_ffn;
    nn::Linear ffn1, ffn2;
  };

  FusionConfig cfg;
  Tensor token_table;  // [vocab x d_model]
  Tensor text_pos;     // [max_len x d_model]
  Tensor row_pos;      // [grid_h x d_model/2]
  Tensor col_pos;      // [grid_w x d_model/2]
  nn::Linear content_proj;  // c -> d_model
  nn::Linear pos_proj;      // d_model -> d_model
  std::vector<Block> blocks;
  nn::LayerNorm ln_out;
  nn::Linear out_proj;  // d_model -> c

 private:
  Tensor apply_block(const Block& blk, const Tensor& x, const Tensor& text,
                     const Tensor& mask) const;
};

}  // namespace tivode
