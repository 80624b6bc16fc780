#include "tivode/fusion.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "tivode/shapes.hpp"

namespace tivode {

namespace {
constexpr double kMaskedLogit = -1e30;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : words_(words) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    for (std::size_t j = i + 1; j < words_.size(); ++j) {
      if (words_[i] == words_[j]) {
        throw ContractError("vocabulary word '" + words_[i] + "' appears twice");
      }
    }
  }
}

Vocabulary Vocabulary::standard() { return Vocabulary(caption_vocabulary()); }

int Vocabulary::id(const std::string& word) const {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<int>(i) + kReserved;
  }
  return kUnk;
}

const std::string& Vocabulary::word(int id) const {
  static const std::string pad = "<pad>", unk = "<unk>";
  if (id == kPad) return pad;
  if (id == kUnk) return unk;
  const auto i = static_cast<std::size_t>(id - kReserved);
  if (id < kReserved || i >= words_.size()) {
    throw ContractError("token id " + std::to_string(id) + " out of range");
  }
  return words_[i];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write vocabulary to '" + path.string() + "'");
  for (const std::string& w : words_) os << w << "\n";
  os.flush();
  if (!os) throw IoError("vocabulary write failed at '" + path.string() + "'");
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open vocabulary '" + path.string() + "'");
  std::vector<std::string> words;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(words);
}

std::vector<int> tokenize(const std::string& caption, const Vocabulary& vocab,
                          std::size_t max_len) {
  if (max_len == 0) throw ContractError("max_len must be positive");
  std::string lowered = caption;
  for (char& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::istringstream in(lowered);
  std::vector<int> ids;
  for (std::string w; in >> w;) {
    if (ids.size() == max_len) break;  // truncate
    ids.push_back(vocab.id(w));
  }
  if (ids.empty()) throw InputError("caption is empty");
  ids.resize(max_len, Vocabulary::kPad);
  return ids;
}

Fusion::Fusion(const FusionConfig& c, std::size_t vocab_size, Rng& rng) : cfg(c) {
  if (cfg.d_model % cfg.heads != 0) {
    throw ContractError("d_model must be divisible by the head count");
  }
  if (cfg.d_model % 2 != 0) throw ContractError("d_model must be even");
  const double emb_std = 0.02;
  token_table = randn({vocab_size, cfg.d_model}, rng, emb_std);
  text_pos = randn({cfg.max_len, cfg.d_model}, rng, emb_std);
  row_pos = randn({cfg.grid_h, cfg.d_model / 2}, rng, emb_std);
  col_pos = randn({cfg.grid_w, cfg.d_model / 2}, rng, emb_std);
  content_proj = nn::Linear::make(cfg.latent_dim, cfg.d_model, rng);
  pos_proj = nn::Linear::make(cfg.d_model, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    Block b;
    b.ln_q = nn::LayerNorm::make(cfg.d_model);
    b.ln_kv = nn::LayerNorm::make(cfg.d_model);
    b.wq = nn::Linear::make(cfg.d_model, cfg.d_model, rng);
    b.wk = nn::Linear::make(cfg.d_model, cfg.d_model, rng);
    b.wv = nn::Linear::make(cfg.d_model, cfg.d_model, rng);
    b.wo = nn::Linear::make(cfg.d_model, cfg.d_model, rng);
    b.ln_ffn = nn::LayerNorm::make(cfg.d_model);
    b.ffn1 = nn::Linear::make(cfg.d_model, cfg.ffn_width, rng);
    b.ffn2 = nn::Linear::make(cfg.ffn_width, cfg.d_model, rng);
    blocks.push_back(std::move(b));
  }
  ln_out = nn::LayerNorm::make(cfg.d_model);
  out_proj = nn::Linear::make(cfg.d_model, cfg.latent_dim, rng);
}

Tensor Fusion::embed_text(const std::vector<int>& ids) const {
  if (ids.size() != cfg.max_len) {
    throw ContractError("expected " + std::to_string(cfg.max_len) + " token ids, got " +
                        std::to_string(ids.size()));
  }
  return add(embedding(token_table, ids), text_pos);
}

Tensor Fusion::pad_mask(const std::vector<int>& ids) const {
  if (ids.size() != cfg.max_len) {
    throw ContractError("expected " + std::to_string(cfg.max_len) + " token ids, got " +
                        std::to_string(ids.size()));
  }
  const std::size_t hw = cfg.grid_h * cfg.grid_w;
  std::vector<double> m(hw * cfg.max_len, 0.0);
  bool any_real = false;
  for (std::size_t j = 0; j < cfg.max_len; ++j) {
    if (ids[j] == Vocabulary::kPad) {
      for (std::size_t i = 0; i < hw; ++i) m[i * cfg.max_len + j] = kMaskedLogit;
    } else {
      any_real = true;
    }
  }
  if (!any_real) throw InputError("caption tokens are all PAD; nothing to attend to");
  return Tensor::from(std::move(m), {hw, cfg.max_len});
}

Tensor Fusion::embed_image_tokens(const Tensor& z_e) const {
  if (z_e.rank() != 3 || z_e.dim(0) != cfg.latent_dim || z_e.dim(1) != cfg.grid_h ||
      z_e.dim(2) != cfg.grid_w) {
    throw DimensionError("embed_image_tokens expects [" + std::to_string(cfg.latent_dim) +
                         " x " + std::to_string(cfg.grid_h) + " x " +
                         std::to_string(cfg.grid_w) + "], got " + shape_str(z_e.shape()));
  }
  const std::size_t hw = cfg.grid_h * cfg.grid_w;
  Tensor sites = transpose(reshape(z_e, {cfg.latent_dim, hw}));  // [hw x c], row-major sites
  Tensor content = content_proj(sites);

  std::vector<int> row_ids(hw), col_ids(hw);
  for (std::size_t i = 0; i < cfg.grid_h; ++i) {
    for (std::size_t j = 0; j < cfg.grid_w; ++j) {
      row_ids[i * cfg.grid_w + j] = static_cast<int>(i);
      col_ids[i * cfg.grid_w + j] = static_cast<int>(j);
    }
  }
  Tensor pos = concat({embedding(row_pos, row_ids), embedding(col_pos, col_ids)}, 1);
  return add(content, pos_proj(pos));
}

Tensor Fusion::apply_block(const Block& blk, const Tensor& x, const Tensor& text,
                           const Tensor& mask) const {
  const std::size_t dh = cfg.d_model / cfg.heads;
  Tensor q = blk.wq(blk.ln_q(x));
  Tensor kvin = blk.ln_kv(text);
  Tensor k = blk.wk(kvin);
  Tensor v = blk.wv(kvin);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Tensor qh = slice(q, 1, h * dh, (h + 1) * dh);
    Tensor kh = slice(k, 1, h * dh, (h + 1) * dh);
    Tensor vh = slice(v, 1, h * dh, (h + 1) * dh);
    heads.push_back(scaled_dot_attention(qh, kh, vh, mask));
  }
  Tensor attended = blk.wo(concat(heads, 1));
  Tensor x1 = add(x, attended);
  Tensor f = blk.ffn2(silu(blk.ffn1(blk.ln_ffn(x1))));
  return add(x1, f);
}

Tensor Fusion::fuse(const Tensor& image_tokens, const Tensor& text_tokens,
                    const Tensor& mask) const {
  const std::size_t hw = cfg.grid_h * cfg.grid_w;
  if (image_tokens.rank() != 2 || image_tokens.dim(0) != hw ||
      image_tokens.dim(1) != cfg.d_model) {
    throw DimensionError("fuse: bad image token shape " + shape_str(image_tokens.shape()));
  }
  if (text_tokens.rank() != 2 || text_tokens.dim(0) != cfg.max_len ||
      text_tokens.dim(1) != cfg.d_model) {
    throw DimensionError("fuse: bad text token shape " + shape_str(text_tokens.shape()));
  }
  // A fully masked key row would make attention attend to nothing.
  bool any_real = false;
  const auto& mv = mask.values();
  for (std::size_t j = 0; j < cfg.max_len && !any_real; ++j) {
    any_real = mv[j] > kMaskedLogit / 2;
  }
  if (!any_real) throw InputError("caption tokens are all PAD; nothing to attend to");

  Tensor x = image_tokens;
  for (const Block& blk : blocks) x = apply_block(blk, x, text_tokens, mask);
  Tensor out = out_proj(ln_out(x));                      // [hw x c]
  return reshape(transpose(out), {cfg.latent_dim, cfg.grid_h, cfg.grid_w});
}

Tensor Fusion::fuse_caption(const Tensor& z_e, const std::vector<int>& ids) const {
  return fuse(embed_image_tokens(z_e), embed_text(ids), pad_mask(ids));
}

std::vector<Tensor*> Fusion::parameters() {
  std::vector<Tensor*> out = {&token_table, &text_pos, &row_pos, &col_pos};
  content_proj.params(out);
  pos_proj.params(out);
  for (Block& b : blocks) {
    b.ln_q.params(out);
    b.ln_kv.params(out);
    b.wq.params(out);
    b.wk.params(out);
    b.wv.params(out);
    b.wo.params(out);
    b.ln_ffn.params(out);
    b.ffn1.params(out);
    b.ffn2.params(out);
  }
  ln_out.params(out);
  out_proj.params(out);
  return out;
}

void Fusion::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put(prefix + ".token_table", token_table);
  ck.put(prefix + ".text_pos", text_pos);
  ck.put(prefix + ".row_pos", row_pos);
  ck.put(prefix + ".col_pos", col_pos);
  content_proj.save(ck, prefix + ".content_proj");
  pos_proj.save(ck, prefix + ".pos_proj");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    blocks[i].ln_q.save(ck, p + ".ln_q");
    blocks[i].ln_kv.save(ck, p + ".ln_kv");
    blocks[i].wq.save(ck, p + ".wq");
    blocks[i].wk.save(ck, p + ".wk");
    blocks[i].wv.save(ck, p + ".wv");
    blocks[i].wo.save(ck, p + ".wo");
    blocks[i].ln_ffn.save(ck, p + ".ln_ffn");
    blocks[i].ffn1.save(ck, p + ".ffn1");
    blocks[i].ffn2.save(ck, p + ".ffn2");
  }
  ln_out.save(ck, prefix + ".ln_out");
  out_proj.save(ck, prefix + ".out_proj");
}

void Fusion::load(const Checkpoint& ck, const std::string& prefix) {
  nn::load_named(ck, prefix + ".token_table", token_table);
  nn::load_named(ck, prefix + ".text_pos", text_pos);
  nn::load_named(ck, prefix + ".row_pos", row_pos);
  nn::load_named(ck, prefix + ".col_pos", col_pos);
  content_proj.load(ck, prefix + ".content_proj");
  pos_proj.load(ck, prefix + ".pos_proj");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    blocks[i].ln_q.load(ck, p + ".ln_q");
    blocks[i].ln_kv.load(ck, p + ".ln_kv");
    blocks[i].wq.load(ck, p + ".wq");
    blocks[i].wk.load(ck, p + ".wk");
    blocks[i].wv.load(ck, p + ".wv");
    blocks[i].wo.load(ck, p + ".wo");
    blocks[i].ln_ffn.load(ck, p + ".ln_ffn");
    blocks[i].ffn1.load(ck, p + ".ffn1");
    blocks[i].ffn2.load(ck, p + ".ffn2");
  }
  ln_out.load(ck, prefix + ".ln_out");
  out_proj.load(ck, prefix + ".out_proj");
}

}  // namespace tivode
