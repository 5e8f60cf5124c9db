#include "bcqtune/qfile.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace bcqtune {

// ============================================================================
// Checksums
// ============================================================================

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1) ? 0xedb88320u ^ (c >> 1) : (c >> 1);
    }
    table[i] = c;
  }
  return table;
}

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t len,
                    std::uint32_t seed) {
  static const std::array<std::uint32_t, 256> table = make_crc_table();
  std::uint32_t c = seed ^ 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i) {
    c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  }
  return c ^ 0xffffffffu;
}

namespace {

constexpr std::array<std::uint32_t, 64> kSha256K = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
    0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
    0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
    0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
    0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
    0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
    0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
    0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

inline std::uint32_t rotr(std::uint32_t x, int n) {
  return (x >> n) | (x << (32 - n));
}

void sha256_block(std::array<std::uint32_t, 8>& h, const std::uint8_t* p) {
  std::uint32_t w[64];
  for (int i = 0; i < 16; ++i) {
    w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
           (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
  }
  for (int i = 16; i < 64; ++i) {
    const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
    const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
    w[i] = w[i - 16] + s0 + w[i - 7] + s1;
  }
  auto [a, b, c, d, e, f, g, hh] = h;
  for (int i = 0; i < 64; ++i) {
    const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
    const std::uint32_t ch = (e & f) ^ (~e & g);
    const std::uint32_t t1 = hh + s1 + ch + kSha256K[i] + w[i];
    const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
    const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
    const std::uint32_t t2 = s0 + maj;
    hh = g; g = f; f = e; e = d + t1;
    d = c; c = b; b = a; a = t1 + t2;
  }
  h[0] += a; h[1] += b; h[2] += c; h[3] += d;
  h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
}

}  // namespace

std::array<std::uint8_t, 32> sha256(const std::uint8_t* data, std::size_t len) {
  std::array<std::uint32_t, 8> h = {0x6a09e667, 0xbb67ae85, 0x3c6ef372,
                                    0xa54ff53a, 0x510e527f, 0x9b05688c,
                                    0x1f83d9ab, 0x5be0cd19};
  std::size_t i = 0;
  for (; i + 64 <= len; i += 64) sha256_block(h, data + i);

  std::uint8_t tail[128] = {0};
  const std::size_t rem = len - i;
  std::memcpy(tail, data + i, rem);
  tail[rem] = 0x80;
  const std::size_t tail_len = (rem < 56) ? 64 : 128;
  const std::uint64_t bits = std::uint64_t(len) * 8;
  for (int k = 0; k < 8; ++k) {
    tail[tail_len - 1 - k] = std::uint8_t(bits >> (8 * k));
  }
  sha256_block(h, tail);
  if (tail_len == 128) sha256_block(h, tail + 64);

  std::array<std::uint8_t, 32> out;
  for (int k = 0; k < 8; ++k) {
    out[4 * k] = std::uint8_t(h[k] >> 24);
    out[4 * k + 1] = std::uint8_t(h[k] >> 16);
    out[4 * k + 2] = std::uint8_t(h[k] >> 8);
    out[4 * k + 3] = std::uint8_t(h[k]);
  }
  return out;
}

// ============================================================================
// Little-endian buffer framing
// ============================================================================

namespace {

struct ByteWriter {
  std::vector<std::uint8_t> buf;

  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void magic(const char m[4]) {
    buf.insert(buf.end(), m, m + 4);
  }
  void raw(const std::uint8_t* p, std::size_t n) { buf.insert(buf.end(), p, p + n); }

  void f32_array(std::span<const double> vals) {
    for (double v : vals) f32(v);
  }
  void finish_crc() { u32(crc32(buf.data(), buf.size())); }
};

struct ByteReader {
  const std::uint8_t* data;
  std::size_t len;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > len) throw IntegrityError("file truncated");
  }
  std::uint8_t u8() {
    need(1);
    return data[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = std::uint16_t(data[pos]) | (std::uint16_t(data[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  void expect_magic(const char m[4], const char* what) {
    need(4);
    if (std::memcmp(data + pos, m, 4) != 0) {
      throw IntegrityError(std::string(what) + ": bad magic");
    }
    pos += 4;
  }
  void f32_into(std::span<double> out) {
    for (double& v : out) v = f32();
  }
};

void write_file(const std::string& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IntegrityError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw IntegrityError("write failed: " + path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IntegrityError("cannot open: " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw IntegrityError("read failed: " + path);
  return buf;
}

// Verifies the trailing CRC32 and returns a reader over the payload.
ByteReader open_checked(const std::vector<std::uint8_t>& buf, const char* what) {
  if (buf.size() < 8) throw IntegrityError(std::string(what) + ": file truncated");
  const std::size_t payload = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf[payload + i]) << (8 * i);
  if (crc32(buf.data(), payload) != stored) {
    throw IntegrityError(std::string(what) + ": checksum mismatch");
  }
  return ByteReader{buf.data(), payload};
}

void check_version(std::uint16_t version, const char* what) {
  if (version != kFormatVersion) {
    throw IntegrityError(std::string(what) + ": unsupported version " +
                         std::to_string(version));
  }
}

void write_norm(ByteWriter& w, const LayerNormParams& p) {
  w.f32_array(p.gain);
  w.f32_array(p.bias);
}

LayerNormParams read_norm(ByteReader& r, std::size_t n) {
  LayerNormParams p;
  p.gain.resize(n);
  p.bias.resize(n);
  r.f32_into(p.gain);
  r.f32_into(p.bias);
  return p;
}

void write_f32_matrix(ByteWriter& w, const Matrix& m) { w.f32_array(m.data); }

Matrix read_f32_matrix(ByteReader& r, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  r.f32_into(m.data);
  return m;
}

}  // namespace

// ============================================================================
// Dense container (BCQD)
// ============================================================================

void save_dense(const DenseTransformer& model, const std::string& path) {
  const ModelConfig& c = model.config;
  ByteWriter w;
  w.magic("BCQD");
  w.u16(kFormatVersion);
  w.u32(std::uint32_t(c.vocab));
  w.u32(std::uint32_t(c.h));
  w.u32(std::uint32_t(c.n_layers));
  w.u32(std::uint32_t(c.n_ctx));
  write_f32_matrix(w, model.tok_emb);
  write_f32_matrix(w, model.pos_emb);
  for (const auto& blk : model.blocks) {
    write_norm(w, blk.ln1);
    write_norm(w, blk.ln2);
    for (const DenseLinear* lin : {&blk.qkv, &blk.att_out, &blk.ffn_in, &blk.ffn_out}) {
      write_f32_matrix(w, lin->w);
      w.f32_array(lin->bias);
    }
  }
  write_norm(w, model.ln_f);
  w.finish_crc();
  write_file(path, w.buf);
}

DenseTransformer load_dense(const std::string& path) {
  const std::vector<std::uint8_t> buf = read_file(path);
  ByteReader r = open_checked(buf, "dense model");
  r.expect_magic("BCQD", "dense model");
  check_version(r.u16(), "dense model");

  DenseTransformer m;
  m.config.vocab = r.u32();
  m.config.h = r.u32();
  m.config.n_layers = r.u32();
  m.config.n_ctx = r.u32();
  const std::size_t h = m.config.h;

  m.tok_emb = read_f32_matrix(r, m.config.vocab, h);
  m.pos_emb = read_f32_matrix(r, m.config.n_ctx, h);
  for (std::size_t b = 0; b < m.config.n_layers; ++b) {
    DenseTransformer::Block blk;
    blk.ln1 = read_norm(r, h);
    blk.ln2 = read_norm(r, h);
    for (const LayerShape& shape : block_layer_shapes(h)) {
      DenseLinear lin;
      lin.w = read_f32_matrix(r, shape.h_out, shape.h_in);
      lin.bias.resize(shape.h_out);
      r.f32_into(lin.bias);
      if (std::string(shape.name) == "ATT_qkv") blk.qkv = std::move(lin);
      else if (std::string(shape.name) == "ATT_output") blk.att_out = std::move(lin);
      else if (std::string(shape.name) == "FFN_h_4h") blk.ffn_in = std::move(lin);
      else blk.ffn_out = std::move(lin);
    }
    m.blocks.push_back(std::move(blk));
  }
  m.ln_f = read_norm(r, h);
  if (r.pos != r.len) throw IntegrityError("dense model: trailing bytes");
  return m;
}

// ============================================================================
// Quantized container (BCQ1)
// ============================================================================

namespace {

void write_header(ByteWriter& w, const ModelConfig& c) {
  w.magic("BCQ1");
  w.u16(kFormatVersion);
  w.u32(std::uint32_t(c.vocab));
  w.u32(std::uint32_t(c.h));
  w.u32(std::uint32_t(c.n_layers));
  w.u8(std::uint8_t(c.q));
  w.u8(c.g == kRowWise ? 0 : 1);
  w.u32(std::uint32_t(c.g == kRowWise ? 0 : c.g));
  w.u32(std::uint32_t(c.n_ctx));
}

void write_quant_layer(ByteWriter& w, const QuantLinear& layer) {
  const BCQMatrix& wq = layer.weights;
  w.u32(std::uint32_t(wq.h_out));
  w.u32(std::uint32_t(wq.h_in));
  for (const BitPlane& plane : wq.planes) {
    for (std::uint64_t word : plane.words) w.u64(word);
  }
  for (const GroupedScales& sc : wq.scales) w.f32_array(sc.values);
}

QuantLinear read_quant_layer(ByteReader& r, const QuantConfig& qc,
                             std::size_t exp_out, std::size_t exp_in) {
  const std::size_t h_out = r.u32();
  const std::size_t h_in = r.u32();
  if (h_out != exp_out || h_in != exp_in) {
    throw IntegrityError("quantized model: unexpected layer dimensions");
  }
  QuantLinear layer;
  BCQMatrix& wq = layer.weights;
  wq.h_out = h_out;
  wq.h_in = h_in;
  wq.config = qc;
  const std::size_t gpr = wq.groups_per_row();
  wq.planes.assign(qc.q, BitPlane(h_out, h_in));
  wq.scales.assign(qc.q, GroupedScales(h_out, gpr));
  for (BitPlane& plane : wq.planes) {
    for (std::uint64_t& word : plane.words) word = r.u64();
    // Padding bits must be zero per the BitPlane contract.
    const std::size_t tail_bits = h_in % 64;
    if (tail_bits != 0) {
      const std::uint64_t pad_mask = ~((std::uint64_t{1} << tail_bits) - 1);
      for (std::size_t row = 0; row < h_out; ++row) {
        if (plane.row_words(row)[plane.words_per_row() - 1] & pad_mask) {
          throw IntegrityError("quantized model: nonzero padding bits");
        }
      }
    }
  }
  for (GroupedScales& sc : wq.scales) r.f32_into(sc.values);
  return layer;
}

}  // namespace

void save_model(const ToyTransformer& model, const std::string& path) {
  ByteWriter w;
  write_header(w, model.config);
  for (const QuantLinear* layer : quant_layers(model)) {
    write_quant_layer(w, *layer);
  }
  write_f32_matrix(w, model.tok_emb);
  write_f32_matrix(w, model.pos_emb);
  for (const auto& blk : model.blocks) {
    w.f32_array(blk.qkv.bias);
    w.f32_array(blk.att_out.bias);
    w.f32_array(blk.ffn_in.bias);
    w.f32_array(blk.ffn_out.bias);
    write_norm(w, blk.ln1);
    write_norm(w, blk.ln2);
  }
  write_norm(w, model.ln_f);
  w.finish_crc();
  write_file(path, w.buf);
}

ToyTransformer load_model(const std::string& path) {
  const std::vector<std::uint8_t> buf = read_file(path);
  ByteReader r = open_checked(buf, "quantized model");
  r.expect_magic("BCQ1", "quantized model");
  check_version(r.u16(), "quantized model");

  ToyTransformer m;
  m.config.vocab = r.u32();
  m.config.h = r.u32();
  m.config.n_layers = r.u32();
  m.config.q = r.u8();
  const bool explicit_g = r.u8() != 0;
  const std::size_t g_value = r.u32();
  m.config.g = explicit_g ? g_value : kRowWise;
  m.config.n_ctx = r.u32();
  m.config.validate();
  const std::size_t h = m.config.h;
  const QuantConfig qc = m.config.quant_config();

  for (std::size_t b = 0; b < m.config.n_layers; ++b) {
    ToyTransformer::Block blk;
    const auto shapes = block_layer_shapes(h);
    blk.qkv = read_quant_layer(r, qc, shapes[0].h_out, shapes[0].h_in);
    blk.att_out = read_quant_layer(r, qc, shapes[1].h_out, shapes[1].h_in);
    blk.ffn_in = read_quant_layer(r, qc, shapes[2].h_out, shapes[2].h_in);
    blk.ffn_out = read_quant_layer(r, qc, shapes[3].h_out, shapes[3].h_in);
    m.blocks.push_back(std::move(blk));
  }
  m.tok_emb = read_f32_matrix(r, m.config.vocab, h);
  m.pos_emb = read_f32_matrix(r, m.config.n_ctx, h);
  for (auto& blk : m.blocks) {
    blk.qkv.bias.resize(3 * h);
    r.f32_into(blk.qkv.bias);
    blk.att_out.bias.resize(h);
    r.f32_into(blk.att_out.bias);
    blk.ffn_in.bias.resize(4 * h);
    r.f32_into(blk.ffn_in.bias);
    blk.ffn_out.bias.resize(h);
    r.f32_into(blk.ffn_out.bias);
    blk.ln1 = read_norm(r, h);
    blk.ln2 = read_norm(r, h);
  }
  m.ln_f = read_norm(r, h);
  if (r.pos != r.len) throw IntegrityError("quantized model: trailing bytes");
  return m;
}

// ============================================================================
// Content hash and checkpoints (BCQA)
// ============================================================================

std::array<std::uint8_t, 32> content_hash(const ToyTransformer& model,
                                          const std::set<int>& trained_planes) {
  ByteWriter w;
  w.magic("BCQH");
  write_header(w, model.config);
  for (const QuantLinear* layer : quant_layers(model)) {
    const BCQMatrix& wq = layer->weights;
    w.u32(std::uint32_t(wq.h_out));
    w.u32(std::uint32_t(wq.h_in));
    for (const BitPlane& plane : wq.planes) {
      for (std::uint64_t word : plane.words) w.u64(word);
    }
    for (int p = 0; p < wq.q(); ++p) {
      const bool frozen = trained_planes.find(p) == trained_planes.end();
      w.u8(frozen ? 1 : 0);
      if (frozen) w.f32_array(wq.scales[p].values);
    }
  }
  write_f32_matrix(w, model.tok_emb);
  write_f32_matrix(w, model.pos_emb);
  for (const auto& blk : model.blocks) {
    w.f32_array(blk.qkv.bias);
    w.f32_array(blk.att_out.bias);
    w.f32_array(blk.ffn_in.bias);
    w.f32_array(blk.ffn_out.bias);
    write_norm(w, blk.ln1);
    write_norm(w, blk.ln2);
  }
  write_norm(w, model.ln_f);
  return sha256(w.buf.data(), w.buf.size());
}

TaskCheckpoint make_checkpoint(const ToyTransformer& model) {
  TaskCheckpoint ckpt;
  ckpt.planes = model.trainable_planes;
  ckpt.base_hash = content_hash(model, ckpt.planes);
  for (const QuantLinear* layer : quant_layers(model)) {
    std::vector<GroupedScales> per_plane;
    for (int p : ckpt.planes) {
      if (p < 0 || p >= layer->weights.q()) {
        throw IndexError("make_checkpoint: trained plane out of range");
      }
      per_plane.push_back(layer->weights.scales[p]);
    }
    ckpt.layer_scales.push_back(std::move(per_plane));
  }
  return ckpt;
}

void save_checkpoint(const TaskCheckpoint& ckpt, const std::string& path) {
  ByteWriter w;
  w.magic("BCQA");
  w.u16(kFormatVersion);
  w.raw(ckpt.base_hash.data(), ckpt.base_hash.size());
  w.u8(std::uint8_t(ckpt.planes.size()));
  for (int p : ckpt.planes) w.u8(std::uint8_t(p));
  w.u32(std::uint32_t(ckpt.layer_scales.size()));
  for (const auto& per_plane : ckpt.layer_scales) {
    for (const GroupedScales& sc : per_plane) {
      w.u32(std::uint32_t(sc.rows));
      w.u32(std::uint32_t(sc.groups_per_row));
      w.f32_array(sc.values);
    }
  }
  w.finish_crc();
  write_file(path, w.buf);
}

void save_checkpoint(const ToyTransformer& model, const std::string& path) {
  save_checkpoint(make_checkpoint(model), path);
}

TaskCheckpoint load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> buf = read_file(path);
  ByteReader r = open_checked(buf, "checkpoint");
  r.expect_magic("BCQA", "checkpoint");
  check_version(r.u16(), "checkpoint");

  TaskCheckpoint ckpt;
  r.need(32);
  std::memcpy(ckpt.base_hash.data(), r.data + r.pos, 32);
  r.pos += 32;
  const std::size_t n_planes = r.u8();
  for (std::size_t i = 0; i < n_planes; ++i) ckpt.planes.insert(int(r.u8()));
  if (ckpt.planes.size() != n_planes) {
    throw IntegrityError("checkpoint: duplicate plane indices");
  }
  const std::size_t n_layers = r.u32();
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<GroupedScales> per_plane;
    for (std::size_t i = 0; i < n_planes; ++i) {
      const std::size_t rows = r.u32();
      const std::size_t gpr = r.u32();
      GroupedScales sc(rows, gpr);
      r.f32_into(sc.values);
      per_plane.push_back(std::move(sc));
    }
    ckpt.layer_scales.push_back(std::move(per_plane));
  }
  if (r.pos != r.len) throw IntegrityError("checkpoint: trailing bytes");
  return ckpt;
}

void apply_checkpoint(ToyTransformer& model, const TaskCheckpoint& ckpt) {
  const auto expected = content_hash(model, ckpt.planes);
  if (expected != ckpt.base_hash) {
    throw CompatibilityError(
        "apply_checkpoint: checkpoint does not bind to this base model");
  }
  std::vector<QuantLinear*> layers = quant_layers(model);
  if (ckpt.layer_scales.size() != layers.size()) {
    throw IntegrityError("apply_checkpoint: layer count mismatch");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::size_t i = 0;
    for (int p : ckpt.planes) {
      const GroupedScales& src = ckpt.layer_scales[l][i++];
      GroupedScales& dst = layers[l]->weights.scales[p];
      if (src.rows != dst.rows || src.groups_per_row != dst.groups_per_row) {
        throw IntegrityError("apply_checkpoint: scale shape mismatch");
      }
      dst.values = src.values;
    }
  }
  model.trainable_planes = ckpt.planes;
}

// ============================================================================
// Storage accounting
// ============================================================================

LayerSizeReport layer_size_report(const std::string& name, std::size_t h_out,
                                  std::size_t h_in, int q, std::size_t g) {
  QuantConfig qc;
  qc.q = q;
  qc.g = g;
  qc.validate();
  const std::size_t g_eff = qc.resolve_g(h_in);

  LayerSizeReport rep;
  rep.name = name;
  rep.h_out = h_out;
  rep.h_in = h_in;
  rep.g = g_eff;
  rep.q = q;
  rep.plane_bytes_unpadded =
      static_cast<double>(q) * h_out * h_in / 8.0;
  rep.plane_bytes_padded = std::size_t(q) * h_out * BitPlane::words_per_row(h_in) * 8;
  rep.scale_bytes = 4ull * q * h_out * (h_in / g_eff);
  return rep;
}

ModelSizeReport model_size_report(const ModelConfig& geometry) {
  geometry.validate();
  ModelSizeReport rep;
  rep.n_layers = geometry.n_layers;
  for (const LayerShape& shape : block_layer_shapes(geometry.h)) {
    rep.block_layers.push_back(layer_size_report(shape.name, shape.h_out,
                                                 shape.h_in, geometry.q,
                                                 geometry.g));
  }
  double block_unpadded = 0.0;
  std::size_t block_padded = 0;
  for (const LayerSizeReport& l : rep.block_layers) {
    block_unpadded += l.bytes_unpadded();
    block_padded += l.bytes_padded();
  }
  rep.quant_bytes_unpadded = block_unpadded * double(geometry.n_layers);
  rep.quant_bytes_padded = block_padded * geometry.n_layers;

  const std::size_t h = geometry.h;
  // tok_emb + pos_emb + per block (biases 9h, norms 4h) + final norm 2h.
  rep.fp32_bytes = 4 * (geometry.vocab * h + geometry.n_ctx * h +
                        geometry.n_layers * (9 * h + 4 * h) + 2 * h);
  // Header (28 bytes), per-layer dims (8 each), trailing CRC (4).
  rep.framing_bytes = 28 + geometry.n_layers * 4 * 8 + 4;
  rep.file_bytes = rep.framing_bytes + rep.quant_bytes_padded + rep.fp32_bytes;
  return rep;
}

std::size_t checkpoint_file_bytes(const ModelConfig& geometry,
                                  std::size_t n_planes) {
  geometry.validate();
  std::size_t scale_values = 0;
  for (const LayerShape& shape : block_layer_shapes(geometry.h)) {
    QuantConfig qc = geometry.quant_config();
    scale_values += shape.h_out * (shape.h_in / qc.resolve_g(shape.h_in));
  }
  scale_values *= geometry.n_layers * n_planes;
  const std::size_t per_array_framing =
      geometry.n_layers * 4 * n_planes * 8;  // rows + groups_per_row
  return 4 + 2 + 32 + 1 + n_planes + 4 + per_array_framing + 4 * scale_values + 4;
}

std::size_t dense_file_bytes(const ModelConfig& geometry) {
  geometry.validate();
  const std::size_t h = geometry.h;
  std::size_t weight_values = 0;
  for (const LayerShape& shape : block_layer_shapes(h)) {
    weight_values += shape.h_out * shape.h_in;  // 12 h^2 per block
  }
  const std::size_t fp_values =
      geometry.vocab * h + geometry.n_ctx * h +
      geometry.n_layers * (weight_values + 9 * h + 4 * h) + 2 * h;
  return 22 + 4 * fp_values + 4;
}

}  // namespace bcqtune
