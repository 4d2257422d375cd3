#include "rflx/weights_io.hpp"

#include <bit>
#include <cstring>

#include "rflx/error.hpp"
#include "rflx/util.hpp"

namespace rflx {
namespace le {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

void Reader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw Error(Errc::InvalidFormat, "truncated binary file");
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
  }
  pos_ += 4;
  return v;
}

double Reader::f64() {
  need(8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
  }
  pos_ += 8;
  return std::bit_cast<double>(bits);
}

void Reader::expect_magic(std::string_view magic) {
  need(magic.size());
  if (bytes_.substr(pos_, magic.size()) != magic) {
    throw Error(Errc::InvalidFormat, "bad magic, expected " + std::string(magic));
  }
  pos_ += magic.size();
}

}  // namespace le

namespace {

constexpr std::string_view kMagic = "RFLXW1";

void put_matrix(std::string& out, const Matrix& m) {
  for (double v : m.data) le::put_f64(out, v);
}

Matrix get_matrix(le::Reader& in, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.data) v = in.f64();
  return m;
}

}  // namespace

std::string encode_weights(const ModelConfig& config, const Weights& weights) {
  weights.validate(config);
  std::string out(kMagic);
  for (std::uint32_t field : {config.n_layers, config.hidden_dim, config.n_heads, config.vocab_size,
                              config.max_seq_len, config.mlp_hidden, config.pos_dim,
                              config.layer_norm}) {
    le::put_u32(out, field);
  }
  put_matrix(out, weights.token_embedding);
  for (const LayerWeights& l : weights.layers) {
    put_matrix(out, l.q);
    put_matrix(out, l.k);
    put_matrix(out, l.v);
    put_matrix(out, l.o);
  }
  for (const LayerWeights& l : weights.layers) {
    put_matrix(out, l.w_in);
    put_matrix(out, l.w_out);
  }
  for (double v : weights.final_norm_gain) le::put_f64(out, v);
  for (double v : weights.final_norm_bias) le::put_f64(out, v);
  put_matrix(out, weights.unembedding);
  return out;
}

Model decode_weights(std::string_view bytes) {
  le::Reader in(bytes);
  in.expect_magic(kMagic);
  ModelConfig c;
  c.n_layers = in.u32();
  c.hidden_dim = in.u32();
  c.n_heads = in.u32();
  c.vocab_size = in.u32();
  c.max_seq_len = in.u32();
  c.mlp_hidden = in.u32();
  c.pos_dim = in.u32();
  c.layer_norm = in.u32();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(Errc::InvalidFormat, std::string("weights header: ") + e.what());
  }
  const std::size_t d = c.hidden_dim;
  Weights w;
  w.token_embedding = get_matrix(in, c.vocab_size, d);
  w.layers.resize(c.n_layers);
  for (LayerWeights& l : w.layers) {
    l.q = get_matrix(in, d, d);
    l.k = get_matrix(in, d, d);
    l.v = get_matrix(in, d, d);
    l.o = get_matrix(in, d, d);
  }
  for (LayerWeights& l : w.layers) {
    l.w_in = get_matrix(in, d, c.mlp_hidden);
    l.w_out = get_matrix(in, c.mlp_hidden, d);
  }
  w.final_norm_gain = Vector(d);
  w.final_norm_bias = Vector(d);
  for (std::size_t i = 0; i < d; ++i) w.final_norm_gain[i] = in.f64();
  for (std::size_t i = 0; i < d; ++i) w.final_norm_bias[i] = in.f64();
  w.unembedding = get_matrix(in, d, c.vocab_size);
  if (!in.done()) throw Error(Errc::InvalidFormat, "trailing bytes after weights");
  try {
    return Model(c, std::move(w));
  } catch (const Error& e) {
    throw Error(Errc::InvalidFormat, e.what());
  }
}

void save_model(const std::filesystem::path& path, const Model& model) {
  write_file_atomic(path, encode_weights(model.config(), model.weights()));
}

Model load_model(const std::filesystem::path& path) { return decode_weights(read_file(path)); }

std::string encode_states(const StateDump& dump) {
  const std::size_t expected =
      static_cast<std::size_t>(dump.layer_count) * dump.n_positions * dump.dim;
  if (dump.data.size() != expected) throw Error(Errc::DimensionMismatch, "state dump size mismatch");
  check_finite(dump.data, "state dump");
  std::string out("RFLXH1");
  le::put_u32(out, dump.layer_count);
  le::put_u32(out, dump.n_positions);
  le::put_u32(out, dump.dim);
  for (double v : dump.data) le::put_f64(out, v);
  return out;
}

StateDump decode_states(std::string_view bytes) {
  le::Reader in(bytes);
  in.expect_magic("RFLXH1");
  StateDump dump;
  dump.layer_count = in.u32();
  dump.n_positions = in.u32();
  dump.dim = in.u32();
  const std::size_t n = static_cast<std::size_t>(dump.layer_count) * dump.n_positions * dump.dim;
  if (n > (bytes.size() / 8)) throw Error(Errc::InvalidFormat, "state dump header exceeds file size");
  dump.data.resize(n);
  for (double& v : dump.data) v = in.f64();
  if (!in.done()) throw Error(Errc::InvalidFormat, "trailing bytes in state dump");
  check_finite(dump.data, "state dump");
  return dump;
}

void save_states(const std::filesystem::path& path, const StateDump& dump) {
  write_file_atomic(path, encode_states(dump));
}

StateDump load_states(const std::filesystem::path& path) { return decode_states(read_file(path)); }

}  // namespace rflx
