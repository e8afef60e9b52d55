// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "tokenseek/model.hpp"

namespace tokenseek {

namespace {

constexpr char kMagic[8] = {'T', 'K', 'S', 'E', 'E', 'K', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr char kAdapterTag[4] = {'A', 'D', 'P', 'T'};
constexpr char kEndTag[4] = {'E', 'N', 'D', '\0'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
    bytes(b, 8);
  }
  void u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
    bytes(b, 4);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void matrix_data(const Matrix& m) {
    for (double v : m.data()) f64(v);
  }
  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("checkpoint write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw std::runtime_error("cannot open checkpoint: " + path_);
  }
  void bytes(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw std::runtime_error("truncated checkpoint: " + path_);
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void matrix_data(Matrix& m) {
    for (double& v : m.data()) v = f64();
  }
  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Parameters& params, const AdapterSet* adapters) {
  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  const auto& c = params.config;
  for (int v : {c.n_layers, c.hidden, c.n_heads, c.ff_dim, c.vocab, c.max_seq}) w.u32(static_cast<std::uint32_t>(v));
  w.u64(c.seed);
  w.u64(params.parameter_count());
  for (const auto& [name, m] : params.named_tensors()) w.matrix_data(*m);

  if (adapters) {
    const auto& lc = adapters->config();
    w.bytes(kAdapterTag, sizeof kAdapterTag);
    w.u32(static_cast<std::uint32_t>(lc.rank));
    w.f64(lc.alpha);
    w.f64(lc.dropout);
    w.u64(lc.seed);
    w.f64(lc.init_scale);
    w.u32(static_cast<std::uint32_t>(lc.targets.size()));
    for (auto t : lc.targets) w.u32(static_cast<std::uint32_t>(t));
    w.u32(static_cast<std::uint32_t>(adapters->adapters().size()));
    for (const auto& a : adapters->adapters()) {
      w.u32(static_cast<std::uint32_t>(a.target));
      w.u32(static_cast<std::uint32_t>(a.layer));
      for (const Matrix* m : {&a.down, &a.up}) {
        w.u32(static_cast<std::uint32_t>(m->rows()));
        w.u32(static_cast<std::uint32_t>(m->cols()));
        w.matrix_data(*m);
      }
    }
  }
  w.bytes(kEndTag, sizeof kEndTag);
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("not a tokenseek checkpoint: " + r.path());
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + ": " + r.path());
  }
  ModelConfig c;
  c.n_layers = static_cast<int>(r.u32());
  c.hidden = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.ff_dim = static_cast<int>(r.u32());
  c.vocab = static_cast<int>(r.u32());
  c.max_seq = static_cast<int>(r.u32());
  c.seed = r.u64();
  Checkpoint ck{Parameters::zeros(c), std::nullopt};
  const std::uint64_t count = r.u64();
  if (count != ck.params.parameter_count()) {
    throw std::runtime_error("checkpoint parameter count does not match its config: " + r.path());
  }
  for (auto& [name, m] : ck.params.named_tensors()) r.matrix_data(*m);

  for (;;) {
    char tag[4];
    r.bytes(tag, 4);
    if (std::memcmp(tag, kEndTag, 4) == 0) break;
    if (std::memcmp(tag, kAdapterTag, 4) != 0) throw std::runtime_error("unknown checkpoint section: " + r.path());
    LoraConfig lc;
    lc.rank = static_cast<int>(r.u32());
    lc.alpha = r.f64();
    lc.dropout = r.f64();
    lc.seed = r.u64();
    lc.init_scale = r.f64();
    lc.targets.clear();
    const std::uint32_t nt = r.u32();
    for (std::uint32_t i = 0; i < nt; ++i) lc.targets.push_back(static_cast<ProjTarget>(r.u32()));
    std::vector<LoraAdapter> list;
    const std::uint32_t na = r.u32();
    for (std::uint32_t i = 0; i < na; ++i) {
      LoraAdapter a{static_cast<ProjTarget>(r.u32()), static_cast<int>(r.u32()), {}, {}};
      for (Matrix* m : {&a.down, &a.up}) {
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        *m = Matrix(rows, cols);
        r.matrix_data(*m);
      }
      list.push_back(std::move(a));
    }
    ck.adapters = AdapterSet(std::move(lc), std::move(list));
  }
  return ck;
}

}  // namespace tokenseek
