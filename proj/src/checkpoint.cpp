#include "nmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/core.h>

#include "nmt/error.hpp"
#include "nmt/text.hpp"

namespace nmt {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kMagic = "nmt-checkpoint 1";

template <class T>
T parse_number(std::string_view s, std::string_view key) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError(fmt::format("checkpoint: bad value '{}' for '{}'", s, key));
  }
  return v;
}

template <class Scalar>
void append_le(std::string &out, const Matrix<Scalar> &m) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  const std::size_t start = out.size();
  out.resize(start + sizeof(Scalar) * static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    Bits bits = std::bit_cast<Bits>(m.data()[i]);
    for (std::size_t b = 0; b < sizeof(Scalar); ++b) {
      out[start + i * sizeof(Scalar) + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  }
}

template <class Scalar>
void read_le(std::string_view in, Matrix<Scalar> &m) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(Scalar); ++b) {
      bits |= static_cast<Bits>(static_cast<unsigned char>(in[i * sizeof(Scalar) + b])) << (8 * b);
    }
    m.data()[i] = std::bit_cast<Scalar>(bits);
  }
}

std::string relative_to(const fs::path &target, const fs::path &base) {
  const fs::path rel = fs::relative(fs::absolute(target), fs::absolute(base));
  return rel.empty() ? target.string() : rel.generic_string();
}

// Writes the tokenizer if needed and returns the path to record.
std::string place_tokenizer(const TokenizerRef &ref, const fs::path &ck_path,
                            std::string_view side) {
  const fs::path dir = ck_path.parent_path().empty() ? fs::path(".") : ck_path.parent_path();
  fs::path file = ref.path.empty() ? dir / fmt::format("{}.{}.bpe", ck_path.filename().string(), side)
                                   : fs::path(ref.path);
  if (!fs::exists(file)) {
    if (!ref.model) {
      throw UsageError(fmt::format("checkpoint: {} tokenizer '{}' missing and not loaded", side,
                                   file.string()));
    }
    ref.model->save(file.string());
  }
  return relative_to(file, dir);
}

TokenizerRef resolve_tokenizer(const std::string &recorded, std::uint64_t hash,
                               const fs::path &ck_path, std::string_view side) {
  const fs::path dir = ck_path.parent_path().empty() ? fs::path(".") : ck_path.parent_path();
  const fs::path file = fs::path(recorded).is_absolute() ? fs::path(recorded) : dir / recorded;
  if (!fs::exists(file)) {
    throw DataError(fmt::format("checkpoint: {} tokenizer '{}' not found", side, file.string()));
  }
  auto model = std::make_shared<const SubwordModel>(SubwordModel::load(file.string()));
  if (model->content_hash() != hash) {
    throw DataError(fmt::format("checkpoint: {} tokenizer '{}' hash {} does not match recorded {}",
                                side, file.string(), hex64(model->content_hash()), hex64(hash)));
  }
  TokenizerRef ref;
  ref.path = file.string();
  ref.hash = hash;
  ref.model = std::move(model);
  return ref;
}

}  // namespace

TokenizerRef TokenizerRef::of(std::shared_ptr<const SubwordModel> m, std::string path) {
  TokenizerRef ref;
  ref.hash = m->content_hash();
  ref.path = std::move(path);
  ref.model = std::move(m);
  return ref;
}

template <class Scalar>
bool Checkpoint<Scalar>::trained_on(const std::string &direction) const {
  return std::find(directions.begin(), directions.end(), direction) != directions.end();
}

template <class Scalar>
bool Checkpoint<Scalar>::multilingual() const {
  return src_tokenizer.model ? !src_tokenizer.model->languages().empty()
                             : protocol == "multilingual";
}

template <class Scalar>
Checkpoint<Scalar> snapshot(const TransformerModel<Scalar> &model) {
  Checkpoint<Scalar> ck;
  ck.config = model.config();
  for (const auto &p : model.parameters()) ck.params.emplace_back(p.name(), p.value());
  return ck;
}

template <class Scalar>
TransformerModel<Scalar> restore(const Checkpoint<Scalar> &ck) {
  TransformerModel<Scalar> model(ck.config, 0);
  std::vector<std::string> problems;
  if (ck.params.size() != model.parameters().size()) {
    problems.push_back(fmt::format("{} tensors for a model with {}", ck.params.size(),
                                   model.parameters().size()));
  }
  for (const auto &[name, value] : ck.params) {
    if (!model.has_parameter(name)) {
      problems.push_back(fmt::format("unexpected '{}'", name));
      continue;
    }
    auto &p = model.parameter(name);
    if (p.shape() != shape_of(value)) {
      problems.push_back(fmt::format("'{}' is {} but model expects {}", name,
                                     to_string(shape_of(value)), to_string(p.shape())));
      continue;
    }
    p.value() = value;
  }
  if (!problems.empty()) {
    throw DimensionError("checkpoint does not fit its config: " + join(problems, "; "));
  }
  return model;
}

template <class Scalar>
void save_checkpoint(const Checkpoint<Scalar> &ck, const std::string &path) {
  const fs::path ck_path(path);
  if (!ck_path.parent_path().empty()) fs::create_directories(ck_path.parent_path());
  const std::string src_path = place_tokenizer(ck.src_tokenizer, ck_path, "src");
  const std::string tgt_path = place_tokenizer(ck.tgt_tokenizer, ck_path, "tgt");
  const ModelConfig &c = ck.config;
  std::string out;
  out += fmt::format("{}\n", kMagic);
  out += fmt::format("dtype={}\n", dtype_name<Scalar>());
  out += fmt::format("protocol={}\nlabel={}\nseed={}\nstep={}\n", ck.protocol, ck.label, ck.seed,
                     ck.step);
  out += fmt::format("directions={}\n", join(ck.directions, ","));
  out += fmt::format(
      "num_layers={}\nnum_heads={}\nmodel_dim={}\nff_dim={}\ndropout={}\nsrc_vocab_size={}\n"
      "tgt_vocab_size={}\nmax_seq_len={}\n",
      c.num_layers, c.num_heads, c.model_dim, c.ff_dim, c.dropout, c.src_vocab_size,
      c.tgt_vocab_size, c.max_seq_len);
  out += fmt::format("src_tokenizer={}\nsrc_tokenizer_hash={}\n", src_path,
                     hex64(ck.src_tokenizer.hash));
  out += fmt::format("tgt_tokenizer={}\ntgt_tokenizer_hash={}\n", tgt_path,
                     hex64(ck.tgt_tokenizer.hash));
  out += fmt::format("valid_loss={}\n", ck.valid_loss);
  out += fmt::format("params={}\n", ck.params.size());
  for (const auto &[name, m] : ck.params) {
    out += fmt::format("param {} {} {}\n", name, m.rows(), m.cols());
  }
  out += "end\n";
  for (const auto &[name, m] : ck.params) append_le(out, m);
  write_file(path, out);
}

namespace {

struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> params;
  std::size_t data_offset = 0;

  const std::string &get(std::string_view key) const {
    for (const auto &[k, v] : entries) {
      if (k == key) return v;
    }
    throw DataError(fmt::format("checkpoint: manifest lacks '{}'", key));
  }
};

Manifest read_manifest(std::string_view bytes, const std::string &path) {
  Manifest m;
  std::size_t pos = 0;
  bool first = true;
  while (true) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw DataError(fmt::format("{}: truncated manifest", path));
    const std::string_view line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (first) {
      if (line != kMagic) throw DataError(fmt::format("{}: not a checkpoint file", path));
      first = false;
      continue;
    }
    if (line == "end") break;
    if (line.starts_with("param ")) {
      std::istringstream ss{std::string(line.substr(6))};
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      if (!(ss >> name >> rows >> cols) || rows <= 0 || cols <= 0) {
        throw DataError(fmt::format("{}: bad param line '{}'", path, line));
      }
      m.params.emplace_back(name, rows, cols);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw DataError(fmt::format("{}: bad manifest line '{}'", path, line));
    m.entries.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  m.data_offset = pos;
  return m;
}

std::vector<std::string> split_commas(const std::string &s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  if (s.empty()) return out;
  while (true) {
    const auto c = s.find(',', start);
    out.push_back(s.substr(start, c == std::string::npos ? std::string::npos : c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return out;
}

}  // namespace

std::string checkpoint_dtype(const std::string &path) {
  const std::string bytes = read_file(path);
  return read_manifest(bytes, path).get("dtype");
}

template <class Scalar>
Checkpoint<Scalar> load_checkpoint(const std::string &path) {
  const std::string bytes = read_file(path);
  const Manifest m = read_manifest(bytes, path);
  if (m.get("dtype") != dtype_name<Scalar>()) {
    throw UsageError(fmt::format("{}: stored as {} but requested {}", path, m.get("dtype"),
                                 dtype_name<Scalar>()));
  }
  Checkpoint<Scalar> ck;
  ck.protocol = m.get("protocol");
  ck.label = m.get("label");
  ck.seed = parse_number<std::uint64_t>(m.get("seed"), "seed");
  ck.step = parse_number<long>(m.get("step"), "step");
  ck.directions = split_commas(m.get("directions"));
  ModelConfig &c = ck.config;
  c.num_layers = parse_number<int>(m.get("num_layers"), "num_layers");
  c.num_heads = parse_number<int>(m.get("num_heads"), "num_heads");
  c.model_dim = parse_number<int>(m.get("model_dim"), "model_dim");
  c.ff_dim = parse_number<int>(m.get("ff_dim"), "ff_dim");
  c.dropout = parse_number<double>(m.get("dropout"), "dropout");
  c.src_vocab_size = parse_number<int>(m.get("src_vocab_size"), "src_vocab_size");
  c.tgt_vocab_size = parse_number<int>(m.get("tgt_vocab_size"), "tgt_vocab_size");
  c.max_seq_len = parse_number<int>(m.get("max_seq_len"), "max_seq_len");
  ck.valid_loss = parse_number<double>(m.get("valid_loss"), "valid_loss");
  const auto hash_of = [&](std::string_view key) {
    std::uint64_t h = 0;
    const std::string &s = m.get(key);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), h, 16);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw DataError(fmt::format("{}: bad hash for '{}'", path, key));
    }
    return h;
  };
  ck.src_tokenizer = resolve_tokenizer(m.get("src_tokenizer"), hash_of("src_tokenizer_hash"),
                                       fs::path(path), "source");
  ck.tgt_tokenizer = resolve_tokenizer(m.get("tgt_tokenizer"), hash_of("tgt_tokenizer_hash"),
                                       fs::path(path), "target");
  if (parse_number<std::size_t>(m.get("params"), "params") != m.params.size()) {
    throw DataError(fmt::format("{}: parameter count mismatch", path));
  }
  std::size_t offset = m.data_offset;
  for (const auto &[name, rows, cols] : m.params) {
    const std::size_t nbytes = sizeof(Scalar) * static_cast<std::size_t>(rows * cols);
    if (offset + nbytes > bytes.size()) throw DataError(fmt::format("{}: truncated data", path));
    Matrix<Scalar> value(rows, cols);
    read_le(std::string_view(bytes).substr(offset, nbytes), value);
    ck.params.emplace_back(name, std::move(value));
    offset += nbytes;
  }
  if (offset != bytes.size()) throw DataError(fmt::format("{}: trailing bytes", path));
  return ck;
}

#define NMT_INSTANTIATE(S)                                                       \
  template struct Checkpoint<S>;                                                 \
  template Checkpoint<S> snapshot<S>(const TransformerModel<S> &);               \
  template TransformerModel<S> restore<S>(const Checkpoint<S> &);                \
  template void save_checkpoint<S>(const Checkpoint<S> &, const std::string &); \
  template Checkpoint<S> load_checkpoint<S>(const std::string &);

NMT_INSTANTIATE(float)
NMT_INSTANTIATE(double)

#undef NMT_INSTANTIATE

}  // namespace nmt
