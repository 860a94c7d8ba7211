#include "bayesformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "bayesformer/errors.hpp"
#include "bayesformer/io.hpp"

namespace bayesformer::data {

std::string_view generator_name(Generator g) { return g == Generator::m1 ? "m1" : "m2"; }

Generator parse_generator(std::string_view name) {
  if (name == "m1" || name == "M1") return Generator::m1;
  if (name == "m2" || name == "M2") return Generator::m2;
  throw ContractError("unknown generator '" + std::string(name) + "'");
}

double m1_mean(double x_t) {
  double s = 0.0;
  for (int i = 0; i <= 4; ++i) s += 0.2 * std::cos(0.4 * std::numbers::pi * i * x_t + 1.0 / (i + 1));
  return s;
}

double m2_mean(const double* recent_first) {
  double s = 0.0;
  for (int i = 0; i <= 4; ++i) {
    for (int j = 0; j <= 4; ++j) s += 0.5 * std::cos(0.8 * std::numbers::pi * j * recent_first[i]);
  }
  return s;
}

double generator_variance(Generator g) { return g == Generator::m1 ? 0.5 : 0.1; }

std::vector<ToySequence> generate(Generator g, std::size_t n_sequences, std::size_t seq_len, Rng& rng) {
  BF_REQUIRE(seq_len >= 1, "generate: seq_len must be >= 1");
  const double var = generator_variance(g), sd = std::sqrt(var);
  std::vector<ToySequence> out(n_sequences);
  for (auto& s : out) {
    s.generator = g;
    s.values.reserve(kSeedValues + seq_len);
    for (std::size_t i = 0; i < kSeedValues; ++i) s.values.push_back(rng.normal());
    for (std::size_t t = 0; t < seq_len; ++t) {
      double mean;
      if (g == Generator::m1) {
        mean = m1_mean(s.values.back());
      } else {
        double recent[5];
        for (int i = 0; i < 5; ++i) recent[i] = s.values[s.values.size() - 1 - i];
        mean = m2_mean(recent);
      }
      s.true_mean.push_back(mean);
      s.true_var.push_back(var);
      s.values.push_back(mean + sd * rng.normal());
    }
  }
  return out;
}

std::vector<ToySequence> generate_m1(std::size_t n, std::size_t len, Rng& rng) {
  return generate(Generator::m1, n, len, rng);
}
std::vector<ToySequence> generate_m2(std::size_t n, std::size_t len, Rng& rng) {
  return generate(Generator::m2, n, len, rng);
}

ToySplit toy_split(Generator g, std::uint64_t seed, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                   std::size_t seq_len) {
  Rng rng(seed);
  auto all = generate(g, n_train + n_val + n_test, seq_len, rng);
  ToySplit s;
  s.train.assign(all.begin(), all.begin() + n_train);
  s.val.assign(all.begin() + n_train, all.begin() + n_train + n_val);
  s.test.assign(all.begin() + n_train + n_val, all.end());
  return s;
}

namespace {
constexpr char kToyMagic[4] = {'B', 'F', 'T', 'Y'};
constexpr std::uint32_t kToyVersion = 1;

ToyCacheHeader read_header(io::BinaryReader& r, const std::filesystem::path& path) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kToyMagic, 4) != 0) throw FormatError("'" + path.string() + "': bad magic at byte offset 0");
  const auto v = r.u32();
  if (v != kToyVersion) throw FormatError("'" + path.string() + "': unsupported version at byte offset 4");
  ToyCacheHeader h;
  const auto g = r.u8();
  if (g != 1 && g != 2) throw FormatError("'" + path.string() + "': bad generator id at byte offset 8");
  h.generator = static_cast<Generator>(g);
  h.n = r.u64();
  h.len = r.u64();
  h.seed = r.u64();
  return h;
}
}  // namespace

void save_toy_cache(const std::filesystem::path& path, const ToyCacheHeader& h, const std::vector<ToySequence>& seqs) {
  BF_REQUIRE(seqs.size() == h.n, "save_toy_cache: header count does not match sequences");
  io::BinaryWriter w(path);
  w.bytes(kToyMagic, 4);
  w.u32(kToyVersion);
  w.u8(static_cast<std::uint8_t>(h.generator));
  w.u64(h.n);
  w.u64(h.len);
  w.u64(h.seed);
  for (const auto& s : seqs) {
    BF_REQUIRE(s.steps() == h.len && s.values.size() == kSeedValues + h.len, "save_toy_cache: ragged sequence");
    for (double v : s.values) w.f64(v);
    for (double v : s.true_mean) w.f64(v);
    for (double v : s.true_var) w.f64(v);
  }
  w.close();
}

ToyCacheHeader read_toy_cache_header(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  return read_header(r, path);
}

std::vector<ToySequence> load_toy_cache(const std::filesystem::path& path, ToyCacheHeader* header) {
  io::BinaryReader r(path);
  const ToyCacheHeader h = read_header(r, path);
  if (h.len > (1u << 20) || h.n > (1u << 26)) throw FormatError("'" + path.string() + "': implausible header");
  std::vector<ToySequence> out(h.n);
  for (auto& s : out) {
    s.generator = h.generator;
    s.values.resize(kSeedValues + h.len);
    s.true_mean.resize(h.len);
    s.true_var.resize(h.len);
    for (auto& v : s.values) v = r.f64();
    for (auto& v : s.true_mean) v = r.f64();
    for (auto& v : s.true_var) v = r.f64();
  }
  if (!r.at_end()) throw FormatError("'" + path.string() + "': trailing bytes at offset " + std::to_string(r.offset()));
  if (header) *header = h;
  return out;
}

// ---- images -------------------------------------------------------------------

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + p.string() + "'");
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& p) {
  if (off + 4 > b.size()) throw FormatError("'" + p.string() + "' truncated at byte offset " + std::to_string(off));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

}  // namespace

std::vector<ImageExample> load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = slurp(images);
  const auto lb = slurp(labels);
  const auto imagic = be32(ib, 0, images);
  if (imagic != 0x00000803) {
    std::ostringstream os;
    os << "'" << images.string() << "': image magic 0x" << std::hex << imagic << " at byte offset 0, expected 0x803";
    throw FormatError(os.str());
  }
  const auto lmagic = be32(lb, 0, labels);
  if (lmagic != 0x00000801) {
    std::ostringstream os;
    os << "'" << labels.string() << "': label magic 0x" << std::hex << lmagic << " at byte offset 0, expected 0x801";
    throw FormatError(os.str());
  }
  const std::size_t n = be32(ib, 4, images), rows = be32(ib, 8, images), cols = be32(ib, 12, images);
  const std::size_t nl = be32(lb, 4, labels);
  if (n != nl) {
    throw FormatError("image count " + std::to_string(n) + " (offset 4) does not match label count " +
                      std::to_string(nl) + " (offset 4)");
  }
  const std::size_t px = rows * cols;
  if (ib.size() < 16 + n * px) {
    throw FormatError("'" + images.string() + "' truncated at byte offset " + std::to_string(ib.size()));
  }
  if (lb.size() < 8 + n) throw FormatError("'" + labels.string() + "' truncated at byte offset " + std::to_string(lb.size()));
  std::vector<ImageExample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].pixels.resize(px);
    for (std::size_t j = 0; j < px; ++j) out[i].pixels[j] = ib[16 + i * px + j] / 255.0;
    out[i].label = lb[8 + i];
    if (out[i].label > 9) {
      throw FormatError("'" + labels.string() + "': label " + std::to_string(out[i].label) + " at byte offset " +
                        std::to_string(8 + i));
    }
  }
  return out;
}

ImageSplit mnist_split(std::vector<ImageExample> train_file, std::vector<ImageExample> test_file) {
  BF_REQUIRE(train_file.size() >= 60000 && test_file.size() >= 9984,
             "mnist_split: need 60000 training and at least 9984 test images");
  ImageSplit s;
  s.train.assign(std::make_move_iterator(train_file.begin()), std::make_move_iterator(train_file.begin() + 48000));
  s.val.assign(std::make_move_iterator(train_file.begin() + 48000), std::make_move_iterator(train_file.begin() + 60000));
  s.test.assign(std::make_move_iterator(test_file.begin()), std::make_move_iterator(test_file.begin() + 9984));
  return s;
}

bool mnist_available(const std::filesystem::path& dir) {
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte"}) {
    if (!std::filesystem::exists(dir / f)) return false;
  }
  return true;
}

ImageSplit load_mnist_dir(const std::filesystem::path& dir) {
  return mnist_split(load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
                     load_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"));
}

std::vector<ImageExample> synthetic_images(std::size_t n, Rng& rng, std::size_t n_classes, std::size_t side) {
  // Class prototypes come from a fixed stream so every call shares them.
  Rng proto_rng(0x5eed1234ULL);
  std::vector<std::vector<double>> protos(n_classes, std::vector<double>(side * side, 0.0));
  for (auto& p : protos) {
    for (int blob = 0; blob < 3; ++blob) {
      const double cy = 4.0 + (side - 8.0) * proto_rng.uniform();
      const double cx = 4.0 + (side - 8.0) * proto_rng.uniform();
      const double w = 2.0 + 3.0 * proto_rng.uniform();
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          p[y * side + x] = std::max(p[y * side + x], std::exp(-d2 / (2.0 * w * w)));
        }
      }
    }
  }
  std::vector<ImageExample> out(n);
  for (auto& e : out) {
    e.label = rng.below(n_classes);
    e.pixels.resize(side * side);
    const double gain = 0.7 + 0.3 * rng.uniform();
    for (std::size_t j = 0; j < side * side; ++j) {
      e.pixels[j] = std::clamp(gain * protos[e.label][j] + 0.15 * rng.normal(), 0.0, 1.0);
    }
  }
  return out;
}

// ---- CoNLL-U ------------------------------------------------------------------

const std::vector<std::string>& upos_tags() {
  static const std::vector<std::string> tags = {"ADJ",  "ADP",  "ADV",   "AUX",   "CCONJ", "DET",
                                                "INTJ", "NOUN", "NUM",   "PART",  "PRON",  "PROPN",
                                                "PUNCT", "SCONJ", "SYM", "VERB",  "X"};
  return tags;
}

std::size_t upos_index(const std::string& tag) {
  const std::string t = tag == "CONJ" ? "CCONJ" : tag;
  const auto& tags = upos_tags();
  auto it = std::find(tags.begin(), tags.end(), t);
  if (it == tags.end()) throw ContractError("unknown UPOS tag '" + tag + "'");
  return static_cast<std::size_t>(it - tags.begin());
}

std::vector<TaggedSentence> parse_conllu_text(std::string_view text) {
  std::vector<TaggedSentence> out;
  TaggedSentence cur;
  std::size_t line_no = 0, pos = 0;
  auto flush = [&] {
    if (!cur.forms.empty()) out.push_back(std::move(cur));
    cur = {};
  };
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) {
      flush();
      if (end == text.size()) break;
      continue;
    }
    if (line.front() == '#') continue;
    std::vector<std::string_view> cols;
    std::size_t s = 0;
    while (true) {
      const std::size_t t = line.find('\t', s);
      cols.push_back(line.substr(s, t == std::string_view::npos ? std::string_view::npos : t - s));
      if (t == std::string_view::npos) break;
      s = t + 1;
    }
    if (cols.size() != 10) {
      throw ParseError("CoNLL-U line " + std::to_string(line_no) + ": expected 10 tab-separated columns, found " +
                       std::to_string(cols.size()));
    }
    if (cols[0].empty()) throw ParseError("CoNLL-U line " + std::to_string(line_no) + ": empty id");
    if (cols[0].find('-') != std::string_view::npos || cols[0].find('.') != std::string_view::npos) continue;
    if (!std::all_of(cols[0].begin(), cols[0].end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw ParseError("CoNLL-U line " + std::to_string(line_no) + ": bad token id '" + std::string(cols[0]) + "'");
    }
    const std::string tag(cols[3]);
    try {
      upos_index(tag);
    } catch (const ContractError&) {
      throw ParseError("CoNLL-U line " + std::to_string(line_no) + ": unknown UPOS tag '" + tag + "'");
    }
    cur.forms.emplace_back(cols[1]);
    cur.tags.push_back(tag == "CONJ" ? "CCONJ" : tag);
    if (end == text.size()) break;
  }
  flush();
  return out;
}

std::vector<TaggedSentence> parse_conllu(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_conllu_text(ss.str());
}

std::string to_conllu(const std::vector<TaggedSentence>& sentences) {
  std::ostringstream os;
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.forms.size(); ++i) {
      os << (i + 1) << '\t' << s.forms[i] << "\t_\t" << s.tags[i] << "\t_\t_\t_\t_\t_\t_\n";
    }
    os << '\n';
  }
  return os.str();
}

std::vector<TaggedSentence> chunk_sentences(const std::vector<TaggedSentence>& in, std::size_t max_len) {
  BF_REQUIRE(max_len >= 1, "chunk_sentences: max_len must be >= 1");
  std::vector<TaggedSentence> out;
  for (const auto& s : in) {
    for (std::size_t b = 0; b < s.forms.size(); b += max_len) {
      const std::size_t e = std::min(s.forms.size(), b + max_len);
      TaggedSentence c;
      c.forms.assign(s.forms.begin() + b, s.forms.begin() + e);
      c.tags.assign(s.tags.begin() + b, s.tags.begin() + e);
      out.push_back(std::move(c));
    }
  }
  return out;
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  v.words_ = std::move(words);
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = i;
  return v;
}

Vocabulary Vocabulary::build(const std::vector<TaggedSentence>& train) {
  std::vector<std::string> words = {"<pad>", "<unk>"};
  std::unordered_map<std::string, std::size_t> seen;
  for (const auto& s : train) {
    for (const auto& f : s.forms) {
      if (seen.emplace(f, words.size()).second) words.push_back(f);
    }
  }
  return from_words(std::move(words));
}

std::size_t Vocabulary::id(const std::string& form) const {
  auto it = index_.find(form);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<TokenSequence> encode(const std::vector<TaggedSentence>& chunks, const Vocabulary& v, std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) {
    BF_REQUIRE(c.forms.size() <= max_len && !c.forms.empty(), "encode: chunk length must be in [1, max_len]");
    TokenSequence t;
    t.length = c.forms.size();
    t.ids.assign(max_len, Vocabulary::kPad);
    t.tags.assign(max_len, 0);
    t.valid.assign(max_len, 0);
    for (std::size_t i = 0; i < c.forms.size(); ++i) {
      t.ids[i] = v.id(c.forms[i]);
      t.tags[i] = upos_index(c.tags[i]);
      t.valid[i] = 1;
    }
    out.push_back(std::move(t));
  }
  return out;
}

// ---- batching ------------------------------------------------------------------

BatchIterator::BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : n_(n), batch_(batch_size), seed_(seed), shuffle_(shuffle) {
  BF_REQUIRE(n >= 1, "batch_iter: empty dataset");
  BF_REQUIRE(batch_size >= 1, "batch_iter: batch size must be >= 1");
}

std::vector<std::vector<std::size_t>> BatchIterator::epoch(std::size_t e) const {
  std::vector<std::size_t> order = iota(n_);
  if (shuffle_) {
    Rng rng(seed_ * 0x9E3779B97F4A7C15ULL + e + 1);
    for (std::size_t i = n_ - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n_; b += batch_) {
    out.emplace_back(order.begin() + b, order.begin() + std::min(n_, b + batch_));
  }
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

Batch toy_batch(const std::vector<ToySequence>& seqs, const std::vector<std::size_t>& idx) {
  BF_REQUIRE(!idx.empty(), "toy_batch: empty index list");
  const std::size_t T = seqs[idx[0]].values.size();
  BF_REQUIRE(T >= 2, "toy_batch: sequences too short");
  const std::size_t L = T - 1, B = idx.size();
  Batch b;
  b.examples = B;
  b.input.batch = B;
  b.input.len = L;
  b.input.features = Tensor::matrix(B * L, 1);
  b.targets = Tensor::matrix(B * L, 1);
  b.weights = Tensor::matrix(B * L, 1);
  for (std::size_t e = 0; e < B; ++e) {
    const auto& s = seqs.at(idx[e]);
    BF_REQUIRE(s.values.size() == T, "toy_batch: ragged sequences");
    for (std::size_t t = 0; t < L; ++t) {
      b.input.features[e * L + t] = s.values[t];
      b.targets[e * L + t] = s.values[t + 1];
      b.weights[e * L + t] = (t + 1 >= kSeedValues) ? 1.0 : 0.0;
    }
  }
  return b;
}

Batch tagging_batch(const std::vector<TokenSequence>& seqs, const std::vector<std::size_t>& idx) {
  BF_REQUIRE(!idx.empty(), "tagging_batch: empty index list");
  const std::size_t L = seqs[idx[0]].ids.size(), B = idx.size();
  Batch b;
  b.examples = B;
  b.input.batch = B;
  b.input.len = L;
  b.input.tokens.resize(B * L);
  b.input.valid.resize(B * L);
  b.labels.resize(B * L);
  b.weights = Tensor::matrix(B * L, 1);
  for (std::size_t e = 0; e < B; ++e) {
    const auto& s = seqs.at(idx[e]);
    BF_REQUIRE(s.ids.size() == L, "tagging_batch: sequences must share the padded length");
    for (std::size_t t = 0; t < L; ++t) {
      b.input.tokens[e * L + t] = s.ids[t];
      b.input.valid[e * L + t] = s.valid[t];
      b.labels[e * L + t] = s.tags[t];
      b.weights[e * L + t] = s.valid[t];
    }
  }
  return b;
}

Batch image_batch(const std::vector<ImageExample>& imgs, const std::vector<std::size_t>& idx, std::size_t side,
                  std::size_t patch) {
  BF_REQUIRE(!idx.empty(), "image_batch: empty index list");
  const std::size_t per = (side / patch) * (side / patch), B = idx.size(), pp = patch * patch;
  Batch b;
  b.examples = B;
  b.input.batch = B;
  b.input.len = per;
  b.input.features = Tensor::matrix(B * per, pp);
  b.labels.resize(B);
  b.weights = Tensor::matrix(B, 1, 1.0);
  for (std::size_t e = 0; e < B; ++e) {
    const auto& im = imgs.at(idx[e]);
    const Tensor p = patchify(Tensor({side * side}, im.pixels), side, patch);
    std::copy(p.storage().begin(), p.storage().end(), b.input.features.data() + e * per * pp);
    b.labels[e] = im.label;
  }
  return b;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::size_t DataBundle::size(Split s) const {
  const auto k = static_cast<std::size_t>(s);
  switch (task) {
    case Task::regression: return toy[k].size();
    case Task::tagging: return tokens[k].size();
    case Task::classification: return images[k].size();
  }
  return 0;
}

Batch DataBundle::batch(Split s, const std::vector<std::size_t>& idx) const {
  const auto k = static_cast<std::size_t>(s);
  switch (task) {
    case Task::regression: return toy_batch(toy[k], idx);
    case Task::tagging: return tagging_batch(tokens[k], idx);
    case Task::classification: return image_batch(images[k], idx, image_side, patch);
  }
  throw ContractError("DataBundle: unknown task");
}

DataBundle toy_bundle(ToySplit split) {
  DataBundle d;
  d.task = Task::regression;
  d.toy[0] = std::move(split.train);
  d.toy[1] = std::move(split.val);
  d.toy[2] = std::move(split.test);
  return d;
}

DataBundle tagging_bundle(const std::vector<TaggedSentence>& train, const std::vector<TaggedSentence>& val,
                          const std::vector<TaggedSentence>& test, std::size_t max_len) {
  DataBundle d;
  d.task = Task::tagging;
  const auto tr = chunk_sentences(train, max_len);
  const Vocabulary v = Vocabulary::build(tr);
  d.tokens[0] = encode(tr, v, max_len);
  d.tokens[1] = encode(chunk_sentences(val, max_len), v, max_len);
  d.tokens[2] = encode(chunk_sentences(test, max_len), v, max_len);
  d.vocab = v.size();
  d.n_tags = upos_tags().size();
  return d;
}

DataBundle image_bundle(ImageSplit split, std::size_t side, std::size_t patch) {
  DataBundle d;
  d.task = Task::classification;
  d.images[0] = std::move(split.train);
  d.images[1] = std::move(split.val);
  d.images[2] = std::move(split.test);
  d.image_side = side;
  d.patch = patch;
  return d;
}

}  // namespace bayesformer::data
