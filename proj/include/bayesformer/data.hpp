#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bayesformer/model.hpp"
#include "bayesformer/rng.hpp"
#include "bayesformer/tensor.hpp"

namespace bayesformer::data {

// ---- synthetic sequences ----------------------------------------------------

enum class Generator : std::uint8_t { m1 = 1, m2 = 2 };
std::string_view generator_name(Generator g);
Generator parse_generator(std::string_view name);

/// Number of i.i.d. N(0,1) seed values preceding the generated steps.
inline constexpr std::size_t kSeedValues = 5;

struct ToySequence {
  Generator generator = Generator::m1;
  std::vector<double> values;     // kSeedValues seeds followed by the generated steps
  std::vector<double> true_mean;  // conditional mean of each generated step
  std::vector<double> true_var;   // conditional variance of each generated step
  std::size_t steps() const { return true_mean.size(); }
};

/// Conditional mean of the next value given X_t.
double m1_mean(double x_t);
/// Conditional mean given the five most recent values, most recent first.
double m2_mean(const double* recent_first);
double generator_variance(Generator g);

std::vector<ToySequence> generate_m1(std::size_t n_sequences, std::size_t seq_len, Rng& rng);
std::vector<ToySequence> generate_m2(std::size_t n_sequences, std::size_t seq_len, Rng& rng);
std::vector<ToySequence> generate(Generator g, std::size_t n_sequences, std::size_t seq_len, Rng& rng);

struct ToySplit {
  std::vector<ToySequence> train, val, test;
};
/// 800 / 80 / 80 sequences of 24 steps from one stream seeded by `seed`.
ToySplit toy_split(Generator g, std::uint64_t seed, std::size_t n_train = 800, std::size_t n_val = 80,
                   std::size_t n_test = 80, std::size_t seq_len = 24);

struct ToyCacheHeader {
  Generator generator = Generator::m1;
  std::uint64_t n = 0;
  std::uint64_t len = 0;
  std::uint64_t seed = 0;
};

/// Flat little-endian file: "BFTY", u32 version, u8 generator, u64 n, u64 len,
/// u64 seed, then per sequence (5 + len) values, len means, len variances (f64).
void save_toy_cache(const std::filesystem::path& path, const ToyCacheHeader& h,
                    const std::vector<ToySequence>& seqs);
std::vector<ToySequence> load_toy_cache(const std::filesystem::path& path, ToyCacheHeader* header = nullptr);
ToyCacheHeader read_toy_cache_header(const std::filesystem::path& path);

// ---- images -----------------------------------------------------------------

struct ImageExample {
  std::vector<double> pixels;  // side*side in [0, 1], row-major
  std::size_t label = 0;
};

/// Big-endian IDX pair; FormatError names the offending byte offset.
std::vector<ImageExample> load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct ImageSplit {
  std::vector<ImageExample> train, val, test;
};
/// 48000 / 12000 from the training file, the first 9984 of the test file.
ImageSplit mnist_split(std::vector<ImageExample> train_file, std::vector<ImageExample> test_file);
/// Looks for the four standard MNIST file names under `dir`.
bool mnist_available(const std::filesystem::path& dir);
ImageSplit load_mnist_dir(const std::filesystem::path& dir);

/// 10-class stand-in for MNIST: smooth per-class prototypes plus pixel noise.
std::vector<ImageExample> synthetic_images(std::size_t n, Rng& rng, std::size_t n_classes = 10,
                                           std::size_t side = 28);

// ---- CoNLL-U ------------------------------------------------------------------

struct TaggedSentence {
  std::vector<std::string> forms;
  std::vector<std::string> tags;
};

/// ParseError with the 1-based line number for malformed token lines.
/// Comments and multiword ranges are skipped, empty nodes too.
std::vector<TaggedSentence> parse_conllu_text(std::string_view text);
std::vector<TaggedSentence> parse_conllu(const std::filesystem::path& path);
/// Minimal CoNLL-U text (id, form, _, tag, then underscores).
std::string to_conllu(const std::vector<TaggedSentence>& sentences);

/// Sentences longer than max_len are cut into consecutive chunks.
std::vector<TaggedSentence> chunk_sentences(const std::vector<TaggedSentence>& s, std::size_t max_len = 40);

/// The 17 universal POS tags; the older "CONJ" maps to "CCONJ".
const std::vector<std::string>& upos_tags();
std::size_t upos_index(const std::string& tag);

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static Vocabulary build(const std::vector<TaggedSentence>& train);
  std::size_t id(const std::string& form) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  static Vocabulary from_words(std::vector<std::string> words);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TokenSequence {
  std::vector<std::size_t> ids;   // padded to max_len
  std::vector<std::size_t> tags;  // padded with 0
  std::vector<std::uint8_t> valid;
  std::size_t length = 0;
};
std::vector<TokenSequence> encode(const std::vector<TaggedSentence>& chunks, const Vocabulary& v,
                                  std::size_t max_len = 40);

// ---- batching ----------------------------------------------------------------

/// Deterministic epoch shuffles. Batches partition [0, n); the last may be short.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed, bool shuffle = true);
  std::vector<std::vector<std::size_t>> epoch(std::size_t epoch_index) const;
  std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  bool shuffle_;
};

/// Minibatch in model layout plus the supervision needed by the loss.
struct Batch {
  ModelInput input;
  Tensor targets;                    // regression (rows, 1)
  std::vector<std::size_t> labels;   // tagging (rows) / classification (B)
  Tensor weights;                    // (rows, 1) loss weights: scored positions / real tokens
  std::size_t examples = 0;
};

/// Inputs X_0..X_{T-2} predict X_1..X_{T-1}; only generated steps are scored.
Batch toy_batch(const std::vector<ToySequence>& seqs, const std::vector<std::size_t>& idx);
Batch tagging_batch(const std::vector<TokenSequence>& seqs, const std::vector<std::size_t>& idx);
Batch image_batch(const std::vector<ImageExample>& imgs, const std::vector<std::size_t>& idx,
                  std::size_t side = 28, std::size_t patch = 4);

std::vector<std::size_t> iota(std::size_t n);

// ---- dataset bundle ------------------------------------------------------------

enum class Split { train, val, test };
std::string_view split_name(Split s);

/// The three splits of one dataset; only the member matching `task` is used.
struct DataBundle {
  Task task = Task::regression;
  std::vector<ToySequence> toy[3];
  std::vector<TokenSequence> tokens[3];
  std::vector<ImageExample> images[3];
  std::size_t vocab = 0;   // tagging
  std::size_t n_tags = 0;  // tagging
  std::size_t image_side = 28;
  std::size_t patch = 4;

  std::size_t size(Split s) const;
  Batch batch(Split s, const std::vector<std::size_t>& idx) const;
};

DataBundle toy_bundle(ToySplit split);
DataBundle tagging_bundle(const std::vector<TaggedSentence>& train, const std::vector<TaggedSentence>& val,
                          const std::vector<TaggedSentence>& test, std::size_t max_len = 40);
DataBundle image_bundle(ImageSplit split, std::size_t side = 28, std::size_t patch = 4);

}  // namespace bayesformer::data
