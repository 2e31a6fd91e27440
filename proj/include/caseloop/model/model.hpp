#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "caseloop/core/rng.hpp"
#include "caseloop/core/sample.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/model/features.hpp"

namespace caseloop::model {

struct ModelDims {
  std::size_t hash = kHashDim;
  std::size_t embed = 64;
  std::size_t coarse = 32;
  std::size_t fine_hidden = 64;

  bool operator==(const ModelDims&) const = default;
};

struct TaskWeights {
  double retrieval = 1.0;
  double coarse = 1.0;
  double fine = 1.0;

  bool operator==(const TaskWeights&) const = default;
};

struct TrainConfig {
  TaskWeights weights;
  int epochs = 12;
  std::uint64_t seed = 1;
  int queries_per_batch = 8;
  double learning_rate = 0.01;
  // Epoch e uses learning_rate / (1 + lr_decay * e).
  double lr_decay = 0.1;
  double temperature = 0.1;
  // Scale applied to coarse score differences inside the pairwise loss.
  double coarse_scale = 5.0;
  ModelDims dims;
};

// Parameter blocks. Encoder: embed, hidden. Heads: retrieval, coarse, fine.
enum Block : std::size_t {
  kEmbed,
  kHiddenW,
  kHiddenB,
  kRetrievalW,
  kCoarseW,
  kCoarseB,
  kFine1W,
  kFine1B,
  kFine2W,
  kFine2B,
  kNumBlocks
};

const char* block_name(std::size_t b);

struct ParamBlock {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

struct TrainingMeta {
  std::string corpus_version;
  std::size_t corpus_size = 0;
  std::vector<double> loss_curve;
  std::uint64_t seed = 0;
  int epochs = 0;
  TaskWeights weights;
};

struct Checkpoint {
  std::string version;
  ModelDims dims;
  std::array<ParamBlock, kNumBlocks> blocks;
  TrainingMeta meta;
  // Coarse score thresholds separating bins 0|1|2|3.
  std::array<double, 3> coarse_cutpoints{0.25, 0.5, 0.75};

  static Checkpoint initialize(const ModelDims& dims, std::uint64_t seed);

  bool all_finite() const;
  std::size_t parameter_count() const;
  std::string digest() const;

  // Binary file: magic, format version, JSON header, raw little-endian blocks.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

// One featurized (q, d, y) triple. `group` identifies the query.
struct Example {
  FeatureIds q;
  FeatureIds d;
  CrossFeatures cross{};
  int label = 0;
  std::size_t group = 0;
};

using ProductLookup = std::function<const Product&(std::string_view)>;

std::vector<Example> featurize(const Corpus& corpus, const ProductLookup& products, const QueryParser& parser);

struct LossBreakdown {
  double total = 0.0;
  double retrieval = 0.0;
  double coarse = 0.0;
  double fine = 0.0;
};

struct Gradients {
  std::array<std::vector<double>, kNumBlocks> blocks;
  std::vector<std::uint32_t> touched_rows;  // embedding rows with nonzero gradient

  void reset(const Checkpoint& shape);
};

// Weighted multi-task loss over a batch. Retrieval: in-batch contrastive over
// positive pairs (label >= 2). Coarse: pairwise logistic over same-query pairs
// with different labels. Fine: 4-class cross-entropy.
LossBreakdown multitask_loss(const Checkpoint& ck, const std::vector<Example>& batch, const TrainConfig& config,
                             Gradients* grad);

// Throws kDegenerateCorpus when a weighted task has fewer than two distinct labels.
Checkpoint train_multitask(const Corpus& corpus, const ProductLookup& products, const QueryParser& parser,
                           const TrainConfig& config, const std::string& version);

// Inference over a checkpoint. Safe for concurrent callers.
class RelevanceModel {
 public:
  RelevanceModel(std::shared_ptr<const Checkpoint> checkpoint, std::shared_ptr<const QueryParser> parser);

  const Checkpoint& checkpoint() const { return *checkpoint_; }
  const QueryParser& parser() const { return *parser_; }
  QueryStructure structure_of(const Query& q) const;

  // Unit-norm retrieval embeddings. Inputs without features map to basis vector 0.
  std::vector<double> encode(const Query& q) const;
  std::vector<double> encode(const Product& d) const;

  std::vector<double> coarse_score(const Query& q, const std::vector<Product>& candidates) const;
  RelevanceLabel coarse_bin(double score) const;

  // Base fine prediction, then directive adjustment.
  Prediction fine_base(const Query& q, const Product& d) const;
  Prediction fine_score(const Query& q, const Product& d, const std::vector<Directive>& active) const;

  std::uint64_t fine_calls() const { return fine_calls_->load(); }
  std::uint64_t coarse_calls() const { return coarse_calls_->load(); }

 private:
  std::shared_ptr<const Checkpoint> checkpoint_;
  std::shared_ptr<const QueryParser> parser_;
  std::shared_ptr<std::atomic<std::uint64_t>> fine_calls_ = std::make_shared<std::atomic<std::uint64_t>>(0);
  std::shared_ptr<std::atomic<std::uint64_t>> coarse_calls_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

// Softmax regression over the cross features alone.
class LogisticBaseline {
 public:
  static LogisticBaseline train(const std::vector<Example>& examples, int epochs = 300, double learning_rate = 0.5);
  RelevanceLabel predict(const CrossFeatures& x) const;

 private:
  std::array<std::array<double, kCrossDim>, RelevanceLabel::kLevels> w_{};
};

}  // namespace caseloop::model
