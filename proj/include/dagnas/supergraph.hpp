#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dagnas/autograd.hpp"
#include "dagnas/genotype.hpp"
#include "dagnas/rng.hpp"
#include "dagnas/sgd.hpp"
#include "dagnas/topology.hpp"

namespace dagnas {

// Coordinate of one operation's parameters. The input source is deliberately
// not part of the key: rewiring a node keeps its trained weights.
struct NodeKey {
  int block_instance;
  int node;
  int slot;  // 1 or 2
  Op op;

  std::string prefix() const;
  auto operator<=>(const NodeKey&) const = default;
};

enum class ParamKind : std::uint8_t {
  Weight = 0,     // trained, weight decay applies
  NoDecay = 1,    // trained, no weight decay (biases, BN scale/shift)
  Statistic = 2,  // BN running statistics, updated only by training forwards
};

enum class InitRule : std::uint8_t { He, Zeros, Ones };

struct Param {
  std::shared_ptr<ag::Node<float>> node;
  Tensor<float> velocity;
  ParamKind kind = ParamKind::Weight;

  const Tensor<float>& value() const { return node->value; }
  Tensor<float>& value() { return node->value; }
};

struct BankLayout {
  BlockPlan plan;
  int n_c = 5;
  int classes = 10;
  std::vector<Op> ops{Op::Identity, Op::DW3, Op::DW5, Op::FR3, Op::FR5, Op::Avg, Op::Max};
};

class BankLockedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Shared weight store. Entries are created once and keep their shape; every
// network decoded from any chromosome binds into the same storage.
class ParameterBank {
 public:
  explicit ParameterBank(std::uint64_t init_seed = 0);

  ParameterBank(const ParameterBank&) = delete;
  ParameterBank& operator=(const ParameterBank&) = delete;
  ParameterBank(ParameterBank&&) noexcept = default;
  ParameterBank& operator=(ParameterBank&&) noexcept = default;

  // Returns the entry under `key`, creating it when absent. He initialization
  // draws N(0, 2 / fan_in); fan_in <= 0 derives it from the shape.
  Param& get_or_init(const std::string& key, const Shape& shape, ParamKind kind, InitRule init, int fan_in = 0);

  Param* find(const std::string& key);
  const Param* find(const std::string& key) const;
  Param& at(const std::string& key);
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Param>& entries() const { return entries_; }

  // FNV-1a over keys, shapes, values and optimizer state.
  std::uint64_t checksum() const;

  // Applies one SGD step to the given entries using their accumulated grads.
  void apply_sgd(const std::vector<Param*>& params, const SgdConfig& cfg);

  std::uint64_t step_count() const { return steps_; }

  // While any ReadLock is alive the bank refuses every mutation.
  class ReadLock {
   public:
    explicit ReadLock(const ParameterBank& bank);
    ReadLock(ReadLock&& other) noexcept;
    ReadLock(const ReadLock&) = delete;
    ReadLock& operator=(const ReadLock&) = delete;
    ReadLock& operator=(ReadLock&&) = delete;
    ~ReadLock();

   private:
    int* counter_;
  };
  ReadLock lock_reads() const { return ReadLock(*this); }
  bool writable() const { return *readers_ == 0; }
  void require_writable(const char* what) const;

  // Deep copy with independent storage.
  ParameterBank clone() const;
  // Overwrites values and optimizer state of every key present in both banks.
  void copy_values_from(const ParameterBank& other, const std::vector<std::string>& keys);

  // Raw access for checkpoint restore.
  void restore_entry(const std::string& key, ParamKind kind, Tensor<float> value, Tensor<float> velocity);
  void set_step_count(std::uint64_t steps) { steps_ = steps; }
  Rng& init_rng() { return init_rng_; }
  const Rng& init_rng() const { return init_rng_; }

 private:
  std::map<std::string, Param> entries_;
  Rng init_rng_;
  std::uint64_t steps_ = 0;
  std::unique_ptr<int> readers_ = std::make_unique<int>(0);
};

// Eagerly creates every operation variant for every (block instance, node,
// slot), every source projection and the classifier head.
void initialize_search_space(ParameterBank& bank, const BankLayout& layout);

// Closed-form number of entries initialize_search_space creates.
std::size_t expected_entry_count(const BankLayout& layout);

// Keys of the entries owned by one operation (empty for parameter-free ops).
std::vector<std::string> op_param_keys(const NodeKey& key);

enum class Mode { Train, Eval };

struct NetworkOptions {
  int classes = 10;
  double dropout = 0.5;
  double bn_momentum = 0.9;
  double bn_eps = 1e-7;
};

// A decoded chromosome bound to bank storage, with a GAP + linear softmax head.
class ExecutableNetwork {
 public:
  ExecutableNetwork(PhenotypeGraph graph, ParameterBank& bank, const NetworkOptions& options);

  // Class logits [N, classes]. Train mode uses batch statistics, updates BN
  // running statistics and applies dropout (requires dropout_rng).
  ag::Var<float> forward(const Tensor<float>& images, Mode mode, Rng* dropout_rng = nullptr) const;

  // Trainable entries bound by this network, without duplicates.
  const std::vector<Param*>& parameters() const { return trainable_; }
  // Every bound key, including running statistics.
  const std::vector<std::string>& bound_keys() const { return bound_keys_; }
  const PhenotypeGraph& graph() const { return graph_; }
  const NetworkOptions& options() const { return options_; }
  ParameterBank& bank() const { return *bank_; }
  std::size_t parameter_count() const;

 private:
  struct OpBinding {
    Op op;
    int stride;
    std::vector<Param*> p;  // op-specific order, see op_param_keys
  };
  struct NodeBinding {
    int node;
    std::array<int, 2> inputs;
    std::array<OpBinding, 2> ops;
  };
  struct ProjectionBinding {
    int producer;
    int stride;
    std::vector<int> pieces;      // producer node numbers (or 0 for the network input)
    std::vector<Param*> weights;  // one [C, Cp, 1, 1] per piece
    Param *gamma, *beta, *mean, *var;
  };
  struct BlockBinding {
    std::vector<ProjectionBinding> sources;
    std::vector<NodeBinding> nodes;
    std::vector<int> leaves;
  };

  Param* bind(const std::string& key);

  PhenotypeGraph graph_;
  ParameterBank* bank_;
  NetworkOptions options_;
  std::vector<BlockBinding> blocks_;
  std::vector<Param*> head_weights_;
  Param* head_bias_ = nullptr;
  std::vector<Param*> trainable_;
  std::vector<std::string> bound_keys_;
};

ExecutableNetwork instantiate(const Chromosome& c, const BlockPlan& plan, ParameterBank& bank,
                              const NetworkOptions& options);

// One SGD step on a mini-batch; returns the mean cross-entropy.
float train_step(const ExecutableNetwork& net, const Tensor<float>& images, std::span<const int> labels,
                 const SgdConfig& cfg, Rng& dropout_rng);

// Evaluation-only view: running BN statistics, no dropout, and the bank is
// read-locked for the lifetime of the view.
class EvalView {
 public:
  explicit EvalView(const ExecutableNetwork& net);

  Tensor<float> logits(const Tensor<float>& images) const;
  std::vector<int> predict(const Tensor<float>& images) const;
  // Top-1 accuracy over images/labels, processed in chunks of batch_size.
  double accuracy(const Tensor<float>& images, std::span<const int> labels, int batch_size = 256) const;

  // Always throws: updates are not permitted through an evaluation view.
  [[noreturn]] void apply_update(const SgdConfig& cfg) const;

 private:
  const ExecutableNetwork* net_;
  ParameterBank::ReadLock lock_;
};

EvalView inherited_eval_guard(const ExecutableNetwork& net);

}  // namespace dagnas
