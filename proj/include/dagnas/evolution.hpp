#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dagnas/dataio.hpp"
#include "dagnas/supergraph.hpp"
#include "dagnas/variation.hpp"

namespace dagnas {

// Piecewise-constant learning rate. Breakpoints are written against a
// reference length and scaled to the actual run length with floor rounding.
struct LrSchedule {
  std::vector<std::pair<int, double>> points;  // (start, rate), first start is 0
  int reference = 300;

  // "0:0.1,150:0.01,225:0.001"
  static LrSchedule parse(std::string_view text, int reference);
  std::string render() const;
  // Throws InvalidConfig unless starts are strictly increasing from 0 and
  // within [0, reference) and every rate is positive.
  void check() const;
  // Breakpoints after scaling to `total` steps; later entries win on collisions.
  std::vector<std::pair<int, double>> scaled(int total) const;
};

double lr_at(int step, const LrSchedule& schedule, int total);

enum class FitnessMode { NodeInheritance, ParameterSharing };

class ConfigError : public InvalidConfig {
 public:
  ConfigError(std::string key, const std::string& what);
  const std::string& key() const { return key_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string key_;
  std::string detail_;
};

struct SearchConfig {
  int population = 25;
  int generations = 300;
  int n_c = 5;
  double p_c = 0.95;
  double p_m = 0.05;
  int batch_size = 128;
  int channels = 16;
  LrSchedule lr{{{0, 0.1}, {150, 0.01}, {225, 0.001}}, 300};
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 1e-4;
  double dropout = 0.5;
  bool augment = true;
  int eval_batch = 256;
  FitnessMode mode = FitnessMode::NodeInheritance;
  bool fr_enabled = true;
  std::uint64_t seed = 0;
  // Record wall time in reports; off keeps metrics byte-reproducible.
  bool wall_clock = false;
  // Final training of the best architecture.
  int train_epochs = 500;
  LrSchedule train_lr{{{0, 0.05}, {300, 0.005}, {450, 0.0005}}, 500};
  DataSpec data;

  void check() const;
  std::vector<Op> allowed_ops() const;
  BankLayout layout(int in_channels, int in_h, int in_w) const;
  NetworkOptions network_options() const;
  SgdConfig sgd(double lr) const;
};

// Flat "key = value" text; '#' starts a comment. Unknown keys, malformed
// values and failed checks raise ConfigError naming the key.
SearchConfig parse_config(std::string_view text, SearchConfig base = {});
SearchConfig load_config(const std::string& path, SearchConfig base = {});
// "key=value" override; same errors as parse_config.
void apply_override(SearchConfig& cfg, std::string_view assignment);
// Canonical text holding every key, in a fixed order.
std::string render_config(const SearchConfig& cfg);
std::vector<std::string> config_keys();

struct GenerationReport {
  int generation = 0;
  std::vector<double> fitness;  // parents after this generation's training
  double best_fitness = 0;      // best parent
  double mean_fitness = 0;
  double delta_best = 0;        // best of parents and offspring together
  double lr = 0;
  double seconds = 0;
  std::vector<int> tally;       // mini-batches received per parent slot
};

inline constexpr const char* kMetricsHeader =
    "generation,best_fitness,mean_fitness,delta_best,lr,seconds,sampler_min,sampler_max";
std::string metrics_row(const GenerationReport& r);
std::string metrics_csv(std::span<const GenerationReport> reports);

// One pass over `batches`: each batch trains one uniformly drawn network.
// Returns the per-network tally. Throws DataError on an empty stream.
std::vector<int> sampled_train_generation(std::span<const ExecutableNetwork> nets, std::span<const Batch> batches,
                                          const SgdConfig& sgd, Rng& sampler, Rng& dropout);

// Top-1 validation accuracy of each chromosome. `banks` holds either one
// shared bank or one bank per chromosome.
std::vector<double> evaluate_population(std::span<const Chromosome> pop, const ValidSet& valid, const BlockPlan& plan,
                                        std::span<ParameterBank* const> banks, const NetworkOptions& options,
                                        int eval_batch = 256);

// Parameter-sharing comparator: the offspring is given a private copy of the
// best parent's weights and evaluated on it. Returns (fitness, bank).
std::pair<double, ParameterBank> parameter_sharing_eval(const Chromosome& offspring, const ParameterBank& best_parent,
                                                        const SearchConfig& cfg, const ValidSet& valid,
                                                        const BlockPlan& plan);

struct GenerationEvent {
  const GenerationReport& report;
  std::span<const Individual> pool;        // parents then offspring
  std::span<const Individual> population;  // survivors, the next parents
};

class Search {
 public:
  Search(SearchConfig cfg, const DataBundle& data);

  static Search resume(const std::string& checkpoint_path, const DataBundle& data);
  // Config stored in a search checkpoint, needed to load its data first.
  static SearchConfig checkpoint_config(const std::string& checkpoint_path);

  bool done() const { return generation_ >= cfg_.generations; }
  int generation() const { return generation_; }
  const GenerationReport& step(const std::function<void(const GenerationEvent&)>& on_event = {});

  const SearchConfig& config() const { return cfg_; }
  const std::vector<Individual>& population() const { return population_; }
  const std::vector<GenerationReport>& reports() const { return reports_; }
  const ParameterBank& bank(std::size_t i = 0) const { return banks_.at(i); }
  std::size_t bank_count() const { return banks_.size(); }
  const BlockPlan& plan() const { return plan_; }
  Individual best() const;

  std::vector<unsigned char> checkpoint_bytes() const;
  void save_checkpoint(const std::string& path) const;

 private:
  Search(SearchConfig cfg, const DataBundle& data, bool fresh);
  ParameterBank& bank_for(std::size_t i) { return banks_.size() == 1 ? banks_[0] : banks_[i]; }

  SearchConfig cfg_;
  const DataBundle* data_;
  BlockPlan plan_;
  ValidSet valid_;
  TrainFeed feed_;
  std::vector<ParameterBank> banks_;
  std::vector<Individual> population_;
  std::vector<GenerationReport> reports_;
  int generation_ = 0;
  Rng sampler_, dropout_, variation_;
};

struct SearchResult {
  Individual best;
  std::vector<Individual> population;
  std::vector<GenerationReport> reports;
};

struct SearchHooks {
  std::function<void(const GenerationEvent&)> on_generation;
  // Called after each generation with the search, e.g. to checkpoint.
  std::function<void(const Search&)> after_generation;
};

SearchResult run_search(const SearchConfig& cfg, const DataBundle& data, const SearchHooks& hooks = {});

// Evaluations run_search spends: parents and offspring, every generation.
std::int64_t search_budget(const SearchConfig& cfg);

// Control without genetic operators: rounds of K fresh random chromosomes
// that share the bank and train exactly like parents, each round followed by
// K fresh random chromosomes evaluated without training, until `budget`
// evaluations are spent. Returns the best chromosome seen.
SearchResult random_search_baseline(const SearchConfig& cfg, const DataBundle& data, std::int64_t budget,
                                    const SearchHooks& hooks = {});

struct EpochRow {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double seconds = 0;
};

inline constexpr const char* kEpochHeader = "epoch,lr,mean_loss,seconds";
std::string epoch_row(const EpochRow& r);

struct TrainResult {
  double test_accuracy = 0;
  std::vector<EpochRow> epochs;
  std::size_t parameter_count = 0;
  std::uint64_t bank_checksum = 0;
};

// Fresh He-initialized weights, cfg.train_epochs epochs over `train` with
// cfg.train_lr, then top-1 accuracy on `test`. The head is sized to the
// training data's class count.
TrainResult train_best_from_scratch(const Chromosome& c, const SearchConfig& cfg, const TrainSet& train,
                                    const TestSet& test, const std::function<void(const EpochRow&)>& on_epoch = {});

// Trains the fixed architecture from scratch on another dataset.
TrainResult transfer_eval(const Chromosome& c, const DataBundle& target, const SearchConfig& cfg,
                          const std::function<void(const EpochRow&)>& on_epoch = {});

}  // namespace dagnas
