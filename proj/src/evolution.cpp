#include "dagnas/evolution.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>

#include "dagnas/checkpoint.hpp"

namespace dagnas {

namespace {

// Independent random streams of one run, derived from the run seed.
enum Stream : std::uint64_t {
  kBankInit = 1,
  kPopulation = 2,
  kSampler = 3,
  kOrder = 4,
  kAugment = 5,
  kDropout = 6,
  kVariation = 7,
  kRandomDraw = 8,
  kFinalBank = 11,
  kFinalOrder = 12,
  kFinalAugment = 13,
  kFinalDropout = 14,
};

const char* const kSearchKind = "search";

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<Op> every_op() {
  std::vector<Op> ops;
  for (int g = 1; g <= kNumOps; ++g) ops.push_back(static_cast<Op>(g));
  return ops;
}

void require_valid(const Chromosome& c) {
  const auto violations = validate(c);
  if (violations.empty()) return;
  std::string msg = "invalid chromosome:";
  for (const auto& v : violations) msg += "\n  " + to_string(v);
  throw InvalidConfig(msg);
}

Chromosome parse_valid(const std::string& text) {
  Chromosome c = parse_chromosome(text);
  require_valid(c);
  return c;
}

BlockPlan plan_for(const Dataset& d, int channels) {
  return BlockPlan::standard(d.channels(), d.height(), d.width(), channels);
}

NetworkOptions options_for(const SearchConfig& cfg, int classes) {
  NetworkOptions o = cfg.network_options();
  o.classes = classes;
  return o;
}

void check_classes(const SearchConfig& cfg, const DataBundle& data) {
  if (data.train.data.classes != cfg.data.classes) {
    throw DataError("dataset has " + std::to_string(data.train.data.classes) + " classes, config says " +
                    std::to_string(cfg.data.classes));
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

SearchConfig checked(SearchConfig cfg) {
  cfg.check();
  return cfg;
}

double max_of(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }

}  // namespace

std::string metrics_row(const GenerationReport& r) {
  const auto [lo, hi] = std::minmax_element(r.tally.begin(), r.tally.end());
  std::string row = std::to_string(r.generation) + "," + fmt("%.10g", r.best_fitness) + "," +
                    fmt("%.10g", r.mean_fitness) + "," + fmt("%.10g", r.delta_best) + "," + fmt("%.10g", r.lr) + "," +
                    fmt("%.3f", r.seconds) + ",";
  row += r.tally.empty() ? "0,0" : std::to_string(*lo) + "," + std::to_string(*hi);
  return row;
}

std::string metrics_csv(std::span<const GenerationReport> reports) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : reports) out += metrics_row(r) + "\n";
  return out;
}

std::string epoch_row(const EpochRow& r) {
  return std::to_string(r.epoch) + "," + fmt("%.10g", r.lr) + "," + fmt("%.10g", r.mean_loss) + "," +
         fmt("%.3f", r.seconds);
}

std::vector<int> sampled_train_generation(std::span<const ExecutableNetwork> nets, std::span<const Batch> batches,
                                          const SgdConfig& sgd, Rng& sampler, Rng& dropout) {
  if (nets.empty()) throw std::invalid_argument("sampled_train_generation: no networks to train");
  if (batches.empty()) throw DataError("sampled_train_generation: empty training stream");
  std::vector<int> tally(nets.size(), 0);
  for (const auto& b : batches) {
    const std::size_t i = uniform_index(sampler, nets.size());
    train_step(nets[i], b.images, b.labels, sgd, dropout);
    ++tally[i];
  }
  return tally;
}

std::vector<double> evaluate_population(std::span<const Chromosome> pop, const ValidSet& valid, const BlockPlan& plan,
                                        std::span<ParameterBank* const> banks, const NetworkOptions& options,
                                        int eval_batch) {
  if (valid.data.size() == 0) throw DataError("evaluate_population: empty validation set");
  if (banks.size() != 1 && banks.size() != pop.size()) {
    throw std::invalid_argument("evaluate_population: need one shared bank or one bank per individual");
  }
  std::vector<double> out;
  out.reserve(pop.size());
  for (std::size_t i = 0; i < pop.size(); ++i) {
    ParameterBank& bank = *banks[banks.size() == 1 ? 0 : i];
    const ExecutableNetwork net = instantiate(pop[i], plan, bank, options);
    const EvalView view = inherited_eval_guard(net);
    out.push_back(view.accuracy(valid.data.images, valid.data.labels, eval_batch));
  }
  return out;
}

std::pair<double, ParameterBank> parameter_sharing_eval(const Chromosome& offspring, const ParameterBank& best_parent,
                                                        const SearchConfig& cfg, const ValidSet& valid,
                                                        const BlockPlan& plan) {
  if (cfg.mode != FitnessMode::ParameterSharing) {
    throw InvalidConfig("parameter_sharing_eval: fitness mode is not parameter-sharing");
  }
  ParameterBank bank = best_parent.clone();
  ParameterBank* banks[] = {&bank};
  const Chromosome one[] = {offspring};
  const double f =
      evaluate_population(one, valid, plan, banks, options_for(cfg, valid.data.classes), cfg.eval_batch).front();
  return {f, std::move(bank)};
}

Search::Search(SearchConfig cfg, const DataBundle& data) : Search(std::move(cfg), data, true) {}

Search::Search(SearchConfig cfg, const DataBundle& data, bool fresh)
    : cfg_(checked(std::move(cfg))),
      data_(&data),
      plan_(plan_for(data.train.data, cfg_.channels)),
      valid_(normalized(data.valid, Normalizer::fit(data.train))),
      feed_(data.train, Normalizer::fit(data.train), cfg_.batch_size, cfg_.augment, derive_rng(cfg_.seed, kOrder),
            derive_rng(cfg_.seed, kAugment)),
      sampler_(derive_rng(cfg_.seed, kSampler)),
      dropout_(derive_rng(cfg_.seed, kDropout)),
      variation_(derive_rng(cfg_.seed, kVariation)) {
  check_classes(cfg_, data);
  if (!fresh) return;
  Rng init = derive_rng(cfg_.seed, kBankInit);
  ParameterBank bank(init());
  const Dataset& d = data.train.data;
  initialize_search_space(bank, cfg_.layout(d.channels(), d.height(), d.width()));
  Rng draw = derive_rng(cfg_.seed, kPopulation);
  const auto ops = cfg_.allowed_ops();
  for (int i = 0; i < cfg_.population; ++i) population_.push_back({random_chromosome(draw, cfg_.n_c, ops), {}});
  if (cfg_.mode == FitnessMode::ParameterSharing) {
    for (int i = 0; i < cfg_.population; ++i) banks_.push_back(bank.clone());
  } else {
    banks_.push_back(std::move(bank));
  }
}

const GenerationReport& Search::step(const std::function<void(const GenerationEvent&)>& on_event) {
  if (done()) throw std::logic_error("Search::step: all generations have run");
  const auto t0 = std::chrono::steady_clock::now();
  const int k = cfg_.population;
  const double lr = lr_at(generation_, cfg_.lr, cfg_.generations);
  const NetworkOptions opts = options_for(cfg_, data_->train.data.classes);
  const bool sharing = cfg_.mode == FitnessMode::ParameterSharing;

  std::vector<int> tally;
  {
    std::vector<ExecutableNetwork> nets;
    nets.reserve(population_.size());
    for (std::size_t i = 0; i < population_.size(); ++i) {
      nets.push_back(instantiate(population_[i].chromosome, plan_, bank_for(i), opts));
    }
    const auto batches = feed_.next_epoch();
    tally = sampled_train_generation(nets, batches, cfg_.sgd(lr), sampler_, dropout_);
  }

  std::vector<Chromosome> parents;
  std::vector<ParameterBank*> bank_ptrs;
  for (auto& ind : population_) parents.push_back(ind.chromosome);
  for (auto& b : banks_) bank_ptrs.push_back(&b);
  const auto parent_fitness = evaluate_population(parents, valid_, plan_, bank_ptrs, opts, cfg_.eval_batch);
  for (std::size_t i = 0; i < population_.size(); ++i) population_[i].fitness = parent_fitness[i];

  const auto kids = generate_offspring(population_, VariationConfig{cfg_.p_c, cfg_.p_m}, variation_);
  std::vector<Individual> pool = population_;
  std::vector<ParameterBank> pool_banks;
  if (sharing) {
    const std::size_t best = best_index(population_);
    std::vector<ParameterBank> kid_banks;
    for (const auto& kid : kids) {
      auto [f, bank] = parameter_sharing_eval(kid, banks_[best], cfg_, valid_, plan_);
      pool.push_back({kid, f});
      kid_banks.push_back(std::move(bank));
    }
    pool_banks = std::move(banks_);
    for (auto& b : kid_banks) pool_banks.push_back(std::move(b));
  } else {
    ParameterBank* shared[] = {&banks_[0]};
    const auto kid_fitness = evaluate_population(kids, valid_, plan_, shared, opts, cfg_.eval_batch);
    for (std::size_t i = 0; i < kids.size(); ++i) pool.push_back({kids[i], kid_fitness[i]});
  }

  const auto survivors = environmental_selection(pool, k, variation_);
  std::vector<Individual> next;
  for (std::size_t s : survivors) next.push_back(pool[s]);
  if (sharing) {
    banks_.clear();
    for (std::size_t s : survivors) banks_.push_back(std::move(pool_banks[s]));
  }
  population_ = std::move(next);

  GenerationReport r;
  r.generation = generation_;
  r.fitness = parent_fitness;
  r.best_fitness = max_of(parent_fitness);
  r.mean_fitness = mean_of(parent_fitness);
  double pool_best = 0;
  for (const auto& ind : pool) pool_best = std::max(pool_best, *ind.fitness);
  r.delta_best = pool_best;
  r.lr = lr;
  r.tally = std::move(tally);
  r.seconds = cfg_.wall_clock ? seconds_since(t0) : 0.0;
  reports_.push_back(std::move(r));
  ++generation_;
  if (on_event) on_event(GenerationEvent{reports_.back(), pool, population_});
  return reports_.back();
}

Individual Search::best() const {
  for (const auto& ind : population_) {
    if (!ind.fitness) return population_.front();
  }
  return population_[best_index(population_)];
}

std::vector<unsigned char> Search::checkpoint_bytes() const {
  BinaryWriter w;
  w.str(render_config(cfg_));
  w.u64(data_->train.data.fingerprint());
  w.u64(data_->valid.data.fingerprint());
  w.i32(generation_);
  w.u32(static_cast<std::uint32_t>(population_.size()));
  for (const auto& ind : population_) {
    w.str(render(ind.chromosome));
    w.u8(ind.fitness.has_value());
    w.f64(ind.fitness.value_or(0.0));
  }
  w.u32(static_cast<std::uint32_t>(reports_.size()));
  for (const auto& r : reports_) {
    w.i32(r.generation);
    w.f64(r.best_fitness);
    w.f64(r.mean_fitness);
    w.f64(r.delta_best);
    w.f64(r.lr);
    w.f64(r.seconds);
    w.u32(static_cast<std::uint32_t>(r.fitness.size()));
    for (double f : r.fitness) w.f64(f);
    w.u32(static_cast<std::uint32_t>(r.tally.size()));
    for (int t : r.tally) w.i32(t);
  }
  write_rng(w, sampler_);
  write_rng(w, dropout_);
  write_rng(w, variation_);
  write_rng(w, feed_.order_rng());
  write_rng(w, feed_.augment_rng());
  w.u32(static_cast<std::uint32_t>(banks_.size()));
  for (const auto& b : banks_) write_bank(w, b);
  return wrap_checkpoint(kSearchKind, w.bytes());
}

void Search::save_checkpoint(const std::string& path) const { write_file_atomic(path, checkpoint_bytes()); }

SearchConfig Search::checkpoint_config(const std::string& checkpoint_path) {
  BinaryReader r = open_checkpoint(checkpoint_path, kSearchKind);
  return parse_config(r.str());
}

Search Search::resume(const std::string& checkpoint_path, const DataBundle& data) {
  BinaryReader r = open_checkpoint(checkpoint_path, kSearchKind);
  Search s(parse_config(r.str()), data, false);
  const std::uint64_t train_fp = r.u64(), valid_fp = r.u64();
  if (train_fp != data.train.data.fingerprint() || valid_fp != data.valid.data.fingerprint()) {
    throw DataError(checkpoint_path + ": dataset differs from the one the checkpoint was written with");
  }
  s.generation_ = r.i32();
  if (s.generation_ < 0 || s.generation_ > s.cfg_.generations) r.fail("generation counter out of range");
  const std::uint32_t k = r.u32();
  if (k != static_cast<std::uint32_t>(s.cfg_.population)) r.fail("population size differs from the config");
  for (std::uint32_t i = 0; i < k; ++i) {
    Individual ind;
    try {
      ind.chromosome = parse_valid(r.str());
    } catch (const std::exception& e) {
      r.fail(std::string("bad chromosome: ") + e.what());
    }
    const bool has = r.u8() != 0;
    const double f = r.f64();
    if (has) ind.fitness = f;
    s.population_.push_back(std::move(ind));
  }
  const std::uint32_t nr = r.u32();
  if (nr != static_cast<std::uint32_t>(s.generation_)) r.fail("report count differs from the generation counter");
  for (std::uint32_t i = 0; i < nr; ++i) {
    GenerationReport rep;
    rep.generation = r.i32();
    rep.best_fitness = r.f64();
    rep.mean_fitness = r.f64();
    rep.delta_best = r.f64();
    rep.lr = r.f64();
    rep.seconds = r.f64();
    const std::uint32_t nf = r.u32();
    if (nf > k) r.fail("fitness vector longer than the population");
    for (std::uint32_t j = 0; j < nf; ++j) rep.fitness.push_back(r.f64());
    const std::uint32_t nt = r.u32();
    if (nt > k) r.fail("tally longer than the population");
    for (std::uint32_t j = 0; j < nt; ++j) rep.tally.push_back(r.i32());
    s.reports_.push_back(std::move(rep));
  }
  s.sampler_ = read_rng(r);
  s.dropout_ = read_rng(r);
  s.variation_ = read_rng(r);
  s.feed_.order_rng() = read_rng(r);
  s.feed_.augment_rng() = read_rng(r);
  const std::uint32_t nb = r.u32();
  const std::uint32_t want = s.cfg_.mode == FitnessMode::ParameterSharing ? k : 1;
  if (nb != want) r.fail("expected " + std::to_string(want) + " parameter banks, found " + std::to_string(nb));
  for (std::uint32_t i = 0; i < nb; ++i) s.banks_.push_back(read_bank(r));
  r.expect_end();
  return s;
}

SearchResult run_search(const SearchConfig& cfg, const DataBundle& data, const SearchHooks& hooks) {
  Search s(cfg, data);
  while (!s.done()) {
    s.step(hooks.on_generation);
    if (hooks.after_generation) hooks.after_generation(s);
  }
  return {s.best(), s.population(), s.reports()};
}

std::int64_t search_budget(const SearchConfig& cfg) {
  return 2 * static_cast<std::int64_t>(cfg.population) * cfg.generations;
}

SearchResult random_search_baseline(const SearchConfig& cfg, const DataBundle& data, std::int64_t budget,
                                    const SearchHooks& hooks) {
  cfg.check();
  check_classes(cfg, data);
  if (budget < 1) throw InvalidConfig("random_search_baseline: budget must be at least 1");
  const Dataset& d = data.train.data;
  const BlockPlan plan = plan_for(d, cfg.channels);
  const NetworkOptions opts = options_for(cfg, d.classes);
  const Normalizer norm = Normalizer::fit(data.train);
  const ValidSet valid = normalized(data.valid, norm);
  TrainFeed feed(data.train, norm, cfg.batch_size, cfg.augment, derive_rng(cfg.seed, kOrder),
                 derive_rng(cfg.seed, kAugment));
  Rng init = derive_rng(cfg.seed, kBankInit);
  ParameterBank bank(init());
  initialize_search_space(bank, cfg.layout(d.channels(), d.height(), d.width()));
  ParameterBank* shared[] = {&bank};
  Rng sampler = derive_rng(cfg.seed, kSampler), dropout = derive_rng(cfg.seed, kDropout);
  Rng draw = derive_rng(cfg.seed, kRandomDraw);
  const auto ops = cfg.allowed_ops();
  const std::int64_t k = cfg.population;
  const int rounds = static_cast<int>((budget + 2 * k - 1) / (2 * k));

  SearchResult result;
  std::int64_t used = 0;
  for (int round = 0; used < budget; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(round, cfg.lr, rounds);
    std::vector<Chromosome> trained;
    for (std::int64_t i = 0; i < std::min(k, budget - used); ++i) trained.push_back(random_chromosome(draw, cfg.n_c, ops));
    std::vector<int> tally;
    {
      std::vector<ExecutableNetwork> nets;
      for (const auto& c : trained) nets.push_back(instantiate(c, plan, bank, opts));
      const auto batches = feed.next_epoch();
      tally = sampled_train_generation(nets, batches, cfg.sgd(lr), sampler, dropout);
    }
    const auto trained_fitness = evaluate_population(trained, valid, plan, shared, opts, cfg.eval_batch);
    used += static_cast<std::int64_t>(trained.size());
    std::vector<Chromosome> fresh;
    for (std::int64_t i = 0; i < std::min(k, budget - used); ++i) fresh.push_back(random_chromosome(draw, cfg.n_c, ops));
    const auto fresh_fitness = evaluate_population(fresh, valid, plan, shared, opts, cfg.eval_batch);
    used += static_cast<std::int64_t>(fresh.size());

    std::vector<Individual> pool;
    for (std::size_t i = 0; i < trained.size(); ++i) pool.push_back({trained[i], trained_fitness[i]});
    for (std::size_t i = 0; i < fresh.size(); ++i) pool.push_back({fresh[i], fresh_fitness[i]});
    for (const auto& ind : pool) {
      if (!result.best.fitness || *ind.fitness > *result.best.fitness) result.best = ind;
    }
    result.population.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(trained.size()));

    GenerationReport r;
    r.generation = round;
    r.fitness = trained_fitness;
    r.best_fitness = max_of(trained_fitness);
    r.mean_fitness = mean_of(trained_fitness);
    r.delta_best = *result.best.fitness;
    r.lr = lr;
    r.tally = std::move(tally);
    r.seconds = cfg.wall_clock ? seconds_since(t0) : 0.0;
    result.reports.push_back(std::move(r));
    if (hooks.on_generation) hooks.on_generation(GenerationEvent{result.reports.back(), pool, result.population});
  }
  return result;
}

TrainResult train_best_from_scratch(const Chromosome& c, const SearchConfig& cfg, const TrainSet& train,
                                    const TestSet& test, const std::function<void(const EpochRow&)>& on_epoch) {
  cfg.check();
  require_valid(c);
  const Dataset& d = train.data;
  if (d.size() == 0) throw DataError("train_best_from_scratch: empty training set");
  if (test.data.classes != d.classes) throw DataError("training and test data differ in class count");
  const BlockPlan plan = plan_for(d, cfg.channels);
  const NetworkOptions opts = options_for(cfg, d.classes);
  BankLayout layout;
  layout.plan = plan;
  layout.n_c = c.n_c;
  layout.classes = d.classes;
  layout.ops = every_op();
  Rng init = derive_rng(cfg.seed, kFinalBank);
  ParameterBank bank(init());
  initialize_search_space(bank, layout);
  const ExecutableNetwork net = instantiate(c, plan, bank, opts);

  const Normalizer norm = Normalizer::fit(train);
  TrainFeed feed(train, norm, cfg.batch_size, cfg.augment, derive_rng(cfg.seed, kFinalOrder),
                 derive_rng(cfg.seed, kFinalAugment));
  Rng dropout = derive_rng(cfg.seed, kFinalDropout);
  TrainResult result;
  for (int e = 0; e < cfg.train_epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRow row;
    row.epoch = e;
    row.lr = lr_at(e, cfg.train_lr, cfg.train_epochs);
    const SgdConfig sgd = cfg.sgd(row.lr);
    double loss = 0;
    std::size_t seen = 0;
    for (const auto& b : feed.next_epoch()) {
      loss += static_cast<double>(train_step(net, b.images, b.labels, sgd, dropout)) * b.labels.size();
      seen += b.labels.size();
    }
    row.mean_loss = loss / static_cast<double>(seen);
    row.seconds = cfg.wall_clock ? seconds_since(t0) : 0.0;
    result.epochs.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  const TestSet prepared = normalized(test, norm);
  {
    const EvalView view = inherited_eval_guard(net);
    result.test_accuracy = view.accuracy(prepared.data.images, prepared.data.labels, cfg.eval_batch);
  }
  result.parameter_count = net.parameter_count();
  result.bank_checksum = bank.checksum();
  return result;
}

TrainResult transfer_eval(const Chromosome& c, const DataBundle& target, const SearchConfig& cfg,
                          const std::function<void(const EpochRow&)>& on_epoch) {
  SearchConfig tc = cfg;
  tc.data.classes = target.full_train.data.classes;
  return train_best_from_scratch(c, tc, target.full_train, target.test, on_epoch);
}

}  // namespace dagnas
