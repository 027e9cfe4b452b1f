// Acceptance driver: one PASS/FAIL line per criterion.

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <boost/math/distributions/chi_squared.hpp>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "dagnas/cli.hpp"
#include "dagnas/evolution.hpp"
#include "dagnas/ops.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace {

using namespace dagnas;
using dagnas::testing::grad_check;
using dagnas::testing::random_tensor;
using dagnas::testing::TensorD;
using dagnas::testing::VarD;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
  nlohmann::ordered_json data = nlohmann::ordered_json::object();

  void require(bool cond, const std::string& what) {
    if (!cond) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

// Runs every task on up to `jobs` threads and rethrows the first failure.
void run_parallel(std::vector<std::function<void()>> tasks, int jobs) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < tasks.size();) {
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard lock(m);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  std::vector<std::thread> threads;
  for (int i = 1; i < n; ++i) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct Context {
  int jobs = 1;
  int seeds = 5;
  SearchConfig desk;
  fs::path work;
  std::optional<DataBundle> desk_data;
  std::mutex log_mutex;

  const DataBundle& data() {
    if (!desk_data) desk_data = load_bundle(desk.data);
    return *desk_data;
  }
  void log(const std::string& line) {
    std::lock_guard lock(log_mutex);
    std::cerr << "  [" << line << "]\n";
  }

  // Final best fitness per (mode, fr, seed); the node-inheritance FR-on runs
  // are shared between the efficacy and both ablation criteria.
  std::map<std::tuple<int, bool, int>, SearchResult> searches;
  std::mutex search_mutex;

  SearchConfig config(FitnessMode mode, bool fr, int seed) const {
    SearchConfig cfg = desk;
    cfg.mode = mode;
    cfg.fr_enabled = fr;
    cfg.seed = static_cast<std::uint64_t>(seed);
    return cfg;
  }
  std::function<void()> search_task(FitnessMode mode, bool fr, int seed) {
    return [=, this] {
      const auto key = std::make_tuple(static_cast<int>(mode), fr, seed);
      {
        std::lock_guard lock(search_mutex);
        if (searches.count(key)) return;
      }
      const auto t0 = Clock::now();
      SearchResult r = run_search(config(mode, fr, seed), data());
      log("search mode=" + std::string(mode == FitnessMode::NodeInheritance ? "NI" : "PS") + " fr=" +
          (fr ? "on" : "off") + " seed=" + std::to_string(seed) + " best " + fmt(*r.best.fitness) + " in " +
          fmt(seconds_since(t0), 1) + " s");
      std::lock_guard lock(search_mutex);
      searches.emplace(key, std::move(r));
    };
  }
  const SearchResult& search(FitnessMode mode, bool fr, int seed) {
    std::lock_guard lock(search_mutex);
    return searches.at(std::make_tuple(static_cast<int>(mode), fr, seed));
  }
};

// 1 ------------------------------------------------------------------------

Outcome genotype_closure(Context&) {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng = derive_rng(101, 0);
  constexpr int kCount = 10000, kNc = 5;
  int invalid = 0, round_trip = 0, bad_cross = 0, bad_mut = 0;
  for (int i = 0; i < kCount; ++i) {
    const Chromosome c = random_chromosome(rng, kNc);
    invalid += !validate(c).empty();
    round_trip += parse_chromosome(render(c)) != c;
  }
  for (int i = 0; i < kCount; ++i) {
    const Chromosome a = random_chromosome(rng, kNc), b = random_chromosome(rng, kNc);
    const int cut = uniform_int(rng, 1, a.gene_count() - 1);
    auto [q1, q2] = one_point_crossover(a, b, cut);
    bad_cross += !validate(q1).empty() + !validate(q2).empty();
    bad_mut += !validate(exchange_mutation(a, rng)).empty();
  }
  const double secs = seconds_since(t0);
  o.require(invalid == 0, std::to_string(invalid) + " random chromosomes invalid");
  o.require(round_trip == 0, std::to_string(round_trip) + " render/parse mismatches");
  o.require(bad_cross == 0, std::to_string(bad_cross) + " invalid crossover offspring");
  o.require(bad_mut == 0, std::to_string(bad_mut) + " invalid mutants");
  o.require(secs < 60, "took " + fmt(secs, 1) + " s");
  if (o.pass) o.detail = "10000 random, 20000 crossover offspring, 10000 mutants valid; round trip exact";
  return o;
}

// 2 ------------------------------------------------------------------------

Outcome crossover_fixture(Context&) {
  using namespace dagnas::testing;
  Outcome o;
  auto [q1, q2] = one_point_crossover(node_inheritance_p1(), node_inheritance_p2(), 2);
  o.require(q1 == node_inheritance_q1(), "first offspring differs");
  o.require(q2 == node_inheritance_q2(), "second offspring differs");
  o.require(exchange_genes(q2, 2, 4) == node_inheritance_q2_mutated(), "exchanged offspring differs");
  auto [r1, r2] = one_point_crossover(node_inheritance_p1(), node_inheritance_p2(), kNormalNodeOffset + 2);
  o.require(r1 == normal_cut_q1() && r2 == normal_cut_q2(), "normal-block crossover differs");
  o.require(exchange_genes(r2, kNormalNodeOffset + 2, kNormalNodeOffset + 4) == normal_cut_q2_mutated(),
            "normal-block exchange differs");
  if (o.pass) o.detail = "crossover at cut 2 and exchange of genes 3,5 reproduce the offspring gene for gene";
  return o;
}

// 3 ------------------------------------------------------------------------

Outcome gradient_suite(Context&) {
  Outcome o;
  const auto t0 = Clock::now();
  constexpr int kInstances = 20;
  constexpr double kTol = 1e-4, kLinearTol = 1e-6;
  TensorD* const no_stats = nullptr;
  const ops::BatchNormOptions bn{true, 0.9, 1e-5};
  std::vector<std::string> summary;

  auto suite = [&](const std::string& name, double tol, const std::function<double(int, Rng&)>& instance) {
    Rng rng = derive_rng(303, summary.size());
    double worst = 0;
    for (int t = 0; t < kInstances; ++t) worst = std::max(worst, instance(t, rng));
    o.require(worst < tol, name + " relative error " + std::to_string(worst));
    o.data[name] = worst;
    std::ostringstream os;
    os << name << ' ' << std::scientific << std::setprecision(1) << worst;
    summary.push_back(os.str());
  };

  suite("conv2d", kLinearTol, [](int t, Rng& rng) {
    const int k = t % 2 ? 3 : 1, stride = 1 + t % 4 / 2;
    return grad_check([&](const std::vector<VarD>& v) { return ops::conv2d(v[0], v[1], v[2], stride); },
                      {random_tensor({2, 3, 5, 6}, rng), random_tensor({4, 3, k, k}, rng), random_tensor({4}, rng)},
                      rng)
        .max_rel_error;
  });
  for (int k : {3, 5}) {
    suite("DW" + std::to_string(k), kTol, [&, k](int t, Rng& rng) {
      const int stride = 1 + t % 2;
      return grad_check(
                 [&](const std::vector<VarD>& v) {
                   return ops::relu(ops::batch_norm(
                       ops::depthwise_separable_conv(v[0], v[1], v[2], v[3], v[4], stride), v[5], v[6], no_stats,
                       no_stats, bn));
                 },
                 {random_tensor({3, 3, 6, 6}, rng), random_tensor({3, 1, k, k}, rng), random_tensor({3}, rng),
                  random_tensor({3, 3, 1, 1}, rng), random_tensor({3}, rng), random_tensor({3}, rng),
                  random_tensor({3}, rng)},
                 rng)
          .max_rel_error;
    });
  }
  for (int k : {3, 5}) {
    suite("FR" + std::to_string(k), kTol, [&, k](int t, Rng& rng) {
      const int c = 4 + t % 3 * 2, stride = 1 + t % 2, theta = ops::eca_kernel_size(c);
      return grad_check(
                 [&](const std::vector<VarD>& v) {
                   ops::FrWeights<double> w{v[1], v[2], v[3], nullptr, nullptr, v[4], v[5]};
                   return ops::fr_conv(v[0], w, stride, bn).output;
                 },
                 {random_tensor({2, c, 5, 5}, rng), random_tensor({c, c, k, k}, rng, 0.3), random_tensor({c}, rng),
                  random_tensor({c}, rng), random_tensor({theta}, rng), random_tensor({1}, rng)},
                 rng)
          .max_rel_error;
    });
  }
  suite("BN", kTol, [&](int, Rng& rng) {
    return grad_check(
               [&](const std::vector<VarD>& v) { return ops::batch_norm(v[0], v[1], v[2], no_stats, no_stats, bn); },
               {random_tensor({3, 4, 3, 2}, rng), random_tensor({4}, rng), random_tensor({4}, rng)}, rng)
        .max_rel_error;
  });
  for (auto kind : {ops::PoolKind::Avg, ops::PoolKind::Max}) {
    const bool avg = kind == ops::PoolKind::Avg;
    suite(avg ? "avg_pool" : "max_pool", avg ? kLinearTol : kTol, [kind](int t, Rng& rng) {
      const int size = t % 2 ? 5 : 3, stride = 1 + t % 4 / 2;
      return grad_check([&](const std::vector<VarD>& v) { return ops::pool(v[0], kind, size, stride); },
                        {random_tensor({2, 3, 5, 6}, rng)}, rng)
          .max_rel_error;
    });
  }
  suite("softmax_ce", kTol, [](int t, Rng& rng) {
    const int n = 2 + t % 4, k = 3 + t % 3;
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
    return grad_check([&](const std::vector<VarD>& v) { return ops::softmax_cross_entropy(v[0], labels); },
                      {random_tensor({n, k}, rng, 3.0)}, rng)
        .max_rel_error;
  });

  const double secs = seconds_since(t0);
  o.require(secs < 300, "took " + fmt(secs, 1) + " s");
  if (o.pass) {
    o.detail = std::to_string(kInstances) + " instances each;";
    for (const auto& s : summary) o.detail += " " + s;
  }
  return o;
}

// 4 ------------------------------------------------------------------------

Outcome normalization(Context&) {
  Outcome o;
  Rng rng = derive_rng(404, 0);
  double worst_sum = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + t % 7, k = 2 + t % 11;
    const TensorD p = ops::softmax(random_tensor({n, k}, rng, 1.0 + t % 50));
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < k; ++j) s += p[static_cast<std::size_t>(i * k + j)];
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  o.require(worst_sum <= 1e-9, "softmax row sum off by " + std::to_string(worst_sum));

  double a_min = 1, a_max = 0;
  for (int t = 0; t < 200; ++t) {
    const int c = 4 + 4 * (t % 4), k = t % 2 ? 5 : 3, theta = ops::eca_kernel_size(c);
    ops::FrWeights<double> w{VarD::constant(random_tensor({c, c, k, k}, rng)),
                             VarD::constant(random_tensor({c}, rng)),
                             VarD::constant(random_tensor({c}, rng)),
                             nullptr,
                             nullptr,
                             VarD::constant(random_tensor({theta}, rng, 3.0)),
                             VarD::constant(random_tensor({1}, rng))};
    const auto out =
        ops::fr_conv(VarD::constant(random_tensor({3, c, 6, 6}, rng)), w, 1 + t % 2, {true, 0.9, 1e-7});
    for (double a : out.attention.value().values()) {
      a_min = std::min(a_min, a);
      a_max = std::max(a_max, a);
    }
  }
  o.require(a_min > 0 && a_max < 1, "attention range [" + std::to_string(a_min) + ", " + std::to_string(a_max) + "]");

  double worst_mean = 0, worst_var = 0;
  for (int t = 0; t < 100; ++t) {
    // Batch variance well above eps, which otherwise biases the variance by eps / var.
    const int n = 2 + t % 5, c = 1 + t % 6, h = 2 + t % 4, w = 4 + t % 3;
    TensorD gamma({c}, 1.0), beta({c});
    const TensorD x = random_tensor({n, c, h, w}, rng, 1.0 + t % 10);
    TensorD* const none = nullptr;
    const TensorD y = ops::batch_norm(VarD::constant(x), VarD::constant(gamma), VarD::constant(beta), none, none,
                                      {true, 0.9, 1e-7})
                          .value();
    const int m = n * h * w;
    for (int ch = 0; ch < c; ++ch) {
      double s = 0, sq = 0;
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) s += y.at(i, ch, r, q);
      const double mu = s / m;
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) sq += std::pow(y.at(i, ch, r, q) - mu, 2);
      worst_mean = std::max(worst_mean, std::abs(mu));
      worst_var = std::max(worst_var, std::abs(sq / m - 1.0));
    }
  }
  o.require(worst_mean <= 1e-6 && worst_var <= 1e-6,
            "BN mean error " + std::to_string(worst_mean) + ", variance error " + std::to_string(worst_var));
  o.data = {{"softmax_sum_error", worst_sum},
            {"attention_min", a_min},
            {"attention_max", a_max},
            {"bn_mean_error", worst_mean},
            {"bn_var_error", worst_var}};
  if (o.pass) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(1) << "softmax sum error " << worst_sum << "; attention min " << a_min
       << ", 1 - max " << 1 - a_max << "; BN mean/var error " << worst_mean << "/" << worst_var;
    o.detail = os.str();
  }
  return o;
}

// 5 ------------------------------------------------------------------------

Outcome node_inheritance(Context& ctx) {
  Outcome o;
  const SearchConfig& cfg = ctx.desk;
  const DataBundle& data = ctx.data();
  const BlockPlan plan = BlockPlan::standard(1, cfg.data.height, cfg.data.width, cfg.channels);
  ParameterBank bank(cfg.seed);
  initialize_search_space(bank, cfg.layout(1, cfg.data.height, cfg.data.width));
  const Normalizer norm = Normalizer::fit(data.train);
  const ValidSet valid = normalized(data.valid, norm);
  const NetworkOptions options = cfg.network_options();
  Rng rng = derive_rng(505, 0);

  // Train the two parents briefly so the evaluated weights are not at init.
  const Chromosome p1 = random_chromosome(rng, cfg.n_c), p2 = random_chromosome(rng, cfg.n_c);
  {
    std::vector<ExecutableNetwork> nets;
    nets.push_back(instantiate(p1, plan, bank, options));
    nets.push_back(instantiate(p2, plan, bank, options));
    TrainFeed feed(data.train, norm, cfg.batch_size, cfg.augment, derive_rng(505, 1), derive_rng(505, 2));
    Rng sampler = derive_rng(505, 3), dropout = derive_rng(505, 4);
    sampled_train_generation(nets, feed.next_epoch(), cfg.sgd(0.1), sampler, dropout);
  }
  std::set<std::string> keys;
  for (const auto& [k, p] : bank.entries()) keys.insert(k);

  std::vector<Chromosome> offspring;
  Rng pair_rng = derive_rng(505, 5);
  for (int i = 0; i < 200; ++i) {
    const bool fresh = i % 2;
    const Chromosome a = fresh ? random_chromosome(pair_rng, cfg.n_c) : p1;
    const Chromosome b = fresh ? random_chromosome(pair_rng, cfg.n_c) : p2;
    auto [q1, q2] = one_point_crossover(a, b, uniform_int(pair_rng, 1, a.gene_count() - 1));
    offspring.push_back(q1);
    offspring.push_back(exchange_mutation(q2, pair_rng));
  }
  int missing = 0;
  for (const auto& c : offspring) {
    const ExecutableNetwork net = instantiate(c, plan, bank, options);
    for (const auto& k : net.bound_keys()) missing += !keys.count(k);
  }
  o.require(missing == 0, std::to_string(missing) + " bound keys absent from the bank");
  o.require(bank.size() == keys.size(), "instantiation created new bank entries");

  const std::vector<Chromosome> evaluated(offspring.begin(), offspring.begin() + 16);
  ParameterBank* banks[] = {&bank};
  const std::uint64_t before = bank.checksum();
  const auto first = evaluate_population(evaluated, valid, plan, banks, options, cfg.eval_batch);
  const std::uint64_t after = bank.checksum();
  const auto second = evaluate_population(evaluated, valid, plan, banks, options, cfg.eval_batch);
  o.require(before == after && bank.checksum() == before, "evaluation changed the bank checksum");
  bool identical = true;
  for (std::size_t i = 0; i < first.size(); ++i) identical &= std::memcmp(&first[i], &second[i], sizeof(double)) == 0;
  o.require(identical, "repeated evaluation differs");
  if (o.pass) {
    o.detail = "400 offspring bind only existing keys; 16 evaluations keep checksum " + std::to_string(before) +
               " and repeat bit-identically";
  }
  return o;
}

// 6 ------------------------------------------------------------------------

Outcome elitism(Context& ctx) {
  Outcome o;
  SearchConfig cfg = ctx.desk;
  cfg.generations = 20;
  int checked = 0, lost = 0;
  SearchHooks hooks;
  hooks.on_generation = [&](const GenerationEvent& e) {
    ++checked;
    const Individual& elite = e.pool[best_index(e.pool)];
    bool kept = false;
    for (const auto& p : e.population) kept |= p.chromosome == elite.chromosome && p.fitness == elite.fitness;
    if (!kept) {
      ++lost;
      o.require(false, "elite lost at generation " + std::to_string(e.report.generation));
    }
  };
  run_search(cfg, ctx.data(), hooks);
  o.require(checked == 20, "saw " + std::to_string(checked) + " generations");
  if (o.pass) o.detail = "argmax genotype of R_t present in P_{t+1} for all 20 generations (K=8)";
  return o;
}

// 7 ------------------------------------------------------------------------

Outcome sampler_uniformity(Context&) {
  Outcome o;
  SearchConfig cfg;
  cfg.population = 25;
  cfg.generations = 10;
  cfg.n_c = 3;
  cfg.channels = 4;
  cfg.batch_size = 2;
  cfg.eval_batch = 256;
  cfg.seed = 707;
  cfg.data.height = 8;
  cfg.data.width = 8;
  cfg.data.synthetic_n = 1020;
  cfg.data.synthetic_test_n = 10;
  const DataBundle data = load_bundle(cfg.data);
  const SearchResult r = run_search(cfg, data);
  std::vector<long> total(25, 0);
  int min_batches = 1 << 30;
  for (const auto& rep : r.reports) {
    const int sum = std::accumulate(rep.tally.begin(), rep.tally.end(), 0);
    min_batches = std::min(min_batches, sum);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += rep.tally.at(i);
  }
  const double n = std::accumulate(total.begin(), total.end(), 0.0), expected = n / 25;
  double chi2 = 0;
  for (long t : total) chi2 += (t - expected) * (t - expected) / expected;
  const double critical = boost::math::quantile(boost::math::chi_squared(24), 0.99);
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(24), chi2));
  o.require(r.reports.size() == 10, "ran " + std::to_string(r.reports.size()) + " generations");
  o.require(min_batches >= 400, "only " + std::to_string(min_batches) + " batches in a generation");
  o.require(chi2 < critical, "chi-square " + fmt(chi2, 2) + " >= " + fmt(critical, 2));
  o.data = {{"batches_per_generation", min_batches}, {"chi2", chi2}, {"critical", critical}, {"p_value", p}};
  if (o.pass) {
    o.detail = std::to_string(min_batches) + " batches/gen x 10 gens, chi2(24) = " + fmt(chi2, 2) + " < " +
               fmt(critical, 2) + " (p = " + fmt(p, 3) + ")";
  }
  return o;
}

// 8 ------------------------------------------------------------------------

int brute_force_leaves(const BlockGenotype& g) {
  const int first = source_count(g.role) + 1, n_c = g.computation_nodes();
  int leaves = 0;
  for (int d = first; d < first + n_c; ++d) {
    bool consumed = false;
    for (int pos = 0; pos < static_cast<int>(g.nodes.size()); ++pos) {
      if (g.owner(pos) > d && g.nodes[static_cast<std::size_t>(pos)] == d) consumed = true;
    }
    leaves += !consumed;
  }
  return leaves;
}

Outcome shape_laws(Context&) {
  Outcome o;
  Rng rng = derive_rng(808, 0);
  constexpr int kC = 8;
  const BlockPlan plan = BlockPlan::standard(1, 16, 16, kC);
  int halving = 0, depth = 0, final_size = 0;
  for (int i = 0; i < 1000; ++i) {
    const Chromosome c = random_chromosome(rng, 1 + i % 6);
    const PhenotypeGraph g = decode_topology(c, plan);
    for (const auto& b : g.blocks) {
      const bool reduce = b.role == BlockRole::Reduction;
      halving += b.out_h != (reduce ? b.in_h / 2 : b.in_h) || b.out_w != (reduce ? b.in_w / 2 : b.in_w);
      depth += b.out_depth() != brute_force_leaves(genotype_for(c, b.role)) * kC;
    }
    final_size += g.final_block().out_h != 4 || g.final_block().out_w != 4;
  }
  // Executed check: the network runs end to end on 16x16 input.
  SearchConfig cfg;
  cfg.n_c = 3;
  cfg.channels = kC;
  ParameterBank bank(1);
  initialize_search_space(bank, cfg.layout(1, 16, 16));
  const NetworkOptions options = cfg.network_options();
  Rng exec_rng = derive_rng(808, 1);
  int exec_failures = 0;
  for (int i = 0; i < 20; ++i) {
    const ExecutableNetwork net = instantiate(random_chromosome(exec_rng, cfg.n_c), plan, bank, options);
    ag::NoGradGuard guard;
    Tensor<float> x({2, 1, 16, 16}, 0.5f);
    exec_failures += net.forward(x, Mode::Eval).shape() != Shape{2, cfg.data.classes};
  }
  o.require(halving == 0, std::to_string(halving) + " blocks with wrong spatial size");
  o.require(final_size == 0, std::to_string(final_size) + " networks not ending at 4x4");
  o.require(depth == 0, std::to_string(depth) + " blocks whose depth is not leaves x C");
  o.require(exec_failures == 0, std::to_string(exec_failures) + " executed networks with wrong logits shape");
  if (o.pass) o.detail = "1000 genotypes: 16x16 -> 8x8 -> 4x4, depth = leaves x C in all 5000 blocks";
  return o;
}

// 9 ------------------------------------------------------------------------

struct Efficacy {
  std::vector<double> si, rnd, random_arch;
};

Outcome search_efficacy(Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  const DataBundle& data = ctx.data();
  const std::int64_t budget = search_budget(ctx.desk);
  const int seeds = ctx.seeds;
  std::vector<double> si(seeds), rnd(seeds), arch(8);
  std::vector<std::string> si_best(seeds), rnd_best(seeds);

  auto train_acc = [&](const Chromosome& c, std::uint64_t seed) {
    SearchConfig cfg = ctx.desk;
    cfg.seed = seed;
    return train_best_from_scratch(c, cfg, data.full_train, data.test).test_accuracy;
  };

  std::vector<std::function<void()>> tasks;
  for (int s = 0; s < seeds; ++s) {
    const int seed = s + 1;
    tasks.push_back([&, s, seed] {
      ctx.search_task(FitnessMode::NodeInheritance, true, seed)();
      const Chromosome best = ctx.search(FitnessMode::NodeInheritance, true, seed).best.chromosome;
      si_best[s] = render(best);
      si[s] = train_acc(best, seed);
      ctx.log("seed " + std::to_string(seed) + " searched architecture test accuracy " + fmt(si[s]));
    });
    tasks.push_back([&, s, seed] {
      const auto t1 = Clock::now();
      const SearchResult r = random_search_baseline(ctx.config(FitnessMode::NodeInheritance, true, seed), data, budget);
      ctx.log("random baseline seed " + std::to_string(seed) + " best " + fmt(*r.best.fitness) + " in " +
              fmt(seconds_since(t1), 1) + " s");
      rnd_best[s] = render(r.best.chromosome);
      rnd[s] = train_acc(r.best.chromosome, seed);
      ctx.log("seed " + std::to_string(seed) + " random-search architecture test accuracy " + fmt(rnd[s]));
    });
  }
  for (int i = 0; i < 8; ++i) {
    tasks.push_back([&, i] {
      Rng draw = derive_rng(900 + i, 8);
      arch[i] = train_acc(random_chromosome(draw, ctx.desk.n_c), 900 + i);
      ctx.log("random architecture " + std::to_string(i) + " test accuracy " + fmt(arch[i]));
    });
  }
  run_parallel(std::move(tasks), ctx.jobs);
  const double secs = seconds_since(t0);

  int wins = 0;
  for (int s = 0; s < seeds; ++s) wins += si[s] > rnd[s];
  const double arch_mean = mean(arch), si_median = median(si);
  const int need = (4 * seeds + 4) / 5;
  o.require(wins >= need, "beat random search in " + std::to_string(wins) + "/" + std::to_string(seeds) + " seeds");
  o.require(si_median >= arch_mean + 0.02,
            "median " + fmt(si_median) + " < random-architecture mean " + fmt(arch_mean) + " + 0.02");
  o.require(secs < 3600, "runtime " + fmt(secs / 60, 1) + " min with " + std::to_string(ctx.jobs) +
                             " thread(s) exceeds 60 min");
  o.data = {{"searched_test_accuracy", si},      {"random_search_test_accuracy", rnd},
            {"random_architectures", arch},      {"wins", wins},
            {"median_searched", si_median},      {"mean_random_architectures", arch_mean},
            {"searched_best", si_best},          {"random_search_best", rnd_best},
            {"seconds", secs},                   {"threads", ctx.jobs}};
  std::string detail = "wins " + std::to_string(wins) + "/" + std::to_string(seeds) + ", median " + fmt(si_median) +
                       " vs random-arch mean " + fmt(arch_mean) + ", runtime " + fmt(secs / 60, 1) + " min (" +
                       std::to_string(ctx.jobs) + " thread(s))";
  o.detail = o.pass ? detail : o.detail + "; " + detail;
  return o;
}

// 10, 11 -------------------------------------------------------------------

// Median of paired differences with a percentile bootstrap interval.
struct PairedMedian {
  double a, b, diff, lo, hi;
};

PairedMedian paired_median(const std::vector<double>& a, const std::vector<double>& b, std::uint64_t seed) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  Rng rng = derive_rng(seed, 0);
  std::vector<double> boot;
  std::vector<double> sample(d.size());
  for (int r = 0; r < 10000; ++r) {
    for (auto& x : sample) x = d[uniform_index(rng, d.size())];
    boot.push_back(median(sample));
  }
  std::sort(boot.begin(), boot.end());
  return {median(a), median(b), median(d), boot[249], boot[9749]};
}

Outcome ablation(Context& ctx, FitnessMode other_mode, bool other_fr, const std::string& a_name,
                 const std::string& b_name, std::uint64_t boot_seed) {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<std::function<void()>> tasks;
  for (int s = 1; s <= ctx.seeds; ++s) {
    tasks.push_back(ctx.search_task(FitnessMode::NodeInheritance, true, s));
    tasks.push_back(ctx.search_task(other_mode, other_fr, s));
  }
  run_parallel(std::move(tasks), ctx.jobs);
  std::vector<double> a, b;
  for (int s = 1; s <= ctx.seeds; ++s) {
    a.push_back(*ctx.search(FitnessMode::NodeInheritance, true, s).best.fitness);
    b.push_back(*ctx.search(other_mode, other_fr, s).best.fitness);
  }
  const PairedMedian m = paired_median(a, b, boot_seed);
  o.require(m.a >= m.b, "median " + a_name + " " + fmt(m.a) + " < " + b_name + " " + fmt(m.b));
  o.data = {{a_name, a},      {b_name, b},       {"median_" + a_name, m.a}, {"median_" + b_name, m.b},
            {"median_diff", m.diff}, {"ci95", nlohmann::ordered_json::array({m.lo, m.hi})}, {"seconds", seconds_since(t0)}};
  const std::string detail = "median " + a_name + " " + fmt(m.a) + " vs " + b_name + " " + fmt(m.b) +
                             ", paired median diff " + fmt(m.diff) + " [95% CI " + fmt(m.lo) + ", " + fmt(m.hi) + "]";
  o.detail = o.pass ? detail : o.detail + "; " + detail;
  return o;
}

Outcome ni_vs_ps(Context& ctx) { return ablation(ctx, FitnessMode::ParameterSharing, true, "NI", "PS", 1010); }
Outcome fr_on_off(Context& ctx) { return ablation(ctx, FitnessMode::NodeInheritance, false, "FR_on", "FR_off", 1111); }

// 12 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(Context& ctx) {
  Outcome o;
  const fs::path dir = ctx.work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    SearchConfig cfg = ctx.desk;
    cfg.generations = 6;
    cfg.data.synthetic_n = 1000;
    cfg.seed = 12;
    std::ofstream(dir / "run.cfg") << render_config(cfg);
  }
  auto run = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "dagnas");
    std::ostringstream out, err;
    return cli::run(args, out, err);
  };
  const std::string cfg = (dir / "run.cfg").string();
  const fs::path a = dir / "a", b = dir / "b", c = dir / "c";
  o.require(run({"search", "--config", cfg, "--out", a.string()}) == 0, "first run failed");
  o.require(run({"search", "--config", cfg, "--out", b.string()}) == 0, "second run failed");
  cli::stop_after_generations(3);
  const int stopped = run({"search", "--config", cfg, "--out", c.string()});
  cli::stop_after_generations(0);
  o.require(stopped == 3, "interrupted run exited " + std::to_string(stopped));
  o.require(run({"search", "--resume", (c / "checkpoint.bin").string()}) == 0, "resume failed");
  for (const char* f : {"metrics.csv", "checkpoint.bin", "best.txt"}) {
    o.require(!slurp(a / f).empty() && slurp(a / f) == slurp(b / f), std::string(f) + " differs between runs");
    o.require(slurp(a / f) == slurp(c / f), std::string(f) + " differs after interrupt and resume");
  }
  if (o.pass) o.detail = "metrics.csv, checkpoint.bin, best.txt byte-identical across reruns and interrupt at gen 3 + resume";
  return o;
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string criteria_text, report_path, desk_path = DAGNAS_DESK_CONFIG, work = "";
  Context ctx;
  ctx.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--criteria", criteria_text, "comma-separated subset, e.g. 1,2,12");
  app.add_option("--seeds", ctx.seeds, "seeds for the comparative criteria")->check(CLI::Range(1, 100));
  app.add_option("--jobs", ctx.jobs, "worker threads")->check(CLI::Range(1, 1024));
  app.add_option("--desk-config", desk_path, "desk configuration file");
  app.add_option("--report", report_path, "write a JSON report");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  ctx.desk = load_config(desk_path);
  ctx.work = work.empty() ? fs::temp_directory_path() / "dagnas_acceptance" : fs::path(work);
  fs::create_directories(ctx.work);

  const std::vector<Criterion> all = {
      {1, "genotype closure", genotype_closure},
      {2, "crossover and exchange fixture", crossover_fixture},
      {3, "gradient suite", gradient_suite},
      {4, "probability and normalization", normalization},
      {5, "node-inheritance soundness", node_inheritance},
      {6, "elitism invariant", elitism},
      {7, "sampler uniformity", sampler_uniformity},
      {8, "shape laws", shape_laws},
      {9, "search efficacy", search_efficacy},
      {10, "node inheritance vs parameter sharing", ni_vs_ps},
      {11, "FR on vs off", fr_on_off},
      {12, "determinism and resume", determinism},
  };
  std::set<int> wanted;
  if (criteria_text.empty()) {
    for (const auto& c : all) wanted.insert(c.id);
  } else {
    std::stringstream ss(criteria_text);
    for (std::string tok; std::getline(ss, tok, ',');) wanted.insert(std::stoi(tok));
  }

  nlohmann::ordered_json report = nlohmann::ordered_json::array();
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    failures += !o.pass;
    std::cout << "criterion " << std::setw(2) << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": "
              << o.detail << " (" << fmt(secs, 1) << " s)" << std::endl;
    report.push_back({{"criterion", c.id},
                      {"name", c.name},
                      {"pass", o.pass},
                      {"detail", o.detail},
                      {"seconds", secs},
                      {"data", o.data}});
  }
  if (!report_path.empty()) std::ofstream(report_path) << report.dump(2) << '\n';
  std::cout << (failures ? std::to_string(failures) + " criterion(s) failed" : "all criteria passed") << std::endl;
  return failures ? 1 : 0;
}
