#include "dagnas/variation.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace dagnas {

void check(const VariationConfig& cfg) {
  if (!(cfg.p_c >= 0.0 && cfg.p_c <= 1.0)) throw InvalidConfig("crossover probability must lie in [0, 1]");
  if (!(cfg.p_m >= 0.0 && cfg.p_m <= 1.0)) throw InvalidConfig("mutation probability must lie in [0, 1]");
}

std::pair<Chromosome, Chromosome> one_point_crossover(const Chromosome& p1, const Chromosome& p2, int cut) {
  if (p1.n_c != p2.n_c) {
    throw std::invalid_argument("one_point_crossover: parents disagree on n_c (" + std::to_string(p1.n_c) + " vs " +
                                std::to_string(p2.n_c) + ")");
  }
  const int total = p1.gene_count();
  if (cut < 1 || cut >= total) {
    throw std::invalid_argument("one_point_crossover: cut " + std::to_string(cut) + " is not interior");
  }
  std::pair<Chromosome, Chromosome> out{p1, p2};
  for (int i = cut; i < total; ++i) {
    out.first.gene(i) = p2.gene(i);
    out.second.gene(i) = p1.gene(i);
  }
  return out;
}

namespace {

bool node_value_legal_at(const Chromosome& c, int flat, int value) {
  const auto loc = c.locate(flat);
  return value >= 1 && value <= max_node_gene(c.block(loc.block).role, loc.pos);
}

}  // namespace

bool exchange_compatible(const Chromosome& c, int i, int j) {
  if (c.is_node_gene(i) != c.is_node_gene(j)) return false;
  if (!c.is_node_gene(i)) return true;
  return node_value_legal_at(c, j, c.gene(i)) && node_value_legal_at(c, i, c.gene(j));
}

Chromosome exchange_genes(const Chromosome& c, int i, int j) {
  if (!exchange_compatible(c, i, j)) {
    throw std::invalid_argument("exchange_genes: genes " + std::to_string(i) + " and " + std::to_string(j) +
                                " cannot be exchanged");
  }
  Chromosome out = c;
  std::swap(out.gene(i), out.gene(j));
  return out;
}

Chromosome exchange_mutation(const Chromosome& c, Rng& rng) {
  const int total = c.gene_count();
  std::vector<int> node_pos, op_pos;
  for (int i = 0; i < total; ++i) (c.is_node_gene(i) ? node_pos : op_pos).push_back(i);

  const bool mutate_nodes = uniform_index(rng, 2) == 0;
  if (mutate_nodes) {
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t a = 0; a < node_pos.size(); ++a) {
      for (std::size_t b = a + 1; b < node_pos.size(); ++b) {
        if (exchange_compatible(c, node_pos[a], node_pos[b])) pairs.emplace_back(node_pos[a], node_pos[b]);
      }
    }
    if (!pairs.empty()) {
      const auto [i, j] = pairs[uniform_index(rng, pairs.size())];
      return exchange_genes(c, i, j);
    }
  }
  if (op_pos.size() < 2) return c;
  const std::size_t a = uniform_index(rng, op_pos.size());
  std::size_t b = uniform_index(rng, op_pos.size() - 1);
  if (b >= a) ++b;
  return exchange_genes(c, op_pos[a], op_pos[b]);
}

std::size_t binary_tournament(std::span<const Individual> pop, Rng& rng) {
  if (pop.size() < 2) throw std::invalid_argument("binary_tournament: population needs at least 2 individuals");
  for (const auto& ind : pop) {
    if (!ind.fitness) throw std::invalid_argument("binary_tournament: individual without fitness");
  }
  const std::size_t a = uniform_index(rng, pop.size());
  std::size_t b = uniform_index(rng, pop.size() - 1);
  if (b >= a) ++b;
  const double fa = *pop[a].fitness, fb = *pop[b].fitness;
  if (fa > fb) return a;
  if (fb > fa) return b;
  return uniform_index(rng, 2) == 0 ? a : b;
}

std::vector<Chromosome> generate_offspring(std::span<const Individual> parents, const VariationConfig& cfg, Rng& rng) {
  check(cfg);
  const std::size_t k = parents.size();
  std::vector<Chromosome> out;
  out.reserve(k);
  while (out.size() < k) {
    const auto& p1 = parents[binary_tournament(parents, rng)].chromosome;
    const auto& p2 = parents[binary_tournament(parents, rng)].chromosome;
    const double gamma = 1.0 - uniform01(rng);  // (0, 1]
    if (gamma < cfg.p_c) {
      const int cut = uniform_int(rng, 1, p1.gene_count() - 1);
      auto [q1, q2] = one_point_crossover(p1, p2, cut);
      out.push_back(std::move(q1));
      if (out.size() < k) out.push_back(std::move(q2));
    } else {
      out.push_back(p1);
      if (out.size() < k) out.push_back(p2);
    }
  }
  for (auto& q : out) {
    const double gamma = 1.0 - uniform01(rng);
    if (gamma < cfg.p_m) q = exchange_mutation(q, rng);
  }
  return out;
}

std::size_t best_index(std::span<const Individual> pop) {
  if (pop.empty()) throw std::invalid_argument("best_index: empty population");
  std::size_t best = 0;
  for (std::size_t i = 1; i < pop.size(); ++i) {
    if (pop[i].fitness.value() > pop[best].fitness.value()) best = i;
  }
  return best;
}

std::vector<std::size_t> environmental_selection(std::span<const Individual> pool, int k, Rng& rng) {
  if (k < 1 || static_cast<std::size_t>(k) > pool.size()) {
    throw std::invalid_argument("environmental_selection: K must lie in [1, |R|]");
  }
  const std::size_t best = best_index(pool);
  std::vector<std::size_t> chosen;
  std::vector<bool> taken(pool.size(), false);
  if (static_cast<std::size_t>(k) == pool.size()) {
    // A strictly worst individual can never win a tournament.
    for (std::size_t i = 0; i < pool.size(); ++i) chosen.push_back(i);
    return chosen;
  }
  while (chosen.size() < static_cast<std::size_t>(k)) {
    const std::size_t i = binary_tournament(pool, rng);
    if (taken[i]) continue;
    taken[i] = true;
    chosen.push_back(i);
  }
  if (!taken[best]) {
    auto worst = std::min_element(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
      return *pool[a].fitness < *pool[b].fitness;
    });
    *worst = best;
  }
  return chosen;
}

}  // namespace dagnas
