#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dagnas/genotype.hpp"
#include "dagnas/rng.hpp"

namespace dagnas {

struct Individual {
  Chromosome chromosome;
  std::optional<double> fitness;  // validation accuracy in [0, 1]
};

struct VariationConfig {
  double p_c = 0.95;
  double p_m = 0.05;
};

void check(const VariationConfig& cfg);

// Offspring take genes [0, cut) from one parent and [cut, end) from the other
// in the flat gene view; cut must lie in [1, gene_count - 1].
std::pair<Chromosome, Chromosome> one_point_crossover(const Chromosome& p1, const Chromosome& p2, int cut);

// Whether swapping flat genes i and j keeps the chromosome legal: both must
// be node genes or both operation genes, and node values must be legal at
// each other's positions.
bool exchange_compatible(const Chromosome& c, int i, int j);

// Swaps flat genes i and j; throws std::invalid_argument when incompatible.
Chromosome exchange_genes(const Chromosome& c, int i, int j);

// Picks node strings or operation strings with equal probability and swaps a
// uniformly chosen compatible pair of distinct positions. Falls back to an
// operation swap when no compatible node pair exists.
Chromosome exchange_mutation(const Chromosome& c, Rng& rng);

// Index of the fitter of two distinct uniform draws; ties broken uniformly.
std::size_t binary_tournament(std::span<const Individual> pop, Rng& rng);

std::vector<Chromosome> generate_offspring(std::span<const Individual> parents, const VariationConfig& cfg, Rng& rng);

// Indices into `pool` of the K survivors: repeated binary tournaments without
// duplicates, then the best of the pool replaces the worst survivor if it
// was not selected.
std::vector<std::size_t> environmental_selection(std::span<const Individual> pool, int k, Rng& rng);

// First index of maximal fitness.
std::size_t best_index(std::span<const Individual> pop);

}  // namespace dagnas
