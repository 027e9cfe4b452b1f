#pragma once

#include "dagnas/genotype.hpp"

namespace dagnas::testing {

inline Chromosome make_chromosome(std::vector<int> fn, std::vector<int> fo, std::vector<int> nn, std::vector<int> no,
                                  std::vector<int> rn, std::vector<int> ro) {
  Chromosome c;
  c.n_c = static_cast<int>(fn.size()) / 2;
  c.first = {BlockRole::First, std::move(fn), std::move(fo)};
  c.normal = {BlockRole::Normal, std::move(nn), std::move(no)};
  c.reduction = {BlockRole::Reduction, std::move(rn), std::move(ro)};
  return c;
}

// Two n_c = 3 parents for the crossover (cut between genes 2 and 3) and
// exchange (genes 3 and 5, 1-based) worked example, with the offspring
// written out by hand.
inline Chromosome node_inheritance_p1() {
  return make_chromosome({1, 1, 2, 1, 1, 3}, {2, 7, 4, 1, 6, 3}, {1, 2, 3, 1, 2, 2}, {3, 7, 1, 5, 2, 6},
                         {2, 1, 1, 3, 2, 4}, {6, 6, 2, 4, 7, 1});
}

inline Chromosome node_inheritance_p2() {
  return make_chromosome({1, 1, 1, 2, 2, 1}, {5, 3, 7, 2, 1, 4}, {2, 1, 1, 3, 3, 4}, {1, 4, 6, 6, 3, 2},
                         {1, 1, 3, 2, 4, 3}, {2, 5, 1, 7, 4, 6});
}

// q1 = p1[0, 2) + p2[2, end)
inline Chromosome node_inheritance_q1() {
  return make_chromosome({1, 1, 1, 2, 2, 1}, {5, 3, 7, 2, 1, 4}, {2, 1, 1, 3, 3, 4}, {1, 4, 6, 6, 3, 2},
                         {1, 1, 3, 2, 4, 3}, {2, 5, 1, 7, 4, 6});
}

// q2 = p2[0, 2) + p1[2, end)
inline Chromosome node_inheritance_q2() {
  return make_chromosome({1, 1, 2, 1, 1, 3}, {2, 7, 4, 1, 6, 3}, {1, 2, 3, 1, 2, 2}, {3, 7, 1, 5, 2, 6},
                         {2, 1, 1, 3, 2, 4}, {6, 6, 2, 4, 7, 1});
}

// q2 after exchanging its 3rd and 5th genes.
inline Chromosome node_inheritance_q2_mutated() {
  return make_chromosome({1, 1, 1, 1, 2, 3}, {2, 7, 4, 1, 6, 3}, {1, 2, 3, 1, 2, 2}, {3, 7, 1, 5, 2, 6},
                         {2, 1, 1, 3, 2, 4}, {6, 6, 2, 4, 7, 1});
}

// The same pattern applied at the normal block's node string (flat genes
// 12..17 for n_c = 3): cut between its 2nd and 3rd genes, then exchange its
// 3rd and 5th genes in the second offspring.
inline constexpr int kNormalNodeOffset = 12;

inline Chromosome normal_cut_q1() {
  return make_chromosome({1, 1, 2, 1, 1, 3}, {2, 7, 4, 1, 6, 3}, {1, 2, 1, 3, 3, 4}, {1, 4, 6, 6, 3, 2},
                         {1, 1, 3, 2, 4, 3}, {2, 5, 1, 7, 4, 6});
}

inline Chromosome normal_cut_q2() {
  return make_chromosome({1, 1, 1, 2, 2, 1}, {5, 3, 7, 2, 1, 4}, {2, 1, 3, 1, 2, 2}, {3, 7, 1, 5, 2, 6},
                         {2, 1, 1, 3, 2, 4}, {6, 6, 2, 4, 7, 1});
}

inline Chromosome normal_cut_q2_mutated() {
  return make_chromosome({1, 1, 1, 2, 2, 1}, {5, 3, 7, 2, 1, 4}, {2, 1, 2, 1, 3, 2}, {3, 7, 1, 5, 2, 6},
                         {2, 1, 1, 3, 2, 4}, {6, 6, 2, 4, 7, 1});
}

}  // namespace dagnas::testing
