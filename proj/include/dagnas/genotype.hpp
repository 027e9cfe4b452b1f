#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dagnas/rng.hpp"

namespace dagnas {

// Operation genes. The integer values are the gene codes.
enum class Op : int { Identity = 1, DW3 = 2, DW5 = 3, FR3 = 4, FR5 = 5, Avg = 6, Max = 7 };

inline constexpr int kNumOps = 7;

std::optional<Op> op_from_gene(int gene);
std::string_view op_name(Op op);
bool op_is_fr(Op op);
bool op_has_params(Op op);
int op_kernel(Op op);  // 3 or 5 for convolutions and pools, 1 for Identity

enum class BlockRole { First, Normal, Reduction };

std::string_view role_name(BlockRole role);
std::optional<BlockRole> role_from_name(std::string_view name);

// Number of source nodes feeding a block: 1 for First, 2 otherwise.
int source_count(BlockRole role);

struct BlockGenotype {
  BlockRole role = BlockRole::Normal;
  std::vector<int> nodes;  // 2 genes per computation node: its two input node numbers
  std::vector<int> ops;    // 2 genes per computation node: operation codes

  int computation_nodes() const { return static_cast<int>(nodes.size()) / 2; }
  // Node number of the computation node that owns gene position `pos`.
  int owner(int pos) const { return source_count(role) + 1 + pos / 2; }
  bool operator==(const BlockGenotype&) const = default;
};

// Legal range of a node gene at `pos` in a block of `role`: [1, owner - 1].
// Depends only on (role, pos), never on other genes.
inline int max_node_gene(BlockRole role, int pos) { return source_count(role) + pos / 2; }

struct Chromosome {
  BlockGenotype first{BlockRole::First, {}, {}};
  BlockGenotype normal{BlockRole::Normal, {}, {}};
  BlockGenotype reduction{BlockRole::Reduction, {}, {}};
  int n_c = 0;

  const BlockGenotype& block(int i) const;
  BlockGenotype& block(int i);

  // The flat gene view: first.nodes, first.ops, normal.nodes, normal.ops,
  // reduction.nodes, reduction.ops. Indices are 0-based.
  int gene_count() const { return 12 * n_c; }
  int gene(int flat) const;
  int& gene(int flat);
  bool is_node_gene(int flat) const;
  // Block and position inside that block's node or operation string.
  struct GeneLocation {
    int block;
    bool node_gene;
    int pos;
  };
  GeneLocation locate(int flat) const;

  bool operator==(const Chromosome&) const = default;
};

inline constexpr int kChromosomeBlocks = 3;

struct Violation {
  std::string block;
  std::string string_kind;  // "node" or "operation"
  int gene_index = -1;      // 0-based within that string, -1 for block-level rules
  std::string rule;
};

std::string to_string(const Violation& v);

// Empty result means the chromosome is legal.
std::vector<Violation> validate(const Chromosome& c);

class InvalidConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Uniform over legal genes at every position.
Chromosome random_chromosome(Rng& rng, int n_c);
Chromosome random_chromosome(std::uint64_t seed, int n_c);

// Same as random_chromosome but drawing operations only from `allowed`.
Chromosome random_chromosome(Rng& rng, int n_c, const std::vector<Op>& allowed);

// Canonical text: one line per block, "role | n,n,... | o,o,...".
std::string render(const Chromosome& c);

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, int column, const std::string& what);
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

// Structural parse only; gene legality is left to validate().
Chromosome parse_chromosome(std::string_view text);

}  // namespace dagnas
