#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "dagnas/genotype.hpp"
#include "dagnas/tensor.hpp"

namespace dagnas {

// Producer of a block source: another block's output, or the network input.
inline constexpr int kNetworkInput = -1;

struct BlockInstance {
  BlockRole role;
  int channels;
  int prev1;  // producer of source node 1 (block index or kNetworkInput)
  int prev2;  // producer of source node 2; unused for First blocks
};

// The fixed macro layout: First, Normal, Reduction, Normal, Reduction.
struct BlockPlan {
  int in_channels = 1;
  int in_h = 16;
  int in_w = 16;
  std::vector<BlockInstance> instances;

  static BlockPlan standard(int in_channels, int in_h, int in_w, int channels);
  int block_count() const { return static_cast<int>(instances.size()); }
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SourceInfo {
  int producer;   // block index or kNetworkInput
  int depth;      // channel depth of the producer output (|leaves| * C, or image channels)
  int h, w;       // producer spatial size
  int stride;     // projection stride bringing it to the block's input size
};

struct GraphNode {
  int node;                       // node number inside the block (after the sources)
  std::array<int, 2> inputs;      // node numbers feeding slots 1 and 2
  std::array<Op, 2> ops;
  std::array<int, 2> strides;     // 2 only for reduction ops reading a source node
  int channels, h, w;             // output shape
};

struct BlockGraph {
  int instance;
  BlockRole role;
  int channels;
  int in_h, in_w;
  int out_h, out_w;
  std::vector<SourceInfo> sources;
  std::vector<GraphNode> nodes;   // topological order
  std::vector<int> leaves;        // node numbers, ascending
  int out_depth() const { return static_cast<int>(leaves.size()) * channels; }
  int first_node() const { return static_cast<int>(sources.size()) + 1; }
};

struct PhenotypeGraph {
  int in_channels, in_h, in_w;
  std::vector<BlockGraph> blocks;

  const BlockGraph& final_block() const { return blocks.back(); }
  bool operator==(const PhenotypeGraph& o) const;
};

// Genotype of the given role inside a chromosome.
const BlockGenotype& genotype_for(const Chromosome& c, BlockRole role);

// Requires validate(c) to be empty; throws ShapeError when a reduction would
// shrink a map that is already 1 pixel wide.
PhenotypeGraph decode_topology(const Chromosome& c, const BlockPlan& plan);

// Nodes of a block that no later node consumes.
std::vector<int> leaf_nodes(const BlockGenotype& g);

}  // namespace dagnas
