#include "dagnas/topology.hpp"

#include <algorithm>

namespace dagnas {

BlockPlan BlockPlan::standard(int in_channels, int in_h, int in_w, int channels) {
  BlockPlan plan;
  plan.in_channels = in_channels;
  plan.in_h = in_h;
  plan.in_w = in_w;
  // Block 1 has no block i-2; its second source is the network input.
  plan.instances = {
      {BlockRole::First, channels, kNetworkInput, kNetworkInput},
      {BlockRole::Normal, channels, 0, kNetworkInput},
      {BlockRole::Reduction, channels, 1, 0},
      {BlockRole::Normal, channels, 2, 1},
      {BlockRole::Reduction, channels, 3, 2},
  };
  return plan;
}

bool PhenotypeGraph::operator==(const PhenotypeGraph& o) const {
  if (in_channels != o.in_channels || in_h != o.in_h || in_w != o.in_w || blocks.size() != o.blocks.size()) {
    return false;
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& x = blocks[b];
    const auto& y = o.blocks[b];
    if (x.instance != y.instance || x.role != y.role || x.channels != y.channels || x.in_h != y.in_h ||
        x.in_w != y.in_w || x.out_h != y.out_h || x.out_w != y.out_w || x.leaves != y.leaves ||
        x.sources.size() != y.sources.size() || x.nodes.size() != y.nodes.size()) {
      return false;
    }
    for (std::size_t s = 0; s < x.sources.size(); ++s) {
      const auto& a = x.sources[s];
      const auto& c = y.sources[s];
      if (a.producer != c.producer || a.depth != c.depth || a.h != c.h || a.w != c.w || a.stride != c.stride) {
        return false;
      }
    }
    for (std::size_t n = 0; n < x.nodes.size(); ++n) {
      const auto& a = x.nodes[n];
      const auto& c = y.nodes[n];
      if (a.node != c.node || a.inputs != c.inputs || a.ops != c.ops || a.strides != c.strides ||
          a.channels != c.channels || a.h != c.h || a.w != c.w) {
        return false;
      }
    }
  }
  return true;
}

const BlockGenotype& genotype_for(const Chromosome& c, BlockRole role) {
  switch (role) {
    case BlockRole::First: return c.first;
    case BlockRole::Normal: return c.normal;
    case BlockRole::Reduction: return c.reduction;
  }
  return c.normal;
}

std::vector<int> leaf_nodes(const BlockGenotype& g) {
  const int first = source_count(g.role) + 1;
  const int n_c = g.computation_nodes();
  std::vector<bool> used(static_cast<std::size_t>(first + n_c), false);
  for (int in : g.nodes) {
    if (in >= first && in < first + n_c) used[static_cast<std::size_t>(in)] = true;
  }
  std::vector<int> leaves;
  for (int d = first; d < first + n_c; ++d) {
    if (!used[static_cast<std::size_t>(d)]) leaves.push_back(d);
  }
  return leaves;
}

PhenotypeGraph decode_topology(const Chromosome& c, const BlockPlan& plan) {
  if (const auto v = validate(c); !v.empty()) {
    throw std::invalid_argument("decode_topology: invalid chromosome: " + to_string(v.front()));
  }
  PhenotypeGraph g{plan.in_channels, plan.in_h, plan.in_w, {}};
  for (int b = 0; b < plan.block_count(); ++b) {
    const auto& inst = plan.instances[static_cast<std::size_t>(b)];
    const auto& geno = genotype_for(c, inst.role);
    BlockGraph blk;
    blk.instance = b;
    blk.role = inst.role;
    blk.channels = inst.channels;

    auto source_of = [&](int producer) {
      if (producer == kNetworkInput) return SourceInfo{producer, plan.in_channels, plan.in_h, plan.in_w, 1};
      if (producer < 0 || producer >= b) {
        throw std::invalid_argument("block plan: block " + std::to_string(b) + " reads from block " +
                                    std::to_string(producer) + " which is not earlier");
      }
      const auto& p = g.blocks[static_cast<std::size_t>(producer)];
      return SourceInfo{producer, p.out_depth(), p.out_h, p.out_w, 1};
    };
    blk.sources.push_back(source_of(inst.prev1));
    if (source_count(inst.role) == 2) blk.sources.push_back(source_of(inst.prev2));
    blk.in_h = blk.sources[0].h;
    blk.in_w = blk.sources[0].w;
    for (auto& s : blk.sources) {
      if (s.h == blk.in_h && s.w == blk.in_w) continue;
      if (same_out(s.h, 2) == blk.in_h && same_out(s.w, 2) == blk.in_w) {
        s.stride = 2;
        continue;
      }
      throw ShapeError("block " + std::to_string(b) + " (" + std::string(role_name(inst.role)) +
                       "): source of size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                       " cannot be matched to " + std::to_string(blk.in_h) + "x" + std::to_string(blk.in_w));
    }

    const bool reduce = inst.role == BlockRole::Reduction;
    if (reduce && (blk.in_h < 2 || blk.in_w < 2)) {
      throw ShapeError("block " + std::to_string(b) + " (reduction): spatial size " + std::to_string(blk.in_h) + "x" +
                       std::to_string(blk.in_w) + " cannot be halved");
    }
    blk.out_h = reduce ? same_out(blk.in_h, 2) : blk.in_h;
    blk.out_w = reduce ? same_out(blk.in_w, 2) : blk.in_w;

    const int first = blk.first_node();
    for (int d = 0; d < geno.computation_nodes(); ++d) {
      GraphNode node{};
      node.node = first + d;
      for (int slot = 0; slot < 2; ++slot) {
        const int pos = 2 * d + slot;
        node.inputs[static_cast<std::size_t>(slot)] = geno.nodes[static_cast<std::size_t>(pos)];
        node.ops[static_cast<std::size_t>(slot)] = *op_from_gene(geno.ops[static_cast<std::size_t>(pos)]);
        const bool from_source = geno.nodes[static_cast<std::size_t>(pos)] < first;
        node.strides[static_cast<std::size_t>(slot)] = (reduce && from_source) ? 2 : 1;
      }
      node.channels = inst.channels;
      node.h = blk.out_h;
      node.w = blk.out_w;
      blk.nodes.push_back(node);
    }
    blk.leaves = leaf_nodes(geno);
    g.blocks.push_back(std::move(blk));
  }
  return g;
}

}  // namespace dagnas
