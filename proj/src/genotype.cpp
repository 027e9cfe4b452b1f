#include "dagnas/genotype.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace dagnas {

std::optional<Op> op_from_gene(int gene) {
  if (gene < 1 || gene > kNumOps) return std::nullopt;
  return static_cast<Op>(gene);
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Identity: return "Identity";
    case Op::DW3: return "DW3";
    case Op::DW5: return "DW5";
    case Op::FR3: return "FR3";
    case Op::FR5: return "FR5";
    case Op::Avg: return "AVG";
    case Op::Max: return "MAX";
  }
  return "?";
}

bool op_is_fr(Op op) { return op == Op::FR3 || op == Op::FR5; }

bool op_has_params(Op op) { return op == Op::DW3 || op == Op::DW5 || op_is_fr(op); }

int op_kernel(Op op) {
  switch (op) {
    case Op::DW5:
    case Op::FR5: return 5;
    case Op::Identity: return 1;
    default: return 3;
  }
}

std::string_view role_name(BlockRole role) {
  switch (role) {
    case BlockRole::First: return "first";
    case BlockRole::Normal: return "normal";
    case BlockRole::Reduction: return "reduction";
  }
  return "?";
}

std::optional<BlockRole> role_from_name(std::string_view name) {
  if (name == "first") return BlockRole::First;
  if (name == "normal") return BlockRole::Normal;
  if (name == "reduction") return BlockRole::Reduction;
  return std::nullopt;
}

int source_count(BlockRole role) { return role == BlockRole::First ? 1 : 2; }

const BlockGenotype& Chromosome::block(int i) const {
  switch (i) {
    case 0: return first;
    case 1: return normal;
    case 2: return reduction;
  }
  throw std::out_of_range("chromosome block index " + std::to_string(i));
}

BlockGenotype& Chromosome::block(int i) {
  return const_cast<BlockGenotype&>(static_cast<const Chromosome&>(*this).block(i));
}

Chromosome::GeneLocation Chromosome::locate(int flat) const {
  if (flat < 0 || flat >= gene_count()) throw std::out_of_range("gene index " + std::to_string(flat));
  const int per_string = 2 * n_c;
  const int b = flat / (2 * per_string);
  const int rem = flat % (2 * per_string);
  return {b, rem < per_string, rem % per_string};
}

int Chromosome::gene(int flat) const {
  const auto loc = locate(flat);
  const auto& blk = block(loc.block);
  return loc.node_gene ? blk.nodes[loc.pos] : blk.ops[loc.pos];
}

int& Chromosome::gene(int flat) {
  const auto loc = locate(flat);
  auto& blk = block(loc.block);
  return loc.node_gene ? blk.nodes[loc.pos] : blk.ops[loc.pos];
}

bool Chromosome::is_node_gene(int flat) const { return locate(flat).node_gene; }

std::string to_string(const Violation& v) {
  std::ostringstream os;
  os << v.block << " block";
  if (v.gene_index >= 0) os << ", " << v.string_kind << " gene " << v.gene_index;
  os << ": " << v.rule;
  return os.str();
}

std::vector<Violation> validate(const Chromosome& c) {
  std::vector<Violation> out;
  if (c.n_c < 1) out.push_back({"chromosome", "", -1, "n_c must be at least 1"});
  const BlockRole expected[] = {BlockRole::First, BlockRole::Normal, BlockRole::Reduction};
  for (int b = 0; b < kChromosomeBlocks; ++b) {
    const auto& blk = c.block(b);
    const std::string name(role_name(expected[b]));
    if (blk.role != expected[b]) out.push_back({name, "", -1, "block role mismatch"});
    const std::size_t want = 2 * static_cast<std::size_t>(std::max(c.n_c, 0));
    if (blk.nodes.size() != want) out.push_back({name, "node", -1, "node string length must be 2*n_c"});
    if (blk.ops.size() != want) out.push_back({name, "operation", -1, "operation string length must be 2*n_c"});
    for (std::size_t i = 0; i < blk.nodes.size(); ++i) {
      const int pos = static_cast<int>(i);
      const int g = blk.nodes[i];
      if (g < 1) {
        out.push_back({name, "node", pos, "node gene must be >= 1"});
      } else if (g >= blk.owner(pos)) {
        out.push_back({name, "node", pos,
                       "forward reference: node " + std::to_string(blk.owner(pos)) + " cannot take input from node " +
                           std::to_string(g)});
      }
    }
    for (std::size_t i = 0; i < blk.ops.size(); ++i) {
      if (!op_from_gene(blk.ops[i])) {
        out.push_back({name, "operation", static_cast<int>(i), "unknown operation id " + std::to_string(blk.ops[i])});
      }
    }
  }
  return out;
}

namespace {

const std::vector<Op>& all_ops() {
  static const std::vector<Op> ops{Op::Identity, Op::DW3, Op::DW5, Op::FR3, Op::FR5, Op::Avg, Op::Max};
  return ops;
}

void fill_block(BlockGenotype& blk, Rng& rng, int n_c, const std::vector<Op>& allowed) {
  blk.nodes.clear();
  blk.ops.clear();
  for (int d = 0; d < n_c; ++d) {
    for (int slot = 0; slot < 2; ++slot) {
      blk.nodes.push_back(uniform_int(rng, 1, max_node_gene(blk.role, 2 * d + slot)));
    }
    for (int slot = 0; slot < 2; ++slot) {
      blk.ops.push_back(static_cast<int>(allowed[uniform_index(rng, allowed.size())]));
    }
  }
}

}  // namespace

Chromosome random_chromosome(Rng& rng, int n_c, const std::vector<Op>& allowed) {
  if (n_c < 1) throw InvalidConfig("random_chromosome: n_c must be at least 1, got " + std::to_string(n_c));
  if (allowed.empty()) throw InvalidConfig("random_chromosome: empty operation space");
  Chromosome c;
  c.n_c = n_c;
  for (int b = 0; b < kChromosomeBlocks; ++b) fill_block(c.block(b), rng, n_c, allowed);
  return c;
}

Chromosome random_chromosome(Rng& rng, int n_c) { return random_chromosome(rng, n_c, all_ops()); }

Chromosome random_chromosome(std::uint64_t seed, int n_c) {
  Rng rng(seed);
  return random_chromosome(rng, n_c);
}

std::string render(const Chromosome& c) {
  std::ostringstream os;
  auto join = [&os](const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  };
  for (int b = 0; b < kChromosomeBlocks; ++b) {
    const auto& blk = c.block(b);
    os << role_name(blk.role) << " | ";
    join(blk.nodes);
    os << " | ";
    join(blk.ops);
    os << '\n';
  }
  return os.str();
}

ParseError::ParseError(int line, int column, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
      line_(line),
      column_(column) {}

namespace {

class LineParser {
 public:
  LineParser(std::string_view text, int line) : text_(text), line_(line) {}

  void skip_ws() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) ++pos_;
  }
  int column() const { return static_cast<int>(pos_) + 1; }
  bool at_end() {
    skip_ws();
    return pos_ >= text_.size();
  }
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(line_, column(), what); }

  std::string_view word() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && std::isalpha(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    if (start == pos_) fail("expected block role");
    return text_.substr(start, pos_ - start);
  }

  void expect(char ch) {
    skip_ws();
    if (pos_ >= text_.size() || text_[pos_] != ch) fail(std::string("expected '") + ch + "'");
    ++pos_;
  }

  std::vector<int> int_list() {
    std::vector<int> out;
    while (true) {
      skip_ws();
      const std::size_t start = pos_;
      if (pos_ < text_.size() && text_[pos_] == '-') ++pos_;
      while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      const std::string_view digits = text_.substr(start, pos_ - start);
      if (digits.empty() || digits == "-") {
        pos_ = start;
        fail("expected integer");
      }
      if (digits.size() > 9) {
        pos_ = start;
        fail("integer out of range");
      }
      out.push_back(std::stoi(std::string(digits)));
      skip_ws();
      if (pos_ < text_.size() && text_[pos_] == ',') {
        ++pos_;
        continue;
      }
      return out;
    }
  }

 private:
  std::string_view text_;
  int line_;
  std::size_t pos_ = 0;
};

}  // namespace

Chromosome parse_chromosome(std::string_view text) {
  Chromosome c;
  bool seen[kChromosomeBlocks] = {false, false, false};
  int line_no = 0;
  int last_line = 1;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    const std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    LineParser p(line, line_no);
    if (p.at_end()) {
      if (end == text.size()) break;
      continue;
    }
    last_line = line_no;
    const auto role = role_from_name(p.word());
    if (!role) p.fail("unknown block role (expected first, normal or reduction)");
    const int idx = static_cast<int>(*role);
    if (seen[idx]) p.fail("duplicate " + std::string(role_name(*role)) + " block");
    seen[idx] = true;
    p.expect('|');
    auto nodes = p.int_list();
    p.expect('|');
    auto ops = p.int_list();
    if (!p.at_end()) p.fail("unexpected trailing characters");
    if (nodes.size() % 2 != 0) throw ParseError(line_no, 1, "node string must hold an even number of genes");
    if (nodes.size() != ops.size()) throw ParseError(line_no, 1, "node and operation strings differ in length");
    const int n_c = static_cast<int>(nodes.size()) / 2;
    if (c.n_c != 0 && c.n_c != n_c) throw ParseError(line_no, 1, "blocks disagree on the number of computation nodes");
    c.n_c = n_c;
    auto& blk = c.block(idx);
    blk.role = *role;
    blk.nodes = std::move(nodes);
    blk.ops = std::move(ops);
    if (end == text.size()) break;
  }
  for (int b = 0; b < kChromosomeBlocks; ++b) {
    if (!seen[b]) {
      throw ParseError(last_line, 1, "missing " + std::string(role_name(static_cast<BlockRole>(b))) + " block");
    }
  }
  return c;
}

}  // namespace dagnas
