#include "dagnas/supergraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "dagnas/ops.hpp"

namespace dagnas {

namespace {

std::string op_prefix(int block, int node, int slot, Op op) {
  return "b" + std::to_string(block) + "/n" + std::to_string(node) + "/s" + std::to_string(slot) + "/" +
         std::string(op_name(op)) + "/";
}

std::string projection_weight_key(int block, int slot, int piece) {
  return "b" + std::to_string(block) + "/src" + std::to_string(slot) + "/from" + std::to_string(piece) + "/w";
}

std::string projection_bn_key(int block, int slot, const char* what) {
  return "b" + std::to_string(block) + "/src" + std::to_string(slot) + "/bn_" + what;
}

std::string head_weight_key(int node) { return "head/n" + std::to_string(node) + "/w"; }
const std::string kHeadBias = "head/b";

constexpr const char* kDwSuffixes[] = {"dw_w", "dw_b", "pw_w", "pw_b", "bn_g", "bn_b", "bn_mean", "bn_var"};
constexpr const char* kFrSuffixes[] = {"conv_w", "bn_g", "bn_b", "bn_mean", "bn_var", "eca_w", "eca_b"};

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

std::string NodeKey::prefix() const { return op_prefix(block_instance, node, slot, op); }

std::vector<std::string> op_param_keys(const NodeKey& key) {
  std::vector<std::string> out;
  const std::string pre = key.prefix();
  if (key.op == Op::DW3 || key.op == Op::DW5) {
    for (const char* s : kDwSuffixes) out.push_back(pre + s);
  } else if (op_is_fr(key.op)) {
    for (const char* s : kFrSuffixes) out.push_back(pre + s);
  }
  return out;
}

ParameterBank::ParameterBank(std::uint64_t init_seed) : init_rng_(init_seed) {}

Param& ParameterBank::get_or_init(const std::string& key, const Shape& shape, ParamKind kind, InitRule init,
                                  int fan_in) {
  if (auto it = entries_.find(key); it != entries_.end()) {
    if (it->second.value().shape() != shape) {
      throw std::logic_error("parameter bank: key " + key + " exists with shape " +
                             shape_str(it->second.value().shape()) + ", requested " + shape_str(shape));
    }
    return it->second;
  }
  require_writable("create an entry");
  Tensor<float> value(shape);
  switch (init) {
    case InitRule::Zeros: break;
    case InitRule::Ones: value.fill(1.0f); break;
    case InitRule::He: {
      if (fan_in <= 0) {
        fan_in = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        if (shape.size() == 1) fan_in = shape[0];
      }
      const double stddev = std::sqrt(2.0 / fan_in);
      for (auto& v : value.values()) v = static_cast<float>(stddev * standard_normal(init_rng_));
      break;
    }
  }
  Param p;
  p.node = std::make_shared<ag::Node<float>>();
  p.node->value = std::move(value);
  p.node->requires_grad = kind != ParamKind::Statistic;
  p.velocity = Tensor<float>(shape);
  p.kind = kind;
  return entries_.emplace(key, std::move(p)).first->second;
}

Param* ParameterBank::find(const std::string& key) {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

const Param* ParameterBank::find(const std::string& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

Param& ParameterBank::at(const std::string& key) {
  if (Param* p = find(key)) return *p;
  throw std::out_of_range("parameter bank: missing key " + key);
}

std::uint64_t ParameterBank::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [key, p] : entries_) {
    fnv(h, key.data(), key.size());
    for (int d : p.value().shape()) fnv(h, &d, sizeof d);
    fnv(h, p.value().data(), p.value().size() * sizeof(float));
    fnv(h, p.velocity.data(), p.velocity.size() * sizeof(float));
  }
  fnv(h, &steps_, sizeof steps_);
  return h;
}

void ParameterBank::require_writable(const char* what) const {
  if (*readers_ != 0) throw BankLockedError(std::string("parameter bank is read-locked; cannot ") + what);
}

void ParameterBank::apply_sgd(const std::vector<Param*>& params, const SgdConfig& cfg) {
  require_writable("apply an update");
  for (Param* p : params) {
    if (p->kind == ParamKind::Statistic) continue;
    const auto& grad = p->node->ensure_grad();
    sgd_step(p->node->value, grad, p->velocity, cfg, p->kind == ParamKind::Weight);
  }
  ++steps_;
}

ParameterBank::ReadLock::ReadLock(const ParameterBank& bank) : counter_(bank.readers_.get()) { ++*counter_; }
ParameterBank::ReadLock::ReadLock(ReadLock&& other) noexcept : counter_(other.counter_) { other.counter_ = nullptr; }
ParameterBank::ReadLock::~ReadLock() {
  if (counter_) --*counter_;
}

ParameterBank ParameterBank::clone() const {
  ParameterBank out;
  out.init_rng_ = init_rng_;
  out.steps_ = steps_;
  for (const auto& [key, p] : entries_) out.restore_entry(key, p.kind, p.value(), p.velocity);
  return out;
}

void ParameterBank::copy_values_from(const ParameterBank& other, const std::vector<std::string>& keys) {
  require_writable("copy weights");
  for (const auto& key : keys) {
    const Param* src = other.find(key);
    Param* dst = find(key);
    if (!src || !dst) continue;
    dst->value() = src->value();
    dst->velocity = src->velocity;
  }
}

void ParameterBank::restore_entry(const std::string& key, ParamKind kind, Tensor<float> value,
                                  Tensor<float> velocity) {
  require_writable("restore an entry");
  Param p;
  p.node = std::make_shared<ag::Node<float>>();
  p.node->value = std::move(value);
  p.node->requires_grad = kind != ParamKind::Statistic;
  p.velocity = std::move(velocity);
  p.kind = kind;
  entries_.insert_or_assign(key, std::move(p));
}

namespace {

void init_op(ParameterBank& bank, const NodeKey& key, int channels) {
  const int c = channels;
  const std::string pre = key.prefix();
  const int k = op_kernel(key.op);
  auto bn = [&]() {
    bank.get_or_init(pre + "bn_g", {c}, ParamKind::NoDecay, InitRule::Ones);
    bank.get_or_init(pre + "bn_b", {c}, ParamKind::NoDecay, InitRule::Zeros);
    bank.get_or_init(pre + "bn_mean", {c}, ParamKind::Statistic, InitRule::Zeros);
    bank.get_or_init(pre + "bn_var", {c}, ParamKind::Statistic, InitRule::Ones);
  };
  if (key.op == Op::DW3 || key.op == Op::DW5) {
    bank.get_or_init(pre + "dw_w", {c, 1, k, k}, ParamKind::Weight, InitRule::He, k * k);
    bank.get_or_init(pre + "dw_b", {c}, ParamKind::NoDecay, InitRule::Zeros);
    bank.get_or_init(pre + "pw_w", {c, c, 1, 1}, ParamKind::Weight, InitRule::He, c);
    bank.get_or_init(pre + "pw_b", {c}, ParamKind::NoDecay, InitRule::Zeros);
    bn();
  } else if (op_is_fr(key.op)) {
    const int theta = ops::eca_kernel_size(c);
    bank.get_or_init(pre + "conv_w", {c, c, k, k}, ParamKind::Weight, InitRule::He, c * k * k);
    bn();
    bank.get_or_init(pre + "eca_w", {theta}, ParamKind::Weight, InitRule::He, theta);
    bank.get_or_init(pre + "eca_b", {1}, ParamKind::NoDecay, InitRule::Zeros);
  }
}

// Node numbers of a producer's computation nodes, or {0} for the network input.
std::vector<int> producer_pieces(const BankLayout& layout, int producer) {
  if (producer == kNetworkInput) return {0};
  const auto role = layout.plan.instances[static_cast<std::size_t>(producer)].role;
  std::vector<int> out;
  for (int d = 0; d < layout.n_c; ++d) out.push_back(source_count(role) + 1 + d);
  return out;
}

int producer_channels(const BlockPlan& plan, int producer) {
  return producer == kNetworkInput ? plan.in_channels : plan.instances[static_cast<std::size_t>(producer)].channels;
}

}  // namespace

void initialize_search_space(ParameterBank& bank, const BankLayout& layout) {
  const auto& plan = layout.plan;
  for (int b = 0; b < plan.block_count(); ++b) {
    const auto& inst = plan.instances[static_cast<std::size_t>(b)];
    const int c = inst.channels;
    const int sources = source_count(inst.role);
    for (int s = 1; s <= sources; ++s) {
      const int producer = s == 1 ? inst.prev1 : inst.prev2;
      const int cp = producer_channels(plan, producer);
      for (int piece : producer_pieces(layout, producer)) {
        bank.get_or_init(projection_weight_key(b, s, piece), {c, cp, 1, 1}, ParamKind::Weight, InitRule::He);
      }
      bank.get_or_init(projection_bn_key(b, s, "g"), {c}, ParamKind::NoDecay, InitRule::Ones);
      bank.get_or_init(projection_bn_key(b, s, "b"), {c}, ParamKind::NoDecay, InitRule::Zeros);
      bank.get_or_init(projection_bn_key(b, s, "mean"), {c}, ParamKind::Statistic, InitRule::Zeros);
      bank.get_or_init(projection_bn_key(b, s, "var"), {c}, ParamKind::Statistic, InitRule::Ones);
    }
    for (int d = 0; d < layout.n_c; ++d) {
      for (int slot = 1; slot <= 2; ++slot) {
        for (Op op : layout.ops) init_op(bank, NodeKey{b, sources + 1 + d, slot, op}, c);
      }
    }
  }
  const int last = plan.block_count() - 1;
  const auto& fin = plan.instances[static_cast<std::size_t>(last)];
  for (int piece : producer_pieces(layout, last)) {
    bank.get_or_init(head_weight_key(piece), {fin.channels, layout.classes}, ParamKind::Weight, InitRule::He,
                     fin.channels * layout.n_c);
  }
  bank.get_or_init(kHeadBias, {layout.classes}, ParamKind::NoDecay, InitRule::Zeros);
}

std::size_t expected_entry_count(const BankLayout& layout) {
  std::size_t per_slot = 0;
  for (Op op : layout.ops) {
    if (op == Op::DW3 || op == Op::DW5) per_slot += 8;
    if (op_is_fr(op)) per_slot += 7;
  }
  const std::size_t blocks = layout.plan.instances.size();
  std::size_t count = blocks * static_cast<std::size_t>(layout.n_c) * 2 * per_slot;
  for (const auto& inst : layout.plan.instances) {
    for (int s = 1; s <= source_count(inst.role); ++s) {
      const int producer = s == 1 ? inst.prev1 : inst.prev2;
      count += (producer == kNetworkInput ? 1 : static_cast<std::size_t>(layout.n_c)) + 4;
    }
  }
  return count + static_cast<std::size_t>(layout.n_c) + 1;
}

ExecutableNetwork::ExecutableNetwork(PhenotypeGraph graph, ParameterBank& bank, const NetworkOptions& options)
    : graph_(std::move(graph)), bank_(&bank), options_(options) {
  for (const auto& blk : graph_.blocks) {
    BlockBinding bb;
    for (std::size_t s = 0; s < blk.sources.size(); ++s) {
      const auto& src = blk.sources[s];
      const int slot = static_cast<int>(s) + 1;
      ProjectionBinding pb;
      pb.producer = src.producer;
      pb.stride = src.stride;
      if (src.producer == kNetworkInput) {
        pb.pieces = {0};
      } else {
        pb.pieces = graph_.blocks[static_cast<std::size_t>(src.producer)].leaves;
      }
      for (int piece : pb.pieces) pb.weights.push_back(bind(projection_weight_key(blk.instance, slot, piece)));
      pb.gamma = bind(projection_bn_key(blk.instance, slot, "g"));
      pb.beta = bind(projection_bn_key(blk.instance, slot, "b"));
      pb.mean = bind(projection_bn_key(blk.instance, slot, "mean"));
      pb.var = bind(projection_bn_key(blk.instance, slot, "var"));
      bb.sources.push_back(std::move(pb));
    }
    for (const auto& node : blk.nodes) {
      NodeBinding nb;
      nb.node = node.node;
      nb.inputs = node.inputs;
      for (int slot = 0; slot < 2; ++slot) {
        OpBinding ob;
        ob.op = node.ops[static_cast<std::size_t>(slot)];
        ob.stride = node.strides[static_cast<std::size_t>(slot)];
        for (const auto& key : op_param_keys(NodeKey{blk.instance, node.node, slot + 1, ob.op})) {
          ob.p.push_back(bind(key));
        }
        nb.ops[static_cast<std::size_t>(slot)] = std::move(ob);
      }
      bb.nodes.push_back(std::move(nb));
    }
    bb.leaves = blk.leaves;
    blocks_.push_back(std::move(bb));
  }
  for (int leaf : graph_.final_block().leaves) head_weights_.push_back(bind(head_weight_key(leaf)));
  head_bias_ = bind(kHeadBias);
  if (head_bias_->value().size() != static_cast<std::size_t>(options_.classes)) {
    throw std::invalid_argument("instantiate: bank head has " + std::to_string(head_bias_->value().size()) +
                                " classes, network expects " + std::to_string(options_.classes));
  }
}

Param* ExecutableNetwork::bind(const std::string& key) {
  Param* p = bank_->find(key);
  if (!p) throw std::out_of_range("instantiate: parameter bank has no entry " + key);
  if (std::find(bound_keys_.begin(), bound_keys_.end(), key) == bound_keys_.end()) {
    bound_keys_.push_back(key);
    if (p->kind != ParamKind::Statistic) trainable_.push_back(p);
  }
  return p;
}

std::size_t ExecutableNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const Param* p : trainable_) n += p->value().size();
  return n;
}

namespace {

using V = ag::Var<float>;

V leaf(Param* p) { return V(p->node); }

}  // namespace

ag::Var<float> ExecutableNetwork::forward(const Tensor<float>& images, Mode mode, Rng* dropout_rng) const {
  const bool training = mode == Mode::Train;
  if (training) {
    bank_->require_writable("run a training forward pass");
    if (!dropout_rng) throw std::invalid_argument("forward: training mode needs a dropout RNG");
  }
  if (images.rank() != 4 || images.dim(1) != graph_.in_channels || images.dim(2) != graph_.in_h ||
      images.dim(3) != graph_.in_w) {
    throw std::invalid_argument("forward: input " + shape_str(images.shape()) + " does not match the network input");
  }
  ops::BatchNormOptions bn{training, options_.bn_momentum, options_.bn_eps};
  const V input = V::constant(images);
  std::vector<std::vector<V>> outputs;  // leaf outputs per block
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& bb = blocks_[b];
    const auto& geom = graph_.blocks[b];
    std::vector<V> values(static_cast<std::size_t>(geom.first_node() + static_cast<int>(bb.nodes.size())));
    for (std::size_t s = 0; s < bb.sources.size(); ++s) {
      const auto& pb = bb.sources[s];
      V acc;
      for (std::size_t i = 0; i < pb.pieces.size(); ++i) {
        const V& piece = pb.producer == kNetworkInput ? input : outputs[static_cast<std::size_t>(pb.producer)][i];
        V term = ops::conv2d(piece, leaf(pb.weights[i]), V{}, pb.stride);
        acc = acc ? ops::add(acc, term) : term;
      }
      values[s + 1] = ops::batch_norm(acc, leaf(pb.gamma), leaf(pb.beta), &pb.mean->value(), &pb.var->value(), bn);
    }
    for (const auto& nb : bb.nodes) {
      V sum;
      for (int slot = 0; slot < 2; ++slot) {
        const auto& ob = nb.ops[static_cast<std::size_t>(slot)];
        const V& in = values[static_cast<std::size_t>(nb.inputs[static_cast<std::size_t>(slot)])];
        V out;
        switch (ob.op) {
          case Op::Identity: out = ops::subsample(in, ob.stride); break;
          case Op::DW3:
          case Op::DW5:
            out = ops::relu(ops::batch_norm(
                ops::depthwise_separable_conv(in, leaf(ob.p[0]), leaf(ob.p[1]), leaf(ob.p[2]), leaf(ob.p[3]),
                                              ob.stride),
                leaf(ob.p[4]), leaf(ob.p[5]), &ob.p[6]->value(), &ob.p[7]->value(), bn));
            break;
          case Op::FR3:
          case Op::FR5: {
            ops::FrWeights<float> w{leaf(ob.p[0]), leaf(ob.p[1]), leaf(ob.p[2]), &ob.p[3]->value(),
                                    &ob.p[4]->value(), leaf(ob.p[5]), leaf(ob.p[6])};
            out = ops::fr_conv(in, w, ob.stride, bn).output;
            break;
          }
          case Op::Avg: out = ops::pool(ops::relu(in), ops::PoolKind::Avg, 3, ob.stride); break;
          case Op::Max: out = ops::pool(ops::relu(in), ops::PoolKind::Max, 3, ob.stride); break;
        }
        sum = sum ? ops::add(sum, out) : out;
      }
      values[static_cast<std::size_t>(nb.node)] = sum;
    }
    std::vector<V> leaves;
    for (int l : bb.leaves) leaves.push_back(values[static_cast<std::size_t>(l)]);
    outputs.push_back(std::move(leaves));
  }
  Rng unused;
  V logits;
  const auto& last = outputs.back();
  for (std::size_t i = 0; i < last.size(); ++i) {
    V features = ops::dropout(ops::global_avg_pool(last[i]), options_.dropout, training,
                              dropout_rng ? *dropout_rng : unused);
    V term = ops::linear(features, leaf(head_weights_[i]), i == 0 ? leaf(head_bias_) : V{});
    logits = logits ? ops::add(logits, term) : term;
  }
  return logits;
}

ExecutableNetwork instantiate(const Chromosome& c, const BlockPlan& plan, ParameterBank& bank,
                              const NetworkOptions& options) {
  return ExecutableNetwork(decode_topology(c, plan), bank, options);
}

float train_step(const ExecutableNetwork& net, const Tensor<float>& images, std::span<const int> labels,
                 const SgdConfig& cfg, Rng& dropout_rng) {
  net.bank().require_writable("train");
  for (Param* p : net.parameters()) p->node->zero_grad();
  V logits = net.forward(images, Mode::Train, &dropout_rng);
  V loss = ops::softmax_cross_entropy(logits, labels);
  loss.backward();
  net.bank().apply_sgd(net.parameters(), cfg);
  return loss.value()[0];
}

EvalView::EvalView(const ExecutableNetwork& net) : net_(&net), lock_(net.bank().lock_reads()) {}

Tensor<float> EvalView::logits(const Tensor<float>& images) const {
  ag::NoGradGuard no_grad;
  return net_->forward(images, Mode::Eval).value();
}

std::vector<int> EvalView::predict(const Tensor<float>& images) const {
  const Tensor<float> z = logits(images);
  const int n = z.dim(0), k = z.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* row = z.data() + static_cast<std::size_t>(i) * k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

double EvalView::accuracy(const Tensor<float>& images, std::span<const int> labels, int batch_size) const {
  const int n = images.dim(0);
  if (n == 0) throw std::invalid_argument("accuracy: empty evaluation set");
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("accuracy: label count mismatch");
  const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  int correct = 0;
  for (int start = 0; start < n; start += batch_size) {
    const int m = std::min(batch_size, n - start);
    Tensor<float> chunk({m, c, h, w});
    std::memcpy(chunk.data(), images.data() + per * start, per * m * sizeof(float));
    const auto pred = predict(chunk);
    for (int i = 0; i < m; ++i) correct += pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(start + i)];
  }
  return static_cast<double>(correct) / n;
}

void EvalView::apply_update(const SgdConfig&) const {
  throw BankLockedError("evaluation view: parameter updates are not permitted");
}

EvalView inherited_eval_guard(const ExecutableNetwork& net) { return EvalView(net); }

}  // namespace dagnas
