#pragma once

// Blocks and full architectures: KPConv stem, inverted bottleneck blocks
// (with optional double shortcut), strided layer transitions, encoder/decoder
// assembly, DropPath on stacked batches, segmentation and classification
// heads.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpx/checkpoint.hpp"
#include "kpx/kernel_points.hpp"
#include "kpx/kpops.hpp"
#include "kpx/sampling.hpp"
#include "kpx/tensor.hpp"

namespace kpx {

enum class OperatorKind { kpconvx, kpconvd };
enum class HeadKind { segmentation, classification };

// Widths grow by sqrt(2) per layer, snapped to the channel granularity so
// they stay divisible by 16 (64 -> [64, 96, 128, 192, 256]).
inline std::vector<std::size_t> channel_schedule(std::size_t initial,
                                                 std::size_t layers) {
  if (initial % 16 != 0)
    throw std::invalid_argument("channel_schedule: initial width must be a "
                                "multiple of 16");
  std::vector<std::size_t> out{initial};
  const double q = std::sqrt(2.0);
  const std::size_t grain = 32;
  while (out.size() < layers) {
    double target = double(out.back()) * q;
    std::size_t w = std::size_t(std::llround(target / grain)) * grain;
    if (w <= out.back()) w = (out.back() / grain + 1) * grain;
    out.push_back(w);
  }
  return out;
}

struct ArchitectureConfig {
  std::string name = "custom";
  HeadKind head = HeadKind::segmentation;
  OperatorKind op = OperatorKind::kpconvx;
  std::size_t n_class = 13;
  std::size_t in_channels = 5;
  std::vector<std::size_t> blocks_per_layer{3, 3, 9, 12, 3};
  std::size_t decoder_blocks = 1;
  std::size_t initial_channels = 64;
  std::vector<std::size_t> channels;  // derived if empty
  std::vector<std::size_t> neighbors{12, 16, 20, 20, 20};
  std::vector<std::size_t> shell_counts{1, 14, 28};
  double conv_radius = 2.1;
  double grid_ratio = 2.2;
  double cell0 = 0.04;
  std::size_t groups = 8;  // modulation group size; 0 means G = C per layer
  double droppath_rate = 0.1;
  bool double_shortcut = false;
  std::size_t expansion = 4;
  double lrelu_slope = 0.1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-6;
  std::uint64_t kernel_seed = 42;

  std::size_t layers() const { return blocks_per_layer.size(); }

  void finalize() {
    if (channels.empty())
      channels = channel_schedule(initial_channels, layers());
    validate();
  }

  void validate() const {
    if (blocks_per_layer.size() != channels.size() ||
        blocks_per_layer.size() != neighbors.size())
      throw std::invalid_argument(
          "config: blocks/channels/neighbors lists must have equal length");
    for (auto c : channels)
      if (c % 16 != 0 || (groups && c % groups != 0))
        throw std::invalid_argument("config: channel width " +
                                    std::to_string(c) +
                                    " must be divisible by 16 and by G=" +
                                    std::to_string(groups));
    if (shell_counts.empty() || shell_counts[0] != 1)
      throw std::invalid_argument("config: shell counts must start with 1");
  }
};

inline const char* to_string(OperatorKind k) {
  return k == OperatorKind::kpconvx ? "kpconvx" : "kpconvd";
}
inline const char* to_string(HeadKind h) {
  return h == HeadKind::segmentation ? "segmentation" : "classification";
}

inline nlohmann::json to_json(const ArchitectureConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["head"] = to_string(c.head);
  j["operator"] = to_string(c.op);
  j["n_class"] = c.n_class;
  j["in_channels"] = c.in_channels;
  j["blocks_per_layer"] = c.blocks_per_layer;
  j["decoder_blocks"] = c.decoder_blocks;
  j["initial_channels"] = c.initial_channels;
  j["channels"] = c.channels;
  j["neighbors"] = c.neighbors;
  j["shell_counts"] = c.shell_counts;
  j["conv_radius"] = c.conv_radius;
  j["grid_ratio"] = c.grid_ratio;
  j["cell0"] = c.cell0;
  j["groups"] = c.groups;
  j["droppath_rate"] = c.droppath_rate;
  j["double_shortcut"] = c.double_shortcut;
  j["expansion"] = c.expansion;
  j["lrelu_slope"] = c.lrelu_slope;
  j["bn_momentum"] = c.bn_momentum;
  j["bn_eps"] = c.bn_eps;
  j["kernel_seed"] = c.kernel_seed;
  return j;
}

inline ArchitectureConfig config_from_json(const nlohmann::json& j) {
  ArchitectureConfig c;
  c.name = j.value("name", c.name);
  std::string head = j.value("head", std::string("segmentation"));
  c.head = head == "classification" ? HeadKind::classification
                                    : HeadKind::segmentation;
  std::string op = j.value("operator", std::string("kpconvx"));
  c.op = op == "kpconvd" ? OperatorKind::kpconvd : OperatorKind::kpconvx;
  c.n_class = j.value("n_class", c.n_class);
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("blocks_per_layer"))
    c.blocks_per_layer = j["blocks_per_layer"].get<std::vector<std::size_t>>();
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.initial_channels = j.value("initial_channels", c.initial_channels);
  if (j.contains("channels"))
    c.channels = j["channels"].get<std::vector<std::size_t>>();
  if (j.contains("neighbors"))
    c.neighbors = j["neighbors"].get<std::vector<std::size_t>>();
  if (j.contains("shell_counts"))
    c.shell_counts = j["shell_counts"].get<std::vector<std::size_t>>();
  c.conv_radius = j.value("conv_radius", c.conv_radius);
  c.grid_ratio = j.value("grid_ratio", c.grid_ratio);
  c.cell0 = j.value("cell0", c.cell0);
  c.groups = j.value("groups", c.groups);
  c.droppath_rate = j.value("droppath_rate", c.droppath_rate);
  c.double_shortcut = j.value("double_shortcut", c.double_shortcut);
  c.expansion = j.value("expansion", c.expansion);
  c.lrelu_slope = j.value("lrelu_slope", c.lrelu_slope);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_eps = j.value("bn_eps", c.bn_eps);
  c.kernel_seed = j.value("kernel_seed", c.kernel_seed);
  c.finalize();
  return c;
}

// Built-in presets, overridable via a config file.
inline ArchitectureConfig preset_config(const std::string& name) {
  ArchitectureConfig c;
  c.name = name;
  if (name == "kpconvx-l") {
    c.op = OperatorKind::kpconvx;
  } else if (name == "kpconvx-s") {
    c.op = OperatorKind::kpconvx;
    c.blocks_per_layer = {2, 2, 2, 8, 2};
  } else if (name == "kpconvd-l") {
    c.op = OperatorKind::kpconvd;
  } else if (name == "kpconvd-s") {
    c.op = OperatorKind::kpconvd;
    c.blocks_per_layer = {2, 2, 2, 8, 2};
  } else if (name == "tiny-seg" || name == "tiny-cls" ||
             name == "tiny-seg-d" || name == "tiny-cls-d") {
    c.op = (name.back() == 'd') ? OperatorKind::kpconvd : OperatorKind::kpconvx;
    c.head = (name.substr(0, 8) == "tiny-cls") ? HeadKind::classification
                                               : HeadKind::segmentation;
    c.blocks_per_layer = {1, 1, 1, 2, 1};
    c.initial_channels = 16;
    c.neighbors = {8, 8, 10, 10, 10};
    c.shell_counts = {1, 6};
    c.in_channels = 2;  // constant one + z
    c.n_class = 4;
    c.droppath_rate = 0.1;
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  c.finalize();
  return c;
}

// ---------------------------------------------------------------------------
// DropPath

struct DropPathMask {
  std::vector<std::uint8_t> keep;  // one flag per batch element
};

// Zeroes whole batch elements and rescales the kept ones by 1/(1-rate).
// In eval mode (training=false) this is the identity.
template <typename T>
Tensor<T> droppath_apply(Tensor<T> x, const std::vector<std::size_t>& lengths,
                         double rate, bool training, std::mt19937_64& rng,
                         const DropPathMask* mask_in = nullptr,
                         DropPathMask* mask_out = nullptr) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("droppath: rate must be in [0,1)");
  DropPathMask mask;
  if (mask_in) {
    mask = *mask_in;
  } else {
    mask.keep.resize(lengths.size(), 1);
    if (training && rate > 0.0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& k : mask.keep) k = u(rng) < rate ? 0 : 1;
    }
  }
  if (mask_out) *mask_out = mask;
  if (!training || rate == 0.0) return x;
  std::vector<T> factors(x.shape()[0]);
  const T scale_kept = T(1.0 / (1.0 - rate));
  std::size_t base = 0;
  for (std::size_t e = 0; e < lengths.size(); ++e) {
    const T f = mask.keep[e] ? scale_kept : T(0);
    for (std::size_t i = 0; i < lengths[e]; ++i) factors[base + i] = f;
    base += lengths[e];
  }
  return row_scale(x, std::move(factors));
}

// ---------------------------------------------------------------------------
// Parameter containers

template <typename T>
struct Linear {
  Tensor<T> w, b;

  static Linear make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    Linear l;
    l.w = randn<T>({in, out}, rng, T(1) / std::sqrt(T(in)));
    l.b = Tensor<T>::zeros({out});
    l.w.set_requires_grad();
    l.b.set_requires_grad();
    return l;
  }
  Tensor<T> operator()(Tensor<T> x) const { return add(matmul(x, w), b); }
};

// One named learnable tensor with a module tag for the parameter audit.
template <typename T>
using ParamVisitor = std::function<void(const std::string& name,
                                        const std::string& tag, Tensor<T>&)>;

struct AuditLine {
  std::string tag;
  std::size_t count = 0;
};

struct ParamAudit {
  std::vector<AuditLine> by_tag;
  std::size_t total = 0;

  std::size_t tag_count(const std::string& tag) const {
    for (const auto& l : by_tag)
      if (l.tag == tag) return l.count;
    return 0;
  }
};

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
struct BlockParams {
  DepthwiseKernel<T> conv;
  std::optional<ModulationHead<T>> head;
  BNState<T> bn_conv, bn_up, bn_down;
  Linear<T> up, down;
  std::size_t width = 0, width_hidden = 0;

  static BlockParams make(std::size_t C, std::size_t C_out, std::size_t K,
                          std::size_t E, OperatorKind op, std::size_t G,
                          double bn_momentum, double bn_eps,
                          std::mt19937_64& rng) {
    BlockParams b;
    b.width = C;
    b.width_hidden = E * C;
    b.conv = DepthwiseKernel<T>::make(K, C, rng);
    if (op == OperatorKind::kpconvx)
      b.head = ModulationHead<T>::make(C, K, G == 0 ? C : G, rng);
    b.bn_conv = BNState<T>::make(C);
    b.bn_up = BNState<T>::make(E * C);
    b.bn_down = BNState<T>::make(C_out);
    b.up = Linear<T>::make(C, E * C, rng);
    b.down = Linear<T>::make(E * C, C_out, rng);
    for (auto* s : {&b.bn_conv, &b.bn_up, &b.bn_down}) {
      s->momentum = T(bn_momentum);
      s->eps = T(bn_eps);
    }
    return b;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".conv.w", "conv", conv.w);
    if (head) {
      fn(prefix + ".head.w1", "modulation_head", head->w1);
      fn(prefix + ".head.b1", "modulation_head", head->b1);
      fn(prefix + ".head.w2", "modulation_head", head->w2);
      fn(prefix + ".head.b2", "modulation_head", head->b2);
    }
    fn(prefix + ".up.w", "mlp", up.w);
    fn(prefix + ".up.b", "mlp", up.b);
    fn(prefix + ".down.w", "mlp", down.w);
    fn(prefix + ".down.b", "mlp", down.b);
    fn(prefix + ".bn_conv.gamma", "norm", bn_conv.gamma);
    fn(prefix + ".bn_conv.beta", "norm", bn_conv.beta);
    fn(prefix + ".bn_up.gamma", "norm", bn_up.gamma);
    fn(prefix + ".bn_up.beta", "norm", bn_up.beta);
    fn(prefix + ".bn_down.gamma", "norm", bn_down.gamma);
    fn(prefix + ".bn_down.beta", "norm", bn_down.beta);
  }
};

// Shared per-layer geometry, computed once per forward pass.
template <typename T>
struct LayerContext {
  std::vector<Vec3> points;
  std::vector<std::size_t> lengths;
  double cell = 0.0;
  NeighborTable self_table;
  InfluenceTable<T> self_infl;
  InfluenceTable<T> self_infl_full;  // layer 0 only, for the stem
  PoolMap pool_to_next;
  NeighborTable strided_table;       // next-layer queries vs this layer
  InfluenceTable<T> strided_infl;
};

// ---------------------------------------------------------------------------
// Model

template <typename T>
class Model {
 public:
  Model(ArchitectureConfig cfg, std::uint64_t param_seed,
        std::optional<KernelDisposition> disp = std::nullopt)
      : cfg_(std::move(cfg)) {
    cfg_.finalize();
    disp_ = disp ? std::move(*disp)
                 : optimize_disposition(cfg_.shell_counts, cfg_.conv_radius,
                                        cfg_.kernel_seed);
    std::mt19937_64 rng(param_seed);
    const auto& ch = cfg_.channels;
    const std::size_t K = disp_.K();
    const std::size_t L = cfg_.layers();
    stem_ = DenseKernel<T>::make(K, cfg_.in_channels, ch[0], rng);
    stem_bn_ = BNState<T>::make(ch[0]);
    for (std::size_t l = 0; l < L; ++l) {
      std::vector<BlockParams<T>> blocks;
      std::size_t n = cfg_.blocks_per_layer[l];
      if (l > 0) {
        transitions_.push_back(Linear<T>::make(ch[l - 1], ch[l], rng));
        transition_bns_.push_back(BNState<T>::make(ch[l]));
      }
      for (std::size_t b = 0; b < n; ++b)
        blocks.push_back(BlockParams<T>::make(ch[l], ch[l], K, cfg_.expansion,
                                              cfg_.op, cfg_.groups,
                                              cfg_.bn_momentum, cfg_.bn_eps,
                                              rng));
      encoder_.push_back(std::move(blocks));
    }
    if (cfg_.head == HeadKind::segmentation) {
      for (std::size_t l = L - 1; l-- > 0;) {
        decoder_fusions_.push_back(
            Linear<T>::make(ch[l + 1] + ch[l], ch[l], rng));
        decoder_fusion_bns_.push_back(BNState<T>::make(ch[l]));
        std::vector<BlockParams<T>> blocks;
        for (std::size_t b = 0; b < cfg_.decoder_blocks; ++b)
          blocks.push_back(BlockParams<T>::make(ch[l], ch[l], K,
                                                cfg_.expansion, cfg_.op,
                                                cfg_.groups, cfg_.bn_momentum,
                                                cfg_.bn_eps, rng));
        decoder_.push_back(std::move(blocks));
      }
      head1_ = Linear<T>::make(ch[0], 64, rng);
      head_bn_ = BNState<T>::make(64);
      head2_ = Linear<T>::make(64, cfg_.n_class, rng);
    } else {
      head1_ = Linear<T>::make(ch.back(), 256, rng);
      head_bn_ = BNState<T>::make(256);
      head2_ = Linear<T>::make(256, cfg_.n_class, rng);
    }
    for (auto* s : {&stem_bn_, &head_bn_}) {
      s->momentum = T(cfg_.bn_momentum);
      s->eps = T(cfg_.bn_eps);
    }
  }

  const ArchitectureConfig& config() const { return cfg_; }
  const KernelDisposition& disposition() const { return disp_; }

  // Test hook: forces all modulations to one, reducing KPConvX to KPConvD.
  bool modulation_override_one = false;

  Tensor<T> forward(const StackedCloud& cloud, bool training,
                    std::mt19937_64& droppath_rng,
                    OpCounter* counter = nullptr) {
    cloud.check();
    auto ctx = build_contexts(cloud);
    // stem: full standard KPConv for strong initial features
    Tensor<T> f = input_features(cloud);
    f = kpconv_dense(f, ctx[0].self_table, ctx[0].self_infl_full, stem_,
                     counter);
    f = leaky_relu(batch_norm(f, stem_bn_, training), T(cfg_.lrelu_slope));

    const std::size_t L = cfg_.layers();
    std::vector<Tensor<T>> skips;
    for (std::size_t l = 0; l < L; ++l) {
      std::optional<Tensor<T>> high;  // double-shortcut chain
      for (std::size_t b = 0; b < encoder_[l].size(); ++b) {
        const bool strided = l > 0 && b == 0;
        if (strided) {
          f = leaky_relu(
              batch_norm(transitions_[l - 1](f), transition_bns_[l - 1],
                         training),
              T(cfg_.lrelu_slope));
          Tensor<T> pooled = pool_max(f, ctx[l - 1].pool_to_next);
          f = run_block(encoder_[l][b], f, pooled, ctx[l - 1].strided_table,
                        ctx[l - 1].strided_infl, ctx[l].lengths, training,
                        droppath_rng, high, counter);
        } else {
          f = run_block(encoder_[l][b], f, f, ctx[l].self_table,
                        ctx[l].self_infl, ctx[l].lengths, training,
                        droppath_rng, high, counter);
        }
      }
      if (cfg_.head == HeadKind::segmentation && l + 1 < L) skips.push_back(f);
    }

    if (cfg_.head == HeadKind::classification) {
      Tensor<T> g = global_average_pool(f, ctx.back().lengths);
      g = leaky_relu(batch_norm(head1_(g), head_bn_, training),
                     T(cfg_.lrelu_slope));
      return head2_(g);
    }

    // decoder: upsample, fuse with the skip, then decoder blocks
    for (std::size_t d = 0; d < decoder_.size(); ++d) {
      const std::size_t l = L - 2 - d;  // target layer
      Tensor<T> up = grid_upsample(f, ctx[l].pool_to_next);
      Tensor<T> fused = concat_cols(up, skips[l]);
      f = leaky_relu(
          batch_norm(decoder_fusions_[d](fused), decoder_fusion_bns_[d],
                     training),
          T(cfg_.lrelu_slope));
      std::optional<Tensor<T>> high;
      for (auto& blk : decoder_[d])
        f = run_block(blk, f, f, ctx[l].self_table, ctx[l].self_infl,
                      ctx[l].lengths, training, droppath_rng, high, counter);
    }
    Tensor<T> h = leaky_relu(batch_norm(head1_(f), head_bn_, training),
                             T(cfg_.lrelu_slope));
    return head2_(h);
  }

  void visit_params(const ParamVisitor<T>& fn) {
    fn("stem.W", "stem", stem_.W);
    fn("stem.bn.gamma", "norm", stem_bn_.gamma);
    fn("stem.bn.beta", "norm", stem_bn_.beta);
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      if (l > 0) {
        auto p = "enc" + std::to_string(l) + ".transition";
        fn(p + ".w", "transition", transitions_[l - 1].w);
        fn(p + ".b", "transition", transitions_[l - 1].b);
        fn(p + ".bn.gamma", "norm", transition_bns_[l - 1].gamma);
        fn(p + ".bn.beta", "norm", transition_bns_[l - 1].beta);
      }
      for (std::size_t b = 0; b < encoder_[l].size(); ++b)
        encoder_[l][b].visit(
            "enc" + std::to_string(l) + ".block" + std::to_string(b), fn);
    }
    for (std::size_t d = 0; d < decoder_.size(); ++d) {
      auto p = "dec" + std::to_string(d);
      fn(p + ".fuse.w", "decoder_fusion", decoder_fusions_[d].w);
      fn(p + ".fuse.b", "decoder_fusion", decoder_fusions_[d].b);
      fn(p + ".fuse.bn.gamma", "norm", decoder_fusion_bns_[d].gamma);
      fn(p + ".fuse.bn.beta", "norm", decoder_fusion_bns_[d].beta);
      for (std::size_t b = 0; b < decoder_[d].size(); ++b)
        decoder_[d][b].visit(p + ".block" + std::to_string(b), fn);
    }
    fn("head.l1.w", "head", head1_.w);
    fn("head.l1.b", "head", head1_.b);
    fn("head.bn.gamma", "norm", head_bn_.gamma);
    fn("head.bn.beta", "norm", head_bn_.beta);
    fn("head.l2.w", "head", head2_.w);
    fn("head.l2.b", "head", head2_.b);
  }

  ParamAudit audit() {
    ParamAudit a;
    visit_params([&a](const std::string&, const std::string& tag,
                      Tensor<T>& t) {
      a.total += t.size();
      for (auto& l : a.by_tag)
        if (l.tag == tag) {
          l.count += t.size();
          return;
        }
      a.by_tag.push_back({tag, t.size()});
    });
    return a;
  }

  void save(const std::string& path) {
    std::vector<CheckpointEntry> entries;
    visit_params([&entries](const std::string& name, const std::string&,
                            Tensor<T>& t) {
      CheckpointEntry e;
      e.name = name;
      e.shape = t.shape();
      e.values.assign(t.values().begin(), t.values().end());
      entries.push_back(std::move(e));
    });
    visit_buffers([&entries](const std::string& name, std::vector<T>& buf) {
      CheckpointEntry e;
      e.name = name;
      e.shape = {buf.size()};
      e.values.assign(buf.begin(), buf.end());
      entries.push_back(std::move(e));
    });
    save_checkpoint(path, entries, to_json(cfg_).dump());
  }

  void load(const std::string& path) {
    auto entries = load_checkpoint(path);
    std::unordered_map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    auto fetch = [&by_name, &path](const std::string& name) {
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw std::runtime_error(path + ": missing checkpoint entry " + name);
      return it->second;
    };
    visit_params([&](const std::string& name, const std::string&,
                     Tensor<T>& t) {
      const auto* e = fetch(name);
      if (e->values.size() != t.size())
        throw std::runtime_error(path + ": size mismatch for " + name);
      for (std::size_t i = 0; i < t.size(); ++i)
        t.values()[i] = T(e->values[i]);
    });
    visit_buffers([&](const std::string& name, std::vector<T>& buf) {
      const auto* e = fetch(name);
      if (e->values.size() != buf.size())
        throw std::runtime_error(path + ": size mismatch for " + name);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = T(e->values[i]);
    });
  }

  static ArchitectureConfig config_from_checkpoint(const std::string& path) {
    std::string meta;
    load_checkpoint(path, &meta);
    return config_from_json(nlohmann::json::parse(meta));
  }

  void visit_buffers(
      const std::function<void(const std::string&, std::vector<T>&)>& fn) {
    auto bn = [&fn](const std::string& p, BNState<T>& s) {
      fn(p + ".running_mean", s.running_mean);
      fn(p + ".running_var", s.running_var);
    };
    bn("stem.bn", stem_bn_);
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      if (l > 0) bn("enc" + std::to_string(l) + ".transition.bn",
                    transition_bns_[l - 1]);
      for (std::size_t b = 0; b < encoder_[l].size(); ++b) {
        auto p = "enc" + std::to_string(l) + ".block" + std::to_string(b);
        bn(p + ".bn_conv", encoder_[l][b].bn_conv);
        bn(p + ".bn_up", encoder_[l][b].bn_up);
        bn(p + ".bn_down", encoder_[l][b].bn_down);
      }
    }
    for (std::size_t d = 0; d < decoder_.size(); ++d) {
      auto p = "dec" + std::to_string(d);
      bn(p + ".fuse.bn", decoder_fusion_bns_[d]);
      for (std::size_t b = 0; b < decoder_[d].size(); ++b) {
        auto q = p + ".block" + std::to_string(b);
        bn(q + ".bn_conv", decoder_[d][b].bn_conv);
        bn(q + ".bn_up", decoder_[d][b].bn_up);
        bn(q + ".bn_down", decoder_[d][b].bn_down);
      }
    }
    bn("head.bn", head_bn_);
  }

  // Layer geometry shared by every block of a layer in one forward pass.
  std::vector<LayerContext<T>> build_contexts(const StackedCloud& cloud) {
    const std::size_t L = cfg_.layers();
    std::vector<LayerContext<T>> ctx(L);
    ctx[0].points = cloud.points;
    ctx[0].lengths = cloud.lengths;
    for (std::size_t l = 0; l < L; ++l) {
      auto& c = ctx[l];
      c.cell = cfg_.cell0 * std::pow(cfg_.grid_ratio, double(l));
      for (std::size_t e = 0; e < c.lengths.size(); ++e)
        if (c.lengths[e] == 0)
          throw std::runtime_error(
              "degenerate input: batch element " + std::to_string(e) +
              " has no points left at layer " + std::to_string(l + 1));
      const double r = cfg_.conv_radius * c.cell;
      c.self_table = knn_truncated(c.points, c.points, c.lengths, c.lengths,
                                   cfg_.neighbors[l], r);
      c.self_infl = influence<T>(c.points, c.points, c.self_table, disp_,
                                 InfluenceMode::nearest, c.cell);
      if (l == 0)
        c.self_infl_full = influence<T>(c.points, c.points, c.self_table,
                                        disp_, InfluenceMode::full_sum,
                                        c.cell);
      if (l + 1 < L) {
        StackedCloud tmp;
        tmp.points = c.points;
        tmp.lengths = c.lengths;
        const double next_cell = c.cell * cfg_.grid_ratio;
        auto [sub, map] = grid_subsample(tmp, next_cell);
        c.pool_to_next = map;
        ctx[l + 1].points = sub.points;
        ctx[l + 1].lengths = sub.lengths;
        const double next_r = cfg_.conv_radius * next_cell;
        c.strided_table =
            knn_truncated(sub.points, c.points, sub.lengths, c.lengths,
                          cfg_.neighbors[l + 1], next_r);
        c.strided_infl = influence<T>(sub.points, c.points, c.strided_table,
                                      disp_, InfluenceMode::nearest,
                                      next_cell);
      }
    }
    return ctx;
  }

  Tensor<T> input_features(const StackedCloud& cloud) const {
    if (cloud.feature_dim != cfg_.in_channels)
      throw std::invalid_argument("input cloud has " +
                                  std::to_string(cloud.feature_dim) +
                                  " feature channels, model expects " +
                                  std::to_string(cfg_.in_channels));
    std::vector<T> vals(cloud.features.begin(), cloud.features.end());
    return Tensor<T>::from({cloud.total(), cloud.feature_dim},
                           std::move(vals));
  }

 private:
  // Inverted bottleneck: conv -> up MLP -> down MLP with a low-width residual
  // and, when enabled, a high-width shortcut chained between blocks. The
  // same DropPath mask gates both additions.
  Tensor<T> run_block(BlockParams<T>& blk, Tensor<T> supports_f,
                      Tensor<T> center_f, const NeighborTable& table,
                      const InfluenceTable<T>& infl,
                      const std::vector<std::size_t>& out_lengths,
                      bool training, std::mt19937_64& rng,
                      std::optional<Tensor<T>>& high, OpCounter* counter) {
    const T slope = T(cfg_.lrelu_slope);
    Tensor<T> t;
    if (blk.head) {
      Tensor<T> m;
      if (modulation_override_one)
        m = Tensor<T>::filled({center_f.shape()[0], blk.head->K * blk.head->Cg},
                              T(1));
      else
        m = generate_modulations(center_f, *blk.head, counter);
      t = kpconvx(supports_f, m, table, infl, blk.conv, blk.head->G, counter);
    } else {
      t = kpconvd(supports_f, table, infl, blk.conv, counter);
    }
    t = leaky_relu(batch_norm(t, blk.bn_conv, training), slope);
    Tensor<T> u = leaky_relu(batch_norm(blk.up(t), blk.bn_up, training),
                             slope);
    DropPathMask mask;
    if (cfg_.double_shortcut) {
      if (high) {
        Tensor<T> ud = droppath_apply(u, out_lengths, cfg_.droppath_rate,
                                      training, rng, nullptr, &mask);
        high = add(*high, ud);
      } else {
        // first block of the chain: high path starts from the up-projection
        droppath_apply(u, out_lengths, cfg_.droppath_rate, training, rng,
                       nullptr, &mask);
        high = u;
      }
      Tensor<T> v = batch_norm(blk.down(*high), blk.bn_down, training);
      Tensor<T> vd = droppath_apply(v, out_lengths, cfg_.droppath_rate,
                                    training, rng, &mask, nullptr);
      return leaky_relu(add(center_f, vd), slope);
    }
    Tensor<T> v = batch_norm(blk.down(u), blk.bn_down, training);
    Tensor<T> vd = droppath_apply(v, out_lengths, cfg_.droppath_rate, training,
                                  rng, nullptr, &mask);
    return leaky_relu(add(center_f, vd), slope);
  }

  ArchitectureConfig cfg_;
  KernelDisposition disp_;
  DenseKernel<T> stem_;
  BNState<T> stem_bn_;
  std::vector<std::vector<BlockParams<T>>> encoder_;
  std::vector<Linear<T>> transitions_;
  std::vector<BNState<T>> transition_bns_;
  std::vector<std::vector<BlockParams<T>>> decoder_;
  std::vector<Linear<T>> decoder_fusions_;
  std::vector<BNState<T>> decoder_fusion_bns_;
  Linear<T> head1_, head2_;
  BNState<T> head_bn_;
};

// Row-wise softmax of logits; plain values, for evaluation and voting.
template <typename T>
std::vector<T> softmax_rows(const Tensor<T>& logits) {
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  std::vector<T> out(N * C);
  for (std::size_t i = 0; i < N; ++i) {
    T mx = logits.values()[i * C];
    for (std::size_t c = 1; c < C; ++c)
      mx = std::max(mx, logits.values()[i * C + c]);
    T z = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      out[i * C + c] = std::exp(logits.values()[i * C + c] - mx);
      z += out[i * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] /= z;
  }
  return out;
}

}  // namespace kpx
