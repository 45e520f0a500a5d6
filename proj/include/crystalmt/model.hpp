#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crystalmt/autograd.hpp"
#include "crystalmt/common.hpp"
#include "crystalmt/graph.hpp"
#include "crystalmt/json_util.hpp"
#include "crystalmt/rng.hpp"
#include "crystalmt/tensor.hpp"

namespace crystalmt::model {

enum class ConvVariant { simple, gated };

inline std::string to_string(ConvVariant v) {
  return v == ConvVariant::simple ? "simple" : "gated";
}

inline ConvVariant conv_variant_from_string(const std::string& s) {
  if (s == "simple") return ConvVariant::simple;
  if (s == "gated") return ConvVariant::gated;
  throw ParseError("unknown conv variant '" + s + "' (simple|gated)");
}

struct ModelConfig {
  ConvVariant conv_variant = ConvVariant::gated;
  int n_conv = 3;
  int atom_len = 64;    // learned atom feature length
  int hidden_len = 32;  // graph hidden representation length (per head)
  int n_hidden_per_task = 1;
  int n_tasks = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_conv < 1) throw ValueError("model config: n_conv < 1");
    if (atom_len < 1) throw ValueError("model config: atom_len < 1");
    if (hidden_len < 1) throw ValueError("model config: hidden_len < 1");
    if (n_hidden_per_task < 1) {
      throw ValueError("model config: n_hidden_per_task < 1");
    }
    if (n_tasks < 1) throw ValueError("model config: n_tasks < 1");
  }
};

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"conv_variant", to_string(c.conv_variant)},
              {"n_conv", c.n_conv},
              {"atom_len", c.atom_len},
              {"hidden_len", c.hidden_len},
              {"n_hidden_per_task", c.n_hidden_per_task},
              {"n_tasks", c.n_tasks},
              {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("conv_variant")) {
    c.conv_variant = conv_variant_from_string(j["conv_variant"].get<std::string>());
  }
  c.n_conv = j.value("n_conv", c.n_conv);
  c.atom_len = j.value("atom_len", c.atom_len);
  c.hidden_len = j.value("hidden_len", c.hidden_len);
  c.n_hidden_per_task = j.value("n_hidden_per_task", c.n_hidden_per_task);
  c.n_tasks = j.value("n_tasks", c.n_tasks);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

struct ConvParams {
  Tensor W_c, b_c;  // convolution weight / bias
  Tensor W_s, b_s;  // self weight / bias
};

// Per-task fully-connected head: n_hidden_per_task softplus layers followed
// by a linear scalar output. W/b run hidden layers first, output last.
struct HeadParams {
  std::vector<Tensor> W;
  std::vector<Tensor> b;
};

struct ModelParams {
  std::size_t raw_len = 0;   // raw atom feature length (d_a)
  std::size_t bond_len = 0;  // bond feature length (d_b)
  Tensor embed_W, embed_b;   // raw features -> atom_len
  std::vector<ConvParams> conv;
  std::vector<HeadParams> heads;
};

// Fixed traversal order shared by init, Adam state, checkpoints and
// gradient extraction: embedding, conv layers in order, then heads in task
// order (hidden layers first, output layer last).
template <class Params, class Fn>
void visit_params(Params& p, Fn&& fn) {
  fn("embed.W", p.embed_W, false);
  fn("embed.b", p.embed_b, true);
  for (std::size_t t = 0; t < p.conv.size(); ++t) {
    const std::string prefix = "conv" + std::to_string(t);
    fn(prefix + ".W_c", p.conv[t].W_c, false);
    fn(prefix + ".b_c", p.conv[t].b_c, true);
    fn(prefix + ".W_s", p.conv[t].W_s, false);
    fn(prefix + ".b_s", p.conv[t].b_s, true);
  }
  for (std::size_t h = 0; h < p.heads.size(); ++h) {
    for (std::size_t l = 0; l < p.heads[h].W.size(); ++l) {
      const std::string prefix =
          "head" + std::to_string(h) + ".fc" + std::to_string(l);
      fn(prefix + ".W", p.heads[h].W[l], false);
      fn(prefix + ".b", p.heads[h].b[l], true);
    }
  }
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t n = 0;
  visit_params(p, [&](const std::string&, const Tensor& t, bool) {
    n += t.numel();
  });
  return n;
}

// Glorot-style uniform init in +/- sqrt(6/(fan_in+fan_out)); biases zero.
// Weights are drawn in visit_params order from one seeded stream, so a
// single-task model and the shared trunk + first head of a multi-task model
// initialized from the same seed coincide exactly.
inline ModelParams init_params(const ModelConfig& cfg, std::size_t raw_len,
                               std::size_t bond_len) {
  cfg.validate();
  if (raw_len == 0) throw ValueError("init_params: raw_len must be >= 1");
  if (bond_len == 0) throw ValueError("init_params: bond_len must be >= 1");

  Rng rng(derive_seed(cfg.seed, "init"));
  auto uniform_matrix = [&rng](std::size_t fan_in, std::size_t fan_out) {
    Tensor t({fan_in, fan_out});
    const double bound =
        std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    t.requires_grad = true;
    return t;
  };
  auto zero_bias = [](std::size_t n) {
    Tensor t({n});
    t.requires_grad = true;
    return t;
  };

  const auto atom_len = static_cast<std::size_t>(cfg.atom_len);
  const auto hidden_len = static_cast<std::size_t>(cfg.hidden_len);

  ModelParams p;
  p.raw_len = raw_len;
  p.bond_len = bond_len;
  p.embed_W = uniform_matrix(raw_len, atom_len);
  p.embed_b = zero_bias(atom_len);

  for (int t = 0; t < cfg.n_conv; ++t) {
    ConvParams layer;
    if (cfg.conv_variant == ConvVariant::gated) {
      const std::size_t z_len = 2 * atom_len + bond_len;
      layer.W_c = uniform_matrix(z_len, atom_len);
      layer.W_s = uniform_matrix(z_len, atom_len);
    } else {
      layer.W_c = uniform_matrix(atom_len + bond_len, atom_len);
      layer.W_s = uniform_matrix(atom_len, atom_len);
    }
    layer.b_c = zero_bias(atom_len);
    layer.b_s = zero_bias(atom_len);
    p.conv.push_back(std::move(layer));
  }

  for (int task = 0; task < cfg.n_tasks; ++task) {
    HeadParams head;
    std::size_t in = atom_len;
    for (int l = 0; l < cfg.n_hidden_per_task; ++l) {
      head.W.push_back(uniform_matrix(in, hidden_len));
      head.b.push_back(zero_bias(hidden_len));
      in = hidden_len;
    }
    head.W.push_back(uniform_matrix(in, 1));
    head.b.push_back(zero_bias(1));
    p.heads.push_back(std::move(head));
  }
  return p;
}

// Tape handles of one set of bound parameters.
struct ConvVars {
  Var W_c, b_c, W_s, b_s;
};
struct HeadVars {
  std::vector<Var> W, b;
};
struct ParamVars {
  Var embed_W, embed_b;
  std::vector<ConvVars> conv;
  std::vector<HeadVars> heads;
};

// Put every parameter tensor on the tape. trainable=false binds constants,
// which skips all gradient bookkeeping during evaluation-only passes.
inline ParamVars bind_params(Tape& tape, const ModelParams& p,
                             bool trainable = true) {
  auto bind = [&](const Tensor& t) {
    Tensor copy = t;
    copy.requires_grad = trainable;
    return trainable ? tape.leaf(std::move(copy))
                     : tape.constant(std::move(copy));
  };
  ParamVars v;
  v.embed_W = bind(p.embed_W);
  v.embed_b = bind(p.embed_b);
  for (const ConvParams& c : p.conv) {
    v.conv.push_back({bind(c.W_c), bind(c.b_c), bind(c.W_s), bind(c.b_s)});
  }
  for (const HeadParams& h : p.heads) {
    HeadVars hv;
    for (std::size_t l = 0; l < h.W.size(); ++l) {
      hv.W.push_back(bind(h.W[l]));
      hv.b.push_back(bind(h.b[l]));
    }
    v.heads.push_back(std::move(hv));
  }
  return v;
}

// Gradients in visit_params order, extracted after tape.backward().
inline std::vector<Tensor> collect_grads(const Tape& tape, const ParamVars& v) {
  std::vector<Tensor> grads;
  grads.push_back(tape.grad(v.embed_W));
  grads.push_back(tape.grad(v.embed_b));
  for (const ConvVars& c : v.conv) {
    grads.push_back(tape.grad(c.W_c));
    grads.push_back(tape.grad(c.b_c));
    grads.push_back(tape.grad(c.W_s));
    grads.push_back(tape.grad(c.b_s));
  }
  for (const HeadVars& h : v.heads) {
    for (std::size_t l = 0; l < h.W.size(); ++l) {
      grads.push_back(tape.grad(h.W[l]));
      grads.push_back(tape.grad(h.b[l]));
    }
  }
  return grads;
}

namespace detail {

inline std::vector<std::size_t> edge_sources(const xtal::CrystalGraph& g) {
  std::vector<std::size_t> src;
  src.reserve(g.edges.size());
  for (const xtal::Edge& e : g.edges) src.push_back(e.i);
  return src;
}

inline std::vector<std::size_t> edge_targets(const xtal::CrystalGraph& g) {
  std::vector<std::size_t> dst;
  dst.reserve(g.edges.size());
  for (const xtal::Edge& e : g.edges) dst.push_back(e.j);
  return dst;
}

}  // namespace detail

// v_i' = softplus[(sum_{j,k} v_j (+) u_ijk) W_c + v_i W_s + b_c + b_s].
// Atoms without edges keep a zero neighbor sum.
inline Var conv_simple(Tape& tape, Var state, const xtal::CrystalGraph& g,
                       const ConvVars& layer) {
  const std::size_t n = tape.value(state).shape[0];
  Var neighbor_sum;
  if (g.edges.empty()) {
    const std::size_t width =
        tape.value(state).shape[1] + g.bond_feature_len();
    neighbor_sum = tape.constant(Tensor({n, width}));
  } else {
    Var gathered = tape.gather_rows(state, detail::edge_targets(g));
    Var bonds = tape.constant(g.bond_features);
    Var messages = tape.concat_cols({gathered, bonds});
    neighbor_sum = tape.scatter_add_rows(messages, detail::edge_sources(g), n);
  }
  Var pre = tape.add(tape.matmul(neighbor_sum, layer.W_c),
                     tape.matmul(state, layer.W_s));
  pre = tape.add_row_broadcast(pre, layer.b_c);
  pre = tape.add_row_broadcast(pre, layer.b_s);
  return tape.softplus(pre);
}

// v_i' = v_i + sum_{j,k} sigmoid(z W_c + b_c) (.) softplus(z W_s + b_s),
// with z = v_i (+) v_j (+) u_ijk. The sigmoid factor gates each message.
inline Var conv_gated(Tape& tape, Var state, const xtal::CrystalGraph& g,
                      const ConvVars& layer) {
  if (g.edges.empty()) return state;
  const std::size_t n = tape.value(state).shape[0];
  const auto src = detail::edge_sources(g);
  Var self = tape.gather_rows(state, src);
  Var neigh = tape.gather_rows(state, detail::edge_targets(g));
  Var bonds = tape.constant(g.bond_features);
  Var z = tape.concat_cols({self, neigh, bonds});
  Var gate = tape.sigmoid(tape.affine_rows(z, layer.W_c, layer.b_c));
  Var core = tape.softplus(tape.affine_rows(z, layer.W_s, layer.b_s));
  Var messages = tape.mul(gate, core);
  return tape.add(state, tape.scatter_add_rows(messages, src, n));
}

// Average pooling over atom rows: v_G = (1/N) sum_i v_i.
inline Var pool(Tape& tape, Var state) { return tape.mean_rows(state); }

// Independent fully-connected heads over the shared crystal representation.
inline std::vector<Var> predict_tasks(Tape& tape, Var pooled,
                                      const std::vector<HeadVars>& heads) {
  std::vector<Var> outputs;
  outputs.reserve(heads.size());
  for (const HeadVars& head : heads) {
    Var h = pooled;
    const std::size_t n_layers = head.W.size();
    for (std::size_t l = 0; l + 1 < n_layers; ++l) {
      h = tape.softplus(tape.linear(h, head.W[l], head.b[l]));
    }
    outputs.push_back(tape.linear(h, head.W[n_layers - 1], head.b[n_layers - 1]));
  }
  return outputs;
}

struct ForwardVars {
  std::vector<Var> outputs;  // one scalar per task
  Var pooled;
};

inline ForwardVars forward(Tape& tape, const xtal::CrystalGraph& g,
                           const ParamVars& params, const ModelConfig& cfg) {
  Var raw = tape.constant(g.atom_features);
  Var state = tape.affine_rows(raw, params.embed_W, params.embed_b);
  for (const ConvVars& layer : params.conv) {
    state = cfg.conv_variant == ConvVariant::gated
                ? conv_gated(tape, state, g, layer)
                : conv_simple(tape, state, g, layer);
  }
  ForwardVars out;
  out.pooled = pool(tape, state);
  out.outputs = predict_tasks(tape, out.pooled, params.heads);
  return out;
}

struct Prediction {
  std::vector<double> values;  // per-task scalars, normalized units
  std::vector<double> pooled;  // v_G, exposed for inspection
};

inline void check_graph_dims(const xtal::CrystalGraph& g,
                             const ModelParams& p) {
  if (g.atom_feature_len() != p.raw_len ||
      (!g.edges.empty() && g.bond_feature_len() != p.bond_len)) {
    throw DimensionError(
        "model: graph features [" + std::to_string(g.atom_feature_len()) +
        ", " + std::to_string(g.bond_feature_len()) +
        "] do not match params [" + std::to_string(p.raw_len) + ", " +
        std::to_string(p.bond_len) + "]");
  }
}

inline Prediction predict(const xtal::CrystalGraph& g, const ModelParams& p,
                          const ModelConfig& cfg) {
  check_graph_dims(g, p);
  Tape tape;
  const ParamVars vars = bind_params(tape, p, /*trainable=*/false);
  const ForwardVars fwd = forward(tape, g, vars, cfg);
  Prediction pred;
  pred.pooled = tape.value(fwd.pooled).data;
  for (Var v : fwd.outputs) pred.values.push_back(tape.value(v).data[0]);
  return pred;
}

}  // namespace crystalmt::model
