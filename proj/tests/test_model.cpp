#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "crystalmt/model.hpp"
#include "crystalmt/training.hpp"
#include "test_util.hpp"

using namespace crystalmt;
using namespace crystalmt::model;
using crystalmt::xtal::CrystalGraph;
using testutil::random_graph;

namespace {

constexpr double kLn2 = 0.6931471805599453;

ModelParams zero_params(const ModelConfig& cfg, std::size_t d_a,
                        std::size_t d_b) {
  ModelParams p = init_params(cfg, d_a, d_b);
  visit_params(p, [](const std::string&, Tensor& t, bool) {
    std::fill(t.data.begin(), t.data.end(), 0.0);
  });
  return p;
}

Tensor random_state(Rng& rng, std::size_t n, std::size_t len) {
  Tensor t({n, len});
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Straightforward per-edge evaluation of the gate sum of the gated
// convolution, independent of the tape ops.
Tensor gate_sum_oracle(const Tensor& state, const CrystalGraph& g,
                       const ConvParams& layer) {
  const std::size_t a_len = state.cols();
  const std::size_t d_b = g.bond_feature_len();
  Tensor out({state.rows(), a_len});
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    std::vector<double> z;
    for (std::size_t c = 0; c < a_len; ++c) z.push_back(state.at(g.edges[e].i, c));
    for (std::size_t c = 0; c < a_len; ++c) z.push_back(state.at(g.edges[e].j, c));
    for (std::size_t c = 0; c < d_b; ++c) z.push_back(g.bond_features.at(e, c));
    for (std::size_t c = 0; c < a_len; ++c) {
      double pre_gate = layer.b_c.data[c];
      double pre_core = layer.b_s.data[c];
      for (std::size_t t = 0; t < z.size(); ++t) {
        pre_gate += z[t] * layer.W_c.at(t, c);
        pre_core += z[t] * layer.W_s.at(t, c);
      }
      const double gate = 1.0 / (1.0 + std::exp(-pre_gate));
      const double core = std::log1p(std::exp(pre_core));
      out.at(g.edges[e].i, c) += gate * core;
    }
  }
  return out;
}

ConvVars bind_layer(Tape& tape, const ConvParams& layer) {
  return {tape.constant(layer.W_c), tape.constant(layer.b_c),
          tape.constant(layer.W_s), tape.constant(layer.b_s)};
}

}  // namespace

TEST_CASE("conv_simple closed forms", "[model]") {
  Rng rng(11);
  const CrystalGraph g = random_graph(rng);
  ModelConfig cfg;
  cfg.conv_variant = ConvVariant::simple;
  cfg.atom_len = 4;
  cfg.n_conv = 1;
  ModelParams p = zero_params(cfg, g.atom_feature_len(), g.bond_feature_len());

  SECTION("all-zero parameters give softplus(0) = ln 2 everywhere") {
    Tape tape;
    Var state = tape.constant(random_state(rng, g.n_atoms, 4));
    Var out = conv_simple(tape, state, g, bind_layer(tape, p.conv[0]));
    for (double v : tape.value(out).data) {
      CHECK(std::abs(v - kLn2) < 1e-12);
    }
  }

  SECTION("no neighbors with identity self-weight gives softplus(v)") {
    CrystalGraph isolated = g;
    isolated.edges.clear();
    isolated.bond_features = Tensor({0, g.bond_feature_len()});
    ConvParams layer = p.conv[0];
    for (std::size_t i = 0; i < 4; ++i) layer.W_s.at(i, i) = 1.0;

    Tape tape;
    const Tensor sv = random_state(rng, g.n_atoms, 4);
    Var out = conv_simple(tape, tape.constant(sv), isolated,
                          bind_layer(tape, layer));
    const Tensor& val = tape.value(out);
    for (std::size_t i = 0; i < val.numel(); ++i) {
      CHECK(std::abs(val.data[i] - stable_softplus(sv.data[i])) < 1e-12);
    }
  }

  SECTION("edge order does not change the output") {
    ModelParams pr = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());
    CrystalGraph shuffled = g;
    std::vector<std::size_t> order(g.edges.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t e = 0; e < order.size(); ++e) {
      shuffled.edges[e] = g.edges[order[e]];
      for (std::size_t c = 0; c < g.bond_feature_len(); ++c) {
        shuffled.bond_features.at(e, c) = g.bond_features.at(order[e], c);
      }
    }
    const Tensor sv = random_state(rng, g.n_atoms, 4);
    auto run = [&](const CrystalGraph& graph) {
      Tape tape;
      Var out = conv_simple(tape, tape.constant(sv), graph,
                            bind_layer(tape, pr.conv[0]));
      return tape.value(out).data;
    };
    const auto a = run(g);
    const auto b = run(shuffled);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(a[i] - b[i]) < 1e-12);
    }
  }
}

TEST_CASE("conv_gated closed forms", "[model]") {
  Rng rng(22);
  const CrystalGraph g = random_graph(rng);
  ModelConfig cfg;
  cfg.atom_len = 3;
  cfg.n_conv = 1;
  ModelParams p = zero_params(cfg, g.atom_feature_len(), g.bond_feature_len());

  SECTION("zero parameters add deg * 0.5 * ln2 to every element") {
    const Tensor sv = random_state(rng, g.n_atoms, 3);
    Tape tape;
    Var out = conv_gated(tape, tape.constant(sv), g, bind_layer(tape, p.conv[0]));
    const Tensor& val = tape.value(out);
    const auto deg = g.degrees();
    for (std::size_t i = 0; i < g.n_atoms; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double expected =
            sv.at(i, c) + static_cast<double>(deg[i]) * 0.5 * kLn2;
        CHECK(std::abs(val.at(i, c) - expected) < 1e-12);
      }
    }
  }

  SECTION("an atom with no edges passes through unchanged") {
    // append an isolated atom row
    CrystalGraph iso = g;
    iso.n_atoms = g.n_atoms + 1;
    iso.atom_features = Tensor({iso.n_atoms, g.atom_feature_len()});
    ModelParams pr = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());
    const Tensor sv = random_state(rng, iso.n_atoms, 3);
    Tape tape;
    Var out = conv_gated(tape, tape.constant(sv), iso, bind_layer(tape, pr.conv[0]));
    const Tensor& val = tape.value(out);
    const std::size_t last = iso.n_atoms - 1;
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(val.at(last, c) == sv.at(last, c));
    }
  }

  SECTION("duplicating one edge adds its contribution exactly twice") {
    ModelParams pr = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());
    CrystalGraph dup = g;
    dup.edges.push_back({g.edges[0].i, g.edges[0].j, 999});
    Tensor bonds({g.edges.size() + 1, g.bond_feature_len()});
    bonds.data.assign(g.bond_features.data.begin(), g.bond_features.data.end());
    bonds.data.resize((g.edges.size() + 1) * g.bond_feature_len());
    for (std::size_t c = 0; c < g.bond_feature_len(); ++c) {
      bonds.at(g.edges.size(), c) = g.bond_features.at(0, c);
    }
    dup.bond_features = bonds;

    const Tensor sv = random_state(rng, g.n_atoms, 3);
    auto run = [&](const CrystalGraph& graph) {
      Tape tape;
      Var out = conv_gated(tape, tape.constant(sv), graph,
                           bind_layer(tape, pr.conv[0]));
      return tape.value(out);
    };
    const Tensor base = run(g);
    const Tensor doubled = run(dup);

    // isolate edge 0's contribution with the independent oracle
    CrystalGraph only_first = g;
    only_first.edges = {g.edges[0]};
    Tensor first_bond({1, g.bond_feature_len()});
    for (std::size_t c = 0; c < g.bond_feature_len(); ++c) {
      first_bond.at(0, c) = g.bond_features.at(0, c);
    }
    only_first.bond_features = first_bond;
    const Tensor contribution = gate_sum_oracle(sv, only_first, pr.conv[0]);

    for (std::size_t i = 0; i < base.numel(); ++i) {
      CHECK(std::abs(doubled.data[i] - base.data[i] - contribution.data[i]) <
            1e-12);
    }
  }
}

TEST_CASE("gated convolution residual equals the explicit gate sum", "[model]") {
  Rng rng(33);
  for (int trial = 0; trial < 10; ++trial) {
    const CrystalGraph g = random_graph(rng);
    ModelConfig cfg;
    cfg.atom_len = 4;
    cfg.n_conv = 1;
    cfg.seed = static_cast<std::uint64_t>(trial);
    ModelParams p = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());
    const Tensor sv = random_state(rng, g.n_atoms, 4);

    Tape tape;
    Var out = conv_gated(tape, tape.constant(sv), g, bind_layer(tape, p.conv[0]));
    const Tensor& val = tape.value(out);
    const Tensor oracle = gate_sum_oracle(sv, g, p.conv[0]);
    for (std::size_t i = 0; i < val.numel(); ++i) {
      CHECK(std::abs(val.data[i] - sv.data[i] - oracle.data[i]) < 1e-12);
    }
  }
}

TEST_CASE("pool", "[model]") {
  Tape tape;
  SECTION("equal rows pool to that vector") {
    Var s = tape.constant(Tensor::matrix(3, 2, {1.5, -2.0, 1.5, -2.0, 1.5, -2.0}));
    CHECK(tape.value(pool(tape, s)).data == std::vector<double>{1.5, -2.0});
  }
  SECTION("single row pools to itself") {
    Var s = tape.constant(Tensor::matrix(1, 2, {0.25, 4.0}));
    CHECK(tape.value(pool(tape, s)).data == std::vector<double>{0.25, 4.0});
  }
  SECTION("pooling is linear in the state") {
    Rng rng(5);
    const Tensor sv = random_state(rng, 4, 3);
    Tensor scaled = sv;
    for (double& v : scaled.data) v *= 2.5;
    const auto base = tape.value(pool(tape, tape.constant(sv))).data;
    const auto big = tape.value(pool(tape, tape.constant(scaled))).data;
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(big[i] == Catch::Approx(2.5 * base[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("predict_tasks heads", "[model]") {
  Rng rng(44);
  ModelConfig cfg;
  cfg.atom_len = 4;
  cfg.hidden_len = 3;
  cfg.n_tasks = 3;
  cfg.n_hidden_per_task = 2;
  ModelParams p = init_params(cfg, 6, 5);

  Tensor pooled({4});
  for (double& v : pooled.data) v = rng.uniform(-1.0, 1.0);

  auto run = [&](const ModelParams& params) {
    Tape tape;
    ParamVars vars = bind_params(tape, params, false);
    auto outs = predict_tasks(tape, tape.constant(pooled), vars.heads);
    std::vector<double> values;
    for (Var v : outs) values.push_back(tape.value(v).data[0]);
    return values;
  };

  SECTION("three tasks give three scalars") {
    CHECK(run(p).size() == 3);
  }
  SECTION("zero head weights output the head bias") {
    ModelParams pz = p;
    for (auto& head : pz.heads) {
      for (auto& W : head.W) std::fill(W.data.begin(), W.data.end(), 0.0);
      for (auto& b : head.b) std::fill(b.data.begin(), b.data.end(), 0.0);
      head.b.back().data[0] = 0.625;
    }
    const auto values = run(pz);
    for (double v : values) CHECK(v == 0.625);
  }
  SECTION("perturbing head 2 leaves head 1 bit-identical") {
    const auto before = run(p);
    ModelParams perturbed = p;
    for (auto& W : perturbed.heads[2].W) {
      for (double& v : W.data) v += 0.37;
    }
    const auto after = run(perturbed);
    CHECK(after[0] == before[0]);
    CHECK(after[1] == before[1]);
    CHECK(after[2] != before[2]);
  }
}

TEST_CASE("forward is invariant under atom relabeling", "[model]") {
  Rng rng(55);
  for (int trial = 0; trial < 8; ++trial) {
    const CrystalGraph g = random_graph(rng);
    ModelConfig cfg;
    cfg.atom_len = 5;
    cfg.hidden_len = 4;
    cfg.n_conv = 2;
    cfg.n_tasks = 2;
    cfg.seed = static_cast<std::uint64_t>(trial);
    ModelParams p = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());

    std::vector<std::size_t> perm(g.n_atoms);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    const CrystalGraph permuted = testutil::permute_graph(g, perm);

    const Prediction a = predict(g, p, cfg);
    const Prediction b = predict(permuted, p, cfg);
    for (std::size_t t = 0; t < a.values.size(); ++t) {
      CHECK(rel_err(a.values[t], b.values[t]) < 1e-9);
    }
  }
}

TEST_CASE("zero parameters reduce forward to the head biases", "[model]") {
  Rng rng(66);
  const CrystalGraph g = random_graph(rng);
  ModelConfig cfg;
  cfg.atom_len = 4;
  cfg.n_tasks = 2;
  ModelParams p = zero_params(cfg, g.atom_feature_len(), g.bond_feature_len());
  p.heads[0].b.back().data[0] = -1.25;
  p.heads[1].b.back().data[0] = 2.5;
  const Prediction pred = predict(g, p, cfg);
  CHECK(pred.values[0] == -1.25);
  CHECK(pred.values[1] == 2.5);
}

TEST_CASE("isomorphic graphs with identical features predict identically",
          "[model]") {
  Rng rng(77);
  const CrystalGraph g = random_graph(rng);
  CrystalGraph copy = g;
  copy.id = "copy";
  ModelConfig cfg;
  cfg.atom_len = 4;
  ModelParams p = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());
  CHECK(predict(g, p, cfg).values == predict(copy, p, cfg).values);
}

TEST_CASE("model gradients match finite differences", "[model]") {
  Rng rng(88);
  for (auto variant : {ConvVariant::gated, ConvVariant::simple}) {
    ModelConfig cfg;
    cfg.conv_variant = variant;
    cfg.atom_len = 3;
    cfg.hidden_len = 3;
    cfg.n_conv = 2;
    cfg.n_tasks = 2;
    cfg.seed = 123;
    const auto entries = testutil::random_entries(rng, 2, 2);
    const ModelParams p = init_params(cfg, entries[0].graph.atom_feature_len(),
                                      entries[0].graph.bond_feature_len());
    const auto report =
        testutil::model_gradcheck(entries, cfg, {1.0, 2.0}, p, 1e-4);
    INFO("variant " << to_string(variant) << " worst at " << report.worst_param);
    CHECK(report.worst_rel < 1e-5);
  }
}

TEST_CASE("head gradients are isolated across tasks", "[model]") {
  Rng rng(99);
  const CrystalGraph g = random_graph(rng);
  ModelConfig cfg;
  cfg.atom_len = 4;
  cfg.n_tasks = 3;
  ModelParams p = init_params(cfg, g.atom_feature_len(), g.bond_feature_len());

  Tape tape;
  ParamVars vars = bind_params(tape, p);
  ForwardVars fwd = forward(tape, g, vars, cfg);
  tape.backward(fwd.outputs[1]);  // d(yhat_1)/d(params)

  for (std::size_t h = 0; h < vars.heads.size(); ++h) {
    for (std::size_t l = 0; l < vars.heads[h].W.size(); ++l) {
      const Tensor gW = tape.grad(vars.heads[h].W[l]);
      const Tensor gb = tape.grad(vars.heads[h].b[l]);
      const bool own = (h == 1);
      double sum_abs = 0.0;
      for (double v : gW.data) sum_abs += std::abs(v);
      for (double v : gb.data) sum_abs += std::abs(v);
      if (own) {
        CHECK(sum_abs > 0.0);
      } else {
        CHECK(sum_abs == 0.0);  // exact zeros, not just small
      }
    }
  }
}

TEST_CASE("single-task model equals the first head of a multi-task model",
          "[model]") {
  Rng rng(111);
  const CrystalGraph g = random_graph(rng);
  ModelConfig st;
  st.atom_len = 6;
  st.hidden_len = 4;
  st.n_conv = 2;
  st.n_tasks = 1;
  st.seed = 2024;
  ModelConfig mt = st;
  mt.n_tasks = 3;

  const ModelParams ps = init_params(st, g.atom_feature_len(), g.bond_feature_len());
  const ModelParams pm = init_params(mt, g.atom_feature_len(), g.bond_feature_len());

  CHECK(ps.embed_W.data == pm.embed_W.data);
  for (std::size_t t = 0; t < ps.conv.size(); ++t) {
    CHECK(ps.conv[t].W_c.data == pm.conv[t].W_c.data);
    CHECK(ps.conv[t].W_s.data == pm.conv[t].W_s.data);
  }
  for (std::size_t l = 0; l < ps.heads[0].W.size(); ++l) {
    CHECK(ps.heads[0].W[l].data == pm.heads[0].W[l].data);
  }
  CHECK(predict(g, ps, st).values[0] == predict(g, pm, mt).values[0]);
}
