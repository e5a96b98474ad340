#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hran/autodiff.hpp"
#include "hran/error.hpp"
#include "hran/rng.hpp"
#include "hran/tensor.hpp"

namespace hran {

// How parameter tensors are drawn at construction time. Every parameter gets its
// own RNG stream derived from (seed, fnv1a64(name)), so two models that share a
// parameter name draw bitwise identical values regardless of which other
// parameters exist around it.
struct InitSpec {
  std::uint64_t seed = 1;
  double sigma = 0.1;  // N(0, 0.01) by default
  bool biases = false;
};

template <typename T = double>
Parameter<T> make_param(const std::string& name, Shape shape, const InitSpec& init) {
  Rng rng(init.seed, fnv1a64(name));
  return Parameter<T>(name, gaussian_init<T>(rng, std::move(shape), init.sigma));
}

// Gate weights for one recurrent unit, no biases unless explicitly enabled:
//   z = sig(Wz x + Vz h),  r = sig(Wr x + Vr h),
//   s = tanh(Ws x + Vs (h . r)),  h' = (1 - z) . s + z . h
template <typename T = double>
struct GruParams {
  int hidden = 0;
  int input = 0;
  Parameter<T> w_z, w_r, w_s;  // [hidden x input]
  Parameter<T> v_z, v_r, v_s;  // [hidden x hidden]
  std::optional<Parameter<T>> b_z, b_r, b_s;  // [hidden], only when biases enabled

  static GruParams init(const std::string& prefix, int hidden, int input, const InitSpec& is) {
    if (hidden <= 0 || input <= 0) {
      throw ParameterError(prefix + ": hidden and input sizes must be positive");
    }
    GruParams p;
    p.hidden = hidden;
    p.input = input;
    p.w_z = make_param<T>(prefix + ".w_z", {hidden, input}, is);
    p.w_r = make_param<T>(prefix + ".w_r", {hidden, input}, is);
    p.w_s = make_param<T>(prefix + ".w_s", {hidden, input}, is);
    p.v_z = make_param<T>(prefix + ".v_z", {hidden, hidden}, is);
    p.v_r = make_param<T>(prefix + ".v_r", {hidden, hidden}, is);
    p.v_s = make_param<T>(prefix + ".v_s", {hidden, hidden}, is);
    if (is.biases) {
      p.b_z = make_param<T>(prefix + ".b_z", {hidden}, is);
      p.b_r = make_param<T>(prefix + ".b_r", {hidden}, is);
      p.b_s = make_param<T>(prefix + ".b_s", {hidden}, is);
    }
    return p;
  }

  template <typename F>
  void for_each(F f) {
    f(w_z); f(w_r); f(w_s); f(v_z); f(v_r); f(v_s);
    if (b_z) { f(*b_z); f(*b_r); f(*b_s); }
  }
  template <typename F>
  void for_each(F f) const {
    f(w_z); f(w_r); f(w_s); f(v_z); f(v_r); f(v_s);
    if (b_z) { f(*b_z); f(*b_r); f(*b_s); }
  }
};

// Token embedding table; rows cover the whole owning vocabulary, reserved ids included.
template <typename T = double>
struct Embedding {
  int vocab = 0;
  int dim = 0;
  Parameter<T> table;  // [vocab x dim]

  static Embedding init(const std::string& name, int vocab, int dim, const InitSpec& is) {
    if (vocab <= 0 || dim <= 0) throw ParameterError(name + ": vocab and dim must be positive");
    Embedding e;
    e.vocab = vocab;
    e.dim = dim;
    e.table = make_param<T>(name, {vocab, dim}, is);
    return e;
  }
};

// Additive scoring network: score(args) = v . tanh(sum_a P_a args_a [+ b]).
// The arity is the number of projection matrices.
template <typename T = double>
struct MlpScorerParams {
  int attn = 0;
  std::vector<Parameter<T>> proj;  // each [attn x dim_a]
  Parameter<T> v;                  // [attn]
  std::optional<Parameter<T>> bias;

  static MlpScorerParams init(const std::string& prefix, int attn, const std::vector<int>& arg_dims,
                              const InitSpec& is) {
    if (attn <= 0 || arg_dims.empty()) {
      throw ParameterError(prefix + ": attention size and arity must be positive");
    }
    MlpScorerParams p;
    p.attn = attn;
    for (std::size_t a = 0; a < arg_dims.size(); ++a) {
      if (arg_dims[a] <= 0) throw ParameterError(prefix + ": argument dims must be positive");
      p.proj.push_back(make_param<T>(prefix + ".proj" + std::to_string(a), {attn, arg_dims[a]}, is));
    }
    p.v = make_param<T>(prefix + ".v", {attn}, is);
    if (is.biases) p.bias = make_param<T>(prefix + ".bias", {attn}, is);
    return p;
  }

  std::size_t arity() const { return proj.size(); }

  template <typename F>
  void for_each(F f) {
    for (auto& m : proj) f(m);
    f(v);
    if (bias) f(*bias);
  }
  template <typename F>
  void for_each(F f) const {
    for (const auto& m : proj) f(m);
    f(v);
    if (bias) f(*bias);
  }
};

// Embedding row for one token id; gradients flow into that row only.
template <typename T>
Var<T> embed_lookup(Tape<T>& tape, Embedding<T>& emb, int id) {
  if (id < 0 || id >= emb.vocab) {
    throw VocabError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                     std::to_string(emb.vocab));
  }
  return row(tape.leaf(emb.table), id);
}

template <typename T>
Var<T> gru_step(Tape<T>& tape, GruParams<T>& p, Var<T> x, Var<T> h_prev) {
  if (x.value().rank() != 1 || x.numel() != static_cast<std::size_t>(p.input)) {
    throw DimensionError("gru_step: input " + shape_str(x.shape()) + " vs expected [" +
                         std::to_string(p.input) + "]");
  }
  if (h_prev.value().rank() != 1 || h_prev.numel() != static_cast<std::size_t>(p.hidden)) {
    throw DimensionError("gru_step: state " + shape_str(h_prev.shape()) + " vs expected [" +
                         std::to_string(p.hidden) + "]");
  }
  auto gate = [&](Parameter<T>& w, Parameter<T>& v, std::optional<Parameter<T>>& b, Var<T> hin) {
    auto pre = add(matmul(tape.leaf(w), x), matmul(tape.leaf(v), hin));
    if (b) pre = add(pre, tape.leaf(*b));
    return pre;
  };
  auto z = sigmoid(gate(p.w_z, p.v_z, p.b_z, h_prev));
  auto r = sigmoid(gate(p.w_r, p.v_r, p.b_r, h_prev));
  auto s = tanh(gate(p.w_s, p.v_s, p.b_s, mul(h_prev, r)));
  return add(mul(one_minus(z), s), mul(z, h_prev));
}

// Bidirectional encoding of one token sequence. Position k of the result is the
// concatenation of the forward state after reading tokens 0..k and the backward
// state after reading tokens T-1..k. Masked (padding) positions do not update
// either direction; they carry the neighbouring state through, and their
// embeddings are never looked up, so padding contributes zero gradient.
template <typename T>
std::vector<Var<T>> bigru_encode(Tape<T>& tape, GruParams<T>& fwd, GruParams<T>& bwd,
                                 Embedding<T>& emb, const std::vector<int>& ids,
                                 const std::vector<bool>& mask, Var<T> h0_fwd, Var<T> h0_bwd) {
  const std::size_t n = ids.size();
  if (n == 0) throw ContractError("bigru_encode: empty sequence");
  if (mask.size() != n) {
    throw DimensionError("bigru_encode: mask length " + std::to_string(mask.size()) +
                         " vs sequence length " + std::to_string(n));
  }
  bool any = false;
  for (bool m : mask) any = any || m;
  if (!any) throw ContractError("bigru_encode: sequence is empty after masking");

  std::vector<Var<T>> emb_cache(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (mask[k]) emb_cache[k] = embed_lookup(tape, emb, ids[k]);
  }
  std::vector<Var<T>> hf(n), hb(n);
  Var<T> h = h0_fwd;
  for (std::size_t k = 0; k < n; ++k) {
    if (mask[k]) h = gru_step(tape, fwd, emb_cache[k], h);
    hf[k] = h;
  }
  h = h0_bwd;
  for (std::size_t k = n; k-- > 0;) {
    if (mask[k]) h = gru_step(tape, bwd, emb_cache[k], h);
    hb[k] = h;
  }
  std::vector<Var<T>> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = concat(hf[k], hb[k]);
  return out;
}

template <typename T>
Var<T> mlp_score(Tape<T>& tape, MlpScorerParams<T>& p, const std::vector<Var<T>>& args) {
  if (args.size() != p.arity()) {
    throw ContractError("mlp_score: got " + std::to_string(args.size()) + " arguments, expected " +
                        std::to_string(p.arity()));
  }
  Var<T> pre;
  for (std::size_t a = 0; a < args.size(); ++a) {
    auto term = matmul(tape.leaf(p.proj[a]), args[a]);
    pre = a == 0 ? term : add(pre, term);
  }
  if (p.bias) pre = add(pre, tape.leaf(*p.bias));
  return dot(tape.leaf(p.v), tanh(pre));
}

}  // namespace hran
