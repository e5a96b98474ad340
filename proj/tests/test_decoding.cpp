#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "hran/decoding.hpp"
#include "hran/rng.hpp"

using namespace hran;

namespace {

// Toy step model whose distribution is a deterministic pseudo-random function of
// the emitted prefix. The state lags one token behind; `prev` closes the gap.
struct RandomToy {
  struct State {
    std::vector<int> prefix;
  };
  int vocab = 3;
  std::uint64_t seed = 1;

  int vocab_size() const { return vocab; }
  int eos_id() const { return vocab - 1; }
  int start_token() const { return -1; }
  State start() const { return {}; }

  StepResult<State> step(const State& st, int prev) const {
    State full = st;
    if (prev != start_token()) full.prefix.push_back(prev);
    std::uint64_t h = 1469598103934665603ull;
    for (int id : full.prefix) {
      h ^= static_cast<std::uint64_t>(id) + 0x9e3779b97f4a7c15ull;
      h *= 1099511628211ull;
    }
    Rng rng(seed, h);
    std::vector<double> w(static_cast<std::size_t>(vocab));
    double z = 0.0;
    for (auto& x : w) {
      x = rng.next_double() + 0.05;
      z += x;
    }
    std::vector<double> lp(w.size());
    for (std::size_t v = 0; v < w.size(); ++v) lp[v] = std::log(w[v] / z);
    return {std::move(full), std::move(lp), {}};
  }
};

// Toy with hand-fixed per-prefix log-scores; prefixes not in the table fall back
// to a uniform distribution.
struct TableToy {
  struct State {
    std::vector<int> prefix;
  };
  int vocab = 3;
  std::map<std::vector<int>, std::vector<double>> table;

  int vocab_size() const { return vocab; }
  int eos_id() const { return vocab - 1; }
  int start_token() const { return -1; }
  State start() const { return {}; }

  StepResult<State> step(const State& st, int prev) const {
    State full = st;
    if (prev != start_token()) full.prefix.push_back(prev);
    auto it = table.find(full.prefix);
    std::vector<double> lp;
    if (it != table.end()) {
      lp = it->second;
    } else {
      lp.assign(static_cast<std::size_t>(vocab), -std::log(static_cast<double>(vocab)));
    }
    return {std::move(full), std::move(lp), {}};
  }
};

// Applies a fixed ban list on top of another model's steps.
template <typename M>
struct Suppressed {
  using State = typename M::State;
  M inner;
  std::vector<int> banned;

  int vocab_size() const { return inner.vocab_size(); }
  int eos_id() const { return inner.eos_id(); }
  int start_token() const { return inner.start_token(); }
  State start() const { return inner.start(); }
  StepResult<State> step(const State& st, int prev) const {
    auto r = inner.step(st, prev);
    suppress_tokens(r.log_probs, banned);
    return r;
  }
};

// Every complete decoding outcome: paths stop at EOS or max_len. ids keep the
// terminal EOS so the ranking order matches the beam's internal one.
template <typename M>
void enumerate_all(M& model, const typename M::State& st, int prev, std::vector<int>& prefix,
                   double lp, int max_len,
                   std::vector<std::pair<std::vector<int>, double>>& out) {
  auto r = model.step(st, prev);
  for (int v = 0; v < model.vocab_size(); ++v) {
    const double l = r.log_probs[static_cast<std::size_t>(v)];
    if (l == kNegInf) continue;
    prefix.push_back(v);
    const double total = lp + l;
    if (v == model.eos_id() || static_cast<int>(prefix.size()) == max_len) {
      out.emplace_back(prefix, total);
    } else {
      enumerate_all(model, r.state, v, prefix, total, max_len, out);
    }
    prefix.pop_back();
  }
}

template <typename M>
std::vector<std::pair<std::vector<int>, double>> ranked_enumeration(M& model, int max_len) {
  std::vector<std::pair<std::vector<int>, double>> out;
  std::vector<int> prefix;
  auto st = model.start();
  enumerate_all(model, st, model.start_token(), prefix, 0.0, max_len, out);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return detail::sequence_before(a.second, a.first, b.second, b.first);
  });
  return out;
}

std::vector<int> strip_eos(std::vector<int> ids, int eos) {
  if (!ids.empty() && ids.back() == eos) ids.pop_back();
  return ids;
}

}  // namespace

TEST_CASE("suppress_tokens") {
  std::vector<double> lp{-1.0, -2.0, -3.0, -4.0};

  SECTION("banned entries become -inf, the rest are untouched") {
    suppress_tokens(lp, {1, 3});
    CHECK(lp[0] == -1.0);
    CHECK(lp[1] == kNegInf);
    CHECK(lp[2] == -3.0);
    CHECK(lp[3] == kNegInf);
  }

  SECTION("an empty ban list is the identity") {
    auto before = lp;
    suppress_tokens(lp, {});
    CHECK(lp == before);
  }

  SECTION("out-of-range ids are vocabulary errors") {
    CHECK_THROWS_AS(suppress_tokens(lp, {4}), VocabError);
    CHECK_THROWS_AS(suppress_tokens(lp, {-1}), VocabError);
  }
}

TEST_CASE("greedy_decode on toys") {
  SECTION("uniform distribution: ties go to token 0 until max length") {
    TableToy toy;  // empty table: everything uniform
    auto r = greedy_decode(toy, 4);
    CHECK(r.ids == std::vector<int>{0, 0, 0, 0});
    CHECK(r.log_prob == Catch::Approx(4 * -std::log(3.0)));
    CHECK(r.trace.steps.empty());
  }

  SECTION("an immediate end token yields an empty output") {
    TableToy toy;
    toy.table[{}] = {-5.0, -5.0, -0.01};
    auto r = greedy_decode(toy, 4);
    CHECK(r.ids.empty());
    CHECK(r.log_prob == -0.01);
  }

  SECTION("banning all but one token forces it until the cap") {
    Suppressed<TableToy> toy{TableToy{}, {0, 2}};
    auto r = greedy_decode(toy, 3);
    CHECK(r.ids == std::vector<int>{1, 1, 1});
  }

  SECTION("banning everything is a contract error") {
    Suppressed<TableToy> toy{TableToy{}, {0, 1, 2}};
    CHECK_THROWS_AS(greedy_decode(toy, 3), ContractError);
  }

  SECTION("max_length must be positive") {
    TableToy toy;
    CHECK_THROWS_AS(greedy_decode(toy, 0), ParameterError);
  }
}

TEST_CASE("beam_search equals exhaustive enumeration on toys") {
  SECTION("hand-fixed distributions, max length 2") {
    TableToy toy;
    toy.table[{}] = {std::log(0.5), std::log(0.3), std::log(0.2)};
    toy.table[{0}] = {std::log(0.1), std::log(0.2), std::log(0.7)};
    toy.table[{1}] = {std::log(0.45), std::log(0.45), std::log(0.1)};

    auto oracle = ranked_enumeration(toy, 2);
    DecodeOptions opt;
    opt.beam_width = 16;
    opt.nbest = 7;
    opt.max_length = 2;
    auto got = beam_search(toy, opt);
    REQUIRE(got.size() == std::min<std::size_t>(7, oracle.size()));
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].ids == strip_eos(oracle[i].first, toy.eos_id()));
      CHECK(got[i].log_prob == oracle[i].second);
    }
  }

  SECTION("randomized toys: top result is the global argmax") {
    for (int trial = 0; trial < 60; ++trial) {
      RandomToy toy;
      toy.vocab = 2 + trial % 2;
      toy.seed = 1000 + static_cast<std::uint64_t>(trial);
      const int max_len = 2 + trial % 2;
      auto oracle = ranked_enumeration(toy, max_len);
      DecodeOptions opt;
      opt.beam_width = 32;  // exceeds the path count, so the search is exhaustive
      opt.nbest = 1;
      opt.max_length = max_len;
      auto got = beam_search(toy, opt);
      REQUIRE(got.size() == 1);
      REQUIRE(got[0].ids == strip_eos(oracle[0].first, toy.eos_id()));
      REQUIRE(got[0].log_prob == oracle[0].second);
    }
  }

  SECTION("nbest = width = 3 returns the global top 3") {
    RandomToy toy;
    toy.seed = 77;
    auto oracle = ranked_enumeration(toy, 3);
    DecodeOptions opt;
    opt.beam_width = 3;
    opt.nbest = 3;
    opt.max_length = 3;
    auto got = beam_search(toy, opt);
    REQUIRE(got.size() == 3);
    // Width 3 retains every live path here because at most 3 survive any step,
    // so the beam is exhaustive and must return the global top 3.
    REQUIRE(oracle.size() >= 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(got[i].ids == strip_eos(oracle[i].first, toy.eos_id()));
      CHECK(got[i].log_prob == oracle[i].second);
    }
  }

  SECTION("increasing the width never lowers the best log-prob") {
    RandomToy toy;
    toy.seed = 91;
    toy.vocab = 3;
    double prev_best = kNegInf;
    for (int w = 1; w <= 8; ++w) {
      DecodeOptions opt;
      opt.beam_width = w;
      opt.nbest = 1;
      opt.max_length = 3;
      auto got = beam_search(toy, opt);
      REQUIRE(got[0].log_prob >= prev_best);
      prev_best = got[0].log_prob;
    }
  }

  SECTION("starved beam falls back to the hypotheses alive at starvation") {
    Suppressed<TableToy> toy{TableToy{}, {0, 1, 2}};
    DecodeOptions opt;
    opt.beam_width = 2;
    opt.nbest = 1;
    opt.max_length = 3;
    auto got = beam_search(toy, opt);
    REQUIRE(got.size() == 1);
    CHECK(got[0].ids.empty());
    CHECK(got[0].log_prob == 0.0);
  }

  SECTION("parameter validation") {
    TableToy toy;
    DecodeOptions opt;
    opt.beam_width = 0;
    CHECK_THROWS_AS(beam_search(toy, opt), ParameterError);
    opt.beam_width = 2;
    opt.nbest = 3;
    CHECK_THROWS_AS(beam_search(toy, opt), ParameterError);
    opt.nbest = 1;
    opt.max_length = 0;
    CHECK_THROWS_AS(beam_search(toy, opt), ParameterError);
  }
}

TEST_CASE("length normalization reranks the final pool only") {
  TableToy toy;
  // Raw ranking prefers the immediate stop (-1.9); per-token ranking prefers
  // the two-step sequence (-2.0 / 2 = -1.0).
  toy.table[{}] = {-0.5, -30.0, -1.9};
  toy.table[{0}] = {-30.0, -30.0, -1.5};

  DecodeOptions opt;
  opt.beam_width = 8;
  opt.nbest = 2;
  opt.max_length = 2;

  auto raw = beam_search(toy, opt);
  REQUIRE(raw[0].ids.empty());
  REQUIRE(raw[0].log_prob == -1.9);

  opt.length_normalize = true;
  auto norm = beam_search(toy, opt);
  REQUIRE(norm[0].ids == std::vector<int>{0});
  // The reported log-prob stays the raw sum.
  REQUIRE(norm[0].log_prob == -2.0);
}

TEST_CASE("decoding the dialogue model") {
  ModelConfig cfg;
  cfg.word_hidden = 4;
  cfg.utt_hidden = 4;
  cfg.decoder_hidden = 4;
  cfg.embed_dim = 3;
  cfg.attn_dim = 4;
  cfg.context_vocab_size = 12;
  cfg.response_vocab_size = 12;
  cfg.seed = 5;
  cfg.init_gaussian = 0.25;
  auto params = ModelParams<double>::init(cfg);

  SECTION("width 1 is bitwise identical to greedy") {
    Rng rng(404);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<std::vector<int>> utts;
      const int m = 2 + static_cast<int>(rng.next_below(2));
      for (int i = 0; i < m; ++i) {
        std::vector<int> u;
        const int len = 1 + static_cast<int>(rng.next_below(3));
        for (int k = 0; k < len; ++k) u.push_back(4 + static_cast<int>(rng.next_below(8)));
        utts.push_back(u);
      }
      auto ctx = ContextInput::dense(utts);
      DecodeOptions opt;
      opt.beam_width = 1;
      opt.nbest = 1;
      opt.max_length = 8;
      auto beam = hran_beam(params, cfg, ctx, opt);
      auto greedy = hran_greedy(params, cfg, ctx, opt);
      REQUIRE(beam.size() == 1);
      REQUIRE(beam[0].ids == greedy.ids);
      REQUIRE(beam[0].log_prob == greedy.log_prob);
    }
  }

  SECTION("reserved tokens never appear in decoded output") {
    auto ctx = ContextInput::dense({{4, 5}, {6, 7}});
    DecodeOptions opt;
    opt.beam_width = 4;
    opt.nbest = 4;
    opt.max_length = 6;
    for (const auto& seq : hran_beam(params, cfg, ctx, opt)) {
      for (int id : seq.ids) {
        CHECK(id != kPadId);
        CHECK(id != kUnkId);
        CHECK(id != kBosId);
        CHECK(id != kEosId);
      }
      CHECK(seq.log_prob <= 0.0);
    }
  }

  SECTION("a model rigged to stop immediately emits nothing and one trace step") {
    ModelConfig cfg2 = cfg;
    cfg2.use_biases = true;
    auto p2 = ModelParams<double>::init(cfg2);
    p2.for_each_parameter([](Parameter<double>& q) { q.value.fill(0.0); });
    p2.output_bias->value[static_cast<std::size_t>(kEosId)] = 50.0;
    auto ctx = ContextInput::dense({{4, 5}, {6}});
    auto r = hran_greedy(p2, cfg2, ctx);
    CHECK(r.ids.empty());
    CHECK(r.trace.steps.size() == 1);
    CHECK(r.log_prob > -1e-6);
  }

  SECTION("greedy trace records one step per emitted token plus the stop") {
    auto ctx = ContextInput::dense({{4, 5}, {6, 7}});
    DecodeOptions opt;
    opt.max_length = 5;
    auto r = hran_greedy(params, cfg, ctx, opt);
    const bool stopped_early = static_cast<int>(r.ids.size()) < opt.max_length;
    CHECK(r.trace.steps.size() == r.ids.size() + (stopped_early ? 1 : 0));
    for (const auto& step : r.trace.steps) {
      REQUIRE(step.utterance_weights.size() == 2);
      REQUIRE(step.word_weights.size() == 2);
    }
  }

  SECTION("decoding is bitwise reproducible") {
    auto ctx = ContextInput::dense({{4, 9}, {6, 7, 8}});
    DecodeOptions opt;
    opt.beam_width = 3;
    opt.nbest = 3;
    opt.max_length = 6;
    auto a = hran_beam(params, cfg, ctx, opt);
    auto b = hran_beam(params, cfg, ctx, opt);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].ids == b[i].ids);
      CHECK(a[i].log_prob == b[i].log_prob);
    }
  }
}
