#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "hran/hran.hpp"

using namespace hran;

namespace {

std::string cli_path() {
  const char* env = std::getenv("HRAN_CLI");
  REQUIRE(env != nullptr);
  return env;
}

struct CmdResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp_or_empty(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out << content;
}

CmdResult run_cli(const std::string& args, const std::string& stdin_text = "") {
  static int counter = 0;
  const std::string tag = "tmp_cli_io_" + std::to_string(counter++);
  const std::string in_f = tag + ".in", out_f = tag + ".out", err_f = tag + ".err";
  write_file(in_f, stdin_text);
  const std::string cmd =
      "'" + cli_path() + "' " + args + " <" + in_f + " >" + out_f + " 2>" + err_f;
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp_or_empty(out_f);
  r.err = slurp_or_empty(err_f);
  std::remove(in_f.c_str());
  std::remove(out_f.c_str());
  std::remove(err_f.c_str());
  return r;
}

// A small deterministic corpus plus vocab files and a run config, trained
// once through the real binary. Paths share a tag so cases never collide.
struct TrainedFixture {
  std::string tag;
  std::string examples, ctx_vocab, resp_vocab, config;
  std::string latest, best, report;
  nlohmann::json summary;

  explicit TrainedFixture(const std::string& t, int max_epochs = 2, bool run = true) : tag(t) {
    examples = tag + "_ex.jsonl";
    ctx_vocab = tag + "_ctx.vocab";
    resp_vocab = tag + "_resp.vocab";
    config = tag + "_run.json";
    latest = tag + "_latest.ckpt";
    best = tag + "_best.ckpt";
    report = tag + "_report.jsonl";

    std::vector<Example> exs;
    const std::vector<std::string> words{"hi", "there", "how", "are", "you",
                                         "fine", "ok", "see", "later", "good"};
    for (int i = 0; i < 12; ++i) {
      Example ex;
      ex.context = {{words[i % 10], words[(i + 3) % 10]}, {words[(i + 5) % 10]}};
      ex.response = {words[(i + 2) % 10], words[(i + 7) % 10]};
      exs.push_back(ex);
    }
    write_examples(examples, exs);
    build_vocab(exs, VocabSide::context, 100).vocab.save(ctx_vocab);
    build_vocab(exs, VocabSide::response, 100).vocab.save(resp_vocab);

    nlohmann::json cfg{
        {"train_path", examples},
        {"validation_path", examples},
        {"context_vocab_path", ctx_vocab},
        {"response_vocab_path", resp_vocab},
        {"checkpoint_path", latest},
        {"best_checkpoint_path", best},
        {"report_path", report},
        {"model",
         {{"word_hidden", 4},
          {"utt_hidden", 4},
          {"decoder_hidden", 4},
          {"embed_dim", 3},
          {"seed", 17},
          {"init_gaussian", 0.04}}},
        {"schedule", {{"batch_size", 6}, {"max_epochs", max_epochs}}},
        {"decode", {{"beam_width", 3}, {"nbest", 1}, {"max_length", 6}}}};
    write_file(config, cfg.dump(1));

    if (run) {
      auto r = run_cli("train --config " + config);
      REQUIRE(r.code == 0);
      summary = nlohmann::json::parse(r.out);
    }
  }

  ~TrainedFixture() {
    for (const auto& f : {examples, ctx_vocab, resp_vocab, config, latest, best, report}) {
      std::remove(f.c_str());
    }
  }
};

Vocab vocab_from_json_tokens(const nlohmann::json& arr) {
  Vocab v;
  for (std::size_t i = 4; i < arr.size(); ++i) v.add(arr[i].get<std::string>());
  return v;
}

}  // namespace

TEST_CASE("cli usage errors") {
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("frobnicate").code == 2);
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("prep --in x.txt").code == 2);
  CHECK(run_cli("vocab --in a --out b --side sideways").code == 2);
  CHECK(run_cli("generate --ckpt a").code == 2);
}

TEST_CASE("cli prep") {
  const std::string raw = "tmp_cli_prep_raw.txt", out = "tmp_cli_prep_ex.jsonl";

  SECTION("tally matches a hand count") {
    // 1 too-few-turns, 1 overlong utterance, and with the cap at 1 the
    // response seen twice drops both of its conversations; 2 survive.
    std::string big;
    for (int i = 0; i < 51; ++i) big += "w ";
    write_file(raw, std::string() +
                        "a b\tc d\te f\n" +
                        "a a\tb b\n" +
                        "x\t" + big + "\ty\n" +
                        "p q\tr s\tsame one\n" +
                        "p p\tq q\tsame one\n" +
                        "m n\to p\tq r\n");
    auto r = run_cli("prep --in " + raw + " --out " + out + " --max-resp-count 1");
    REQUIRE(r.code == 0);
    auto tally = nlohmann::json::parse(r.out);
    CHECK(tally["loaded"] == 6);
    CHECK(tally["kept"] == 2);
    CHECK(tally["rejected"]["too_few_turns"] == 1);
    CHECK(tally["rejected"]["overlong_utterance"] == 1);
    CHECK(tally["rejected"]["frequent_response"] == 2);
    auto exs = read_examples(out);
    REQUIRE(exs.size() == 2);
    CHECK(exs[0].response == std::vector<std::string>{"e", "f"});
    std::remove(raw.c_str());
    std::remove(out.c_str());
  }

  SECTION("empty raw file gives empty output and zero tally") {
    write_file(raw, "");
    auto r = run_cli("prep --in " + raw + " --out " + out);
    REQUIRE(r.code == 0);
    auto tally = nlohmann::json::parse(r.out);
    CHECK(tally["loaded"] == 0);
    CHECK(tally["kept"] == 0);
    CHECK(read_examples(out).empty());
    std::remove(raw.c_str());
    std::remove(out.c_str());
  }

  SECTION("thresholds below the floor are usage errors") {
    write_file(raw, "a\tb\tc\n");
    CHECK(run_cli("prep --in " + raw + " --out " + out + " --min-turns 2").code == 2);
    std::remove(raw.c_str());
  }

  SECTION("missing input is a data error") {
    CHECK(run_cli("prep --in tmp_cli_no_such.txt --out " + out).code == 3);
  }
}

TEST_CASE("cli vocab") {
  const std::string ex = "tmp_cli_vocab_ex.jsonl", out = "tmp_cli_vocab.vocab";
  std::vector<Example> exs;
  Example e1;
  e1.context = {{"a", "b"}, {"a"}};
  e1.response = {"x", "y", "x"};
  Example e2;
  e2.context = {{"a", "c"}, {"b"}};
  e2.response = {"x"};
  write_examples(ex, {e1, e2});

  SECTION("sides are counted independently with exact coverage") {
    auto r = run_cli("vocab --in " + ex + " --out " + out + " --side context --size 2");
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(r.out);
    CHECK(j["tokens"] == 6);  // 4 reserved + {a, b}
    CHECK(j["coverage"].get<double>() == Catch::Approx(5.0 / 6.0).margin(1e-12));
    auto v = Vocab::load(out);
    CHECK(v.contains("a"));
    CHECK(v.contains("b"));
    CHECK(!v.contains("c"));

    auto r2 = run_cli("vocab --in " + ex + " --out " + out + " --side response --size 10");
    REQUIRE(r2.code == 0);
    auto j2 = nlohmann::json::parse(r2.out);
    CHECK(j2["coverage"].get<double>() == 1.0);
    CHECK(j2["tokens"] == 6);  // 4 reserved + {x, y}
  }

  SECTION("missing example file is a data error") {
    CHECK(run_cli("vocab --in tmp_cli_absent.jsonl --out " + out + " --side context").code == 3);
  }
  std::remove(ex.c_str());
  std::remove(out.c_str());
}

TEST_CASE("cli train and eval") {
  TrainedFixture fx("tmp_cli_te", 3);

  SECTION("training summary and report are complete") {
    CHECK(fx.summary["stop_reason"] == "max_epochs");
    CHECK(fx.summary["epochs_run"] == 3);
    CHECK(fx.summary["best_val_ppl"].is_number());
    std::ifstream rep(fx.report);
    std::string line;
    int lines = 0;
    while (std::getline(rep, line)) {
      CHECK(nlohmann::json::parse(line).contains("val_ppl"));
      ++lines;
    }
    CHECK(lines == 3);
  }

  SECTION("eval of the best checkpoint reproduces the recorded best perplexity bitwise") {
    auto r = run_cli("eval --ckpt " + fx.best + " --data " + fx.examples);
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(r.out);
    CHECK(j["perplexity"].get<double>() == fx.summary["best_val_ppl"].get<double>());
    CHECK(j["fingerprint"] == fx.summary["fingerprint"]);
  }

  SECTION("a second training run is byte-identical") {
    TrainedFixture fx2("tmp_cli_te2", 3);
    nlohmann::json a = fx.summary, b = fx2.summary;
    CHECK(a["best_val_ppl"].get<double>() == b["best_val_ppl"].get<double>());
    CHECK(a["fingerprint"] == b["fingerprint"]);
    CHECK(slurp_or_empty(fx.report) == slurp_or_empty(fx2.report));
  }

  SECTION("mismatched config vocab sizes are compatibility errors") {
    TrainedFixture fx3("tmp_cli_te3", 2, false);
    auto cfg = nlohmann::json::parse(slurp_or_empty(fx3.config));
    cfg["model"]["context_vocab_size"] = 999;
    write_file(fx3.config, cfg.dump(1));
    CHECK(run_cli("train --config " + fx3.config).code == 3);
  }
}

TEST_CASE("cli resume") {
  TrainedFixture straight("tmp_cli_rs_a", 4);
  TrainedFixture split("tmp_cli_rs_b", 2);

  auto cfg = nlohmann::json::parse(slurp_or_empty(split.config));
  cfg["schedule"]["max_epochs"] = 4;
  write_file(split.config, cfg.dump(1));
  auto r = run_cli("train --config " + split.config + " --resume " + split.latest);
  REQUIRE(r.code == 0);

  SECTION("the resumed run lands on the same parameters") {
    auto ea = run_cli("eval --ckpt " + straight.latest + " --data " + straight.examples);
    auto eb = run_cli("eval --ckpt " + split.latest + " --data " + split.examples);
    REQUIRE(ea.code == 0);
    REQUIRE(eb.code == 0);
    CHECK(ea.out == eb.out);
  }

  SECTION("the report continues where it stopped") {
    std::vector<std::string> la, lb;
    std::ifstream fa(straight.report), fb(split.report);
    std::string line;
    while (std::getline(fa, line)) la.push_back(line);
    while (std::getline(fb, line)) lb.push_back(line);
    REQUIRE(la.size() == 4);
    REQUIRE(lb.size() == 4);
    CHECK(la[2] == lb[2]);
    CHECK(la[3] == lb[3]);
  }
}

TEST_CASE("cli generate") {
  TrainedFixture fx("tmp_cli_gen", 2);
  const std::string ctxs = "tmp_cli_gen_ctx.txt";
  write_file(ctxs, "hi there\thow are you\nsee you\tlater ok\n");

  SECTION("ranked hypotheses per context under a fingerprinted header") {
    auto r = run_cli("generate --ckpt " + fx.best + " --contexts " + ctxs +
                     " --beam 3 --nbest 2 --max-len 5");
    REQUIRE(r.code == 0);
    std::istringstream out(r.out);
    std::string line;
    std::getline(out, line);
    CHECK(line.rfind("# generate fp=" + fx.summary["fingerprint"].get<std::string>(), 0) == 0);
    int rows = 0;
    while (std::getline(out, line)) {
      CHECK(std::count(line.begin(), line.end(), '\t') == 3);
      ++rows;
    }
    CHECK(rows == 4);  // 2 contexts x nbest 2
  }

  SECTION("two invocations are byte-identical") {
    const std::string args =
        "generate --ckpt " + fx.best + " --contexts " + ctxs + " --beam 4 --nbest 3";
    auto a = run_cli(args);
    auto b = run_cli(args);
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
  }

  SECTION("beam width one reproduces the greedy decode") {
    auto r = run_cli("generate --ckpt " + fx.best + " --contexts " + ctxs +
                     " --beam 1 --nbest 1 --max-len 6");
    REQUIRE(r.code == 0);

    auto ck = load_checkpoint<double>(fx.best);
    auto model = model_from_checkpoint(ck);
    Vocab cvoc = vocab_from_json_tokens(ck.extra["context_vocab"]);
    Vocab rvoc = vocab_from_json_tokens(ck.extra["response_vocab"]);
    DecodeOptions opt;
    opt.max_length = 6;
    std::vector<std::vector<std::vector<std::string>>> raw_ctxs{
        {{"hi", "there"}, {"how", "are", "you"}}, {{"see", "you"}, {"later", "ok"}}};
    std::istringstream out(r.out);
    std::string line;
    std::getline(out, line);  // header
    for (const auto& turns : raw_ctxs) {
      std::vector<std::vector<int>> ids;
      for (const auto& t : turns) {
        std::vector<int> u;
        for (const auto& w : t) u.push_back(cvoc.id_or_unk(w));
        ids.push_back(u);
      }
      auto greedy = hran_greedy(model.params, model.config, ContextInput::dense(ids), opt);
      std::string expect;
      for (std::size_t i = 0; i < greedy.ids.size(); ++i) {
        if (i) expect += " ";
        expect += rvoc.token(greedy.ids[i]);
      }
      REQUIRE(std::getline(out, line));
      CHECK(line.substr(line.rfind('\t') + 1) == expect);
    }
  }

  SECTION("the greedy flag is byte-identical to beam width one") {
    const std::string tail = " --contexts " + ctxs + " --nbest 1 --max-len 6";
    auto a = run_cli("generate --ckpt " + fx.best + tail + " --beam 1");
    auto b = run_cli("generate --ckpt " + fx.best + tail + " --greedy");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(a.out == b.out);
  }

  SECTION("a one-turn context line is a data error") {
    const std::string bad = "tmp_cli_gen_bad.txt";
    write_file(bad, "only one turn here\n");
    CHECK(run_cli("generate --ckpt " + fx.best + " --contexts " + bad).code == 3);
    std::remove(bad.c_str());
  }

  std::remove(ctxs.c_str());
}

TEST_CASE("cli chat") {
  TrainedFixture fx("tmp_cli_chat", 2);

  SECTION("a scripted session is byte-identical across runs") {
    const std::string script = "hello there\nhow are you\n/quit\n";
    auto a = run_cli("chat --ckpt " + fx.best, script);
    auto b = run_cli("chat --ckpt " + fx.best, script);
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(a.out.find("chat ready") != std::string::npos);
  }

  SECTION("reset drops the rolling context") {
    // After /reset with an empty opening, one turn is not enough to respond.
    auto r = run_cli("chat --ckpt " + fx.best + " --opening \"\"",
                     "hi there\n/reset\nhello again\n/quit\n");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("(one more turn, please)") != std::string::npos);
    CHECK(r.out.find("(context cleared)") != std::string::npos);
  }

  SECTION("trace prints one weight per context turn, summing to one") {
    auto r = run_cli("chat --ckpt " + fx.best, "/trace on\nhi you\n/quit\n");
    REQUIRE(r.code == 0);
    const auto pos = r.out.find("trace:");
    REQUIRE(pos != std::string::npos);
    std::istringstream trace_line(r.out.substr(pos + 6, r.out.find('\n', pos) - pos - 6));
    double v, sum = 0.0;
    int n = 0;
    while (trace_line >> v) {
      CHECK(v >= 0.0);
      sum += v;
      ++n;
    }
    CHECK(n == 2);  // opening utterance + one user turn
    CHECK(sum == Catch::Approx(1.0).margin(1e-2));
  }

  SECTION("garbage input never crashes the loop") {
    auto r = run_cli("chat --ckpt " + fx.best,
                     "\n\x01\x02 zzzUNSEENzzz \xef\xbf\xbd\n/trace sideways\n/quit\n");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("(say something)") != std::string::npos);
  }
}

TEST_CASE("cli attn export") {
  TrainedFixture fx("tmp_cli_attn", 2);
  const std::string ctx = "tmp_cli_attn_ctx.txt", jf = "tmp_cli_attn.json",
                    sf = "tmp_cli_attn.svg";
  write_file(ctx, "hi there\thow are you\n");

  SECTION("greedy mode writes internally consistent averages") {
    auto r = run_cli("attn-export --ckpt " + fx.best + " --context " + ctx + " --json " + jf +
                     " --svg " + sf);
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(slurp_or_empty(jf));
    CHECK(j["mode"] == "greedy");
    CHECK(j["fingerprint"] == fx.summary["fingerprint"]);
    const auto steps = j["steps"];
    REQUIRE(!steps.empty());
    for (std::size_t i = 0; i < j["utterance_importance"].size(); ++i) {
      double sum = 0.0;
      for (const auto& s : steps) sum += s["utterance_weights"][i].get<double>();
      CHECK(j["utterance_importance"][i].get<double>() ==
            Catch::Approx(sum / static_cast<double>(steps.size())).margin(1e-9));
    }
    CHECK(slurp_or_empty(sf).find("<svg ") != std::string::npos);
  }

  SECTION("forced mode walks the given response") {
    const std::string resp = "tmp_cli_attn_resp.txt";
    write_file(resp, "ok fine\n");
    auto r = run_cli("attn-export --ckpt " + fx.best + " --context " + ctx + " --response " +
                     resp + " --json " + jf + " --svg " + sf);
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(slurp_or_empty(jf));
    CHECK(j["mode"] == "forced");
    CHECK(j["response"] == nlohmann::json({"ok", "fine"}));
    CHECK(j["steps"].size() == 3);  // two tokens plus the stop symbol
    std::remove(resp.c_str());
  }

  SECTION("two exports are byte-identical") {
    const std::string args = "attn-export --ckpt " + fx.best + " --context " + ctx + " --json " +
                             jf + " --svg " + sf;
    REQUIRE(run_cli(args).code == 0);
    const std::string j1 = slurp_or_empty(jf), s1 = slurp_or_empty(sf);
    REQUIRE(run_cli(args).code == 0);
    CHECK(slurp_or_empty(jf) == j1);
    CHECK(slurp_or_empty(sf) == s1);
  }

  SECTION("single-word utterances give unit word importance") {
    const std::string ctx1 = "tmp_cli_attn_ctx1.txt";
    write_file(ctx1, "hi\tyou\n");
    auto r = run_cli("attn-export --ckpt " + fx.best + " --context " + ctx1 + " --json " + jf +
                     " --svg " + sf);
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(slurp_or_empty(jf));
    double beta_sum = 0.0;
    for (const auto& b : j["utterance_importance"]) beta_sum += b.get<double>();
    CHECK(beta_sum == Catch::Approx(1.0).margin(1e-9));
    for (const auto& row : j["word_importance"]) {
      REQUIRE(row.size() == 1);
      CHECK(row[0].get<double>() == Catch::Approx(1.0).margin(1e-12));
    }
    std::remove(ctx1.c_str());
  }

  std::remove(ctx.c_str());
  std::remove(jf.c_str());
  std::remove(sf.c_str());
}

TEST_CASE("cli exit codes") {
  SECTION("missing checkpoint file is a data error") {
    CHECK(run_cli("eval --ckpt tmp_cli_no.ckpt --data also_missing.jsonl").code == 3);
  }

  SECTION("malformed run config is a data error") {
    write_file("tmp_cli_badcfg.json", "{not json");
    CHECK(run_cli("train --config tmp_cli_badcfg.json").code == 3);
    std::remove("tmp_cli_badcfg.json");
  }

  SECTION("non-finite checkpoint tensors are numeric errors") {
    Checkpoint<double> ck;
    ck.config.context_vocab_size = 6;
    ck.config.response_vocab_size = 6;
    Tensor<double> bad = Tensor<double>::zeros(Shape{2});
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    ck.tensors.emplace_back("x", bad);
    save_checkpoint("tmp_cli_nan.ckpt", ck);
    CHECK(run_cli("eval --ckpt tmp_cli_nan.ckpt --data whatever.jsonl").code == 4);
    std::remove("tmp_cli_nan.ckpt");
  }
}
