// Command line toolkit: preprocessing, vocabulary building, training,
// evaluation, batch generation, interactive chat, and attention heatmap
// export. Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hran/hran.hpp"

namespace {

using namespace hran;

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream iss(s);
  std::vector<std::string> out;
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> split_tabs(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find('\t', start);
    out.push_back(s.substr(start, pos == std::string::npos ? pos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string fmt6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt4(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// One context per line: turns separated by tabs, tokens by spaces.
std::vector<std::vector<std::vector<std::string>>> read_context_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  std::vector<std::vector<std::vector<std::string>>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    std::vector<std::vector<std::string>> turns;
    for (const auto& field : split_tabs(line)) {
      auto toks = split_ws(field);
      if (!toks.empty()) turns.push_back(std::move(toks));
    }
    if (turns.size() < 2) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": a context needs at least two tab-separated turns");
    }
    out.push_back(std::move(turns));
  }
  return out;
}

std::vector<std::string> read_token_line(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  std::string line;
  while (std::getline(in, line)) {
    auto toks = split_ws(strip_cr(line));
    if (!toks.empty()) return toks;
  }
  throw FormatError(path + ": no tokens found");
}

ContextInput encode_context(const std::vector<std::vector<std::string>>& turns,
                            const Vocab& vocab) {
  std::vector<std::vector<int>> ids;
  ids.reserve(turns.size());
  for (const auto& turn : turns) {
    std::vector<int> u;
    u.reserve(turn.size());
    for (const auto& tok : turn) u.push_back(vocab.id_or_unk(tok));
    ids.push_back(std::move(u));
  }
  return ContextInput::dense(ids);
}

std::vector<EncodedExample> encode_all(const std::vector<Example>& examples,
                                       const Vocab& context_vocab, const Vocab& response_vocab) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode_example(ex, context_vocab, response_vocab));
  return out;
}

// Vocabularies ride inside checkpoints so eval/generate/chat need only --ckpt.
Vocab vocab_from_tokens(const std::vector<std::string>& tokens, const std::string& which) {
  const auto& res = Vocab::reserved();
  if (tokens.size() < res.size()) {
    throw CompatibilityError("checkpoint: " + which + " vocabulary is too short");
  }
  for (std::size_t i = 0; i < res.size(); ++i) {
    if (tokens[i] != res[i]) {
      throw CompatibilityError("checkpoint: " + which + " vocabulary lacks the reserved header");
    }
  }
  Vocab v;
  for (std::size_t i = res.size(); i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

Vocab vocab_from_extra(const nlohmann::json& extra, const std::string& key) {
  if (!extra.contains(key)) {
    throw CompatibilityError("checkpoint: missing embedded " + key);
  }
  return vocab_from_tokens(extra.at(key).get<std::vector<std::string>>(), key);
}

DecodeOptions decode_options_from_extra(const nlohmann::json& extra) {
  if (extra.contains("run_config") && extra.at("run_config").contains("decode")) {
    return extra.at("run_config").at("decode").get<DecodeOptions>();
  }
  return DecodeOptions{};
}

void check_vocab_sizes(const ModelConfig& cfg, const Vocab& context_vocab,
                       const Vocab& response_vocab) {
  if (cfg.context_vocab_size != context_vocab.size() ||
      cfg.response_vocab_size != response_vocab.size()) {
    throw CompatibilityError("checkpoint: vocabulary sizes disagree with the model config");
  }
}

Precision checkpoint_precision(const std::string& path) {
  const auto header = read_checkpoint_header(path);
  return header.at("config").get<ModelConfig>().precision;
}

// ---- prep ----

int cmd_prep(const std::string& in, const std::string& out, int min_turns, int max_utt_len,
             int max_resp_count) {
  const auto convs = load_raw(in);
  FilterRules rules;
  rules.min_turns = min_turns;
  rules.max_utterance_length = max_utt_len;
  rules.max_response_count = max_resp_count;
  const auto result = filter_conversations(convs, rules);
  write_examples(out, result.examples);
  nlohmann::json tally{{"loaded", convs.size()},
                       {"kept", result.tally.kept},
                       {"rejected",
                        {{"too_few_turns", result.tally.too_few_turns},
                         {"overlong_utterance", result.tally.overlong_utterance},
                         {"frequent_response", result.tally.frequent_response}}},
                       {"out", out}};
  std::cout << tally.dump() << "\n";
  return 0;
}

// ---- vocab ----

int cmd_vocab(const std::string& in, const std::string& out, const std::string& side, int size) {
  const auto examples = read_examples(in);
  const VocabSide which = side == "context" ? VocabSide::context : VocabSide::response;
  const auto built = build_vocab(examples, which, size);
  built.vocab.save(out);
  nlohmann::json summary{{"side", side},
                         {"tokens", built.vocab.size()},
                         {"coverage", built.coverage},
                         {"out", out}};
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---- train ----

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return j.get<RunConfig>();
}

template <typename T>
int run_train(RunConfig rc, const std::string& resume_path) {
  Vocab cvoc = Vocab::load(rc.context_vocab_path);
  Vocab rvoc = Vocab::load(rc.response_vocab_path);
  if (rc.model.context_vocab_size == 0) rc.model.context_vocab_size = cvoc.size();
  if (rc.model.response_vocab_size == 0) rc.model.response_vocab_size = rvoc.size();
  if (rc.model.context_vocab_size != cvoc.size() ||
      rc.model.response_vocab_size != rvoc.size()) {
    throw CompatibilityError("train: config vocabulary sizes disagree with the vocab files");
  }
  rc.model.validate();
  rc.schedule.validate();

  const auto train_ex = encode_all(read_examples(rc.train_path), cvoc, rvoc);
  const auto val_ex = encode_all(read_examples(rc.validation_path), cvoc, rvoc);

  auto model = Model<T>::init(rc.model);
  FitOptions opts;
  opts.checkpoint_path = rc.checkpoint_path;
  opts.best_checkpoint_path = rc.best_checkpoint_path;
  opts.report_path = rc.report_path;
  opts.extra = nlohmann::json{{"run_config", rc},
                              {"context_vocab", cvoc.tokens()},
                              {"response_vocab", rvoc.tokens()}};

  FitResult result;
  if (!resume_path.empty()) {
    auto ck = load_checkpoint<T>(resume_path);
    auto rp = restore_checkpoint(model, ck);
    result = fit(model, train_ex, val_ex, rc.schedule, opts, &rp);
  } else {
    result = fit(model, train_ex, val_ex, rc.schedule, opts);
  }

  nlohmann::json summary{{"stop_reason", result.stop_reason},
                         {"epochs_run", result.epochs.size()},
                         {"best_val_ppl", result.final_state.best_ppl},
                         {"best_epoch", result.final_state.best_epoch},
                         {"final_lr", result.final_state.lr},
                         {"fingerprint", config_fingerprint(rc.model)}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_path) {
  RunConfig rc = load_run_config(config_path);
  if (rc.model.precision == Precision::f32) return run_train<float>(rc, resume_path);
  return run_train<double>(rc, resume_path);
}

// ---- eval ----

template <typename T>
int run_eval(const std::string& ckpt_path, const std::string& data_path) {
  auto ck = load_checkpoint<T>(ckpt_path);
  auto model = model_from_checkpoint(ck);
  Vocab cvoc = vocab_from_extra(ck.extra, "context_vocab");
  Vocab rvoc = vocab_from_extra(ck.extra, "response_vocab");
  check_vocab_sizes(model.config, cvoc, rvoc);
  const auto examples = encode_all(read_examples(data_path), cvoc, rvoc);
  const auto report = perplexity(model, examples, config_fingerprint(model.config));
  std::cout << report.to_json().dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path) {
  if (checkpoint_precision(ckpt_path) == Precision::f32) {
    return run_eval<float>(ckpt_path, data_path);
  }
  return run_eval<double>(ckpt_path, data_path);
}

// ---- generate ----

template <typename T>
int run_generate(const std::string& ckpt_path, const std::string& contexts_path,
                 const DecodeOptions& opt) {
  auto ck = load_checkpoint<T>(ckpt_path);
  auto model = model_from_checkpoint(ck);
  Vocab cvoc = vocab_from_extra(ck.extra, "context_vocab");
  Vocab rvoc = vocab_from_extra(ck.extra, "response_vocab");
  check_vocab_sizes(model.config, cvoc, rvoc);

  const auto contexts = read_context_lines(contexts_path);
  std::cout << "# generate fp=" << config_fingerprint(model.config) << " beam=" << opt.beam_width
            << " nbest=" << opt.nbest << " max_len=" << opt.max_length
            << " allow_unk=" << (opt.allow_unk ? 1 : 0) << "\n";
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const auto ctx = encode_context(contexts[i], cvoc);
    const auto hyps = hran_beam(model.params, model.config, ctx, opt);
    for (std::size_t r = 0; r < hyps.size(); ++r) {
      std::cout << (i + 1) << "\t" << (r + 1) << "\t" << fmt6(hyps[r].log_prob) << "\t"
                << join(decode_tokens(rvoc, hyps[r].ids), " ") << "\n";
    }
  }
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& contexts_path,
                 const DecodeOptions& opt) {
  if (checkpoint_precision(ckpt_path) == Precision::f32) {
    return run_generate<float>(ckpt_path, contexts_path, opt);
  }
  return run_generate<double>(ckpt_path, contexts_path, opt);
}

// ---- chat ----

template <typename T>
int run_chat(const std::string& ckpt_path, bool trace_on, const std::string& opening) {
  auto ck = load_checkpoint<T>(ckpt_path);
  auto model = model_from_checkpoint(ck);
  Vocab cvoc = vocab_from_extra(ck.extra, "context_vocab");
  Vocab rvoc = vocab_from_extra(ck.extra, "response_vocab");
  check_vocab_sizes(model.config, cvoc, rvoc);
  DecodeOptions opt = decode_options_from_extra(ck.extra);

  std::vector<std::vector<int>> turns;
  auto push_tokens = [&](const std::vector<std::string>& toks) {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(cvoc.id_or_unk(t));
    turns.push_back(std::move(ids));
  };
  auto reset = [&] {
    turns.clear();
    const auto opening_toks = split_ws(opening);
    if (!opening_toks.empty()) push_tokens(opening_toks);
  };
  reset();

  std::cout << "chat ready: /reset, /trace on|off, /quit\n";
  std::string line;
  while (true) {
    std::cout << "> " << std::flush;
    if (!std::getline(std::cin, line)) {
      std::cout << "\n";
      return 0;
    }
    line = strip_cr(line);
    if (line == "/quit") return 0;
    if (line == "/reset") {
      reset();
      std::cout << "(context cleared)\n";
      continue;
    }
    if (line == "/trace on") {
      trace_on = true;
      std::cout << "(trace on)\n";
      continue;
    }
    if (line == "/trace off") {
      trace_on = false;
      std::cout << "(trace off)\n";
      continue;
    }
    const auto toks = split_ws(line);
    if (toks.empty()) {
      std::cout << "(say something)\n";
      continue;
    }
    push_tokens(toks);
    if (turns.size() < 2) {
      std::cout << "(one more turn, please)\n";
      continue;
    }
    const auto ctx = ContextInput::dense(turns);
    const auto hyps = hran_beam(model.params, model.config, ctx, opt);
    const auto& best = hyps.front();
    const auto words = decode_tokens(rvoc, best.ids);
    std::cout << (words.empty() ? "(silence)" : join(words, " ")) << "\n";
    if (trace_on) {
      std::vector<int> rids = best.ids;
      rids.push_back(kEosId);
      AttentionTrace trace;
      model.example_nll(EncodedExample{ctx, ResponseInput::dense(rids)}, &trace);
      std::string betas;
      for (double b : trace.mean_utterance_weights()) betas += " " + fmt4(b);
      std::cout << "trace:" << betas << "\n";
    }
    if (!words.empty()) push_tokens(words);
  }
}

int cmd_chat(const std::string& ckpt_path, bool trace_on, const std::string& opening) {
  if (checkpoint_precision(ckpt_path) == Precision::f32) {
    return run_chat<float>(ckpt_path, trace_on, opening);
  }
  return run_chat<double>(ckpt_path, trace_on, opening);
}

// ---- attn-export ----

template <typename T>
int run_attn_export(const std::string& ckpt_path, const std::string& context_path,
                    const std::string& response_path, const std::string& json_path,
                    const std::string& svg_path) {
  auto ck = load_checkpoint<T>(ckpt_path);
  auto model = model_from_checkpoint(ck);
  Vocab cvoc = vocab_from_extra(ck.extra, "context_vocab");
  Vocab rvoc = vocab_from_extra(ck.extra, "response_vocab");
  check_vocab_sizes(model.config, cvoc, rvoc);
  DecodeOptions opt = decode_options_from_extra(ck.extra);

  const auto contexts = read_context_lines(context_path);
  if (contexts.empty()) throw FormatError(context_path + ": no context found");
  const auto& turns = contexts.front();
  const auto ctx = encode_context(turns, cvoc);

  TraceExportInputs in;
  in.context = turns;
  in.fingerprint = config_fingerprint(model.config);
  if (!response_path.empty()) {
    in.response = read_token_line(response_path);
    in.mode = "forced";
    std::vector<int> rids;
    rids.reserve(in.response.size() + 1);
    for (const auto& t : in.response) rids.push_back(rvoc.id_or_unk(t));
    rids.push_back(kEosId);
    model.example_nll(EncodedExample{ctx, ResponseInput::dense(rids)}, &in.trace);
  } else {
    auto greedy = hran_greedy(model.params, model.config, ctx, opt);
    in.response = decode_tokens(rvoc, greedy.ids);
    in.mode = "greedy";
    in.trace = std::move(greedy.trace);
  }
  write_trace_files(in, json_path, svg_path);
  nlohmann::json summary{{"json", json_path},
                         {"svg", svg_path},
                         {"mode", in.mode},
                         {"steps", in.trace.steps.size()},
                         {"fingerprint", in.fingerprint}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_attn_export(const std::string& ckpt_path, const std::string& context_path,
                    const std::string& response_path, const std::string& json_path,
                    const std::string& svg_path) {
  if (checkpoint_precision(ckpt_path) == Precision::f32) {
    return run_attn_export<float>(ckpt_path, context_path, response_path, json_path, svg_path);
  }
  return run_attn_export<double>(ckpt_path, context_path, response_path, json_path, svg_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical recurrent attention toolkit"};
  app.require_subcommand(1);

  auto* prep = app.add_subcommand("prep", "filter a raw corpus into example records");
  std::string prep_in, prep_out;
  int min_turns = 3, max_utt_len = 50, max_resp_count = 50;
  prep->add_option("--in", prep_in, "raw corpus, one conversation per line")->required();
  prep->add_option("--out", prep_out, "output example records")->required();
  prep->add_option("--min-turns", min_turns, "minimum turns per conversation");
  prep->add_option("--max-utt-len", max_utt_len, "maximum tokens per utterance");
  prep->add_option("--max-resp-count", max_resp_count, "maximum repeats of one response");

  auto* vocab = app.add_subcommand("vocab", "build a frequency vocabulary from examples");
  std::string vocab_in, vocab_out, vocab_side;
  int vocab_size = 40000;
  vocab->add_option("--in", vocab_in, "example records")->required();
  vocab->add_option("--out", vocab_out, "output vocabulary file")->required();
  vocab->add_option("--side", vocab_side, "which side to count")
      ->required()
      ->check(CLI::IsMember({"context", "response"}));
  vocab->add_option("--size", vocab_size, "maximum non-reserved entries");

  auto* train = app.add_subcommand("train", "fit a model from a run configuration");
  std::string train_config, train_resume;
  train->add_option("--config", train_config, "run configuration JSON")->required();
  train->add_option("--resume", train_resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on example records");
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "example records")->required();

  auto* gen = app.add_subcommand("generate", "beam-decode responses for a context file");
  std::string gen_ckpt, gen_contexts;
  DecodeOptions gen_opt;
  gen->add_option("--ckpt", gen_ckpt, "checkpoint file")->required();
  gen->add_option("--contexts", gen_contexts, "tab-separated turns, one context per line")
      ->required();
  gen->add_option("--beam", gen_opt.beam_width, "beam width");
  gen->add_option("--nbest", gen_opt.nbest, "hypotheses per context");
  gen->add_option("--max-len", gen_opt.max_length, "maximum response length");
  gen->add_flag("--allow-unk", gen_opt.allow_unk, "permit the unknown token in output");
  bool gen_greedy = false;
  gen->add_flag("--greedy", gen_greedy, "decode greedily (same as --beam 1)");

  auto* chat = app.add_subcommand("chat", "interactive session against a checkpoint");
  std::string chat_ckpt, chat_opening = "你好";
  bool chat_trace = false;
  chat->add_option("--ckpt", chat_ckpt, "checkpoint file")->required();
  chat->add_flag("--trace", chat_trace, "print mean utterance weights per response");
  chat->add_option("--opening", chat_opening, "seed utterance so replies start at turn one");

  auto* attn = app.add_subcommand("attn-export", "write attention JSON and SVG heatmap");
  std::string attn_ckpt, attn_context, attn_response, attn_json, attn_svg;
  attn->add_option("--ckpt", attn_ckpt, "checkpoint file")->required();
  attn->add_option("--context", attn_context, "context file (tab-separated turns)")->required();
  attn->add_option("--response", attn_response, "force this response instead of decoding");
  attn->add_option("--json", attn_json, "output JSON path")->required();
  attn->add_option("--svg", attn_svg, "output SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (prep->parsed()) return cmd_prep(prep_in, prep_out, min_turns, max_utt_len, max_resp_count);
    if (vocab->parsed()) return cmd_vocab(vocab_in, vocab_out, vocab_side, vocab_size);
    if (train->parsed()) return cmd_train(train_config, train_resume);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data);
    if (gen->parsed()) {
      if (gen_greedy) gen_opt.beam_width = 1;
      return cmd_generate(gen_ckpt, gen_contexts, gen_opt);
    }
    if (chat->parsed()) return cmd_chat(chat_ckpt, chat_trace, chat_opening);
    if (attn->parsed()) {
      return cmd_attn_export(attn_ckpt, attn_context, attn_response, attn_json, attn_svg);
    }
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
