#pragma once

// Attention-trace artifacts: a JSON file carrying the per-step weights plus
// their means, and an SVG heatmap of the means. Both are byte-stable for a
// given trace: key order and float formatting are pinned.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hran/error.hpp"
#include "hran/types.hpp"

namespace hran {

struct TraceExportInputs {
  std::vector<std::vector<std::string>> context;  // display tokens per utterance
  std::vector<std::string> response;              // forced or generated tokens
  AttentionTrace trace;
  std::string fingerprint;    // configuration fingerprint of the producing model
  std::string mode = "forced";  // "forced" or "greedy"
};

namespace detail {

inline void check_trace_inputs(const TraceExportInputs& in) {
  if (in.trace.steps.empty()) throw ContractError("trace export: empty trace");
  const auto& first = in.trace.steps[0];
  if (first.utterance_weights.size() != in.context.size()) {
    throw ContractError("trace export: utterance count does not match the context");
  }
  if (first.word_weights.size() != in.context.size()) {
    throw ContractError("trace export: word weight rows do not match the context");
  }
  for (std::size_t i = 0; i < in.context.size(); ++i) {
    if (first.word_weights[i].size() != in.context[i].size()) {
      throw ContractError("trace export: word weights do not match utterance " +
                          std::to_string(i + 1));
    }
  }
  for (const auto& s : in.trace.steps) {
    if (s.utterance_weights.size() != first.utterance_weights.size() ||
        s.word_weights.size() != first.word_weights.size()) {
      throw ContractError("trace export: ragged trace steps");
    }
  }
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

// First n codepoints of a UTF-8 string, never splitting a sequence.
inline std::string utf8_prefix(const std::string& s, std::size_t n) {
  std::size_t i = 0, seen = 0;
  while (i < s.size() && seen < n) {
    const unsigned char b = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (b >= 0xF0) len = 4;
    else if (b >= 0xE0) len = 3;
    else if (b >= 0xC0) len = 2;
    i = std::min(s.size(), i + len);
    ++seen;
  }
  return s.substr(0, i);
}

inline std::string fmt(const char* format, double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

}  // namespace detail

// JSON with the full per-step trace and the per-utterance / per-word means.
// nlohmann keeps keys sorted, so the dump is deterministic.
inline nlohmann::json trace_json(const TraceExportInputs& in) {
  detail::check_trace_inputs(in);
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : in.trace.steps) {
    steps.push_back({{"utterance_weights", s.utterance_weights},
                     {"word_weights", s.word_weights}});
  }
  return nlohmann::json{{"fingerprint", in.fingerprint},
                        {"mode", in.mode},
                        {"context", in.context},
                        {"response", in.response},
                        {"steps", steps},
                        {"utterance_importance", in.trace.mean_utterance_weights()},
                        {"word_importance", in.trace.mean_word_weights()}};
}

// One row per utterance: a red lead cell shaded by mean utterance weight,
// then blue word cells shaded by mean word weight. Shade is the weight itself
// (fill-opacity), so cells are directly comparable across the figure.
inline std::string trace_svg(const TraceExportInputs& in) {
  detail::check_trace_inputs(in);
  const auto beta = in.trace.mean_utterance_weights();
  const auto alpha = in.trace.mean_word_weights();
  const std::size_t m = in.context.size();

  const double margin = 12.0, cell_w = 64.0, cell_h = 26.0, gap = 4.0, lead_gap = 12.0;
  std::size_t max_t = 1;
  for (const auto& u : in.context) max_t = std::max(max_t, u.size());
  const double width = margin * 2 + cell_w + lead_gap +
                       static_cast<double>(max_t) * (cell_w + gap) - gap;
  const double height = margin * 2 + static_cast<double>(m) * (cell_h + gap) - gap;

  using detail::fmt;
  using detail::xml_escape;
  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt("%.2f", width) +
         "\" height=\"" + fmt("%.2f", height) + "\" viewBox=\"0 0 " + fmt("%.2f", width) +
         " " + fmt("%.2f", height) + "\" font-family=\"monospace\" font-size=\"11\">\n";
  svg += "<desc>attention heatmap fp=" + xml_escape(in.fingerprint) + " mode=" +
         xml_escape(in.mode) + " steps=" + std::to_string(in.trace.steps.size()) +
         "</desc>\n";
  svg += "<rect x=\"0.00\" y=\"0.00\" width=\"" + fmt("%.2f", width) + "\" height=\"" +
         fmt("%.2f", height) + "\" fill=\"#ffffff\"/>\n";

  auto cell = [&](double x, double y, const char* color, double weight,
                  const std::string& label, const std::string& hover) {
    std::string r;
    r += "<g><rect x=\"" + fmt("%.2f", x) + "\" y=\"" + fmt("%.2f", y) + "\" width=\"" +
         fmt("%.2f", cell_w) + "\" height=\"" + fmt("%.2f", cell_h) + "\" fill=\"" + color +
         "\" fill-opacity=\"" + fmt("%.4f", weight) +
         "\" stroke=\"#888888\" stroke-width=\"0.50\"/>\n";
    r += "<title>" + xml_escape(hover) + "</title>\n";
    r += "<text x=\"" + fmt("%.2f", x + cell_w / 2) + "\" y=\"" + fmt("%.2f", y + 17.0) +
         "\" text-anchor=\"middle\" fill=\"#111111\">" + xml_escape(label) + "</text></g>\n";
    return r;
  };

  for (std::size_t i = 0; i < m; ++i) {
    const double y = margin + static_cast<double>(i) * (cell_h + gap);
    const std::string utt_label = "u" + std::to_string(i + 1) + " " + fmt("%.4f", beta[i]);
    svg += cell(margin, y, "#cc2222", beta[i], utt_label,
                "utterance " + std::to_string(i + 1) + ": " + fmt("%.4f", beta[i]));
    for (std::size_t j = 0; j < in.context[i].size(); ++j) {
      const double x = margin + cell_w + lead_gap + static_cast<double>(j) * (cell_w + gap);
      std::string shown = detail::utf8_prefix(in.context[i][j], 8);
      if (shown.size() < in.context[i][j].size()) shown += "\xE2\x80\xA6";
      svg += cell(x, y, "#2255cc", alpha[i][j], shown,
                  in.context[i][j] + ": " + fmt("%.4f", alpha[i][j]));
    }
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << content;
  if (!out) throw FormatError(path + ": write failed");
}

inline void write_trace_files(const TraceExportInputs& in, const std::string& json_path,
                              const std::string& svg_path) {
  write_text_file(json_path, trace_json(in).dump(2) + "\n");
  write_text_file(svg_path, trace_svg(in));
}

}  // namespace hran
