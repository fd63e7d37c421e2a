#pragma once

// Segment labeling client for chat-completions style HTTP endpoints.
//
// Each segment is rendered into a prompt with its preceding lines as context,
// sent to the endpoint, and the reply's JSON object is parsed into a move
// label and a backtrack-confidence score. Every attempt is kept in an audit
// log so labels can be replayed without the endpoint.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
// <resolv.h>, pulled in by httplib, defines _res as a macro, which breaks
// Eigen headers included afterwards.
#ifdef _res
#undef _res
#endif
#include <nlohmann/json.hpp>

#include "rtrace/corpus.hpp"
#include "rtrace/error.hpp"

namespace rtrace {

inline constexpr std::string_view kDefaultPromptTemplate =
    "You are labeling one line of a model's step-by-step reasoning.\n"
    "\n"
    "Preceding lines:\n"
    "{context}\n"
    "\n"
    "Line to label:\n"
    "{segment}\n"
    "\n"
    "Classify the line as one move: continue, stall, backtrack, or exit.\n"
    "Rate from 0 to 100 how confident you are that the line backtracks "
    "(retracts, redoes, or abandons earlier work).\n"
    "Reply with only a JSON object: "
    "{\"move\": \"<move>\", \"score\": <0-100>, "
    "\"confidence\": {\"continue\": p, \"stall\": p, \"backtrack\": p, \"exit\": p}}\n";

struct EndpointConfig {
  std::string url;  // http://host:port/v1/chat/completions
  std::string model = "labeler";
  double temperature = 0.0;
  std::string api_key_env = "RTRACE_API_KEY";  // empty disables the credential
  std::string prompt_template{kDefaultPromptTemplate};
  std::string template_id = "default";
  std::size_t context_segments = 3;
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  double backoff_factor = 2.0;
  std::size_t parallelism = 4;
  bool force = false;  // relabel segments that already carry a score
  std::chrono::seconds timeout{60};
};

struct LabelRequest {
  std::string segment_text;
  std::vector<std::string> context;  // oldest first
  std::string template_id = "default";

  std::string render(std::string_view tmpl) const {
    std::string ctx;
    for (const auto& line : context) {
      if (!ctx.empty()) ctx += '\n';
      ctx += line;
    }
    if (ctx.empty()) ctx = "(none)";
    std::string out(tmpl);
    auto replace_all = [&out](std::string_view key, const std::string& value) {
      for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
        out.replace(pos, key.size(), value);
      }
    };
    replace_all("{context}", ctx);
    replace_all("{segment}", segment_text);
    if (detail::trim(out).empty()) throw DomainError("rendered prompt is empty");
    return out;
  }
};

struct LabelResponse {
  Move move = Move::kContinue;
  double backtrack_score = 0.0;
  std::optional<std::map<std::string, double>> move_confidence;
  bool clamped = false;
  double raw_score = 0.0;
  std::string raw_payload;
};

namespace detail {

inline std::optional<nlohmann::json> first_json_object(std::string_view text) {
  for (auto open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
    auto group = brace_group(text, open);
    if (!group) return std::nullopt;
    auto parsed = nlohmann::json::parse(text.substr(open, group->second + 1 - open), nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
  }
  return std::nullopt;
}

inline std::optional<nlohmann::json> fenced_json_object(std::string_view text) {
  const auto fence = text.find("```");
  if (fence == std::string_view::npos) return std::nullopt;
  auto body_start = text.find('\n', fence);
  if (body_start == std::string_view::npos) return std::nullopt;
  const auto close = text.find("```", body_start);
  if (close == std::string_view::npos) return std::nullopt;
  auto parsed = nlohmann::json::parse(text.substr(body_start + 1, close - body_start - 1), nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object()) return std::nullopt;
  return parsed;
}

}  // namespace detail

/// Parses a label from reply text: the first embedded JSON object, then one
/// fenced code block. Scores are clamped into [0, 100]; anything unparseable
/// throws ValidationError and never becomes a score.
inline LabelResponse parse_label_content(std::string_view content) {
  auto obj = detail::first_json_object(content);
  auto usable = [](const std::optional<nlohmann::json>& j) {
    return j && j->contains("move") && (j->contains("score") || j->contains("backtrack_score"));
  };
  if (!usable(obj)) obj = detail::fenced_json_object(content);
  if (!usable(obj)) throw ValidationError("reply carries no label object");
  const auto& j = *obj;
  LabelResponse r;
  r.raw_payload = std::string(content);
  if (!j["move"].is_string()) throw ValidationError("label move is not a string");
  const auto move = parse_move(j["move"].get<std::string>());
  if (!move) throw ValidationError("unknown move label '" + j["move"].get<std::string>() + "'");
  r.move = *move;
  const auto& score = j.contains("score") ? j["score"] : j["backtrack_score"];
  if (!score.is_number()) throw ValidationError("label score is not numeric");
  r.raw_score = score.get<double>();
  if (!std::isfinite(r.raw_score)) throw ValidationError("label score is not finite");
  r.backtrack_score = std::clamp(r.raw_score, 0.0, 100.0);
  r.clamped = r.backtrack_score != r.raw_score;
  if (auto it = j.find("confidence"); it != j.end() && it->is_object()) {
    std::map<std::string, double> conf;
    double total = 0.0;
    bool ok = true;
    for (const auto& [k, v] : it->items()) {
      if (!v.is_number() || !parse_move(k)) {
        ok = false;
        break;
      }
      conf[k] = v.get<double>();
      total += conf[k];
    }
    if (ok && std::abs(total - 1.0) <= 1e-6) r.move_confidence = std::move(conf);
  }
  return r;
}

/// Message content of the first choice in a chat-completions response body.
inline std::string chat_message_content(std::string_view body) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ValidationError("response is not JSON");
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("response has no choices[0].message.content");
  }
}

inline LabelResponse parse_chat_response(std::string_view body) {
  auto r = parse_label_content(chat_message_content(body));
  r.raw_payload = std::string(body);
  return r;
}

inline std::string chat_request_body(const EndpointConfig& config, const std::string& prompt) {
  nlohmann::json j{{"model", config.model},
                   {"temperature", config.temperature},
                   {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
  return j.dump();
}

struct TransportResult {
  int status = 0;  // HTTP status, 0 when no response arrived
  std::string body;
  std::string error;

  bool ok() const { return status >= 200 && status < 300; }
};

using Transport = std::function<TransportResult(const std::string& request_body)>;
using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// POSTs to the endpoint with cpp-httplib. Only plain http:// URLs are
/// supported by this build.
inline Transport http_transport(const EndpointConfig& config) {
  const auto scheme_end = config.url.find("://");
  if (scheme_end == std::string::npos) throw DomainError("endpoint URL needs a scheme");
  const auto path_start = config.url.find('/', scheme_end + 3);
  const std::string origin = config.url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : config.url.substr(path_start);
  std::string key;
  if (!config.api_key_env.empty()) {
    const char* value = std::getenv(config.api_key_env.c_str());
    if (value == nullptr || *value == '\0') throw DomainError("credential variable " + config.api_key_env + " is not set");
    key = value;
  }
  const auto timeout = config.timeout;
  return [origin, path, key, timeout](const std::string& body) {
    httplib::Client client(origin);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    httplib::Headers headers;
    if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
    auto res = client.Post(path, headers, body, "application/json");
    TransportResult out;
    if (!res) {
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    if (!out.ok()) out.error = "HTTP " + std::to_string(res->status);
    return out;
  };
}

struct AuditRecord {
  std::string trace_id;
  std::size_t segment_index = 0;
  int attempt = 0;  // 1-based
  int status = 0;
  std::string payload;
  std::string error;
  std::optional<Move> move;
  std::optional<double> score;
  bool clamped = false;
};

inline nlohmann::json audit_to_json(const AuditRecord& a) {
  nlohmann::json j{{"trace_id", a.trace_id}, {"segment_index", a.segment_index}, {"attempt", a.attempt},
                   {"status", a.status},     {"payload", a.payload},             {"error", a.error}};
  j["move"] = a.move ? nlohmann::json(std::string(to_string(*a.move))) : nlohmann::json(nullptr);
  j["score"] = a.score ? nlohmann::json(*a.score) : nlohmann::json(nullptr);
  j["clamped"] = a.clamped;
  return j;
}

inline AuditRecord audit_from_json(const nlohmann::json& j) {
  AuditRecord a;
  try {
    a.trace_id = j.at("trace_id").get<std::string>();
    a.segment_index = j.at("segment_index").get<std::size_t>();
    a.attempt = j.at("attempt").get<int>();
    a.status = j.at("status").get<int>();
    a.payload = j.at("payload").get<std::string>();
    a.error = j.value("error", std::string{});
    if (j.contains("move") && j["move"].is_string()) a.move = parse_move(j["move"].get<std::string>());
    if (j.contains("score") && j["score"].is_number()) a.score = j["score"].get<double>();
    a.clamped = j.value("clamped", false);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid audit record: ") + e.what());
  }
  return a;
}

inline void write_audit_jsonl(std::ostream& out, const std::vector<AuditRecord>& records) {
  for (const auto& a : records) out << audit_to_json(a).dump() << '\n';
}

inline std::vector<AuditRecord> read_audit_jsonl(std::istream& in) {
  std::vector<AuditRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ValidationError("audit log line is not JSON");
    out.push_back(audit_from_json(j));
  }
  return out;
}

struct SegmentFailure {
  std::string trace_id;
  std::size_t segment_index = 0;
  std::string error;
};

struct AnnotationReport {
  std::size_t labeled = 0;
  std::size_t skipped = 0;  // already scored
  std::size_t retries = 0;
  std::vector<SegmentFailure> failures;
  std::vector<std::string> warnings;
  std::vector<AuditRecord> audit;
};

struct AnnotationResult {
  Corpus corpus;
  AnnotationReport report;
};

namespace detail {

struct WorkItem {
  std::size_t trace = 0;
  std::size_t segment = 0;
};

struct WorkOutcome {
  std::optional<LabelResponse> label;
  std::vector<AuditRecord> audit;
  std::optional<std::string> failure;
};

inline void apply_label(Segment& seg, const LabelResponse& label) {
  seg.move = label.move;
  seg.backtrack_score = label.backtrack_score;
  seg.move_confidence = label.move_confidence;
}

}  // namespace detail

/// Labels every segment of the corpus through `transport`. Transport
/// failures are retried with exponential backoff; replies that cannot be
/// parsed are recorded and leave the segment unscored.
inline AnnotationResult annotate_corpus(const Corpus& corpus, const EndpointConfig& config, const Transport& transport,
                                        const Sleeper& sleep = [](std::chrono::milliseconds d) {
                                          std::this_thread::sleep_for(d);
                                        }) {
  if (config.max_attempts < 1) throw DomainError("max_attempts must be at least 1");
  AnnotationResult result{corpus, {}};
  std::vector<detail::WorkItem> items;
  for (std::size_t t = 0; t < corpus.traces.size(); ++t) {
    for (std::size_t s = 0; s < corpus.traces[t].segments.size(); ++s) {
      if (corpus.traces[t].segments[s].scored() && !config.force) {
        ++result.report.skipped;
        continue;
      }
      items.push_back({t, s});
    }
  }

  std::vector<detail::WorkOutcome> outcomes(items.size());
  auto run = [&](std::size_t i) {
    const auto& trace = corpus.traces[items[i].trace];
    const auto& seg = trace.segments[items[i].segment];
    auto& out = outcomes[i];
    if (!trace.raw_text) {
      out.failure = "trace has no reasoning text";
      return;
    }
    LabelRequest req;
    req.template_id = config.template_id;
    req.segment_text = segment_text(*trace.raw_text, seg);
    const auto first = items[i].segment >= config.context_segments ? items[i].segment - config.context_segments : 0;
    for (std::size_t c = first; c < items[i].segment; ++c) {
      req.context.push_back(segment_text(*trace.raw_text, trace.segments[c]));
    }
    const auto body = chat_request_body(config, req.render(config.prompt_template));
    auto delay = config.base_delay;
    for (int attempt = 1; attempt <= config.max_attempts; ++attempt) {
      AuditRecord rec{trace.trace_id, seg.index, attempt, 0, {}, {}, {}, {}, false};
      auto res = transport(body);
      rec.status = res.status;
      rec.payload = res.body;
      if (res.ok()) {
        try {
          auto label = parse_chat_response(res.body);
          rec.move = label.move;
          rec.score = label.backtrack_score;
          rec.clamped = label.clamped;
          out.label = std::move(label);
        } catch (const ValidationError& e) {
          rec.error = std::string("parse error: ") + e.what();
          out.failure = rec.error;
        }
        out.audit.push_back(std::move(rec));
        return;
      }
      rec.error = res.error.empty() ? "request failed" : res.error;
      out.audit.push_back(rec);
      if (attempt == config.max_attempts) {
        out.failure = "endpoint unreachable after " + std::to_string(attempt) + " attempts: " + rec.error;
        return;
      }
      sleep(delay);
      delay = std::chrono::milliseconds(
          static_cast<std::int64_t>(static_cast<double>(delay.count()) * config.backoff_factor));
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(config.parallelism, items.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < items.size(); i = next++) run(i);
    });
  }
  for (auto& th : pool) th.join();

  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& trace = result.corpus.traces[items[i].trace];
    auto& seg = trace.segments[items[i].segment];
    auto& out = outcomes[i];
    result.report.retries += out.audit.empty() ? 0 : out.audit.size() - 1;
    for (auto& a : out.audit) result.report.audit.push_back(std::move(a));
    if (out.label) {
      if (out.label->clamped) {
        result.report.warnings.push_back("trace " + trace.trace_id + " segment " + std::to_string(seg.index) +
                                         ": score " + format_general(out.label->raw_score) + " clamped to " +
                                         format_general(out.label->backtrack_score));
      }
      detail::apply_label(seg, *out.label);
      ++result.report.labeled;
    } else {
      // A forced relabel that fails leaves the segment unscored.
      seg.move.reset();
      seg.backtrack_score.reset();
      seg.move_confidence.reset();
      result.report.failures.push_back({trace.trace_id, seg.index, out.failure.value_or("unknown failure")});
    }
  }
  for (auto& t : result.corpus.traces) finalize_trace(t);
  return result;
}

inline AnnotationResult annotate_corpus(const Corpus& corpus, const EndpointConfig& config) {
  return annotate_corpus(corpus, config, http_transport(config));
}

/// Re-derives labels from the payloads of successful audit records, without
/// contacting the endpoint.
inline Corpus replay_annotations(const Corpus& corpus, const std::vector<AuditRecord>& audit) {
  Corpus out = corpus;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < out.traces.size(); ++i) index[out.traces[i].trace_id] = i;
  for (const auto& a : audit) {
    if (a.status < 200 || a.status >= 300 || !a.error.empty()) continue;
    auto it = index.find(a.trace_id);
    if (it == index.end()) throw ValidationError("audit record for unknown trace " + a.trace_id);
    auto& trace = out.traces[it->second];
    if (a.segment_index >= trace.segments.size()) throw ValidationError("audit record for unknown segment");
    detail::apply_label(trace.segments[a.segment_index], parse_chat_response(a.payload));
  }
  for (auto& t : out.traces) finalize_trace(t);
  return out;
}

}  // namespace rtrace
