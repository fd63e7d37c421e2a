#pragma once

// Command-line front end. run_command() is the whole program; main() only
// forwards argv so tests can drive every subcommand in-process.
//
// Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rtrace/annotator.hpp"
#include "rtrace/corpus.hpp"
#include "rtrace/error.hpp"
#include "rtrace/events.hpp"
#include "rtrace/filters.hpp"
#include "rtrace/profiles.hpp"
#include "rtrace/reports.hpp"
#include "rtrace/stats.hpp"
#include "rtrace/synth.hpp"
#include "rtrace/util.hpp"

namespace rtrace::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

/// Shared analysis settings. Every field can come from a key=value config
/// file; flags given on the command line win.
struct RunConfig {
  std::string in;
  std::string out = "-";
  std::vector<double> taus;
  Words gap = kDefaultBurstGap;
  std::vector<Words> checkpoints{2000, 5000, 8000, 12000};
  std::size_t bins = kBins;
  std::size_t min_support_correct = 0;
  std::size_t min_support_wrong = 0;
  double ridge = 1e-4;
  std::uint64_t seed = 1;
  unsigned threads = 0;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path);
  return buf.str();
}

// Output files are rendered in memory first, then written by one owner.
inline void write_output(const std::string& path, const std::string& content, std::ostream& stdout_stream) {
  if (path.empty() || path == "-") {
    stdout_stream << content;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << content;
  out.flush();
  if (!out) throw IoError("cannot write " + path);
}

inline Corpus load_corpus(const std::string& path) {
  if (path.empty()) throw ValidationError("--in is required");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_corpus_jsonl(in, path);
}

/// key=value lines; '#' starts a comment. Keys may be written with or
/// without a leading "--".
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = rtrace::detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    std::string key(rtrace::detail::trim(line.substr(0, eq)));
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string value(rtrace::detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw ValidationError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), value);
  }
  return out;
}

inline bool truthy(std::string value) {
  for (auto& c : value) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
  if (value == "0" || value == "false" || value == "no" || value == "off") return false;
  throw ValidationError("expected a boolean, got '" + value + "'");
}

template <typename T>
std::vector<T> list_or(const std::string& text, std::vector<T> fallback) {
  if (text.empty()) return fallback;
  try {
    return parse_list<T>(text);
  } catch (const DomainError& e) {
    throw ValidationError(e.what());
  }
}

inline std::vector<double> default_taus() {
  std::vector<double> out;
  for (int t : all_regime_thresholds()) out.push_back(static_cast<double>(t));
  return out;
}

inline void require_positive(const std::vector<Words>& values, const char* what) {
  if (values.empty()) throw ValidationError(std::string(what) + " must not be empty");
  for (auto v : values) {
    if (v <= 0) throw ValidationError(std::string(what) + " must be positive");
  }
}

inline void check_taus(const std::vector<double>& taus) {
  if (taus.empty()) throw ValidationError("at least one threshold is required");
  for (double t : taus) {
    if (!(t >= 0.0 && t <= 100.0)) throw ValidationError("thresholds must lie in [0, 100]");
  }
}

}  // namespace detail

/// Runs one invocation. `args` excludes the program name.
inline int run_command(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Backtracking-trace analytics and filter replay", "rtrace"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  app.add_option("--config", config_path, "key=value config file; command-line flags take precedence");

  RunConfig rc;
  std::string taus_text, depths_text, gaps_text, methods_text;
  std::string json_out, severity_out, burst_starts_out, features_out, class_means_out, audit_out, replay_path,
      report_out, template_path, split_filter;
  double single_tau = 20.0;
  double bucket_width = 10.0;
  bool sequential = false;
  EndpointConfig endpoint;
  SynthConfig synth;
  std::string corpus_name;
  bool synth_null = false;
  double wrong_burst_scale = 0.0;

  auto add_io = [&](CLI::App* sub, bool needs_in) {
    auto* in = sub->add_option("--in", rc.in, "input corpus JSONL");
    if (needs_in) in->required();
    sub->add_option("--out", rc.out, "output path ('-' for stdout)");
  };
  auto add_threads = [&](CLI::App* sub) {
    sub->add_option("--threads", rc.threads, "worker threads (0 = hardware concurrency)");
  };

  auto* ingest = app.add_subcommand("ingest", "validate a corpus and write it back normalized");
  add_io(ingest, true);
  ingest->add_option("--name", corpus_name, "corpus name");

  auto* annotate = app.add_subcommand("annotate", "label segments through a chat-completions endpoint");
  add_io(annotate, true);
  annotate->add_option("--url", endpoint.url, "endpoint URL, e.g. http://host:8000/v1/chat/completions");
  annotate->add_option("--model", endpoint.model, "model name sent with each request");
  annotate->add_option("--temperature", endpoint.temperature);
  annotate->add_option("--api-key-env", endpoint.api_key_env, "environment variable holding the credential");
  annotate->add_option("--template", template_path, "prompt template file with {segment} and {context}");
  annotate->add_option("--context", endpoint.context_segments, "preceding segments shown as context");
  annotate->add_option("--parallel", endpoint.parallelism, "requests in flight")->check(CLI::PositiveNumber);
  annotate->add_option("--max-attempts", endpoint.max_attempts)->check(CLI::PositiveNumber);
  annotate->add_flag("--force", endpoint.force, "relabel segments that already have a score");
  annotate->add_option("--audit", audit_out, "audit log JSONL");
  annotate->add_option("--replay", replay_path, "rebuild labels from an audit log instead of calling the endpoint");
  annotate->add_option("--report", report_out, "annotation report JSON");

  auto* summary = app.add_subcommand("summary", "corpus summary per split");
  add_io(summary, true);
  summary->add_option("--severity", severity_out, "severity-bucket table CSV");
  summary->add_option("--bucket-width", bucket_width)->check(CLI::PositiveNumber);

  auto* bursts = app.add_subcommand("bursts", "per-trace burst statistics");
  add_io(bursts, true);
  bursts->add_option("--tau", single_tau, "score threshold")->check(CLI::Range(0.0, 100.0));
  bursts->add_option("--gap", rc.gap, "burst gap in words");

  auto* timing = app.add_subcommand("timing", "event rate and first-event depth per class");
  add_io(timing, true);
  timing->add_option("--taus", taus_text, "comma-separated thresholds (default: all regime thresholds)");

  auto* profiles = app.add_subcommand("profiles", "pooled 20-bin profiles, burst starts and feature dump");
  add_io(profiles, true);
  profiles->add_option("--taus", taus_text, "comma-separated thresholds (default 20,50)");
  profiles->add_option("--gap", rc.gap);
  profiles->add_option("--bins", rc.bins, "progress bins (fixed at 20)");
  profiles->add_option("--min-support-correct", rc.min_support_correct);
  profiles->add_option("--min-support-wrong", rc.min_support_wrong);
  profiles->add_option("--split", split_filter, "restrict to one split");
  profiles->add_option("--burst-starts", burst_starts_out, "burst-start profile CSV");
  profiles->add_option("--features", features_out, "per-trace feature dump CSV");

  auto* filter_eval = app.add_subcommand("filter-eval", "leave-one-question completed-trace filters");
  add_io(filter_eval, true);
  filter_eval->add_option("--methods", methods_text,
                          "comma-separated: hard:N, hybrid, burst, rate, count, single:NAME@TAU");
  filter_eval->add_option("--json", json_out, "full report JSON");
  filter_eval->add_option("--gap", rc.gap);
  filter_eval->add_option("--ridge", rc.ridge)->check(CLI::NonNegativeNumber);
  add_threads(filter_eval);

  auto* prefix_eval = app.add_subcommand("prefix-eval", "prefix-causal filters against matched hard cutoffs");
  add_io(prefix_eval, true);
  prefix_eval->add_option("--depths", depths_text, "checkpoints (default 2000,5000,8000,12000)");
  prefix_eval->add_option("--json", json_out, "full report JSON");
  prefix_eval->add_option("--gap", rc.gap);
  prefix_eval->add_option("--ridge", rc.ridge)->check(CLI::NonNegativeNumber);
  prefix_eval->add_flag("--sequential", sequential, "also replay the multi-checkpoint early-exit policy");
  add_threads(prefix_eval);

  auto* lr = app.add_subcommand("lr-test", "likelihood-ratio tests for burst features beyond the rate");
  add_io(lr, true);
  lr->add_option("--depths", depths_text, "depths (default 2000,5000,8000,12000)");
  lr->add_option("--taus", taus_text, "thresholds (default 20,30,40,50)");
  lr->add_option("--gap", rc.gap);

  auto* sweep = app.add_subcommand("sweep-gap", "class means across burst gaps");
  add_io(sweep, true);
  sweep->add_option("--gaps", gaps_text, "gaps (default 250,500,1000)");
  sweep->add_option("--taus", taus_text, "thresholds (default 20,50)");
  sweep->add_option("--class-means", class_means_out, "full class-mean table CSV");

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic annotated corpus");
  synth_cmd->add_option("--out", rc.out, "output JSONL ('-' for stdout)");
  synth_cmd->add_option("--seed", rc.seed);
  synth_cmd->add_option("--questions", synth.questions)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--traces-per-question", synth.traces_per_question)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--splits", synth.splits)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--accuracy", synth.accuracy_mean)->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_flag("--null", synth_null, "give both classes the correct-class profile");
  synth_cmd->add_option("--wrong-burst-scale", wrong_burst_scale,
                        "wrong-class burst rate as a multiple of the correct-class rate");

  // Splice config-file values in right after the subcommand name so that any
  // repeated flag later on the command line overrides them.
  try {
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (!config_path.empty()) {
      const auto entries = detail::parse_config_text(detail::read_file(config_path));
      std::size_t sub_pos = args.size();
      CLI::App* sub = nullptr;
      for (std::size_t i = 0; i < args.size() && sub == nullptr; ++i) {
        for (auto* s : app.get_subcommands({})) {
          if (s->get_name() == args[i]) {
            sub = s;
            sub_pos = i;
            break;
          }
        }
      }
      if (sub != nullptr) {
        std::vector<std::string> injected;
        for (const auto& [key, value] : entries) {
          if (key == "config") continue;
          const CLI::Option* opt = nullptr;
          try {
            opt = sub->get_option("--" + key);
          } catch (const CLI::OptionNotFound&) {
            bool known = false;
            for (auto* s : app.get_subcommands({})) {
              try {
                s->get_option("--" + key);
                known = true;
              } catch (const CLI::OptionNotFound&) {
              }
            }
            if (!known) throw ValidationError("unknown config key '" + key + "'");
            continue;  // belongs to another subcommand
          }
          if (opt->get_type_size_max() == 0) {
            if (detail::truthy(value)) injected.push_back("--" + key);
          } else {
            injected.push_back("--" + key);
            injected.push_back(value);
          }
        }
        args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), injected.begin(), injected.end());
      }
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (rc.gap <= 0) throw ValidationError("--gap must be positive");
    if (rc.bins != kBins) throw ValidationError("--bins must be 20");

    if (ingest->parsed()) {
      Corpus corpus = detail::load_corpus(rc.in);
      if (!corpus_name.empty()) corpus.name = corpus_name;
      std::ostringstream buf;
      write_corpus_jsonl(buf, corpus);
      detail::write_output(rc.out, buf.str(), out);
      err << "ingested " << corpus.traces.size() << " traces over " << corpus.questions.size() << " questions\n";
      return kExitOk;
    }

    if (annotate->parsed()) {
      const Corpus corpus = detail::load_corpus(rc.in);
      if (!template_path.empty()) {
        endpoint.prompt_template = detail::read_file(template_path);
        endpoint.template_id = template_path;
      }
      if (endpoint.prompt_template.find("{segment}") == std::string::npos) {
        throw ValidationError("prompt template lacks a {segment} placeholder");
      }
      AnnotationResult result;
      if (!replay_path.empty()) {
        std::istringstream audit_in(detail::read_file(replay_path));
        result.corpus = replay_annotations(corpus, read_audit_jsonl(audit_in));
      } else {
        if (endpoint.url.empty()) throw ValidationError("--url is required unless --replay is given");
        result = annotate_corpus(corpus, endpoint);
      }
      std::ostringstream buf;
      write_corpus_jsonl(buf, result.corpus);
      detail::write_output(rc.out, buf.str(), out);
      if (!audit_out.empty()) {
        std::ostringstream audit;
        write_audit_jsonl(audit, result.report.audit);
        detail::write_output(audit_out, audit.str(), out);
      }
      if (!report_out.empty()) {
        nlohmann::json j;
        j["labeled"] = result.report.labeled;
        j["skipped"] = result.report.skipped;
        j["retries"] = result.report.retries;
        j["warnings"] = result.report.warnings;
        auto failures = nlohmann::json::array();
        for (const auto& f : result.report.failures) {
          failures.push_back({{"trace_id", f.trace_id}, {"segment_index", f.segment_index}, {"error", f.error}});
        }
        j["failures"] = failures;
        detail::write_output(report_out, j.dump(2) + "\n", out);
      }
      err << "labeled " << result.report.labeled << ", failed " << result.report.failures.size() << '\n';
      return kExitOk;
    }

    if (summary->parsed()) {
      const Corpus corpus = detail::load_corpus(rc.in);
      std::ostringstream buf;
      write_summary_csv(buf, corpus);
      detail::write_output(rc.out, buf.str(), out);
      if (!severity_out.empty()) {
        std::ostringstream sev;
        write_severity_csv(sev, corpus, bucket_width);
        detail::write_output(severity_out, sev.str(), out);
      }
      return kExitOk;
    }

    if (bursts->parsed()) {
      const Corpus corpus = detail::load_corpus(rc.in);
      std::ostringstream buf;
      write_bursts_csv(buf, corpus, single_tau, rc.gap);
      detail::write_output(rc.out, buf.str(), out);
      return kExitOk;
    }

    if (timing->parsed()) {
      rc.taus = detail::list_or<double>(taus_text, detail::default_taus());
      detail::check_taus(rc.taus);
      const Corpus corpus = detail::load_corpus(rc.in);
      std::ostringstream buf;
      write_timing_csv(buf, corpus, rc.taus);
      detail::write_output(rc.out, buf.str(), out);
      return kExitOk;
    }

    if (profiles->parsed()) {
      rc.taus = detail::list_or<double>(taus_text, {20.0, 50.0});
      detail::check_taus(rc.taus);
      const Corpus corpus = detail::load_corpus(rc.in);
      std::vector<Trace> traces = corpus.traces;
      if (!split_filter.empty()) {
        traces = traces_in_split(corpus, split_filter);
        if (traces.empty()) throw ValidationError("no traces in split '" + split_filter + "'");
      }
      std::ostringstream buf;
      write_pooled_profile_csv(buf, traces, rc.taus, {rc.min_support_correct, rc.min_support_wrong});
      detail::write_output(rc.out, buf.str(), out);
      if (!burst_starts_out.empty()) {
        std::ostringstream bs;
        write_burst_start_csv(bs, traces, rc.taus, rc.gap);
        detail::write_output(burst_starts_out, bs.str(), out);
      }
      if (!features_out.empty()) {
        std::ostringstream fs;
        write_features_csv(fs, make_corpus(corpus.name, traces), rc.gap);
        detail::write_output(features_out, fs.str(), out);
      }
      return kExitOk;
    }

    if (filter_eval->parsed() || prefix_eval->parsed()) {
      const Corpus corpus = detail::load_corpus(rc.in);
      FilterConfig config;
      config.gap = rc.gap;
      config.ridge = rc.ridge;
      config.threads = rc.threads;
      std::vector<FilterSpec> specs;
      if (filter_eval->parsed()) {
        const auto methods = detail::list_or<std::string>(methods_text, {"hybrid", "burst", "rate", "count"});
        for (const auto& m : methods) {
          try {
            specs.push_back(FilterSpec::parse(m));
          } catch (const DomainError& e) {
            throw ValidationError(e.what());
          }
          if (specs.back().prefix()) throw ValidationError("prefix filters belong to prefix-eval: " + m);
        }
      } else {
        rc.checkpoints = detail::list_or<Words>(depths_text, rc.checkpoints);
        detail::require_positive(rc.checkpoints, "--depths");
        for (Words d : rc.checkpoints) {
          specs.push_back(FilterSpec::hard_cutoff(d));
          specs.push_back(FilterSpec::online_prefix(d));
          specs.push_back(FilterSpec::prefix_rate_only(d));
        }
      }
      std::vector<EvalReport> reports;
      for (const auto& spec : specs) reports.push_back(loqo_evaluate(corpus, spec, config));
      if (sequential) {
        config.checkpoints = rc.checkpoints;
        reports.push_back(loqo_evaluate_sequential(corpus, config));
      }
      std::ostringstream buf;
      write_eval_csv_header(buf);
      for (const auto& r : reports) write_eval_csv_rows(buf, r);
      detail::write_output(rc.out, buf.str(), out);
      if (!json_out.empty()) {
        auto arr = nlohmann::json::array();
        for (const auto& r : reports) arr.push_back(report_to_json(r));
        detail::write_output(json_out, arr.dump(2) + "\n", out);
      }
      return kExitOk;
    }

    if (lr->parsed()) {
      rc.checkpoints = detail::list_or<Words>(depths_text, rc.checkpoints);
      detail::require_positive(rc.checkpoints, "--depths");
      rc.taus = detail::list_or<double>(taus_text, {20.0, 30.0, 40.0, 50.0});
      detail::check_taus(rc.taus);
      const Corpus corpus = detail::load_corpus(rc.in);
      const auto rows = lr_table(corpus, rc.checkpoints, rc.taus, rc.gap);
      std::ostringstream buf;
      write_lr_csv(buf, rows);
      detail::write_output(rc.out, buf.str(), out);
      return kExitOk;
    }

    if (sweep->parsed()) {
      const auto gaps = detail::list_or<Words>(gaps_text, {250, 500, 1000});
      detail::require_positive(gaps, "--gaps");
      rc.taus = detail::list_or<double>(taus_text, {20.0, 50.0});
      detail::check_taus(rc.taus);
      const Corpus corpus = detail::load_corpus(rc.in);
      std::ostringstream buf;
      write_gap_sweep_csv(buf, gap_sweep(corpus, rc.taus, gaps));
      detail::write_output(rc.out, buf.str(), out);
      if (!class_means_out.empty()) {
        std::ostringstream cm;
        write_class_means_csv(cm, corpus, rc.taus, gaps);
        detail::write_output(class_means_out, cm.str(), out);
      }
      return kExitOk;
    }

    if (synth_cmd->parsed()) {
      synth.seed = rc.seed;
      if (synth_null) synth.wrong = synth.correct;
      if (wrong_burst_scale > 0.0) synth.wrong.burst_rate = wrong_burst_scale * synth.correct.burst_rate;
      std::ostringstream buf;
      write_corpus_jsonl(buf, synth_corpus(synth));
      detail::write_output(rc.out, buf.str(), out);
      return kExitOk;
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitValidation;
}

inline int run_command(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_command(std::move(args), out, err);
}

}  // namespace rtrace::cli
