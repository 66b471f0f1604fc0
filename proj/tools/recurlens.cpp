// recurlens: train the toy depth-recurrent model and run the lens studies.
//
// Exit codes: 0 success, 1 unexpected failure, 2..9 by error category (see
// recurlens/error.hpp), CLI11's own codes for bad command lines.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "recurlens/checkpoint.hpp"
#include "recurlens/experiments.hpp"
#include "recurlens/plots.hpp"
#include "recurlens/training.hpp"

using namespace recurlens;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string checkpoint;
  std::string questions;
  std::size_t n = 100;
  std::size_t r = 16;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::string lens = "logit,coda";
  std::string blocks = "R3:logit,R4:coda";
  std::string prompt_style = "bare";
  std::string run_id = "toy";
  std::string out = ".";
  std::string trace;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::stringstream ss(s);
  while (std::getline(ss, part, sep))
    if (!part.empty()) parts.push_back(part);
  return parts;
}

std::vector<LensKind> parse_lenses(const std::string& s) {
  std::vector<LensKind> out;
  for (const auto& p : split(s, ',')) out.push_back(parse_lens(p));
  if (out.empty()) throw InputError("--lens needs at least one of logit, coda");
  return out;
}

// "all" or a list like "R3:logit,R4:coda".
std::vector<BlockLens> parse_blocks(const std::string& s) {
  if (s == "all") return all_core_pairs();
  std::vector<BlockLens> out;
  for (const auto& p : split(s, ',')) {
    const auto colon = p.find(':');
    if (colon == std::string::npos || p.size() < 2 || p[0] != 'R') {
      throw InputError("--blocks entry '" + p + "' is not of the form R<i>:<lens>");
    }
    out.push_back({p.substr(0, colon), parse_lens(p.substr(colon + 1))});
  }
  if (out.empty()) throw InputError("--blocks is empty");
  return out;
}

std::vector<ArithmeticSample> first_n(std::vector<ArithmeticSample> v, std::size_t n) {
  if (v.size() > n) v.resize(n);
  return v;
}

fs::path out_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + out + ": " + ec.message());
  return dir;
}

template <class Writer>
void write_file(const fs::path& path, Writer&& w) {
  std::ostringstream os;
  w(os);
  save_text(path.string(), os.str());
  std::cerr << "wrote " << path.string() << '\n';
}

StudyConfig study_config(const Common& c) {
  StudyConfig s;
  s.run_id = c.run_id;
  s.r = c.r;
  s.k = c.k;
  s.seed = c.seed;
  s.prompt_style = parse_prompt_style(c.prompt_style);
  return s;
}

struct Loaded {
  DepthRecurrentModel model;
  std::string fingerprint;
};

Loaded load_model(const std::string& path, const Tokenizer& tok) {
  if (path.empty()) throw InputError("--checkpoint is required");
  Loaded l{load_checkpoint(path), {}};
  if (l.model.config.vocab_size != tok.size()) {
    throw ConfigError("checkpoint vocabulary " + std::to_string(l.model.config.vocab_size) +
                      " does not match the arithmetic tokenizer (" + std::to_string(tok.size()) + ")");
  }
  l.fingerprint = model_fingerprint(l.model);
  return l;
}

std::vector<ArithmeticSample> load_questions(const Common& c) {
  if (c.questions.empty()) throw InputError("--questions is required");
  auto qs = first_n(load_dataset(c.questions), c.n);
  if (qs.empty()) throw NoSamplesError("question file " + c.questions + " holds no samples");
  return qs;
}

void report_anchors(const TraceData& d, bool live) {
  const auto a = check_anchors(d);
  std::cerr << "lens anchors: logit@last " << a.logit_ok << "/" << a.questions << ", coda@last-core " << a.coda_ok
            << "/" << a.questions << '\n';
  if (live && !a.all_hold()) throw ContractError("lens identity anchors failed on the live model");
}

void emit_unrolled(const TraceData& d, const std::vector<LensKind>& lenses, const fs::path& dir) {
  const auto rows = aggregate_unrolled(d, lenses);
  write_file(dir / "unrolled_ranks.csv",
             [&](std::ostream& os) { write_unrolled_csv(os, rows, d.run_id, study_config_hash(d)); });
}

void emit_prefix(const TraceData& d, const std::vector<LensKind>& lenses, std::size_t k, const fs::path& dir) {
  const auto rows = aggregate_prefix(d, lenses, k);
  write_file(dir / "prefix_proportions.csv",
             [&](std::ostream& os) { write_prefix_csv(os, rows, d.run_id, study_config_hash(d)); });
}

void emit_signature(const TraceData& d, const std::vector<BlockLens>& pairs, const fs::path& dir) {
  const auto rows = aggregate_signature(d, pairs);
  write_file(dir / "signature_ranks.csv",
             [&](std::ostream& os) { write_signature_csv(os, rows, d.run_id, study_config_hash(d)); });
}

void maybe_save_trace(const Common& c, const TraceData& d) {
  if (c.trace.empty()) return;
  save_trace(c.trace, d);
  std::cerr << "wrote " << c.trace << " (" << d.records.size() << " records)\n";
}

void add_study_options(CLI::App* sub, Common& c, bool with_blocks) {
  sub->add_option("--checkpoint", c.checkpoint, "Model checkpoint")->required();
  sub->add_option("--questions", c.questions, "Question file (TSV from gen-data)")->required();
  sub->add_option("--n", c.n, "Use the first n questions")->capture_default_str();
  sub->add_option("--r", c.r, "Recurrence steps")->capture_default_str();
  sub->add_option("--k", c.k, "Top-k tokens kept per block")->capture_default_str();
  sub->add_option("--seed", c.seed, "Noise seed")->capture_default_str();
  sub->add_option("--lens", c.lens, "Lenses to aggregate: logit, coda or both")->capture_default_str();
  if (with_blocks) sub->add_option("--blocks", c.blocks, "Block/lens pairs, e.g. R3:logit,R4:coda, or all")->capture_default_str();
  sub->add_option("--prompt-style", c.prompt_style, "bare, zero-shot, unrolled-4shot or signature-4shot")
      ->capture_default_str();
  sub->add_option("--run-id", c.run_id, "Run identifier written into every artifact")->capture_default_str();
  sub->add_option("--out", c.out, "Output directory")->capture_default_str();
  sub->add_option("--trace", c.trace, "Also write the lens records to this trace file");
}

int run(int argc, char** argv) {
  CLI::App app{"Depth-recurrent transformer with logit and coda lens studies"};
  app.require_subcommand(1);
  // One TOML file for all subcommands: a [probe-unrolled] table sets that
  // subcommand's options. Given after the subcommand it falls through to here.
  app.set_config("--config", "", "TOML file with option values, one table per subcommand");
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  const Tokenizer tok = Tokenizer::arithmetic();

  // gen-data
  std::size_t gen_n = 500;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "questions.tsv", gen_exclude;
  auto* gen = app.add_subcommand("gen-data", "Generate composite one-digit arithmetic questions");
  gen->add_option("--n", gen_n, "Number of questions")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--exclude", gen_exclude, "Skip questions present in this TSV (held-out sets)");
  gen->add_option("--out", gen_out, "Output TSV")->capture_default_str();
  gen->callback([&] {
    const auto samples = gen_exclude.empty() ? gen_composite(gen_n, gen_seed)
                                             : gen_composite_excluding(gen_n, gen_seed, load_dataset(gen_exclude));
    if (auto parent = fs::path(gen_out).parent_path(); !parent.empty()) out_dir(parent.string());
    save_dataset(gen_out, samples);
    std::cerr << "wrote " << samples.size() << " questions to " << gen_out << '\n';
  });

  // train
  TrainConfig tc;
  std::string train_data, train_out = "model.ckpt", loss_csv;
  std::size_t width = 32, heads = 4, model_seed = 0;
  std::string prompt_style = "bare";
  auto* tr = app.add_subcommand("train", "Train the toy model with answer-only loss");
  tr->add_option("--data", train_data, "Training TSV")->required();
  tr->add_option("--checkpoint", train_out, "Where to write the trained checkpoint")->capture_default_str();
  tr->add_option("--loss-csv", loss_csv, "Loss curve CSV (default: next to the checkpoint)");
  tr->add_option("--steps", tc.steps, "Optimizer steps")->capture_default_str();
  tr->add_option("--batch", tc.batch_size, "Sequences per step")->capture_default_str();
  tr->add_option("--lr", tc.learning_rate, "Peak learning rate")->capture_default_str();
  tr->add_option("--warmup", tc.warmup_steps, "Linear warmup steps")->capture_default_str();
  tr->add_option("--r-max", tc.r_max_train, "r is drawn uniformly from 1..r-max per step")->capture_default_str();
  tr->add_option("--seed", tc.seed, "Batch, depth and noise seed")->capture_default_str();
  tr->add_option("--init-seed", model_seed, "Weight initialization seed")->capture_default_str();
  tr->add_option("--width", width, "Model width d")->capture_default_str();
  tr->add_option("--heads", heads, "Attention heads")->capture_default_str();
  tr->add_option("--prompt-style", prompt_style, "Prompt format of the training sequences")->capture_default_str();
  tr->callback([&] {
    tc.prompt_style = parse_prompt_style(prompt_style);
    const auto data = load_dataset(train_data);
    ModelConfig mc = ModelConfig::toy(tok.size(), width, heads);
    mc.r_max_train = tc.r_max_train;
    auto model = DepthRecurrentModel::init(mc, model_seed);
    const auto examples = make_examples(data, tok, tc.prompt_style);
    const auto start = std::chrono::steady_clock::now();
    const double initial = dataset_loss(model, examples, tc.r_max_train, tc.seed);
    std::cerr << "initial full-set loss " << format_number(initial) << '\n';
    const auto curve = train(model, data, tok, tc, [&](const LossPoint& p) {
      if (p.step % 100 == 0 || p.step + 1 == tc.steps)
        std::cerr << "step " << p.step << " r=" << p.r << " loss " << format_number(p.loss) << '\n';
    });
    const double final_loss = dataset_loss(model, examples, tc.r_max_train, tc.seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (auto parent = fs::path(train_out).parent_path(); !parent.empty()) out_dir(parent.string());
    save_checkpoint(train_out, model);
    const std::string csv = loss_csv.empty() ? (fs::path(train_out).parent_path() / "loss.csv").string() : loss_csv;
    save_loss_csv(csv, curve);
    const std::string summary = (fs::path(csv).parent_path() / "train_summary.json").string();
    nlohmann::ordered_json j;
    j["initial_loss"] = initial;
    j["final_loss"] = final_loss;
    j["drop_fraction"] = 1.0 - final_loss / initial;
    j["steps"] = tc.steps;
    j["model_fingerprint"] = model_fingerprint(model);
    save_text(summary, j.dump(2) + "\n");
    std::cerr << "final full-set loss " << format_number(final_loss) << " (drop "
              << format_number(100.0 * (1.0 - final_loss / initial)) << "%), " << format_number(secs) << " s\n"
              << "wrote " << train_out << ", " << csv << ", " << summary << '\n';
  });

  // probe-unrolled / probe-prefix
  Common cu, cp, cs, cd, ca;
  auto* pu = app.add_subcommand("probe-unrolled", "Rank of the predicted token at every unrolled block");
  add_study_options(pu, cu, false);
  pu->callback([&] {
    const auto lenses = parse_lenses(cu.lens);
    const auto m = load_model(cu.checkpoint, tok);
    const auto d = probe_questions(m.model, tok, load_questions(cu), study_config(cu), m.fingerprint);
    report_anchors(d, true);
    emit_unrolled(d, lenses, out_dir(cu.out));
    maybe_save_trace(cu, d);
  });

  auto* pp = app.add_subcommand("probe-prefix", "Signed-integer prefixes among top-k tokens per recurrence step");
  add_study_options(pp, cp, false);
  pp->callback([&] {
    const auto lenses = parse_lenses(cp.lens);
    const auto m = load_model(cp.checkpoint, tok);
    const auto d = probe_questions(m.model, tok, load_questions(cp), study_config(cp), m.fingerprint);
    report_anchors(d, true);
    emit_prefix(d, lenses, cp.k, out_dir(cp.out));
    maybe_save_trace(cp, d);
  });

  auto* ps = app.add_subcommand("probe-signature",
                                "Final, intermediate and baseline token ranks on correctly answered questions");
  add_study_options(ps, cs, true);
  ps->callback([&] {
    const auto pairs = parse_blocks(cs.blocks);
    const auto m = load_model(cs.checkpoint, tok);
    const auto all = load_questions(cs);
    const auto style = parse_prompt_style(cs.prompt_style);
    std::vector<ArithmeticSample> kept;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (!filter_signature_subset({all[i]}, m.model, tok, cs.r, cs.seed, style).empty()) {
        kept.push_back(all[i]);
        ids.push_back(i);
      }
    }
    std::cerr << kept.size() << " of " << all.size() << " questions qualify\n";
    if (kept.empty()) throw NoSamplesError("no qualifying samples for the signature study");
    const auto dir = out_dir(cs.out);
    save_dataset((dir / "signature_subset.tsv").string(), kept);
    const auto d = probe_questions(m.model, tok, kept, study_config(cs), m.fingerprint, ids);
    report_anchors(d, true);
    emit_signature(d, pairs, dir);
    maybe_save_trace(cs, d);
  });

  // scale-depth
  std::string r_list = "4,8,16,32,64";
  auto* sd = app.add_subcommand("scale-depth", "Accuracy against recurrence depth");
  sd->add_option("--checkpoint", cd.checkpoint, "Model checkpoint")->required();
  sd->add_option("--questions", cd.questions, "Evaluation TSV")->required();
  sd->add_option("--n", cd.n, "Use the first n questions")->capture_default_str();
  sd->add_option("--r", r_list, "Comma-separated recurrence depths")->capture_default_str();
  sd->add_option("--seed", cd.seed, "Noise seed")->capture_default_str();
  sd->add_option("--prompt-style", cd.prompt_style, "Prompt format")->capture_default_str();
  sd->add_option("--run-id", cd.run_id, "Run identifier")->capture_default_str();
  sd->add_option("--out", cd.out, "Output directory")->capture_default_str();
  sd->callback([&] {
    const auto m = load_model(cd.checkpoint, tok);
    std::vector<std::size_t> rs;
    for (const auto& p : split(r_list, ',')) rs.push_back(std::stoul(p));
    const auto style = parse_prompt_style(cd.prompt_style);
    const auto rows = run_depth_scaling(m.model, tok, load_questions(cd), rs, cd.seed, style);
    for (const auto& row : rows) std::cerr << "r=" << row.r << " accuracy " << format_number(row.accuracy) << '\n';
    std::cerr << kReferenceDepthNote << '\n';
    write_file(out_dir(cd.out) / "depth_scaling.csv", [&](std::ostream& os) {
      write_depth_csv(os, rows, cd.run_id, depth_config_hash(m.fingerprint, rows, cd.seed, style));
    });
  });

  // analyze-trace
  std::string study = "all";
  std::vector<std::string> traces;
  auto* at = app.add_subcommand("analyze-trace", "Run the studies from trace files instead of a live model");
  at->add_option("--trace", traces, "Trace file; repeat with traces at several r for the depth study")->required();
  at->add_option("--study", study, "unrolled, prefix, signature, depth or all")->capture_default_str();
  at->add_option("--questions", ca.questions, "Question file the traces were probed on (depth study)");
  at->add_option("--k", ca.k, "Top-k tokens used by the prefix study")->capture_default_str();
  at->add_option("--lens", ca.lens, "Lenses to aggregate")->capture_default_str();
  at->add_option("--blocks", ca.blocks, "Block/lens pairs for the signature study, or all")->capture_default_str();
  at->add_option("--out", ca.out, "Output directory")->capture_default_str();
  at->callback([&] {
    if (study != "all" && study != "unrolled" && study != "prefix" && study != "signature" && study != "depth") {
      throw InputError("unknown study '" + study + "'");
    }
    std::vector<TraceData> loaded;
    for (const auto& path : traces) {
      loaded.push_back(load_trace(path));
      const auto& d = loaded.back();
      std::cerr << path << ": " << d.records.size() << " records (r=" << d.header.r
                << ", |V|=" << d.header.vocab_size << ")\n";
      report_anchors(d, false);
    }
    const auto dir = out_dir(ca.out);
    if (study == "depth") {
      if (ca.questions.empty()) throw InputError("--study depth needs --questions");
      const auto rows = depth_from_traces(loaded, load_dataset(ca.questions));
      for (const auto& row : rows)
        std::cerr << "r=" << row.r << " first-token accuracy " << format_number(row.accuracy) << '\n';
      write_file(dir / "depth_scaling.csv", [&](std::ostream& os) {
        write_depth_csv(os, rows, loaded.front().run_id, trace_depth_hash(loaded));
      });
      return;
    }
    if (loaded.size() != 1) throw InputError("--study " + study + " takes exactly one --trace");
    const auto& d = loaded.front();
    const auto lenses = parse_lenses(ca.lens);
    if (study == "all" || study == "unrolled") emit_unrolled(d, lenses, dir);
    if (study == "all" || study == "prefix") emit_prefix(d, lenses, ca.k, dir);
    if (study == "all" || study == "signature") emit_signature(d, parse_blocks(ca.blocks), dir);
  });

  // plot
  std::string plot_dir = ".", statistic = "mean_rank";
  auto* pl = app.add_subcommand("plot", "Render SVG plots from the study CSVs in a directory");
  pl->add_option("--out", plot_dir, "Directory holding the CSVs; SVGs are written next to them")->capture_default_str();
  pl->add_option("--statistic", statistic, "mean_rank, geomean_rank or median_rank")->capture_default_str();
  pl->callback([&] {
    if (statistic != "mean_rank" && statistic != "geomean_rank" && statistic != "median_rank") {
      throw InputError("unknown statistic '" + statistic + "'");
    }
    const fs::path dir(plot_dir);
    std::size_t made = 0;
    auto emit = [&](const std::string& name, const LinePlot& p) {
      save_text((dir / name).string(), render_svg(p));
      std::cerr << "wrote " << (dir / name).string() << '\n';
      ++made;
    };
    auto distinct = [](const CsvTable& t, const std::vector<std::string>& cols) {
      std::vector<std::vector<std::string>> seen;
      for (std::size_t i = 0; i < t.rows.size(); ++i) {
        std::vector<std::string> key;
        for (const auto& c : cols) key.push_back(t.text(i, c));
        if (std::find(seen.begin(), seen.end(), key) == seen.end()) seen.push_back(key);
      }
      return seen;
    };
    if (fs::exists(dir / "unrolled_ranks.csv")) emit("unrolled_ranks.svg", plot_unrolled(load_csv((dir / "unrolled_ranks.csv").string()), statistic));
    if (fs::exists(dir / "prefix_proportions.csv")) {
      const auto t = load_csv((dir / "prefix_proportions.csv").string());
      for (const auto& key : distinct(t, {"lens"})) emit("prefix_proportions_" + key[0] + ".svg", plot_prefix(t, key[0]));
    }
    if (fs::exists(dir / "signature_ranks.csv")) {
      const auto t = load_csv((dir / "signature_ranks.csv").string());
      for (const auto& key : distinct(t, {"block", "lens"}))
        emit("signature_ranks_" + key[0] + "_" + key[1] + ".svg", plot_signature(t, key[0], key[1], statistic));
    }
    if (fs::exists(dir / "depth_scaling.csv")) emit("depth_scaling.svg", plot_depth(load_csv((dir / "depth_scaling.csv").string())));
    if (made == 0) throw NoSamplesError("no study CSVs found in " + plot_dir);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "recurlens: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "recurlens: unexpected failure: " << e.what() << '\n';
    return 1;
  }
}
