#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "recurlens/experiments.hpp"
#include "recurlens/plots.hpp"

using namespace recurlens;

namespace {

const Tokenizer& tok() {
  static const Tokenizer t = Tokenizer::arithmetic();
  return t;
}

const DepthRecurrentModel& model() {
  static const DepthRecurrentModel m = DepthRecurrentModel::init(ModelConfig::toy(tok().size(), 16, 2), 31);
  return m;
}

StudyConfig small_study(std::size_t r = 2) {
  StudyConfig c;
  c.run_id = "unit";
  c.r = r;
  c.k = 5;
  c.seed = 4;
  return c;
}

const TraceData& probed() {
  static const TraceData d =
      probe_questions(model(), tok(), gen_composite(4, 12), small_study(), model_fingerprint(model()));
  return d;
}

std::string to_csv(const std::vector<RankRow>& rows, const TraceData& d) {
  std::ostringstream os;
  write_unrolled_csv(os, rows, d.run_id, study_config_hash(d));
  return os.str();
}

LensRecord hand_record(std::vector<std::string> texts) {
  LensRecord r;
  r.block_index = 6;
  r.cycle = 1;
  r.block_role = "R4";
  for (auto& t : texts) r.topk.push_back({t, 0.0});
  r.tracked_ranks = {{"final", 1}, {"intermediate", 2}, {"random", 3}};
  return r;
}

}  // namespace

TEST(RankStats, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> u(1, 44);
  for (std::size_t n : {1u, 2u, 7u, 100u}) {
    std::vector<std::size_t> ranks(n);
    for (auto& r : ranks) r = u(rng);
    const auto s = rank_stats(ranks);
    long double sum = 0, prod_log = 0;
    for (auto r : ranks) {
      sum += r;
      prod_log += std::log(static_cast<long double>(r));
    }
    auto sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    const double median = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
    EXPECT_NEAR(s.mean, static_cast<double>(sum / n), 1e-12);
    EXPECT_NEAR(s.geomean, static_cast<double>(std::exp(prod_log / n)), 1e-9);
    EXPECT_EQ(s.median, median);
    EXPECT_GE(s.geomean, 1.0);
  }
  EXPECT_THROW(rank_stats({}), NoSamplesError);
}

TEST(UnrolledStudy, StructureAndAnchors) {
  const auto& d = probed();
  const std::size_t blocks = 2 + 4 * 2 + 2;
  EXPECT_EQ(d.records.size(), 4 * blocks * 2);
  const auto rows = aggregate_unrolled(d, {LensKind::LogitLens, LensKind::CodaLens});
  ASSERT_EQ(rows.size(), blocks * 2);
  for (const auto& row : rows) {
    EXPECT_GE(row.stats.mean, 1.0);
    EXPECT_EQ(row.stats.n, 4u);
  }
  EXPECT_EQ(rows[blocks - 1].block_role, "C2");
  EXPECT_EQ(rows[blocks - 1].stats.mean, 1.0);             // logit lens at the last block
  EXPECT_EQ(rows[blocks + 2 + 4 * 2 - 1].block_role, "R4");
  EXPECT_EQ(rows[blocks + 2 + 4 * 2 - 1].stats.mean, 1.0);  // coda lens at block 2+4r
  const auto anchors = check_anchors(d);
  EXPECT_TRUE(anchors.all_hold());
  EXPECT_EQ(anchors.questions, 4u);
}

TEST(UnrolledStudy, AggregatesMatchRecomputationFromRecords) {
  const auto& d = probed();
  const auto rows = aggregate_unrolled(d, {LensKind::CodaLens});
  for (const auto& row : rows) {
    std::vector<std::size_t> ranks;
    for (const auto& r : d.records)
      if (r.lens == LensKind::CodaLens && r.block_index == row.block_index) ranks.push_back(r.tracked_ranks.at("final"));
    double sum = 0;
    for (auto r : ranks) sum += r;
    EXPECT_DOUBLE_EQ(row.stats.mean, sum / ranks.size());
  }
}

TEST(UnrolledStudy, ProbingIsDeterministic) {
  const auto again = probe_questions(model(), tok(), gen_composite(4, 12), small_study(), model_fingerprint(model()));
  EXPECT_EQ(again, probed());
}

TEST(UnrolledStudy, FourShotPromptIsSupported) {
  StudyConfig c = small_study(1);
  c.prompt_style = PromptStyle::UnrolledStudy;
  const auto d = probe_questions(model(), tok(), gen_composite(1, 3), c, "x");
  EXPECT_TRUE(check_anchors(d).all_hold());
}

TEST(PrefixStudy, HandBuiltTopKSets) {
  EXPECT_EQ(prefix_fraction(hand_record({"6", "5", "1", "7", "2"}).topk, 5), 1.0);
  EXPECT_EQ(prefix_fraction(hand_record({"inc", "unity", "friendships", "igne", "impulse"}).topk, 5), 0.0);
  EXPECT_EQ(prefix_fraction(hand_record({"-", " 4", "x", "?", "12"}).topk, 5), 0.6);
  EXPECT_THROW(prefix_fraction(hand_record({"1"}).topk, 2), InputError);
}

TEST(PrefixStudy, ProportionsBoundedAndShaped) {
  const auto rows = aggregate_prefix(probed(), {LensKind::LogitLens, LensKind::CodaLens}, 5);
  EXPECT_EQ(rows.size(), 2u * 2 * 4);
  for (const auto& r : rows) {
    EXPECT_GE(r.proportion, 0.0);
    EXPECT_LE(r.proportion, 1.0);
    EXPECT_EQ(r.n, 4u);
  }
  EXPECT_EQ(rows[0].block_role, "R1");
  EXPECT_EQ(rows[3].block_role, "R4");
  EXPECT_EQ(rows[4].cycle, 2u);
}

TEST(PrefixStudy, FullVocabularyMatchesOracleProportion) {
  StudyConfig c = small_study(1);
  c.k = tok().size();
  const auto d = probe_questions(model(), tok(), gen_composite(2, 5), c, "x");
  std::size_t signed_tokens = 0;
  for (const auto& t : tok().vocabulary()) signed_tokens += is_signed_integer_prefix(t);
  const double oracle = static_cast<double>(signed_tokens) / static_cast<double>(tok().size());
  for (const auto& r : aggregate_prefix(d, {LensKind::LogitLens, LensKind::CodaLens}, tok().size()))
    EXPECT_DOUBLE_EQ(r.proportion, oracle);
}

TEST(SignatureStudy, RowCountsAndCorrectnessAnchor) {
  const auto& d = probed();
  const auto rows = aggregate_signature(d, default_signature_pairs());
  EXPECT_EQ(rows.size(), 2u * 3 * 2);
  EXPECT_EQ(aggregate_signature(d, all_core_pairs()).size(), 2u * 3 * 8);
  for (const auto& row : rows) {
    if (row.block_role == "R4" && row.lens == LensKind::CodaLens && row.cycle == 2 && row.token == "final") {
      EXPECT_EQ(row.stats.mean, 1.0);
    }
  }
  TraceData empty = d;
  empty.records.clear();
  EXPECT_THROW(aggregate_signature(empty, default_signature_pairs()), NoSamplesError);
}

TEST(DepthScaling, ReproducesRequestedList) {
  const auto rows = run_depth_scaling(model(), tok(), gen_composite(3, 2), {1, 3, 2}, 0);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].r, 1u);
  EXPECT_EQ(rows[1].r, 3u);
  EXPECT_EQ(rows[2].r, 2u);
  for (const auto& r : rows) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_EQ(r.n, 3u);
  }
  EXPECT_THROW(run_depth_scaling(model(), tok(), {}, {4}, 0), NoSamplesError);
}

TEST(DepthScaling, FromTracesScoresFirstAnswerToken) {
  const auto qs = gen_composite(6, 8);
  std::vector<TraceData> traces;
  for (std::size_t r : {3u, 1u}) {
    traces.push_back(probe_questions(model(), tok(), qs, small_study(r), model_fingerprint(model())));
  }
  const auto rows = depth_from_traces(traces, qs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].r, 1u);
  EXPECT_EQ(rows[1].r, 3u);
  for (const auto& row : rows) {
    std::size_t hits = 0;
    for (const auto& s : qs) {
      const auto prompt = build_prompt(make_prompt_spec(PromptStyle::Bare, s), tok());
      const auto fr = forward_unrolled(model(), prompt, row.r, 4);
      if (argmax(fr.logits.row(fr.logits.rows() - 1)) == tok().id(s.answer_text()[0])) ++hits;
    }
    EXPECT_EQ(row.n, qs.size());
    EXPECT_DOUBLE_EQ(row.accuracy, static_cast<double>(hits) / qs.size()) << row.r;
  }

  // Hand-built: question 0 right, question 1 wrong; only the last block counts.
  TraceData d;
  d.header.r = 1;
  d.header.vocab_size = tok().size();
  const auto hand = gen_composite(2, 1);
  for (std::size_t q = 0; q < 2; ++q) {
    LensRecord early = hand_record({hand[q].answer_text().substr(0, 1)});
    early.question_id = q;
    early.block_index = 3;
    LensRecord last = hand_record({q == 0 ? hand[q].answer_text().substr(0, 1) : "+"});
    last.question_id = q;
    last.block_index = 8;
    d.records.push_back(early);
    d.records.push_back(last);
  }
  const auto hand_rows = depth_from_traces({d}, hand);
  EXPECT_DOUBLE_EQ(hand_rows.at(0).accuracy, 0.5);
  EXPECT_THROW(depth_from_traces({d}, {hand[0]}), InputError);
  EXPECT_THROW(depth_from_traces({d, d}, hand), InputError);
}

TEST(Trace, RoundTripPreservesRecordsAndAggregates) {
  const auto& d = probed();
  std::stringstream ss;
  write_trace(ss, d);
  const auto back = read_trace(ss);
  EXPECT_EQ(back, d);
  const std::vector<LensKind> both{LensKind::LogitLens, LensKind::CodaLens};
  EXPECT_EQ(to_csv(aggregate_unrolled(back, both), back), to_csv(aggregate_unrolled(d, both), d));
}

TEST(Trace, HeaderFieldsInDocumentedOrder) {
  std::stringstream ss;
  write_trace(ss, probed());
  std::string header, first;
  std::getline(ss, header);
  std::getline(ss, first);
  EXPECT_EQ(header.rfind("{\"version\":1,\"vocab_size\":44,\"r\":2,\"model_fingerprint\":", 0), 0u);
  EXPECT_NE(header.find("\"baseline_token\":\"t\""), std::string::npos);
  EXPECT_EQ(first.rfind("{\"version\":1,\"run_id\":\"unit\",\"question_id\":0,\"block_index\":1,\"cycle\":0,"
                        "\"block_role\":\"P1\",\"lens\":\"logit\",\"topk\":[[",
                        0),
            0u);
  EXPECT_NE(first.find("\"tracked_ranks\":{\"final\":"), std::string::npos);
}

TEST(Trace, ErrorsNameTheLine) {
  std::stringstream ss;
  write_trace(ss, probed());
  std::vector<std::string> lines;
  for (std::string l; std::getline(ss, l);) lines.push_back(l);
  auto parse_line_of = [](const std::vector<std::string>& ls) {
    std::stringstream in;
    for (const auto& l : ls) in << l << '\n';
    try {
      read_trace(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  auto truncated = std::vector<std::string>(lines.begin(), lines.begin() + 5);
  truncated.back().resize(truncated.back().size() / 2);
  EXPECT_EQ(parse_line_of(truncated), 5u);

  auto bad_version = lines;
  bad_version[3].replace(0, 12, "{\"version\":2");
  EXPECT_EQ(parse_line_of(bad_version), 4u);

  auto bad_rank = std::vector<std::string>(lines.begin(), lines.begin() + 3);
  bad_rank.push_back(R"({"version":1,"run_id":"unit","question_id":0,"block_index":1,"cycle":0,"block_role":"P1","lens":"logit","topk":[["a",1.0]],"tracked_ranks":{"final":45}})");
  EXPECT_EQ(parse_line_of(bad_rank), 4u);

  auto other_run = std::vector<std::string>(lines.begin(), lines.begin() + 3);
  other_run.push_back(R"({"version":1,"run_id":"other","question_id":0,"block_index":1,"cycle":0,"block_role":"P1","lens":"logit","topk":[["a",1.0]],"tracked_ranks":{"final":1}})");
  EXPECT_EQ(parse_line_of(other_run), 4u);

  EXPECT_EQ(parse_line_of({}), 1u);
  EXPECT_EQ(parse_line_of({lines[0], "{\"version\":1,\"run_id\":\"unit\"}"}), 2u);
  EXPECT_THROW(load_trace("/nonexistent/trace.jsonl"), IoError);
}

TEST(Trace, LargeVocabularyBounds) {
  std::stringstream ss;
  ss << R"({"version":1,"vocab_size":65536,"r":1,"model_fingerprint":"f","sigma":1.0,"baseline_token":" the"})" << '\n'
     << R"({"version":1,"run_id":"real","question_id":7,"block_index":3,"cycle":1,"block_role":"R1","lens":"coda","topk":[[" 6",12.5],["5",11.0]],"tracked_ranks":{"final":65536,"intermediate":1,"random":30000}})"
     << '\n';
  const auto d = read_trace(ss);
  ASSERT_EQ(d.records.size(), 1u);
  EXPECT_EQ(d.records[0].tracked_ranks.at("final"), 65536u);
  EXPECT_EQ(d.header.baseline_token, " the");
  EXPECT_EQ(d.records[0].topk[0].text, " 6");
}

TEST(Plots, DeterministicAndLogAxisStartsAtOne) {
  std::ostringstream os;
  write_unrolled_csv(os, aggregate_unrolled(probed(), {LensKind::LogitLens, LensKind::CodaLens}), "unit", "h");
  std::istringstream is(os.str());
  const auto table = read_csv(is);
  const auto plot = plot_unrolled(table);
  const auto a = render_svg(plot);
  EXPECT_EQ(a, render_svg(plot_unrolled(table)));
  EXPECT_NE(a.find("text-anchor=\"end\">1</text>"), std::string::npos);
  EXPECT_EQ(a.find("text-anchor=\"end\">0</text>"), std::string::npos);
  EXPECT_NE(a.find("<desc>run_id=unit config_hash=h</desc>"), std::string::npos);
}

TEST(Plots, SeriesAreCsvTwins) {
  std::ostringstream os;
  const auto rows = aggregate_signature(probed(), default_signature_pairs());
  write_signature_csv(os, rows, "unit", "h");
  std::istringstream is(os.str());
  const auto table = read_csv(is);
  const auto plot = plot_signature(table, "R4", "coda");
  ASSERT_EQ(plot.series.size(), 3u);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.block_role != "R4") continue;
    const auto& s = plot.series[i % 3];
    EXPECT_EQ(s.name, row.token);
    EXPECT_EQ(s.x[i / 3], static_cast<double>(row.cycle));
    EXPECT_EQ(format_number(s.y[i / 3]), format_number(row.stats.mean));
    ++i;
  }
  EXPECT_EQ(i, 6u);
}

TEST(Plots, CsvReaderRejectsRaggedRows) {
  std::istringstream is("a,b\n1,2\n3\n");
  try {
    read_csv(is);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}
