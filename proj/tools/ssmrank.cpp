// ssmrank: index, train, rerank and evaluate with SSM-based rerankers, and
// measure their efficiency.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssmrank/bench.hpp"
#include "ssmrank/checkpoint.hpp"
#include "ssmrank/config.hpp"
#include "ssmrank/data_io.hpp"
#include "ssmrank/metrics.hpp"
#include "ssmrank/rerank.hpp"
#include "ssmrank/retrieval.hpp"
#include "ssmrank/synthetic.hpp"
#include "ssmrank/train.hpp"
#include "ssmrank/trec.hpp"

namespace fs = std::filesystem;
using namespace ssmrank;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string format = "text";
};

// Keys that belong to the command line tool rather than a library config.
struct ToolSettings {
  std::size_t depth = 100;             // BM25 candidates per query
  std::size_t rerank_threshold = 100;  // candidates rescored per query
  std::size_t bench_batch = 8;
  std::size_t bench_seq_len = 512;
  std::size_t bench_steps = 5;
  std::size_t bench_max_len = 512;
  std::size_t bench_queries = 8;
  std::size_t bench_candidates = 16;
  std::size_t profile_seq_len = 512;
  std::size_t profile_inputs = 2;
  std::vector<std::size_t> scaling_lengths{256, 512, 1024, 2048, 4096};
  std::vector<BlockKind> scaling_kinds{BlockKind::kMamba1, BlockKind::kMamba2, BlockKind::kAttention};
  std::size_t scaling_repeats = 3;
  double max_bytes = bench::CapacityBudget{}.max_bytes;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

// Everything one invocation needs from --config and the common flags.
struct Context {
  CommonFlags flags;
  ModelConfig model;
  TrainConfig train;
  ToolSettings tool;

  bench::CapacityBudget budget() const { return {tool.max_bytes}; }
  std::uint64_t seed() const { return train.seed; }
};

Context make_context(const CommonFlags& flags) {
  if (flags.format != "text" && flags.format != "csv")
    throw InputError("--format must be text or csv, got '" + flags.format + "'");
  KeyValueConfig kv = flags.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(flags.config);
  Context ctx;
  ctx.flags = flags;
  ctx.model = ModelConfig::from_kv(kv);
  ctx.train = TrainConfig::from_kv(kv);
  if (flags.seed) ctx.train.seed = *flags.seed;
  auto& t = ctx.tool;
  t.depth = kv.get_uint("depth", t.depth);
  t.rerank_threshold = kv.get_uint("rerank_threshold", t.rerank_threshold);
  t.bench_batch = kv.get_uint("bench_batch", t.bench_batch);
  t.bench_seq_len = kv.get_uint("bench_seq_len", t.bench_seq_len);
  t.bench_steps = kv.get_uint("bench_steps", t.bench_steps);
  t.bench_max_len = kv.get_uint("bench_max_len", t.bench_max_len);
  t.bench_queries = kv.get_uint("bench_queries", t.bench_queries);
  t.bench_candidates = kv.get_uint("bench_candidates", t.bench_candidates);
  t.profile_seq_len = kv.get_uint("profile_seq_len", t.profile_seq_len);
  t.profile_inputs = kv.get_uint("profile_inputs", t.profile_inputs);
  t.scaling_repeats = kv.get_uint("scaling_repeats", t.scaling_repeats);
  t.max_bytes = kv.get_double("max_bytes", t.max_bytes);
  if (kv.has("scaling_lengths")) {
    t.scaling_lengths.clear();
    for (const auto& s : split_list(kv.get_string("scaling_lengths", "")))
      t.scaling_lengths.push_back(static_cast<std::size_t>(std::stoull(s)));
  }
  if (kv.has("scaling_kinds")) {
    t.scaling_kinds.clear();
    for (const auto& s : split_list(kv.get_string("scaling_kinds", ""))) t.scaling_kinds.push_back(parse_block_kind(s));
  }
  kv.finish();
  if (t.depth == 0) throw InputError("depth must be positive");
  if (!(t.max_bytes > 0)) throw InputError("max_bytes must be positive");
  fs::create_directories(flags.out);
  return ctx;
}

std::string out_path(const Context& ctx, const std::string& name) { return (fs::path(ctx.flags.out) / name).string(); }

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  return out;
}

// Writes `<stem>.txt` or `<stem>.csv` under --out and echoes it to stdout.
void emit_report(const Context& ctx, const std::string& stem, const bench::BenchReport& r) {
  const bool csv = ctx.flags.format == "csv";
  const std::string body = csv ? bench::render_csv(r) : bench::render_text(r);
  const std::string path = out_path(ctx, stem + (csv ? ".csv" : ".txt"));
  open_out(path) << body;
  std::cout << body;
}

std::vector<std::pair<std::string, std::string>> model_echo(const ModelConfig& c) { return c.to_kv(); }

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "key=value configuration file");
  sub->add_option("--seed", f.seed, "seed for sampling, initialization and shuffling");
  sub->add_option("--out", f.out, "output directory")->capture_default_str();
  sub->add_option("--format", f.format, "report format: text or csv")->capture_default_str();
}

// Queries with qrels, or the subset listed in `restrict_path` when given.
std::vector<std::string> query_ids_of(const std::string& restrict_path, const Qrels& qrels) {
  std::vector<std::string> ids;
  if (!restrict_path.empty()) {
    const auto table = read_queries(restrict_path);
    for (const auto& q : table.items()) ids.push_back(q.id);
  } else {
    for (const auto& [qid, m] : qrels.all()) ids.push_back(qid);
  }
  return ids;
}

ModelParams<double> load_or_init(const std::string& checkpoint, ModelConfig& config, std::uint64_t seed) {
  if (checkpoint.empty()) return init_params<double>(config, seed);
  auto ck = load_checkpoint(checkpoint);
  config = ck.config;
  return std::move(ck.params);
}

// ---------------------------------------------------------------------------

void cmd_make_synthetic(const Context& ctx) {
  SyntheticSpec spec;
  spec.seed = ctx.seed();
  const auto c = make_synthetic(spec);
  {
    auto out = open_out(out_path(ctx, "corpus.tsv"));
    write_tsv_table(out, c.corpus);
  }
  {
    auto out = open_out(out_path(ctx, "queries.tsv"));
    write_tsv_table(out, c.queries);
  }
  for (const auto& [name, ids] : {std::pair{"train_queries.tsv", c.train_qids}, {"heldout_queries.tsv", c.heldout_qids}}) {
    auto out = open_out(out_path(ctx, name));
    for (const auto& q : ids) out << q << '\t' << c.queries.text(q) << '\n';
  }
  {
    auto out = open_out(out_path(ctx, "qrels.txt"));
    write_qrels(out, c.qrels);
  }
  std::cout << "wrote " << c.corpus.size() << " docs, " << c.queries.size() << " queries to " << ctx.flags.out << '\n';
}

void cmd_index(const Context& ctx, const std::string& corpus_path, const std::string& queries_path) {
  const auto index = build_index(read_corpus(corpus_path));
  index.save(out_path(ctx, "index.txt"));
  std::cout << "indexed " << index.doc_count() << " docs, avg length " << index.avg_doc_length() << '\n';
  if (!queries_path.empty()) {
    const auto run = bm25_run(index, read_queries(queries_path), ctx.tool.depth);
    write_run(out_path(ctx, "bm25.run"), run, "bm25");
    std::cout << "wrote bm25.run for " << run.size() << " queries at depth " << ctx.tool.depth << '\n';
  }
}

void cmd_sample_negatives(const Context& ctx, const std::string& run_path, const std::string& qrels_path,
                          const std::string& restrict_path) {
  RunSet run = read_run(run_path);
  const Qrels qrels = read_qrels(qrels_path);
  if (!restrict_path.empty()) {
    RunSet kept;
    const auto only = read_queries(restrict_path);
    for (const auto& q : only.items()) {
      auto it = run.find(q.id);
      if (it == run.end()) throw InputError("sample-negatives: query " + q.id + " is not in the run");
      kept[q.id] = it->second;
    }
    run = std::move(kept);
  }
  const auto manifest = build_manifest(run, qrels, ctx.train.negatives, ctx.seed());
  if (manifest.empty()) throw InputError("sample-negatives: no query in the run has a relevant document");
  auto out = open_out(out_path(ctx, "manifest.tsv"));
  write_manifest(out, manifest);
  std::cout << "wrote " << manifest.size() << " training instances with " << ctx.train.negatives << " negatives\n";
}

void cmd_train(Context ctx, const std::string& manifest_path, const std::string& corpus_path,
               const std::string& queries_path, const std::string& init_checkpoint) {
  const auto data = resolve_manifest(read_manifest(manifest_path), read_queries(queries_path), read_corpus(corpus_path));
  auto params = load_or_init(init_checkpoint, ctx.model, ctx.seed());
  std::ofstream loss = open_out(out_path(ctx, "loss.csv"));
  loss << "step,loss,lr\n";
  loss.precision(17);
  const std::size_t total = ctx.train.total_steps(data.size());
  const auto t0 = std::chrono::steady_clock::now();
  auto result = train(data, ctx.train, ctx.model, params, nullptr, [&](std::size_t step, double l, double lr) {
    loss << step << ',' << l << ',' << lr << '\n';
    if (step == 1 || step % 25 == 0 || step == total)
      std::cerr << "step " << step << "/" << total << " loss " << l << " lr " << lr << '\n';
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(out_path(ctx, "model.ckpt"), ctx.model, params);

  bench::BenchReport r;
  r.title = "train";
  r.config = model_echo(ctx.model);
  for (const auto& kv : ctx.train.to_kv()) r.config.push_back(kv);
  r.metrics = {{"instances", static_cast<double>(data.size())},
               {"steps", static_cast<double>(result.steps)},
               {"final_loss", result.loss_curve.empty() ? 0.0 : result.loss_curve.back()},
               {"tokens", static_cast<double>(result.tokens)},
               {"seconds", seconds},
               {"tokens_per_second", seconds > 0 ? static_cast<double>(result.tokens) / seconds : 0.0}};
  emit_report(ctx, "train", r);
}

void cmd_rerank(Context ctx, const std::string& checkpoint, const std::string& run_path, const std::string& corpus_path,
                const std::string& queries_path) {
  auto ck = load_checkpoint(checkpoint);
  const auto corpus = read_corpus(corpus_path);
  const auto queries = read_queries(queries_path);
  const RunSet run = read_run(run_path);
  const auto policy = TruncationPolicy::custom(ctx.train.truncation);
  const auto reranked = rerank_run(model_scorer<double>(ck.params, ck.config, policy), run, queries, corpus,
                                   ctx.tool.rerank_threshold);
  write_run(out_path(ctx, "rerank.run"), reranked, "ssmrank");
  std::cout << "reranked " << reranked.size() << " queries (top " << ctx.tool.rerank_threshold << ")\n";
}

void cmd_eval(const Context& ctx, const std::string& run_path, const std::string& qrels_path,
              const std::string& restrict_path) {
  RunSet run = read_run(run_path);
  Qrels qrels = read_qrels(qrels_path);
  if (!restrict_path.empty()) {
    const auto ids = query_ids_of(restrict_path, qrels);
    const std::set<std::string> keep(ids.begin(), ids.end());
    qrels = subset(qrels, ids);
    for (auto it = run.begin(); it != run.end();) it = keep.count(it->first) ? std::next(it) : run.erase(it);
  }
  const auto extra = run_only_queries(run, qrels);
  if (!extra.empty())
    std::cerr << "warning: " << extra.size() << " run queries have no qrels and are skipped: " << join_list(extra)
              << '\n';
  bench::BenchReport r;
  r.title = "eval";
  r.config = {{"run", run_path}, {"qrels", qrels_path}};
  if (!restrict_path.empty()) r.config.push_back({"queries", restrict_path});
  r.metrics = {{"queries", static_cast<double>(qrels.num_queries())},
               {"mrr@10", mrr_at_k(run, qrels, 10)},
               {"ndcg@10", ndcg_at_k(run, qrels, 10)},
               {"recall@100", recall_at_k(run, qrels, 100)}};
  emit_report(ctx, "eval", r);
}

void cmd_bench_train(const Context& ctx) {
  const auto& t = ctx.tool;
  const auto res =
      bench::measure_training_throughput(ctx.model, t.bench_batch, t.bench_seq_len, t.bench_steps, ctx.seed(), ctx.budget());
  bench::BenchReport r;
  r.title = "bench-train";
  r.config = model_echo(ctx.model);
  r.config.push_back({"batch", std::to_string(t.bench_batch)});
  r.config.push_back({"seq_len", std::to_string(t.bench_seq_len)});
  r.config.push_back({"steps", std::to_string(t.bench_steps)});
  r.config.push_back({"workers", "1"});
  r.metrics = {{"tokens_per_second", res.tokens_per_second}, {"stddev_tokens_per_second", res.stddev_tokens_per_second}};
  emit_report(ctx, "bench_train", r);
}

// Random byte text, so inference can be measured without a collection.
std::vector<bench::EvalQuery> random_eval_set(std::size_t queries, std::size_t candidates, std::size_t doc_chars,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto text = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(i % 6 == 5 ? ' ' : static_cast<char>('a' + detail::bounded_draw(rng, 26)));
    return s;
  };
  std::vector<bench::EvalQuery> eval(queries);
  for (auto& q : eval) {
    q.query = text(24);
    for (std::size_t d = 0; d < candidates; ++d) q.docs.push_back(text(doc_chars));
  }
  return eval;
}

void cmd_bench_infer(Context ctx, const std::string& checkpoint, const std::string& run_path,
                     const std::string& corpus_path, const std::string& queries_path) {
  const auto& t = ctx.tool;
  auto params = load_or_init(checkpoint, ctx.model, ctx.seed());
  std::vector<bench::EvalQuery> eval;
  if (!run_path.empty()) {
    if (corpus_path.empty() || queries_path.empty())
      throw InputError("bench-infer: --run needs --corpus and --queries");
    const auto corpus = read_corpus(corpus_path);
    const auto queries = read_queries(queries_path);
    for (const auto& [qid, list] : read_run(run_path)) {
      bench::EvalQuery q{queries.text(qid), {}};
      for (std::size_t i = 0; i < std::min(list.size(), t.rerank_threshold); ++i)
        q.docs.push_back(corpus.text(list.entries[i].doc_id));
      eval.push_back(std::move(q));
    }
  } else {
    eval = random_eval_set(t.bench_queries, t.bench_candidates, t.bench_max_len, ctx.seed());
  }
  const auto res = bench::measure_inference_qps(params, ctx.model, eval, t.bench_batch, t.bench_max_len, ctx.budget());
  bench::BenchReport r;
  r.title = "bench-infer";
  r.config = model_echo(ctx.model);
  r.config.push_back({"batch", std::to_string(t.bench_batch)});
  r.config.push_back({"max_len", std::to_string(t.bench_max_len)});
  r.config.push_back({"workers", "1"});
  r.metrics = {{"queries", static_cast<double>(res.queries)},
               {"forwards", static_cast<double>(res.forwards)},
               {"seconds", res.seconds},
               {"queries_per_second", res.queries_per_second}};
  emit_report(ctx, "bench_infer", r);
}

void cmd_profile(Context ctx, const std::string& checkpoint) {
  const auto& t = ctx.tool;
  auto params = load_or_init(checkpoint, ctx.model, ctx.seed());
  ctx.budget().check(ctx.model, t.profile_seq_len, false);
  std::mt19937_64 rng(ctx.seed());
  std::vector<std::vector<int>> inputs;
  for (std::size_t i = 0; i < t.profile_inputs; ++i) inputs.push_back(bench::random_sequence(ctx.model, t.profile_seq_len, rng));
  TimerRegistry reg;
  bench::BenchReport r;
  r.title = "profile";
  r.config = model_echo(ctx.model);
  r.config.push_back({"seq_len", std::to_string(t.profile_seq_len)});
  r.config.push_back({"inputs", std::to_string(t.profile_inputs)});
  r.scopes = bench::profile_operators(params, ctx.model, inputs, reg);
  emit_report(ctx, "profile", r);
}

std::vector<std::string> kind_names(const std::vector<BlockKind>& kinds) {
  std::vector<std::string> v;
  for (auto k : kinds) v.push_back(to_string(k));
  return v;
}

std::vector<std::string> length_names(const std::vector<std::size_t>& ls) {
  std::vector<std::string> v;
  for (auto l : ls) v.push_back(std::to_string(l));
  return v;
}

void cmd_scaling(const Context& ctx) {
  const auto& t = ctx.tool;
  const auto res = bench::scaling_curve(ctx.model, t.scaling_kinds, t.scaling_lengths, t.scaling_repeats, ctx.seed(),
                                        ctx.budget());
  bench::BenchReport r;
  r.title = "scaling";
  r.config = model_echo(ctx.model);
  r.config.push_back({"kinds", join_list(kind_names(t.scaling_kinds))});
  r.config.push_back({"lengths", join_list(length_names(t.scaling_lengths))});
  r.config.push_back({"repeats", std::to_string(t.scaling_repeats)});
  r.config.push_back({"workers", "1"});
  r.scaling = res.rows;
  r.fits = res.fits;
  emit_report(ctx, "scaling", r);
}

void cmd_flops(const Context& ctx) {
  const auto& t = ctx.tool;
  bench::BenchReport r;
  r.title = "flops";
  r.config = model_echo(ctx.model);
  for (auto k : t.scaling_kinds) {
    ModelConfig c = ctx.model;
    c.block_kind = k;
    for (auto L : t.scaling_lengths) {
      const auto f = bench::estimate_flops(c, L);
      const std::string p = to_string(k) + ".L" + std::to_string(L) + ".";
      r.metrics.push_back({p + "layer_forward", f.layer_forward});
      r.metrics.push_back({p + "layer_training", f.layer_training});
      r.metrics.push_back({p + "inference_step", f.inference_step});
    }
    const auto f = bench::estimate_flops(c, t.scaling_lengths.front());
    const auto [tl, tn] = f.core_training.leading();
    const auto [il, in] = f.core_inference.leading();
    r.metrics.push_back({to_string(k) + ".training_exponent_L", tl});
    r.metrics.push_back({to_string(k) + ".training_exponent_N", tn});
    r.metrics.push_back({to_string(k) + ".inference_exponent_L", il});
    r.metrics.push_back({to_string(k) + ".inference_exponent_N", in});
  }
  emit_report(ctx, "flops", r);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const CapacityError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const InputError*>(&e)) return 2;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssmrank: state space model rerankers and efficiency benchmarks"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string corpus, queries, qrels, run, manifest, checkpoint, restrict;

  auto* mk = app.add_subcommand("make-synthetic", "write the seeded synthetic collection");
  auto* index = app.add_subcommand("index", "build a BM25 index, optionally retrieving for --queries");
  index->add_option("--corpus", corpus, "doc_id<TAB>text file")->required();
  index->add_option("--queries", queries, "query_id<TAB>text file; writes bm25.run");
  auto* neg = app.add_subcommand("sample-negatives", "write a training manifest from a run and qrels");
  neg->add_option("--run", run, "candidate run file")->required();
  neg->add_option("--qrels", qrels, "qrels file")->required();
  neg->add_option("--only", restrict, "queries file restricting which queries are used");
  auto* tr = app.add_subcommand("train", "train a reranker on a manifest");
  tr->add_option("--manifest", manifest)->required();
  tr->add_option("--corpus", corpus)->required();
  tr->add_option("--queries", queries)->required();
  tr->add_option("--init", checkpoint, "start from this checkpoint instead of a fresh model");
  auto* rr = app.add_subcommand("rerank", "rerank a candidate run with a checkpoint");
  rr->add_option("--checkpoint", checkpoint)->required();
  rr->add_option("--run", run)->required();
  rr->add_option("--corpus", corpus)->required();
  rr->add_option("--queries", queries)->required();
  auto* ev = app.add_subcommand("eval", "MRR@10, NDCG@10 and Recall@100 of a run");
  ev->add_option("--run", run)->required();
  ev->add_option("--qrels", qrels)->required();
  ev->add_option("--only", restrict, "queries file restricting the evaluated queries");
  auto* bt = app.add_subcommand("bench-train", "training throughput in tokens per second");
  auto* bi = app.add_subcommand("bench-infer", "inference speed in queries per second");
  bi->add_option("--checkpoint", checkpoint);
  bi->add_option("--run", run, "use this run's candidates instead of random text");
  bi->add_option("--corpus", corpus);
  bi->add_option("--queries", queries);
  auto* pr = app.add_subcommand("profile", "operator-level timing of forward passes");
  pr->add_option("--checkpoint", checkpoint);
  auto* sc = app.add_subcommand("scaling", "forward time against sequence length per block kind");
  auto* fl = app.add_subcommand("flops", "analytic operation counts");
  for (auto* s : {mk, index, neg, tr, rr, ev, bt, bi, pr, sc, fl}) add_common(s, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const Context ctx = make_context(flags);
    if (*mk) cmd_make_synthetic(ctx);
    else if (*index) cmd_index(ctx, corpus, queries);
    else if (*neg) cmd_sample_negatives(ctx, run, qrels, restrict);
    else if (*tr) cmd_train(ctx, manifest, corpus, queries, checkpoint);
    else if (*rr) cmd_rerank(ctx, checkpoint, run, corpus, queries);
    else if (*ev) cmd_eval(ctx, run, qrels, restrict);
    else if (*bt) cmd_bench_train(ctx);
    else if (*bi) cmd_bench_infer(ctx, checkpoint, run, corpus, queries);
    else if (*pr) cmd_profile(ctx, checkpoint);
    else if (*sc) cmd_scaling(ctx);
    else if (*fl) cmd_flops(ctx);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}
