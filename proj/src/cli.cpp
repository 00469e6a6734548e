#include "mfsgd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <memory>
#include <ostream>
#include <thread>

#include <CLI11.hpp>

#include "mfsgd/checkpoint.hpp"
#include "mfsgd/dataset.hpp"
#include "mfsgd/pipeline.hpp"
#include "mfsgd/scheduling.hpp"

namespace mfsgd {

Hyperparams preset(const std::string& name) {
  Hyperparams h;
  h.k = 128;
  h.alpha = 0.08;
  if (name == "netflix") {
    h.lambda_p = h.lambda_q = 0.05;
    h.beta = 0.3;
  } else if (name == "yahoo") {
    h.lambda_p = h.lambda_q = 1.0;
    h.beta = 0.2;
  } else if (name == "hugewiki") {
    h.lambda_p = h.lambda_q = 0.03;
    h.beta = 0.3;
  } else {
    throw UsageError("unknown preset '" + name + "' (expected netflix, yahoo or hugewiki)");
  }
  return h;
}

namespace {

std::string shortest(double x) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return ec == std::errc{} ? std::string(buf, end) : std::to_string(x);
}

std::uint64_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

bool has_extension(const std::string& path, std::initializer_list<const char*> exts) {
  return std::any_of(exts.begin(), exts.end(), [&](const char* e) {
    const std::string ext(e);
    return path.size() >= ext.size() && path.compare(path.size() - ext.size(), ext.size(), ext) == 0;
  });
}

ReportFormat parse_format(const std::string& name) { return name == "json" ? ReportFormat::json : ReportFormat::csv; }

/// Opens `path` for writing, with "-" meaning the given stream.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) {
    if (path == "-") {
      stream_ = &fallback;
      return;
    }
    file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
    if (!*file_) throw IoError("cannot open " + path + " for writing");
    stream_ = file_.get();
  }
  std::ostream& get() { return *stream_; }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* stream_ = nullptr;
};

struct TrainConfig {
  std::string train_path;
  std::string test_path;
  double test_fraction = 0.0;
  bool one_based = false;
  bool no_rescale = false;

  std::string scheme = "serial";
  std::uint64_t workers = default_workers();
  std::uint64_t batch_len = 256;
  std::uint64_t columns = 0;
  std::string grid;
  std::string table_grid;

  std::uint64_t devices = 0;
  std::uint64_t lookahead = 1;
  std::uint64_t capacity = 0;
  double bandwidth = 0.0;
  double block_latency = 0.0;
  bool simulated_clock = false;

  std::string preset_name;
  Hyperparams hyper;
  double init_scale = -1.0;
  std::int64_t epochs = 20;
  double target_rmse = 0.0;
  std::string precision = "full32";
  std::uint64_t seed = 1;

  std::string out = "-";
  std::string format = "csv";
  std::string checkpoint;
  std::string trace;
  bool force = false;

  std::vector<std::uint64_t> workers_list;

  CLI::Option* opt_k = nullptr;
  CLI::Option* opt_lambda = nullptr;
  CLI::Option* opt_lambda_p = nullptr;
  CLI::Option* opt_lambda_q = nullptr;
  CLI::Option* opt_alpha = nullptr;
  CLI::Option* opt_beta = nullptr;
  CLI::Option* opt_target = nullptr;
  CLI::Option* opt_grid = nullptr;

  bool pipeline() const { return devices > 0; }
};

void add_training_options(CLI::App* app, TrainConfig& c) {
  app->add_option("--train,-i", c.train_path, "Training ratings (text or binary)")->required();
  auto* test = app->add_option("--test", c.test_path, "Held-out ratings file");
  app->add_option("--test-fraction", c.test_fraction, "Hold out this fraction of the training file")
      ->check(CLI::Range(0.0, 1.0))
      ->excludes(test);
  app->add_flag("--one-based", c.one_based, "Text indices start at 1");
  app->add_flag("--no-rescale", c.no_rescale, "Train on raw ratings instead of ratings mapped onto [0, 4]");

  app->add_option("--scheme", c.scheme, "serial | hogwild | wavefront | global-table")
      ->check(CLI::IsMember({"serial", "hogwild", "wavefront", "global-table"}));
  app->add_option("-s,--workers", c.workers, "Parallel workers s")
      ->envname(kThreadsEnv)
      ->check(CLI::PositiveNumber);
  app->add_option("-f,--batch-len", c.batch_len, "Consecutive samples per batch-Hogwild! fetch")
      ->check(CLI::PositiveNumber);
  app->add_option("-c,--columns", c.columns, "Wavefront column groups c (default: s)");
  c.opt_grid = app->add_option("--grid", c.grid,
                               "IxJ: pipeline block grid with --devices, otherwise the global-table grid");
  app->add_option("--table-grid", c.table_grid, "IxJ global-table grid inside each pipeline block (default: 2s x 2s)");

  app->add_option("--devices", c.devices, "Pipeline device count; 0 trains without partitioning");
  app->add_option("--lookahead", c.lookahead, "Blocks queued per device per round")->check(CLI::PositiveNumber);
  app->add_option("--capacity", c.capacity, "Device capacity in samples; 0 is unlimited");
  app->add_option("--bandwidth", c.bandwidth, "Modeled transfer bandwidth in bytes/s; 0 is instantaneous")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--block-latency", c.block_latency, "Modeled fixed cost per staged block in seconds")
      ->check(CLI::NonNegativeNumber);
  app->add_flag("--simulated-clock", c.simulated_clock, "Report modeled pipeline times instead of sleeping");

  app->add_option("--preset", c.preset_name, "netflix | yahoo | hugewiki hyperparameters")
      ->check(CLI::IsMember({"netflix", "yahoo", "hugewiki"}));
  c.opt_k = app->add_option("-k,--rank", c.hyper.k, "Latent dimension")->check(CLI::PositiveNumber);
  c.opt_lambda = app->add_option("--lambda", c.hyper.lambda_p, "Sets both regularizers");
  c.opt_lambda_p = app->add_option("--lambda-p", c.hyper.lambda_p, "Regularizer for P");
  c.opt_lambda_q = app->add_option("--lambda-q", c.hyper.lambda_q, "Regularizer for Q");
  c.opt_alpha = app->add_option("--alpha", c.hyper.alpha, "Initial learning rate");
  c.opt_beta = app->add_option("--beta", c.hyper.beta, "Learning-rate decay");
  app->add_option("--init-scale", c.init_scale, "Features start uniform in [0, scale); default 1/sqrt(k)");
  app->add_option("--epochs", c.epochs, "Epoch budget")->check(CLI::NonNegativeNumber);
  c.opt_target = app->add_option("--target-rmse", c.target_rmse, "Stop after the first epoch at or below this test RMSE");
  app->add_option("--precision", c.precision, "full32 | half16")->check(CLI::IsMember({"full32", "half16"}));
  app->add_option("--seed", c.seed, "Seed for shuffles, splits and initialization");

  app->add_option("--out,-o", c.out, "Report destination ('-' for stdout)");
  app->add_option("--format", c.format, "csv | json")->check(CLI::IsMember({"csv", "json"}));
  app->add_flag("--force", c.force, "Skip the Hogwild feasibility check");
}

Hyperparams resolve_hyper(const TrainConfig& c) {
  Hyperparams h = c.preset_name.empty() ? Hyperparams{} : preset(c.preset_name);
  if (c.opt_k->count() > 0) h.k = c.hyper.k;
  if (c.opt_lambda->count() > 0) h.lambda_p = h.lambda_q = c.hyper.lambda_p;
  if (c.opt_lambda_p->count() > 0) h.lambda_p = c.hyper.lambda_p;
  if (c.opt_lambda_q->count() > 0) h.lambda_q = c.hyper.lambda_q;
  if (c.opt_alpha->count() > 0) h.alpha = c.hyper.alpha;
  if (c.opt_beta->count() > 0) h.beta = c.hyper.beta;
  h.validate();
  return h;
}

SchemeParams scheme_params(const TrainConfig& c, std::uint64_t workers) {
  SchemeParams p;
  p.scheme = parse_scheme(c.scheme);
  p.workers = workers;
  p.batch_len = c.batch_len;
  p.columns = c.columns > 0 ? c.columns : workers;
  if (p.scheme == Scheme::global_table) {
    const std::string& g = c.pipeline() ? c.table_grid : c.grid;
    p.grid = g.empty() ? GridShape{2 * workers, 2 * workers} : parse_grid(g);
  }
  return p;
}

// Flag combinations that can be rejected before any data is read.
void check_flags(const TrainConfig& c, const std::vector<std::uint64_t>& worker_counts) {
  const Scheme scheme = parse_scheme(c.scheme);
  if (c.opt_grid->count() > 0 && !c.pipeline() && scheme != Scheme::global_table) {
    throw UsageError("--grid needs --devices or --scheme global-table");
  }
  if (!c.trace.empty() && !c.pipeline()) throw UsageError("--trace needs --devices");
  if (c.pipeline() && c.grid.empty()) throw UsageError("--devices needs --grid IxJ");
  if (c.opt_target->count() > 0 && c.test_path.empty() && c.test_fraction <= 0.0) {
    throw UsageError("--target-rmse needs --test or --test-fraction");
  }
  if (!c.grid.empty()) (void)parse_grid(c.grid);
  for (std::uint64_t s : worker_counts) {
    const SchemeParams p = scheme_params(c, s);
    if (scheme == Scheme::wavefront && p.workers > p.columns) {
      throw UsageError("wavefront needs s <= c, got s=" + std::to_string(p.workers) +
                       " c=" + std::to_string(p.columns));
    }
  }
  (void)resolve_hyper(c);
}

struct Prepared {
  RatingDataset train;
  std::vector<Sample> test;
};

Prepared prepare(const TrainConfig& c) {
  TextOptions text;
  text.one_based = c.one_based;
  RatingDataset data = load_dataset(c.train_path, text);
  Prepared p;
  if (!c.test_path.empty()) {
    TextOptions test_text = text;
    test_text.rows = data.m;
    test_text.cols = data.n;
    RatingDataset test = load_dataset(c.test_path, test_text);
    if (test.m > data.m || test.n > data.n) throw UsageError("test ratings fall outside the training matrix");
    p.test = std::move(test.samples);
    p.train = std::move(data);
  } else if (c.test_fraction > 0.0) {
    SplitPair parts = split(data, c.test_fraction, derive_seed(c.seed, 0, 5));
    p.train = std::move(parts.train);
    p.test = std::move(parts.test);
  } else {
    p.train = std::move(data);
  }
  if (!c.no_rescale) p.train = rescale_ratings(p.train);
  return p;
}

/// Validates everything that depends on the data, before training starts.
void check_against_data(const TrainConfig& c, const SchemeParams& params, const RatingDataset& data) {
  if (!c.pipeline()) {
    validate_scheme(params, data.m, data.n, c.force);
    return;
  }
  const GridShape shape = parse_grid(c.grid);
  if (shape.rows > data.m || shape.cols > data.n) throw UsageError("--grid exceeds the matrix dimensions");
  if (params.scheme == Scheme::batch_hogwild && !c.force) {
    const Feasibility f = feasibility_check(params.workers, data.m, data.n, shape.rows, shape.cols);
    if (!f.pass) throw UsageError("pipeline feasibility check failed: " + f.reason + " (use --force to override)");
  }
  const std::uint64_t bound = max_lookahead(shape, c.devices);
  if (c.lookahead > bound) {
    throw UsageError("--lookahead " + std::to_string(c.lookahead) + " exceeds ceil(max(i,j)/devices) = " +
                     std::to_string(bound));
  }
}

struct RunOutput {
  TrainReport report;
  PipelineTrace trace;
};

template <FeatureElement E>
RunOutput train_once(const TrainConfig& c, const Prepared& d, const SchemeParams& params, const Hyperparams& hyper) {
  FeatureMatrix<E> P = init_features<E>(static_cast<Index>(d.train.m), hyper.k, derive_seed(c.seed, 0, 3), c.init_scale);
  FeatureMatrix<E> Q = init_features<E>(static_cast<Index>(d.train.n), hyper.k, derive_seed(c.seed, 0, 4), c.init_scale);

  TrainOptions options;
  options.hyper = hyper;
  options.epochs = c.epochs;
  options.seed = c.seed;
  options.test = d.test;
  if (c.opt_target->count() > 0) options.target_rmse = c.target_rmse;
  options.force = c.force;

  RunOutput result;
  if (c.pipeline()) {
    PipelineConfig config;
    config.devices = c.devices;
    config.lookahead = c.lookahead;
    config.scheme = params;
    if (c.capacity > 0) config.capacity_samples = c.capacity;
    if (c.bandwidth > 0.0) config.delay.bytes_per_second = c.bandwidth;
    config.delay.per_block_seconds = c.block_latency;
    config.clock = c.simulated_clock ? PipelineClock::simulated : PipelineClock::wall;
    PipelineResult run = run_pipeline(d.train, P, Q, parse_grid(c.grid), config, options);
    result.report = std::move(run.report);
    result.trace = std::move(run.trace);
  } else {
    result.report = train(d.train, P, Q, params, options).report;
  }
  if (!c.checkpoint.empty()) {
    save_checkpoint(P, d.train.scaling, c.checkpoint + ".P.mfck");
    save_checkpoint(Q, d.train.scaling, c.checkpoint + ".Q.mfck");
  }
  return result;
}

RunOutput train_dispatch(const TrainConfig& c, const Prepared& d, const SchemeParams& params,
                         const Hyperparams& hyper) {
  return c.precision == "half16" ? train_once<Half>(c, d, params, hyper) : train_once<float>(c, d, params, hyper);
}

void summarize(const TrainReport& report, std::ostream& err) {
  err << "epochs " << report.epochs.size() << ", updates " << report.total_updates() << ", "
      << shortest(report.updates_per_second()) << " updates/s";
  if (const auto r = report.final_rmse()) err << ", test rmse " << shortest(*r);
  err << '\n';
}

int cmd_train(const TrainConfig& c, std::ostream& out, std::ostream& err) {
  check_flags(c, {c.workers});
  const Hyperparams hyper = resolve_hyper(c);
  const SchemeParams params = scheme_params(c, c.workers);
  const Prepared data = prepare(c);
  check_against_data(c, params, data.train);

  Sink sink(c.out, out);
  try {
    const RunOutput run = train_dispatch(c, data, params, hyper);
    emit(run.report, parse_format(c.format), sink.get());
    if (!c.trace.empty()) {
      Sink trace(c.trace, out);
      emit_pipeline_trace(run.trace, parse_format(c.format), trace.get());
    }
    summarize(run.report, err);
  } catch (const TrainingDiverged& e) {
    emit(e.report, parse_format(c.format), sink.get());
    throw;
  }
  return kExitOk;
}

int cmd_bench(const TrainConfig& c, std::ostream& out, std::ostream& err) {
  const std::vector<std::uint64_t> counts = c.workers_list.empty() ? std::vector{c.workers} : c.workers_list;
  check_flags(c, counts);
  const Hyperparams hyper = resolve_hyper(c);
  const Prepared data = prepare(c);
  for (std::uint64_t s : counts) check_against_data(c, scheme_params(c, s), data.train);

  Sink sink(c.out, out);
  std::ostream& o = sink.get();
  const bool json = parse_format(c.format) == ReportFormat::json;
  o << (json ? "[\n" : "workers,epochs,elapsed_seconds,updates_per_sec,wait_fraction,final_rmse\n");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const std::uint64_t s = counts[i];
    const RunOutput run = train_dispatch(c, data, scheme_params(c, s), hyper);
    const TrainReport& r = run.report;
    const double elapsed = r.elapsed_seconds();
    const double wait_fraction = elapsed > 0.0 ? r.wait_seconds / (elapsed * static_cast<double>(s)) : 0.0;
    const auto final_rmse = r.final_rmse();
    if (json) {
      o << "  {\"workers\": " << s << ", \"epochs\": " << r.epochs.size() << ", \"elapsed_seconds\": "
        << shortest(elapsed) << ", \"updates_per_sec\": " << shortest(r.updates_per_second())
        << ", \"wait_fraction\": " << shortest(wait_fraction)
        << ", \"final_rmse\": " << (final_rmse ? shortest(*final_rmse) : "null") << "}"
        << (i + 1 < counts.size() ? ",\n" : "\n");
    } else {
      o << s << ',' << r.epochs.size() << ',' << shortest(elapsed) << ',' << shortest(r.updates_per_second()) << ','
        << shortest(wait_fraction) << ',' << (final_rmse ? shortest(*final_rmse) : "") << '\n';
    }
    err << "s=" << s << ": ";
    summarize(r, err);
  }
  if (json) o << "]\n";
  if (!o) throw IoError("failed writing benchmark table");
  return kExitOk;
}

struct GenerateConfig {
  std::uint64_t m = 2000;
  std::uint64_t n = 1000;
  Index rank = 8;
  double density = 0.02;
  double noise = 0.01;
  std::uint64_t seed = 1;
  std::string out;
  std::string factors;
  bool text = false;
};

int cmd_generate(const GenerateConfig& c, std::ostream& err) {
  const SyntheticProblem problem = synth_lowrank(c.m, c.n, c.rank, c.density, c.noise, c.seed);
  const bool binary = !c.text && !has_extension(c.out, {".txt", ".tsv"});
  save_dataset(problem.dataset, c.out, binary);
  if (!c.factors.empty()) {
    save_checkpoint(problem.p_true, RatingScaling{}, c.factors + ".P.mfck");
    save_checkpoint(problem.q_true, RatingScaling{}, c.factors + ".Q.mfck");
  }
  err << "generated " << problem.dataset.size() << " ratings of a " << c.m << "x" << c.n << " rank-" << c.rank
      << " matrix\n";
  return kExitOk;
}

struct EvaluateConfig {
  std::string p_path;
  std::string q_path;
  std::string test_path;
  bool one_based = false;
};

int cmd_evaluate(const EvaluateConfig& c, std::ostream& out) {
  const Checkpoint p = load_checkpoint(c.p_path);
  const Checkpoint q = load_checkpoint(c.q_path);
  if (p.features.k() != q.features.k()) throw UsageError("P and Q checkpoints have different ranks");
  if (!(p.scaling == q.scaling)) throw UsageError("P and Q checkpoints carry different rating scalings");
  TextOptions text;
  text.one_based = c.one_based;
  text.rows = static_cast<std::uint64_t>(p.features.rows());
  text.cols = static_cast<std::uint64_t>(q.features.rows());
  const RatingDataset test = load_dataset(c.test_path, text);
  if (test.m > *text.rows || test.n > *text.cols) throw UsageError("test ratings fall outside the factor matrices");
  out << "rmse " << shortest(rmse(test.samples, p.features, q.features, p.scaling)) << '\n';
  return kExitOk;
}

struct ConvertConfig {
  std::string in;
  std::string out;
  std::string to;
  bool one_based = false;
};

int cmd_convert(const ConvertConfig& c, std::ostream& err) {
  TextOptions text;
  text.one_based = c.one_based;
  const RatingDataset data = load_dataset(c.in, text);
  const bool binary = c.to.empty() ? has_extension(c.out, {".bin", ".mfsg"}) : c.to == "binary";
  save_dataset(data, c.out, binary);
  err << "wrote " << data.size() << " ratings as " << (binary ? "binary" : "text") << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parallel SGD matrix factorization"};
  app.name(args.empty() ? "mfsgd" : args[0]);
  app.require_subcommand(1);

  TrainConfig train_cfg;
  auto* train_cmd = app.add_subcommand("train", "Train factors with one scheme and emit a per-epoch report");
  add_training_options(train_cmd, train_cfg);
  train_cmd->add_option("--checkpoint", train_cfg.checkpoint, "Write PREFIX.P.mfck and PREFIX.Q.mfck");
  train_cmd->add_option("--trace", train_cfg.trace, "Write the pipeline stage trace here");

  TrainConfig bench_cfg;
  bench_cfg.scheme = "hogwild";
  auto* bench_cmd = app.add_subcommand("bench", "Sweep worker counts and report throughput");
  add_training_options(bench_cmd, bench_cfg);
  bench_cmd->add_option("--workers-list", bench_cfg.workers_list, "Comma-separated worker counts")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);

  GenerateConfig gen_cfg;
  auto* gen_cmd = app.add_subcommand("generate", "Write a synthetic low-rank dataset and its true factors");
  gen_cmd->add_option("-m,--rows", gen_cfg.m, "Rows")->check(CLI::PositiveNumber);
  gen_cmd->add_option("-n,--cols", gen_cfg.n, "Columns")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--rank", gen_cfg.rank, "True rank")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--density", gen_cfg.density, "Observed fraction of cells")->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--noise", gen_cfg.noise, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--seed", gen_cfg.seed, "Seed");
  gen_cmd->add_option("--out,-o", gen_cfg.out, "Dataset path (.txt/.tsv writes text)")->required();
  gen_cmd->add_option("--factors", gen_cfg.factors, "Write PREFIX.P.mfck and PREFIX.Q.mfck");
  gen_cmd->add_flag("--text", gen_cfg.text, "Force text output");

  EvaluateConfig eval_cfg;
  auto* eval_cmd = app.add_subcommand("evaluate", "RMSE of checkpointed factors on a ratings file");
  eval_cmd->add_option("--p", eval_cfg.p_path, "P checkpoint")->required();
  eval_cmd->add_option("--q", eval_cfg.q_path, "Q checkpoint")->required();
  eval_cmd->add_option("--test", eval_cfg.test_path, "Ratings to score")->required();
  eval_cmd->add_flag("--one-based", eval_cfg.one_based, "Text indices start at 1");

  ConvertConfig conv_cfg;
  auto* conv_cmd = app.add_subcommand("convert", "Transcode ratings between text and binary");
  conv_cmd->add_option("--in,-i", conv_cfg.in, "Input ratings")->required();
  conv_cmd->add_option("--out,-o", conv_cfg.out, "Output path")->required();
  conv_cmd->add_option("--to", conv_cfg.to, "text | binary (default: .bin/.mfsg means binary)")
      ->check(CLI::IsMember({"text", "binary"}));
  conv_cmd->add_flag("--one-based", conv_cfg.one_based, "Text input indices start at 1");

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("mfsgd");

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_cfg, out, err);
    if (bench_cmd->parsed()) return cmd_bench(bench_cfg, out, err);
    if (gen_cmd->parsed()) return cmd_generate(gen_cfg, err);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_cfg, out);
    if (conv_cmd->parsed()) return cmd_convert(conv_cfg, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace mfsgd
