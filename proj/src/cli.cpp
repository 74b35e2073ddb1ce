#include "contourseg/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "contourseg/trainer.hpp"

namespace contourseg {

namespace {

void echo_config(nlohmann::json config) {
  std::cout << "config: " << config.dump() << "\n";
}

std::string manifest_path(const std::string& data) {
  namespace fs = std::filesystem;
  if (fs::is_directory(data)) return (fs::path(data) / "manifest.json").string();
  return data;
}

void ensure_out_dir(const std::string& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw DataError("cannot create output directory " + out + ": " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

// ---- shared training flags ----

struct TrainFlags {
  std::string data;
  std::string loss = "cwcd";
  double lambda = 2.0;
  double alpha = 0.5;
  double beta = 0.5;
  double epsilon = 1e-6;
  int k = 2;
  int iter = 1;
  int classes = 0;  // 0: read off the manifest
  int base_channels = 16;
  int levels = 3;
  int epochs = 30;
  int batch = 2;
  double lr = 3e-4;
  std::string schedule = "halve";
  bool no_augment = false;
  std::uint64_t seed = 0;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--data", f.data, "dataset directory or manifest.json")->required();
  cmd->add_option("--loss", f.loss, "training loss: ce|cwce|dice|sdl|cwcd|gdl|combo")
      ->capture_default_str();
  cmd->add_option("--lambda", f.lambda, "contour weight multiplier")->capture_default_str();
  cmd->add_option("--alpha", f.alpha, "compound mixing weight")->capture_default_str();
  cmd->add_option("--beta", f.beta, "separable dice region weight")->capture_default_str();
  cmd->add_option("--epsilon", f.epsilon, "numerical stabilizer")->capture_default_str();
  cmd->add_option("--k", f.k, "erosion structuring element size")->capture_default_str();
  cmd->add_option("--iter", f.iter, "erosion iterations")->capture_default_str();
  cmd->add_option("--classes", f.classes, "class count (default: from the manifest)");
  cmd->add_option("--base-channels", f.base_channels, "encoder width at the first level")
      ->capture_default_str();
  cmd->add_option("--levels", f.levels, "encoder depth")->capture_default_str();
  cmd->add_option("--epochs", f.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--batch", f.batch, "batch size")->capture_default_str();
  cmd->add_option("--lr", f.lr, "base learning rate")->capture_default_str();
  cmd->add_option("--schedule", f.schedule, "learning rate schedule: halve|linear")
      ->capture_default_str();
  cmd->add_flag("--no-augment", f.no_augment, "disable training-split augmentation");
  cmd->add_option("--seed", f.seed, "run seed")->capture_default_str();
}

TrainConfig make_train_config(const TrainFlags& f, const DatasetManifest& manifest) {
  TrainConfig cfg;
  cfg.loss = loss_kind_from_string(f.loss);
  cfg.loss_config.lambda = f.lambda;
  cfg.loss_config.alpha = f.alpha;
  cfg.loss_config.beta = f.beta;
  cfg.loss_config.epsilon = f.epsilon;
  cfg.loss_config.erosion_k = f.k;
  cfg.loss_config.erosion_iterations = f.iter;
  cfg.network.num_classes = f.classes > 0 ? f.classes : manifest.num_classes;
  cfg.network.base_channels = f.base_channels;
  cfg.network.levels = f.levels;
  cfg.epochs = f.epochs;
  cfg.batch_size = f.batch;
  cfg.lr = f.lr;
  cfg.schedule = schedule_kind_from_string(f.schedule);
  cfg.augment = !f.no_augment;
  cfg.seed = f.seed;
  return cfg;
}

nlohmann::json train_config_echo(const char* command, const TrainFlags& f,
                                 const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::parse(train_config_json(cfg));
  j["command"] = command;
  j["data"] = f.data;
  return j;
}

// ---- gen-data ----

struct GenDataFlags {
  std::string out;
  std::string preset = "imbalance-v1";
  std::uint64_t seed = 0;
  int volumes = 96;
  int train = 64;
  int val = 16;
  int test = 16;
  int dim = 32;
};

int run_gen_data(const GenDataFlags& f) {
  if (f.preset != "imbalance-v1") throw UsageError("unknown preset: " + f.preset);
  if (f.dim < 1) throw UsageError("--dim must be positive");
  DatasetSpec spec = DatasetSpec::imbalance_v1(f.seed, f.volumes);
  const std::size_t dim = static_cast<std::size_t>(f.dim);
  spec.shape = {dim, dim, dim};
  echo_config({{"command", "gen-data"},
               {"preset", f.preset},
               {"seed", f.seed},
               {"volumes", f.volumes},
               {"train", f.train},
               {"val", f.val},
               {"test", f.test},
               {"dim", f.dim},
               {"out", f.out}});
  ensure_out_dir(f.out);
  const DatasetManifest manifest = write_dataset(f.out, spec, f.train, f.val, f.test);
  std::cout << "volumes: " << manifest.entries.size() << "\n";
  std::cout << "manifest: " << join_path(f.out, "manifest.json") << "\n";
  return 0;
}

// ---- extract-contour ----

struct ExtractFlags {
  std::string volume;
  std::string out;
  int k = 2;
  int iter = 1;
};

int run_extract_contour(const ExtractFlags& f) {
  echo_config({{"command", "extract-contour"},
               {"volume", f.volume},
               {"k", f.k},
               {"iter", f.iter},
               {"out", f.out}});
  const Sample sample = load_sample(f.volume);
  const StructuringElement se = StructuringElement::cube(f.k);
  se.validate();
  if (f.iter < 1) throw UsageError("--iter must be at least 1");
  const ContourMaps maps = extract_contours(sample.labels, se, f.iter);
  ensure_out_dir(f.out);

  LabelVolume contour = LabelVolume::zeros(sample.labels.dims, sample.labels.num_classes);
  for (int cls = 1; cls < sample.labels.num_classes; ++cls) {
    const BinaryMask& mask = maps.contour[static_cast<std::size_t>(cls)];
    for (std::size_t i = 0; i < mask.voxels.size(); ++i) {
      if (mask.voxels[i]) contour.labels[i] = static_cast<std::uint16_t>(cls);
    }
  }
  save_sample(join_path(f.out, "contour.csv1"), {sample.intensity, contour});

  const std::string counts_path = join_path(f.out, "counts.csv");
  std::ofstream counts(counts_path, std::ios::trunc);
  if (!counts) throw DataError("cannot open " + counts_path + " for writing");
  counts << "class,region_voxels,eroded_voxels,contour_voxels\n";
  for (int cls = 1; cls < sample.labels.num_classes; ++cls) {
    const std::size_t region = sample.labels.class_count(cls);
    const std::size_t eroded = maps.eroded[static_cast<std::size_t>(cls)].count();
    const std::size_t edge = maps.contour[static_cast<std::size_t>(cls)].count();
    counts << cls << ',' << region << ',' << eroded << ',' << edge << "\n";
    std::cout << "class " << cls << ": region " << region << " eroded " << eroded
              << " contour " << edge << "\n";
  }
  if (!counts) throw DataError("failed while writing " + counts_path);
  return 0;
}

// ---- eval-loss ----

struct EvalLossFlags {
  std::string volume;
  std::string loss = "cwcd";
  double lambda = 2.0;
  double alpha = 0.5;
  double beta = 0.5;
  double epsilon = 1e-6;
  int k = 2;
  int iter = 1;
  std::uint64_t pred_seed = 0;
};

int run_eval_loss(const EvalLossFlags& f) {
  echo_config({{"command", "eval-loss"},
               {"volume", f.volume},
               {"loss", f.loss},
               {"lambda", f.lambda},
               {"alpha", f.alpha},
               {"beta", f.beta},
               {"epsilon", f.epsilon},
               {"k", f.k},
               {"iter", f.iter},
               {"pred_seed", f.pred_seed}});
  const LossKind kind = loss_kind_from_string(f.loss);
  LossConfig cfg;
  cfg.lambda = f.lambda;
  cfg.alpha = f.alpha;
  cfg.beta = f.beta;
  cfg.epsilon = f.epsilon;
  cfg.erosion_k = f.k;
  cfg.erosion_iterations = f.iter;
  cfg.validate();

  const Sample sample = load_sample(f.volume);
  const Dims3 dims = sample.labels.dims;
  const std::size_t classes = static_cast<std::size_t>(sample.labels.num_classes);
  Rng rng(derive_seed(f.pred_seed, 0));
  std::vector<double> raw(classes * dims.numel());
  for (double& v : raw) v = rng.normal();
  const Prediction pred{
      Tensor::from_data({1, classes, dims.d, dims.h, dims.w}, std::move(raw))};
  const Tensor loss = compute_loss(kind, pred, sample.labels, cfg);
  std::cout << "loss: " << format_double(loss.item()) << "\n";
  return 0;
}

// ---- gradcheck ----

struct GradcheckFlags {
  std::uint64_t seed = 0;
  int dim = 4;
  int classes = 2;
  int probes = 32;
  double tol = 1e-6;
};

int run_gradcheck(const GradcheckFlags& f) {
  echo_config({{"command", "gradcheck"},
               {"seed", f.seed},
               {"dim", f.dim},
               {"classes", f.classes},
               {"probes", f.probes},
               {"tol", f.tol}});
  if (f.dim < 2) throw UsageError("--dim must be at least 2");
  if (f.classes < 2) throw UsageError("--classes must be at least 2");
  if (f.probes < 1) throw UsageError("--probes must be at least 1");

  const std::size_t dim = static_cast<std::size_t>(f.dim);
  const std::size_t classes = static_cast<std::size_t>(f.classes);
  const Dims3 dims{dim, dim, dim};
  Rng rng(derive_seed(f.seed, 1));
  LabelVolume gt = LabelVolume::zeros(dims, f.classes);
  for (std::uint16_t& v : gt.labels) {
    v = static_cast<std::uint16_t>(rng.uniform_int(classes));
  }
  std::vector<double> raw(classes * dims.numel());
  for (double& v : raw) v = rng.normal();

  LossConfig cfg;
  double worst = 0.0;
  for (LossKind kind : {LossKind::ce, LossKind::cwce, LossKind::dice, LossKind::sdl,
                        LossKind::cwcd, LossKind::gdl, LossKind::combo}) {
    Tensor logits =
        Tensor::from_data({1, classes, dims.d, dims.h, dims.w}, raw, true);
    GradTape tape;
    double base = 0.0;
    {
      TapeScope scope(tape);
      const Tensor loss = compute_loss(kind, {logits}, gt, cfg);
      base = loss.item();
      tape.backward(loss);
    }
    const auto grad = logits.grad();
    auto values = logits.mutable_data();
    const std::size_t stride = std::max<std::size_t>(
        1, values.size() / static_cast<std::size_t>(f.probes));
    double max_err = 0.0;
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double x = values[i];
      const double h = 1e-6 * std::max(1.0, std::abs(x));
      values[i] = x + h;
      const double up = compute_loss(kind, {logits}, gt, cfg).item();
      values[i] = x - h;
      const double down = compute_loss(kind, {logits}, gt, cfg).item();
      values[i] = x;
      const double fd = (up - down) / (2.0 * h);
      const double err =
          std::abs(fd - grad[i]) / std::max({1.0, std::abs(fd), std::abs(grad[i])});
      max_err = std::max(max_err, err);
    }
    std::cout << "gradcheck " << to_string(kind) << ": loss " << format_double(base)
              << " max_rel_err " << format_double(max_err) << "\n";
    worst = std::max(worst, max_err);
  }
  if (worst > f.tol) {
    throw NumericError("gradient check failed: max relative error " +
                       format_double(worst) + " exceeds " + format_double(f.tol));
  }
  return 0;
}

// ---- check-theory ----

struct CheckTheoryFlags {
  std::uint64_t seed = 7;
  int trials = 100000;
};

int run_check_theory(const CheckTheoryFlags& f) {
  echo_config({{"command", "check-theory"}, {"seed", f.seed}, {"trials", f.trials}});
  if (f.trials < 1) throw UsageError("--trials must be at least 1");
  Rng rng(f.seed);
  std::size_t violations = 0;
  double max_equality_gap = 0.0;
  for (int t = 0; t < f.trials; ++t) {
    double x1 = 2.0 * rng.uniform();
    double y1 = 2.0 * rng.uniform();
    double x2, y2;
    const bool proportional = t % 10 == 9;
    if (proportional) {
      // x1*y2 == x2*y1 up to rounding: the equality edge of the bound.
      const double c = 2.0 * rng.uniform();
      x2 = c * x1;
      y2 = c * y1;
    } else {
      x2 = 2.0 * rng.uniform();
      y2 = 2.0 * rng.uniform();
    }
    const Superadditivity s = check_superadditivity(x1, y1, x2, y2);
    if (!s.holds) ++violations;
    if (proportional) {
      max_equality_gap = std::max(max_equality_gap, std::abs(s.lhs - s.rhs));
    }
  }
  std::cout << "violations: " << violations << "\n";
  std::cout << "max_equality_gap: " << format_double(max_equality_gap) << "\n";
  if (violations > 0) {
    throw NumericError("superadditivity violated in " + std::to_string(violations) +
                       " of " + std::to_string(f.trials) + " trials");
  }
  return 0;
}

// ---- train ----

struct TrainCmdFlags {
  TrainFlags train;
  std::string out;
};

int run_train(const TrainCmdFlags& f) {
  const DatasetManifest manifest = load_manifest(manifest_path(f.train.data));
  TrainConfig cfg = make_train_config(f.train, manifest);
  ensure_out_dir(f.out);
  cfg.checkpoint_path = join_path(f.out, "checkpoint.ckpt");
  cfg.log_csv_path = join_path(f.out, "train_log.csv");
  cfg.summary_json_path = join_path(f.out, "summary.json");
  echo_config(train_config_echo("train", f.train, cfg));
  const TrainRun run = train(cfg, manifest);
  std::cout << "best_epoch: " << run.best_epoch << "\n";
  std::cout << "best_val_dsc: " << format_double(run.best_val_dsc) << "\n";
  std::cout << "checkpoint: " << cfg.checkpoint_path << "\n";
  return 0;
}

// ---- evaluate ----

struct EvaluateFlags {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out;
};

int run_evaluate(const EvaluateFlags& f) {
  echo_config({{"command", "evaluate"},
               {"checkpoint", f.checkpoint},
               {"data", f.data},
               {"split", f.split},
               {"out", f.out}});
  const DatasetManifest manifest = load_manifest(manifest_path(f.data));
  const EvalSummary ev = evaluate_checkpoint(f.checkpoint, manifest, f.split);
  std::cout << "samples: " << ev.per_sample.size() << "\n";
  std::cout << "mean_dsc: " << format_double(ev.mean_dsc) << "\n";
  std::cout << "std_dsc: " << format_double(ev.std_dsc) << "\n";
  for (const auto& [cls, stat] : ev.per_class) {
    std::cout << "class " << cls << ": dsc " << format_double(stat.mean_dsc) << " std "
              << format_double(stat.std_dsc) << " hd95 "
              << (stat.mean_hd95 ? format_double(*stat.mean_hd95) : "n/a") << " assd "
              << (stat.mean_assd ? format_double(*stat.mean_assd) : "n/a") << "\n";
  }
  if (!f.out.empty()) {
    ensure_out_dir(f.out);
    nlohmann::json j;
    j["split"] = f.split;
    j["samples"] = ev.per_sample.size();
    j["mean_dsc"] = ev.mean_dsc;
    j["std_dsc"] = ev.std_dsc;
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, stat] : ev.per_class) {
      nlohmann::json c;
      c["mean_dsc"] = stat.mean_dsc;
      c["std_dsc"] = stat.std_dsc;
      if (stat.mean_hd95) c["mean_hd95"] = *stat.mean_hd95;
      if (stat.mean_assd) c["mean_assd"] = *stat.mean_assd;
      per_class[std::to_string(cls)] = std::move(c);
    }
    j["per_class"] = std::move(per_class);
    const std::string path = join_path(f.out, "metrics.json");
    std::ofstream outfile(path, std::ios::trunc);
    if (!outfile) throw DataError("cannot open " + path + " for writing");
    outfile << j.dump(2) << "\n";
    if (!outfile) throw DataError("failed while writing " + path);
    std::cout << "metrics: " << path << "\n";
  }
  return 0;
}

// ---- sweep-iter ----

struct SweepIterFlags {
  TrainFlags train;
  std::vector<int> iters;
  std::string out;
};

int run_sweep_iter(const SweepIterFlags& f) {
  const DatasetManifest manifest = load_manifest(manifest_path(f.train.data));
  const TrainConfig cfg = make_train_config(f.train, manifest);
  nlohmann::json echo = train_config_echo("sweep-iter", f.train, cfg);
  echo["iters"] = f.iters;
  echo["out"] = f.out;
  echo_config(std::move(echo));
  ensure_out_dir(f.out);
  const std::string csv = join_path(f.out, "sweep_iter.csv");
  const std::vector<IterSweepRow> rows = sweep_iter(cfg, manifest, f.iters, csv);
  for (const IterSweepRow& row : rows) {
    std::cout << "iter " << row.iterations << ": test_mean_dsc "
              << format_double(row.test_mean_dsc) << "\n";
  }
  std::cout << "sweep: " << csv << "\n";
  return 0;
}

// ---- sweep-params ----

struct SweepParamsFlags {
  TrainFlags train;
  std::string param;
  std::vector<double> values;
  std::string out;
};

int run_sweep_params(const SweepParamsFlags& f) {
  const DatasetManifest manifest = load_manifest(manifest_path(f.train.data));
  const TrainConfig cfg = make_train_config(f.train, manifest);
  nlohmann::json echo = train_config_echo("sweep-params", f.train, cfg);
  echo["param"] = f.param;
  echo["values"] = f.values;
  echo["out"] = f.out;
  echo_config(std::move(echo));
  ensure_out_dir(f.out);
  const std::string csv = join_path(f.out, "sweep_" + f.param + ".csv");
  const std::vector<ParamSweepRow> rows = sweep_params(cfg, manifest, f.param, f.values, csv);
  for (const ParamSweepRow& row : rows) {
    std::cout << f.param << " " << format_double(row.value) << ": test_mean_dsc "
              << format_double(row.test_mean_dsc) << "\n";
  }
  std::cout << "sweep: " << csv << "\n";
  return 0;
}

// ---- report ----

struct ReportFlags {
  std::string input;
  std::string out;
};

bool parse_cell(const std::string& cell, double* value) {
  if (cell.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end != cell.c_str() + cell.size()) return false;
  *value = v;
  return true;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

int run_report(const ReportFlags& f) {
  echo_config({{"command", "report"}, {"input", f.input}, {"out", f.out}});
  std::ifstream in(f.input);
  if (!in) throw DataError("cannot open sweep csv: " + f.input);
  std::string line;
  if (!std::getline(in, line)) throw DataError("sweep csv is empty: " + f.input);
  const std::vector<std::string> header = split_csv_line(line);
  if (header.empty()) throw DataError("sweep csv has no columns: " + f.input);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError("sweep csv row has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(header.size()));
    }
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw DataError("sweep csv has no data rows: " + f.input);

  // A column is plottable when every row parses as a number; the first such
  // column is the x axis.
  std::vector<bool> numeric(header.size(), true);
  for (std::size_t c = 0; c < header.size(); ++c) {
    for (const auto& row : rows) {
      double v;
      if (!parse_cell(row[c], &v)) {
        numeric[c] = false;
        break;
      }
    }
  }
  std::size_t x_col = header.size();
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (numeric[c]) {
      x_col = c;
      break;
    }
  }
  if (x_col == header.size()) throw DataError("sweep csv has no numeric columns");

  // Render the table with numbers rounded for reading.
  std::vector<std::vector<std::string>> cells(rows.size() + 1);
  cells[0] = header;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    cells[r + 1].resize(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
      double v;
      if (numeric[c] && parse_cell(rows[r][c], &v)) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        cells[r + 1][c] = buf;
      } else {
        cells[r + 1][c] = rows[r][c];
      }
    }
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      width[c] = std::max(width[c], row[c].size());
    }
  }
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::cout << (c ? "  " : "") << row[c]
                << std::string(width[c] - row[c].size(), ' ');
    }
    std::cout << "\n";
  }

  ensure_out_dir(f.out);
  const std::string plot_path = join_path(f.out, "plot.csv");
  std::ofstream plot(plot_path, std::ios::trunc);
  if (!plot) throw DataError("cannot open " + plot_path + " for writing");
  plot << "series,x,y\n";
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == x_col || !numeric[c]) continue;
    for (const auto& row : rows) {
      plot << header[c] << ',' << row[x_col] << ',' << row[c] << "\n";
    }
  }
  if (!plot) throw DataError("failed while writing " + plot_path);
  std::cout << "plot: " << plot_path << "\n";
  return 0;
}

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"contour-weighted 3-D segmentation toolkit", "contourseg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "print help for every subcommand");
  app.footer(
      "exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric error, 5 internal error\n"
      "CONTOURSEG_THREADS caps worker threads (default: hardware concurrency)");

  GenDataFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--preset", gen.preset, "dataset preset")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--volumes", gen.volumes, "total volumes")->capture_default_str();
  gen_cmd->add_option("--train", gen.train, "train split size")->capture_default_str();
  gen_cmd->add_option("--val", gen.val, "val split size")->capture_default_str();
  gen_cmd->add_option("--test", gen.test, "test split size")->capture_default_str();
  gen_cmd->add_option("--dim", gen.dim, "cubic volume edge length")->capture_default_str();

  ExtractFlags extract;
  CLI::App* extract_cmd =
      app.add_subcommand("extract-contour", "erode labels and write contour maps");
  extract_cmd->add_option("--volume", extract.volume, "input CSV1 volume")->required();
  extract_cmd->add_option("--k", extract.k, "structuring element size")->capture_default_str();
  extract_cmd->add_option("--iter", extract.iter, "erosion iterations")->capture_default_str();
  extract_cmd->add_option("--out", extract.out, "output directory")->required();

  EvalLossFlags eval_loss;
  CLI::App* eval_loss_cmd =
      app.add_subcommand("eval-loss", "evaluate a loss on seeded random logits");
  eval_loss_cmd->add_option("--volume", eval_loss.volume, "ground-truth CSV1 volume")
      ->required();
  eval_loss_cmd->add_option("--loss", eval_loss.loss, "loss: ce|cwce|dice|sdl|cwcd|gdl|combo")
      ->capture_default_str();
  eval_loss_cmd->add_option("--lambda", eval_loss.lambda, "contour weight multiplier")
      ->capture_default_str();
  eval_loss_cmd->add_option("--alpha", eval_loss.alpha, "compound mixing weight")
      ->capture_default_str();
  eval_loss_cmd->add_option("--beta", eval_loss.beta, "separable dice region weight")
      ->capture_default_str();
  eval_loss_cmd->add_option("--epsilon", eval_loss.epsilon, "numerical stabilizer")
      ->capture_default_str();
  eval_loss_cmd->add_option("--k", eval_loss.k, "erosion structuring element size")
      ->capture_default_str();
  eval_loss_cmd->add_option("--iter", eval_loss.iter, "erosion iterations")
      ->capture_default_str();
  eval_loss_cmd->add_option("--pred-seed", eval_loss.pred_seed, "logit seed")
      ->capture_default_str();

  GradcheckFlags gradcheck;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "compare analytic loss gradients to finite differences");
  gradcheck_cmd->add_option("--seed", gradcheck.seed, "input seed")->capture_default_str();
  gradcheck_cmd->add_option("--dim", gradcheck.dim, "cubic volume edge length")
      ->capture_default_str();
  gradcheck_cmd->add_option("--classes", gradcheck.classes, "class count")
      ->capture_default_str();
  gradcheck_cmd->add_option("--probes", gradcheck.probes, "probed logit count")
      ->capture_default_str();
  gradcheck_cmd->add_option("--tol", gradcheck.tol, "maximum relative error")
      ->capture_default_str();

  CheckTheoryFlags theory;
  CLI::App* theory_cmd =
      app.add_subcommand("check-theory", "probe the dice superadditivity bound");
  theory_cmd->add_option("--trials", theory.trials, "random quadruples")->capture_default_str();
  theory_cmd->add_option("--seed", theory.seed, "trial seed")->capture_default_str();

  TrainCmdFlags train_cmd_flags;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  add_train_flags(train_cmd, train_cmd_flags.train);
  train_cmd->add_option("--out", train_cmd_flags.out, "output directory")->required();

  EvaluateFlags evaluate;
  CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint on a split");
  evaluate_cmd->add_option("--checkpoint", evaluate.checkpoint, "checkpoint file")->required();
  evaluate_cmd->add_option("--data", evaluate.data, "dataset directory or manifest.json")
      ->required();
  evaluate_cmd->add_option("--split", evaluate.split, "split: train|val|test")
      ->capture_default_str();
  evaluate_cmd->add_option("--out", evaluate.out, "directory for metrics.json (optional)");

  SweepIterFlags sweep_iter_flags;
  CLI::App* sweep_iter_cmd =
      app.add_subcommand("sweep-iter", "retrain across erosion iteration counts");
  add_train_flags(sweep_iter_cmd, sweep_iter_flags.train);
  sweep_iter_cmd->add_option("--iters", sweep_iter_flags.iters, "iteration counts")
      ->required()
      ->delimiter(',');
  sweep_iter_cmd->add_option("--out", sweep_iter_flags.out, "output directory")->required();

  SweepParamsFlags sweep_params_flags;
  CLI::App* sweep_params_cmd =
      app.add_subcommand("sweep-params", "retrain across one loss parameter");
  add_train_flags(sweep_params_cmd, sweep_params_flags.train);
  sweep_params_cmd
      ->add_option("--param", sweep_params_flags.param, "parameter: alpha|beta|lambda")
      ->required();
  sweep_params_cmd->add_option("--values", sweep_params_flags.values, "parameter values")
      ->required()
      ->delimiter(',');
  sweep_params_cmd->add_option("--out", sweep_params_flags.out, "output directory")
      ->required();

  ReportFlags report;
  CLI::App* report_cmd =
      app.add_subcommand("report", "render a sweep csv into a table and plot data");
  report_cmd->add_option("--input", report.input, "sweep csv")->required();
  report_cmd->add_option("--out", report.out, "output directory")->required();

  int rc = 0;
  gen_cmd->callback([&] { rc = run_gen_data(gen); });
  extract_cmd->callback([&] { rc = run_extract_contour(extract); });
  eval_loss_cmd->callback([&] { rc = run_eval_loss(eval_loss); });
  gradcheck_cmd->callback([&] { rc = run_gradcheck(gradcheck); });
  theory_cmd->callback([&] { rc = run_check_theory(theory); });
  train_cmd->callback([&] { rc = run_train(train_cmd_flags); });
  evaluate_cmd->callback([&] { rc = run_evaluate(evaluate); });
  sweep_iter_cmd->callback([&] { rc = run_sweep_iter(sweep_iter_flags); });
  sweep_params_cmd->callback([&] { rc = run_sweep_params(sweep_params_flags); });
  report_cmd->callback([&] { rc = run_report(report); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }
  return rc;
}

void print_error(const char* type, const std::string& message) {
  nlohmann::json j;
  j["error"] = type;
  j["message"] = message;
  std::cerr << j.dump() << "\n";
}

}  // namespace

int cli_run(int argc, const char* const* argv) {
  try {
    return dispatch(argc, argv);
  } catch (const UsageError& e) {
    print_error("usage", e.what());
    return 2;
  } catch (const DataError& e) {
    print_error("data", e.what());
    return 3;
  } catch (const NumericError& e) {
    print_error("numeric", e.what());
    return 4;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 5;
  }
}

}  // namespace contourseg
