#include "contourseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include <json.hpp>

namespace contourseg {

namespace {

std::vector<double> class_dsc_vector(const EvalSummary& summary) {
  std::vector<double> out;
  out.reserve(summary.per_class.size());
  for (const auto& [cls, stat] : summary.per_class) out.push_back(stat.mean_dsc);
  return out;
}

double mean_of(const std::vector<double>& values) {
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

double std_of(const std::vector<double>& values, double mean) {
  double acc = 0.0;
  for (double v : values) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(values.size()));
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history,
                       int fg_classes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open training log for writing: " + path);
  out << "epoch,lr,train_loss,val_mean_dsc";
  for (int c = 1; c <= fg_classes; ++c) out << ",val_dsc_class_" << c;
  out << "\n";
  for (const EpochRecord& rec : history) {
    out << rec.epoch << ',' << format_double(rec.lr) << ',' << format_double(rec.train_loss)
        << ',' << format_double(rec.val_mean_dsc);
    for (double v : rec.val_class_dsc) out << ',' << format_double(v);
    out << "\n";
  }
  if (!out) throw DataError("failed while writing training log: " + path);
}

TrainConfig without_artifacts(const TrainConfig& base) {
  TrainConfig cfg = base;
  cfg.checkpoint_path.clear();
  cfg.log_csv_path.clear();
  cfg.summary_json_path.clear();
  return cfg;
}

void write_summary_json(const std::string& path, const TrainRun& run) {
  nlohmann::json j;
  // Artifact locations are invocation plumbing, not experiment identity;
  // clearing them keeps summaries byte-identical across output directories.
  j["config"] = nlohmann::json::parse(train_config_json(without_artifacts(run.config)));
  j["best_epoch"] = run.best_epoch;
  j["best_val_dsc"] = run.best_val_dsc;
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochRecord& rec : run.history) {
    epochs.push_back({{"epoch", rec.epoch},
                      {"lr", rec.lr},
                      {"train_loss", rec.train_loss},
                      {"val_mean_dsc", rec.val_mean_dsc},
                      {"val_class_dsc", rec.val_class_dsc}});
  }
  j["epochs"] = std::move(epochs);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open run summary for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("failed while writing run summary: " + path);
}

// Loads every volume of the manifest in entry order (all splits).
std::vector<Sample> load_everything(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  for (const std::string& split : {"train", "val", "test"}) {
    std::vector<Sample> part = load_split(manifest, split);
    for (Sample& s : part) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::ce: return "ce";
    case LossKind::cwce: return "cwce";
    case LossKind::dice: return "dice";
    case LossKind::sdl: return "sdl";
    case LossKind::cwcd: return "cwcd";
    case LossKind::gdl: return "gdl";
    case LossKind::combo: return "combo";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "ce") return LossKind::ce;
  if (name == "cwce") return LossKind::cwce;
  if (name == "dice") return LossKind::dice;
  if (name == "sdl") return LossKind::sdl;
  if (name == "cwcd") return LossKind::cwcd;
  if (name == "gdl") return LossKind::gdl;
  if (name == "combo") return LossKind::combo;
  throw UsageError("unknown loss kind: " + name);
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::halve_at_epochs: return "halve";
    case ScheduleKind::linear_decay: return "linear";
  }
  return "?";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "halve") return ScheduleKind::halve_at_epochs;
  if (name == "linear") return ScheduleKind::linear_decay;
  throw UsageError("unknown schedule kind: " + name);
}

Tensor compute_loss(LossKind kind, const Prediction& pred, const LabelVolume& gt,
                    const LossConfig& cfg) {
  switch (kind) {
    case LossKind::ce: return cross_entropy(pred, gt, cfg);
    case LossKind::dice: return dice_loss(pred, gt, cfg);
    case LossKind::gdl: return generalized_dice(pred, gt, cfg);
    case LossKind::combo: return combo_loss(pred, gt, cfg);
    case LossKind::cwce: {
      const ContourMaps maps = extract_contours(gt, cfg.se(), cfg.erosion_iterations);
      return contour_weighted_ce(pred, gt, maps, cfg);
    }
    case LossKind::sdl: {
      const ContourMaps maps = extract_contours(gt, cfg.se(), cfg.erosion_iterations);
      return separable_dice(pred, gt, maps, cfg);
    }
    case LossKind::cwcd: {
      const ContourMaps maps = extract_contours(gt, cfg.se(), cfg.erosion_iterations);
      return compound_cwcd(pred, gt, maps, cfg);
    }
  }
  throw UsageError("unknown loss kind");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw UsageError("epochs must be at least 1");
  if (batch_size < 1) throw UsageError("batch size must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be positive");
  loss_config.validate();
  network.validate();
}

std::string train_config_json(const TrainConfig& config) {
  nlohmann::json j;
  j["loss"] = to_string(config.loss);
  j["lambda"] = config.loss_config.lambda;
  j["alpha"] = config.loss_config.alpha;
  j["beta"] = config.loss_config.beta;
  j["epsilon"] = config.loss_config.epsilon;
  j["erosion_k"] = config.loss_config.erosion_k;
  j["erosion_iterations"] = config.loss_config.erosion_iterations;
  j["network"] = nlohmann::json::parse(network_config_json(config.network));
  j["epochs"] = config.epochs;
  j["batch_size"] = config.batch_size;
  j["lr"] = config.lr;
  j["schedule"] = to_string(config.schedule);
  j["augment"] = config.augment;
  j["seed"] = config.seed;
  j["checkpoint_path"] = config.checkpoint_path;
  j["log_csv_path"] = config.log_csv_path;
  j["summary_json_path"] = config.summary_json_path;
  return j.dump(2);
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 1 || epoch > config.epochs) {
    throw UsageError("epoch " + std::to_string(epoch) + " outside 1.." +
                     std::to_string(config.epochs));
  }
  switch (config.schedule) {
    case ScheduleKind::halve_at_epochs: {
      double lr = config.lr;
      if (epoch >= 20) lr *= 0.5;
      if (epoch >= 40) lr *= 0.5;
      return lr;
    }
    case ScheduleKind::linear_decay: {
      if (epoch <= 20 || config.epochs <= 20) return config.lr;
      const double t = static_cast<double>(epoch - 20) / static_cast<double>(config.epochs - 20);
      return config.lr + t * (1e-6 - config.lr);
    }
  }
  throw UsageError("unknown schedule kind");
}

AdamMoments AdamMoments::like(const ModelParams& params) {
  AdamMoments moments;
  moments.m.reserve(params.items.size());
  moments.v.reserve(params.items.size());
  for (const auto& [name, tensor] : params.items) {
    moments.m.emplace_back(tensor.numel(), 0.0);
    moments.v.emplace_back(tensor.numel(), 0.0);
  }
  return moments;
}

void adam_step(ModelParams& params, AdamMoments& moments, double lr, int t, double beta1,
               double beta2, double eps) {
  if (t < 1) throw UsageError("adam step count must be at least 1");
  if (moments.m.size() != params.items.size() || moments.v.size() != params.items.size()) {
    throw ShapeError("adam moments do not match the parameter set");
  }
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    Tensor& tensor = params.items[i].second;
    auto theta = tensor.mutable_data();
    std::vector<double>& m = moments.m[i];
    std::vector<double>& v = moments.v[i];
    if (m.size() != theta.size() || v.size() != theta.size()) {
      throw ShapeError("adam moments for " + params.items[i].first +
                       " do not match the tensor");
    }
    const bool has = tensor.has_grad();
    const auto g = tensor.grad();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      if (!std::isfinite(gk)) {
        throw NumericError("non-finite gradient in " + params.items[i].first);
      }
      m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
      v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
      theta[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
    }
  }
}

ModelParams clone_params(const ModelParams& params) {
  ModelParams out;
  for (const auto& [name, tensor] : params.items) {
    const auto data = tensor.data();
    out.add(name, Tensor::from_data(tensor.shape(), std::vector<double>(data.begin(), data.end()),
                                    tensor.requires_grad()));
  }
  return out;
}

TrainRun train(const TrainConfig& config, const DatasetManifest& manifest) {
  config.validate();
  if (config.network.num_classes != manifest.num_classes) {
    throw UsageError("network expects " + std::to_string(config.network.num_classes) +
                     " classes but the dataset has " + std::to_string(manifest.num_classes));
  }
  const std::vector<Sample> train_samples = load_split(manifest, "train");
  const std::vector<Sample> val_samples = load_split(manifest, "val");
  if (train_samples.empty()) throw UsageError("train split is empty");
  if (val_samples.empty()) throw UsageError("val split is empty");

  PdaNet net(config.network, derive_seed(config.seed, 0));
  AdamMoments moments = AdamMoments::like(net.params());
  TrainRun run;
  run.config = config;
  run.best_val_dsc = -1.0;

  int global_step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    Rng epoch_rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(epoch_rng.uniform_int(i));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t ofs = 0; ofs < order.size();
         ofs += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t batch_n =
          std::min<std::size_t>(static_cast<std::size_t>(config.batch_size),
                                order.size() - ofs);
      net.params().zero_grad();
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < batch_n; ++b) {
        const Sample& source = train_samples[order[ofs + b]];
        Sample augmented;
        const Sample* sample = &source;
        if (config.augment) {
          augmented = augment(source, epoch_rng);
          sample = &augmented;
        }
        const Dims3 dims = sample->labels.dims;
        GradTape tape;
        TapeScope scope(tape);
        const Tensor x = reshape(sample->intensity, {1, 1, dims.d, dims.h, dims.w});
        const Tensor logits = net.forward(x);
        const Tensor loss = compute_loss(config.loss, {logits}, sample->labels, config.loss_config);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw NumericError("loss diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(steps + 1));
        }
        batch_loss += value;
        tape.backward(mul_scalar(loss, 1.0 / static_cast<double>(batch_n)));
      }
      ++global_step;
      adam_step(net.params(), moments, lr, global_step);
      loss_sum += batch_loss / static_cast<double>(batch_n);
      ++steps;
    }

    const EvalSummary val = evaluate_samples(net, val_samples);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(steps);
    rec.val_mean_dsc = val.mean_dsc;
    rec.val_class_dsc = class_dsc_vector(val);
    run.history.push_back(std::move(rec));

    if (val.mean_dsc > run.best_val_dsc) {
      run.best_val_dsc = val.mean_dsc;
      run.best_epoch = epoch;
      run.best_params = clone_params(net.params());
    }
  }

  run.params = clone_params(net.params());
  run.moments = std::move(moments);
  if (!config.checkpoint_path.empty()) {
    save_checkpoint(config.checkpoint_path, config.network, run.best_params);
  }
  if (!config.log_csv_path.empty()) {
    write_history_csv(config.log_csv_path, run.history, manifest.num_classes - 1);
  }
  if (!config.summary_json_path.empty()) {
    write_summary_json(config.summary_json_path, run);
  }
  return run;
}

LabelVolume argmax_labels(const Tensor& logits, int num_classes) {
  if (!logits.defined() || logits.ndim() != 5 || logits.extent(0) != 1 ||
      logits.extent(1) != static_cast<std::size_t>(num_classes)) {
    throw ShapeError("argmax_labels: logits must be [1," + std::to_string(num_classes) +
                     ",D,H,W]");
  }
  const Dims3 dims{logits.extent(2), logits.extent(3), logits.extent(4)};
  LabelVolume out = LabelVolume::zeros(dims, num_classes);
  const auto v = logits.data();
  const std::size_t spatial = dims.numel();
  for (std::size_t i = 0; i < spatial; ++i) {
    int best = 0;
    double best_value = v[i];
    for (int c = 1; c < num_classes; ++c) {
      const double value = v[static_cast<std::size_t>(c) * spatial + i];
      if (value > best_value) {
        best_value = value;
        best = c;
      }
    }
    out.labels[i] = static_cast<std::uint16_t>(best);
  }
  return out;
}

LabelVolume predict_labels(const PdaNet& net, const Sample& sample) {
  const Dims3 dims = sample.labels.dims;
  const Tensor x = reshape(sample.intensity, {1, 1, dims.d, dims.h, dims.w});
  return argmax_labels(net.forward(x), net.config().num_classes);
}

EvalSummary summarize_reports(std::vector<MetricReport> reports) {
  if (reports.empty()) throw UsageError("cannot summarize zero metric reports");
  EvalSummary summary;
  std::vector<double> means;
  means.reserve(reports.size());
  for (const MetricReport& r : reports) means.push_back(r.mean_dsc);
  summary.mean_dsc = mean_of(means);
  summary.std_dsc = std_of(means, summary.mean_dsc);
  for (const auto& [cls, first] : reports.front().per_class) {
    std::vector<double> dscs;
    std::vector<double> hd95s, assds;
    for (const MetricReport& r : reports) {
      const auto it = r.per_class.find(cls);
      if (it == r.per_class.end()) {
        throw ShapeError("metric reports disagree on class " + std::to_string(cls));
      }
      dscs.push_back(it->second.dsc);
      if (it->second.hd95) hd95s.push_back(*it->second.hd95);
      if (it->second.assd) assds.push_back(*it->second.assd);
    }
    ClassStat stat;
    stat.mean_dsc = mean_of(dscs);
    stat.std_dsc = std_of(dscs, stat.mean_dsc);
    if (!hd95s.empty()) stat.mean_hd95 = mean_of(hd95s);
    if (!assds.empty()) stat.mean_assd = mean_of(assds);
    summary.per_class.emplace(cls, std::move(stat));
  }
  summary.per_sample = std::move(reports);
  return summary;
}

EvalSummary evaluate_samples(const PdaNet& net, const std::vector<Sample>& samples) {
  std::vector<MetricReport> reports;
  reports.reserve(samples.size());
  for (const Sample& sample : samples) {
    reports.push_back(evaluate_metrics(predict_labels(net, sample), sample.labels));
  }
  return summarize_reports(std::move(reports));
}

EvalSummary evaluate_checkpoint(const std::string& checkpoint_path,
                                const DatasetManifest& manifest, const std::string& split) {
  PdaNet net = load_pdanet(checkpoint_path);
  if (net.config().num_classes != manifest.num_classes) {
    throw DataError("checkpoint expects " + std::to_string(net.config().num_classes) +
                    " classes but the dataset has " + std::to_string(manifest.num_classes));
  }
  const std::vector<Sample> samples = load_split(manifest, split);
  if (samples.empty()) throw UsageError("split \"" + split + "\" is empty");
  return evaluate_samples(net, samples);
}

std::vector<IterSweepRow> sweep_iter(const TrainConfig& base, const DatasetManifest& manifest,
                                     const std::vector<int>& iterations,
                                     const std::string& csv_path) {
  if (iterations.empty()) throw UsageError("no iteration counts to sweep");
  const int fg = manifest.num_classes - 1;
  const std::vector<Sample> everything = load_everything(manifest);
  const std::vector<Sample> test_samples = load_split(manifest, "test");
  if (test_samples.empty()) throw UsageError("test split is empty");

  std::vector<IterSweepRow> rows;
  for (int iter : iterations) {
    IterSweepRow row;
    row.iterations = iter;
    row.class_voxels.assign(static_cast<std::size_t>(fg), 0);
    row.contour_voxels.assign(static_cast<std::size_t>(fg), 0);
    TrainConfig cfg = without_artifacts(base);
    cfg.loss_config.erosion_iterations = iter;
    cfg.loss_config.validate();
    for (const Sample& sample : everything) {
      const ContourMaps maps =
          extract_contours(sample.labels, cfg.loss_config.se(), iter);
      for (int cls = 1; cls <= fg; ++cls) {
        row.class_voxels[static_cast<std::size_t>(cls - 1)] += sample.labels.class_count(cls);
        row.contour_voxels[static_cast<std::size_t>(cls - 1)] +=
            maps.contour[static_cast<std::size_t>(cls)].count();
      }
    }
    const TrainRun run = train(cfg, manifest);
    const PdaNet net(cfg.network, clone_params(run.best_params));
    const EvalSummary ev = evaluate_samples(net, test_samples);
    row.test_mean_dsc = ev.mean_dsc;
    row.test_class_dsc = class_dsc_vector(ev);
    rows.push_back(std::move(row));
  }

  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw DataError("cannot open sweep output for writing: " + csv_path);
    out << "iterations";
    for (int c = 1; c <= fg; ++c) out << ",class_voxels_" << c;
    for (int c = 1; c <= fg; ++c) out << ",contour_voxels_" << c;
    for (int c = 1; c <= fg; ++c) out << ",contour_fraction_" << c;
    out << ",test_mean_dsc";
    for (int c = 1; c <= fg; ++c) out << ",test_dsc_class_" << c;
    out << "\n";
    for (const IterSweepRow& row : rows) {
      out << row.iterations;
      for (std::size_t n : row.class_voxels) out << ',' << n;
      for (std::size_t n : row.contour_voxels) out << ',' << n;
      for (std::size_t c = 0; c < row.class_voxels.size(); ++c) {
        const double frac = row.class_voxels[c] == 0
                                ? 0.0
                                : static_cast<double>(row.contour_voxels[c]) /
                                      static_cast<double>(row.class_voxels[c]);
        out << ',' << format_double(frac);
      }
      out << ',' << format_double(row.test_mean_dsc);
      for (double v : row.test_class_dsc) out << ',' << format_double(v);
      out << "\n";
    }
    if (!out) throw DataError("failed while writing sweep output: " + csv_path);
  }
  return rows;
}

std::vector<ParamSweepRow> sweep_params(const TrainConfig& base, const DatasetManifest& manifest,
                                        const std::string& parameter,
                                        const std::vector<double>& values,
                                        const std::string& csv_path) {
  if (values.empty()) throw UsageError("no parameter values to sweep");
  if (parameter != "alpha" && parameter != "beta" && parameter != "lambda") {
    throw UsageError("unknown sweep parameter: " + parameter);
  }
  const std::vector<Sample> test_samples = load_split(manifest, "test");
  if (test_samples.empty()) throw UsageError("test split is empty");

  std::vector<ParamSweepRow> rows;
  for (double value : values) {
    TrainConfig cfg = without_artifacts(base);
    if (parameter == "alpha") {
      cfg.loss_config.alpha = value;
    } else if (parameter == "beta") {
      cfg.loss_config.beta = value;
    } else {
      cfg.loss_config.lambda = value;
    }
    const TrainRun run = train(cfg, manifest);
    const PdaNet net(cfg.network, clone_params(run.best_params));
    const EvalSummary ev = evaluate_samples(net, test_samples);
    rows.push_back({value, ev.mean_dsc, class_dsc_vector(ev)});
  }

  if (!csv_path.empty()) {
    const int fg = manifest.num_classes - 1;
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw DataError("cannot open sweep output for writing: " + csv_path);
    out << "parameter,value,test_mean_dsc";
    for (int c = 1; c <= fg; ++c) out << ",test_dsc_class_" << c;
    out << "\n";
    for (const ParamSweepRow& row : rows) {
      out << parameter << ',' << format_double(row.value) << ','
          << format_double(row.test_mean_dsc);
      for (double v : row.test_class_dsc) out << ',' << format_double(v);
      out << "\n";
    }
    if (!out) throw DataError("failed while writing sweep output: " + csv_path);
  }
  return rows;
}

}  // namespace contourseg
