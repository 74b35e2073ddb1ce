#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "contourseg/data.hpp"
#include "contourseg/dataset_io.hpp"
#include "contourseg/losses.hpp"
#include "contourseg/metrics.hpp"
#include "contourseg/network.hpp"

namespace contourseg {

enum class LossKind { ce, cwce, dice, sdl, cwcd, gdl, combo };
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

enum class ScheduleKind { halve_at_epochs, linear_decay };
std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

// Dispatches to the loss selected by kind, deriving contour maps from the
// ground truth where the loss needs them.
Tensor compute_loss(LossKind kind, const Prediction& pred, const LabelVolume& gt,
                    const LossConfig& cfg);

struct TrainConfig {
  LossKind loss = LossKind::cwcd;
  LossConfig loss_config;
  NetworkConfig network;
  int epochs = 30;
  int batch_size = 2;
  double lr = 3e-4;
  ScheduleKind schedule = ScheduleKind::halve_at_epochs;
  bool augment = true;  // training-split augmentation; validation never augments
  std::uint64_t seed = 0;
  std::string checkpoint_path;    // empty: checkpoint not written
  std::string log_csv_path;       // empty: no per-epoch CSV
  std::string summary_json_path;  // empty: no JSON run summary

  void validate() const;  // throws UsageError
};

std::string train_config_json(const TrainConfig& config);

// Closed-form learning rate for the 1-indexed epoch. halve_at_epochs keeps
// the base rate through epoch 19, halves it at 20 and again at 40;
// linear_decay keeps the base rate through epoch 20, then falls linearly to
// 1e-6 at the final epoch.
double lr_at_epoch(const TrainConfig& config, int epoch);

// First/second moment accumulators matching a parameter set element for
// element, in registration order.
struct AdamMoments {
  std::vector<std::vector<double>> m, v;

  static AdamMoments like(const ModelParams& params);
};

// Standard bias-corrected Adam update over every parameter tensor, reading
// each tensor's accumulated gradient (a tensor without a gradient counts as
// zero). t is the 1-indexed step count shared by the bias corrections.
// Throws NumericError on a non-finite gradient.
void adam_step(ModelParams& params, AdamMoments& moments, double lr, int t,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Deep copy: the clone shares no storage with the source, so later updates
// leave snapshots untouched.
ModelParams clone_params(const ModelParams& params);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over optimizer steps of the step's mean sample loss
  double val_mean_dsc = 0.0;
  std::vector<double> val_class_dsc;  // foreground classes 1..M-1
};

struct TrainRun {
  TrainConfig config;
  ModelParams params;       // final-epoch parameters
  ModelParams best_params;  // parameters behind the best validation DSC
  AdamMoments moments;
  std::vector<EpochRecord> history;
  double best_val_dsc = 0.0;
  int best_epoch = 0;
};

// Trains on the manifest's train split (seeded shuffling + augmentation),
// scores mean DSC on the val split after every epoch, and keeps the
// parameters of the best epoch — ties keep the earlier epoch. Writes the
// checkpoint/CSV/JSON artifacts named in the config. Fully deterministic
// for a fixed (config, dataset). Throws NumericError when the loss stops
// being finite.
TrainRun train(const TrainConfig& config, const DatasetManifest& manifest);

struct ClassStat {
  double mean_dsc = 0.0;
  double std_dsc = 0.0;                // population std over samples
  std::optional<double> mean_hd95;     // over samples where defined
  std::optional<double> mean_assd;
};

struct EvalSummary {
  std::vector<MetricReport> per_sample;
  double mean_dsc = 0.0;
  double std_dsc = 0.0;
  std::map<int, ClassStat> per_class;
};

// Voxelwise argmax over the class axis of [1,M,D,H,W] logits; ties pick the
// lower class index.
LabelVolume argmax_labels(const Tensor& logits, int num_classes);
LabelVolume predict_labels(const PdaNet& net, const Sample& sample);

// Aggregates per-sample metric reports into means and stds.
EvalSummary summarize_reports(std::vector<MetricReport> reports);
EvalSummary evaluate_samples(const PdaNet& net, const std::vector<Sample>& samples);
EvalSummary evaluate_checkpoint(const std::string& checkpoint_path,
                                const DatasetManifest& manifest, const std::string& split);

// Contour statistics plus a seeded retrain/evaluate cycle per erosion
// iteration count. Voxel counts are exact totals over every volume in the
// manifest; DSC columns come from retraining with that iteration count and
// scoring the test split.
struct IterSweepRow {
  int iterations = 0;
  std::vector<std::size_t> class_voxels;    // foreground classes 1..M-1
  std::vector<std::size_t> contour_voxels;  // same classes
  double test_mean_dsc = 0.0;
  std::vector<double> test_class_dsc;
};

std::vector<IterSweepRow> sweep_iter(const TrainConfig& base, const DatasetManifest& manifest,
                                     const std::vector<int>& iterations,
                                     const std::string& csv_path);

// Retrains with one compound-loss parameter ("alpha", "beta", or "lambda")
// swept over the given values, scoring the test split each time.
struct ParamSweepRow {
  double value = 0.0;
  double test_mean_dsc = 0.0;
  std::vector<double> test_class_dsc;
};

std::vector<ParamSweepRow> sweep_params(const TrainConfig& base, const DatasetManifest& manifest,
                                        const std::string& parameter,
                                        const std::vector<double>& values,
                                        const std::string& csv_path);

}  // namespace contourseg
