#ifndef LYMPHDET_TRAINER_H_
#define LYMPHDET_TRAINER_H_

#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "lymphdet/augment.h"
#include "lymphdet/dataset.h"
#include "lymphdet/model.h"
#include "lymphdet/network.h"

namespace lymphdet {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

inline constexpr double kLossEpsilon = 1e-12;
inline constexpr double kDefaultL2 = 1e-5;

// Weighted cross-entropy normalized by the total weight:
//   sum_p w_p * -log(prob_p[class(label_p)]) / max(sum_p w_p, eps)
// Label 2 maps to class 1 (lymphocyte), label 1 to class 0. Label-0 pixels
// never contribute. When `grad_logits` is given it receives d(loss)/d(logits)
// for the softmax that produced `probs`.
template <typename T>
T weighted_cross_entropy(const Tensor<T>& probs, const LabelMap& labels,
                         const WeightMap& weights, Tensor<T>* grad_logits = nullptr);

// lambda * sum of squared kernel entries (biases excluded).
template <typename T>
T l2_penalty(const ParamSet<T>& params, double lambda);

// grads += 2 * lambda * kernels.
template <typename T>
void add_l2_gradient(const ParamSet<T>& params, double lambda, ParamSet<T>& grads);

template <typename T>
struct PatchLoss {
  T data{};
  T regularization{};
  T total() const { return data + regularization; }
};

// Data term + L2 for one patch, and its exact gradient with respect to every
// parameter (written into `grads`, which is overwritten). Train mode uses
// `rng` for dropout.
template <typename T>
PatchLoss<T> loss_and_gradient(const FcnNetwork<T>& net, const ParamSet<T>& params,
                    const Tensor<T>& input, const LabelMap& labels, const WeightMap& weights,
                    Mode mode, std::mt19937_64* rng, double l2, ParamSet<T>& grads);

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct ScheduleRow {
  int first_epoch = 1;
  int last_epoch = 1;
  double learning_rate = 0.0;
  double momentum = 0.0;
};

// Piecewise-constant learning rate / momentum by epoch. Epochs past the last
// row hold the last row.
class Schedule {
 public:
  explicit Schedule(std::vector<ScheduleRow> rows);

  // 1-50: (1e-4, 0.9), 51-120: (1e-5, 0.99), 121-200: (1e-6, 0.999).
  static Schedule standard();
  static Schedule constant(double learning_rate, double momentum);

  ScheduleRow lookup(int epoch) const;
  const std::vector<ScheduleRow>& rows() const { return rows_; }

 private:
  std::vector<ScheduleRow> rows_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // mean data term over the epoch's iterations
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double learning_rate = 0.0;
  double momentum = 0.0;
};

struct TrainState {
  ParamSet<float> params;
  ParamSet<float> velocity;
  int epoch = 0;  // completed epochs
  long iteration = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_since_improvement = 0;
  std::mt19937_64 rng;
  size_t source_toggle = 0;
  std::vector<EpochRecord> history;
};

TrainState make_train_state(ParamSet<float> params, uint64_t seed);

struct TrainOptions {
  int epochs = 200;
  int train_epoch_size = 175;
  int val_epoch_size = 25;
  int patience = 20;
  double l2 = kDefaultL2;
  Schedule schedule = Schedule::standard();
  AugmentOptions augment;
  uint64_t validation_seed = 0x5eed;
  // Evaluate the incoming parameters on the validation set before training,
  // so early stopping can return them unchanged.
  bool baseline_validation = false;
  // When set: loss_log.jsonl, epoch_NNNN/ every `checkpoint_every` epochs,
  // and best/ whenever validation improves.
  std::filesystem::path output_dir;
  int checkpoint_every = 10;
  Model checkpoint_template;  // config and metadata for written checkpoints
};

// Mean data-term loss over `count` patches drawn alternately from the
// sources' validation pools with a fixed seed; eval mode.
double validation_loss(const FcnNetwork<float>& net, const ParamSet<float>& params,
                       const std::vector<SourceData>& sources, int count,
                       const AugmentOptions& augment, uint64_t seed);

// SGD with classical momentum, one patch per iteration, sources alternating
// every iteration. Returns the state holding the best-validation parameters
// (the last ones when there is no validation data).
TrainState train(const FcnNetwork<float>& net, TrainState state,
                 const std::vector<SourceData>& sources, const TrainOptions& options);

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct FineTuneJob {
  std::vector<FovPtr> corrections;  // F
  std::vector<FovPtr> prior_train;  // A
  std::vector<FovPtr> prior_val;    // B
};

// Draws disjoint A and B of size |F| from the prior training data. When
// there is not enough prior data both shrink to floor(|prior| / 2).
FineTuneJob assemble_finetune_job(std::vector<FovPtr> corrections,
                                  const std::vector<FovPtr>& prior, uint64_t seed);

struct FineTuneOptions {
  double learning_rate = 1e-6;
  double momentum = 0.999;
  int max_epochs = 20;
  int patience = 3;
  int train_epoch_size = 175;
  int val_epoch_size = 25;
  int epochs_without_validation = 5;
  double l2 = kDefaultL2;
  AugmentOptions augment;
  uint64_t seed = 1;
};

// Training pool F + A, validation pool B.
SourceData finetune_pool(const FineTuneJob& job);

TrainState finetune(const FcnNetwork<float>& net, const ParamSet<float>& params,
                    const FineTuneJob& job, const FineTuneOptions& options);

}  // namespace lymphdet

#endif  // LYMPHDET_TRAINER_H_
