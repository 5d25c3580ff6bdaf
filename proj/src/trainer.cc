#include "lymphdet/trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace lymphdet {

template <typename T>
T weighted_cross_entropy(const Tensor<T>& probs, const LabelMap& labels,
                         const WeightMap& weights, Tensor<T>* grad_logits) {
  if (probs.channels != 2 || probs.height != labels.height() ||
      probs.width != labels.width() || !labels.same_extent(weights)) {
    throw InvalidInput("probabilities, labels and weights must be aligned");
  }
  const size_t plane = probs.plane();
  double total_weight = 0.0;
  double loss = 0.0;
  for (size_t i = 0; i < plane; ++i) {
    const uint8_t label = labels.values()[i];
    const double w = weights.values()[i];
    if (label == kLabelIgnore || w <= 0.0) continue;
    const int cls = label == kLabelPositive ? 1 : 0;
    const double p = std::max(static_cast<double>(probs.values[cls * plane + i]),
                              std::numeric_limits<double>::min());
    loss -= w * std::log(p);
    total_weight += w;
  }
  const double norm = std::max(total_weight, kLossEpsilon);
  if (grad_logits) {
    *grad_logits = Tensor<T>(2, probs.height, probs.width);
    for (size_t i = 0; i < plane; ++i) {
      const uint8_t label = labels.values()[i];
      const double w = weights.values()[i];
      if (label == kLabelIgnore || w <= 0.0) continue;
      const int cls = label == kLabelPositive ? 1 : 0;
      const T scale = static_cast<T>(w / norm);
      for (int k = 0; k < 2; ++k) {
        grad_logits->values[k * plane + i] =
            scale * (probs.values[k * plane + i] - (k == cls ? T(1) : T(0)));
      }
    }
  }
  return static_cast<T>(loss / norm);
}

template <typename T>
T l2_penalty(const ParamSet<T>& params, double lambda) {
  double sum = 0.0;
  for (const auto& t : params.tensors) {
    if (!t.is_kernel) continue;
    for (T v : t.values) sum += static_cast<double>(v) * v;
  }
  return static_cast<T>(lambda * sum);
}

template <typename T>
void add_l2_gradient(const ParamSet<T>& params, double lambda, ParamSet<T>& grads) {
  for (size_t k = 0; k < params.tensors.size(); ++k) {
    if (!params.tensors[k].is_kernel) continue;
    const auto& w = params.tensors[k].values;
    auto& g = grads.tensors[k].values;
    for (size_t i = 0; i < w.size(); ++i) g[i] += static_cast<T>(2.0 * lambda) * w[i];
  }
}

template <typename T>
PatchLoss<T> loss_and_gradient(const FcnNetwork<T>& net, const ParamSet<T>& params,
                               const Tensor<T>& input, const LabelMap& labels,
                               const WeightMap& weights, Mode mode, std::mt19937_64* rng,
                               double l2, ParamSet<T>& grads) {
  if (grads.tensors.size() != params.tensors.size()) grads = params.zeros_like();
  for (auto& t : grads.tensors) std::fill(t.values.begin(), t.values.end(), T{});
  ForwardTrace<T> trace;
  const Tensor<T> probs = net.forward(params, input, mode, rng, &trace);
  Tensor<T> grad_logits;
  PatchLoss<T> loss;
  loss.data = weighted_cross_entropy(probs, labels, weights, &grad_logits);
  loss.regularization = l2_penalty(params, l2);
  net.backward(params, trace, grad_logits, grads);
  add_l2_gradient(params, l2, grads);
  return loss;
}

template float weighted_cross_entropy(const Tensor<float>&, const LabelMap&,
                                      const WeightMap&, Tensor<float>*);
template double weighted_cross_entropy(const Tensor<double>&, const LabelMap&,
                                       const WeightMap&, Tensor<double>*);
template float l2_penalty(const ParamSet<float>&, double);
template double l2_penalty(const ParamSet<double>&, double);
template void add_l2_gradient(const ParamSet<float>&, double, ParamSet<float>&);
template void add_l2_gradient(const ParamSet<double>&, double, ParamSet<double>&);
template PatchLoss<float> loss_and_gradient(const FcnNetwork<float>&, const ParamSet<float>&,
                                            const Tensor<float>&, const LabelMap&,
                                            const WeightMap&, Mode, std::mt19937_64*,
                                            double, ParamSet<float>&);
template PatchLoss<double> loss_and_gradient(const FcnNetwork<double>&,
                                             const ParamSet<double>&, const Tensor<double>&,
                                             const LabelMap&, const WeightMap&, Mode,
                                             std::mt19937_64*, double, ParamSet<double>&);

Schedule::Schedule(std::vector<ScheduleRow> rows) : rows_(std::move(rows)) {
  if (rows_.empty()) throw InvalidInput("schedule needs at least one row");
  int expected = 1;
  for (const auto& row : rows_) {
    if (row.first_epoch != expected || row.last_epoch < row.first_epoch) {
      throw InvalidInput("schedule rows must be contiguous from epoch 1");
    }
    if (!(row.learning_rate > 0.0)) throw InvalidInput("learning rate must be positive");
    if (!(row.momentum >= 0.0 && row.momentum < 1.0)) {
      throw InvalidInput("momentum must be in [0,1)");
    }
    expected = row.last_epoch + 1;
  }
}

Schedule Schedule::standard() {
  return Schedule({{1, 50, 1e-4, 0.9}, {51, 120, 1e-5, 0.99}, {121, 200, 1e-6, 0.999}});
}

Schedule Schedule::constant(double learning_rate, double momentum) {
  return Schedule({{1, 1, learning_rate, momentum}});
}

ScheduleRow Schedule::lookup(int epoch) const {
  if (epoch < 1) throw InvalidInput("epochs are numbered from 1");
  for (const auto& row : rows_) {
    if (epoch <= row.last_epoch) return row;
  }
  return rows_.back();
}

TrainState make_train_state(ParamSet<float> params, uint64_t seed) {
  TrainState state;
  state.velocity = params.zeros_like();
  state.params = std::move(params);
  state.rng.seed(seed);
  return state;
}

namespace {

// Index of the next source that has data in `pool`, advancing the toggle.
template <typename Pool>
const SourceData& next_source(const std::vector<SourceData>& sources, size_t& toggle,
                              Pool pool) {
  for (size_t tries = 0; tries < sources.size(); ++tries) {
    const SourceData& s = sources[toggle++ % sources.size()];
    if (!(s.*pool).empty()) return s;
  }
  throw InvalidInput("no source has data to sample from");
}

bool has_pool(const std::vector<SourceData>& sources, std::vector<FovPtr> SourceData::*pool) {
  return std::any_of(sources.begin(), sources.end(),
                     [&](const SourceData& s) { return !(s.*pool).empty(); });
}

const FovSample& pick(const std::vector<FovPtr>& pool, std::mt19937_64& rng) {
  std::uniform_int_distribution<size_t> dist(0, pool.size() - 1);
  return *pool[dist(rng)];
}

void sgd_step(ParamSet<float>& params, ParamSet<float>& velocity, const ParamSet<float>& grads,
              double lr, double momentum) {
  const float mu = static_cast<float>(momentum);
  const float eta = static_cast<float>(lr);
  for (size_t k = 0; k < params.tensors.size(); ++k) {
    auto& w = params.tensors[k].values;
    auto& v = velocity.tensors[k].values;
    const auto& g = grads.tensors[k].values;
    for (size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] - eta * g[i];
      w[i] += v[i];
    }
  }
}

void write_snapshot(const TrainOptions& options, const ParamSet<float>& params, int epoch, const std::string& name) {
  Model model = options.checkpoint_template;
  model.params = params;
  model.meta.epoch = epoch;
  save_checkpoint(model, options.output_dir / name);
}

}  // namespace

double validation_loss(const FcnNetwork<float>& net, const ParamSet<float>& params,
                       const std::vector<SourceData>& sources, int count,
                       const AugmentOptions& augment, uint64_t seed) {
  std::mt19937_64 rng(seed);
  size_t toggle = 0;
  double sum = 0.0;
  for (int i = 0; i < count; ++i) {
    const SourceData& src = next_source(sources, toggle, &SourceData::validation);
    const FovSample& fov = pick(src.validation, rng);
    TrainingPatch patch = sample_patch(fov.image, fov.labels, fov.weights, rng, augment);
    Tensor<float> probs =
        net.forward(params, to_input_tensor<float>(patch.image), Mode::kEval);
    sum += weighted_cross_entropy(probs, patch.labels, patch.weights);
  }
  return count > 0 ? sum / count : 0.0;
}

TrainState train(const FcnNetwork<float>& net, TrainState state,
                 const std::vector<SourceData>& sources, const TrainOptions& options) {
  if (!has_pool(sources, &SourceData::train)) throw InvalidInput("training split is empty");
  if (options.train_epoch_size < 1) throw InvalidInput("train_epoch_size must be >= 1");
  const bool validate = options.val_epoch_size > 0 && has_pool(sources, &SourceData::validation);

  std::ofstream log;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir);
    log.open(options.output_dir / "loss_log.jsonl", std::ios::app);
  }

  ParamSet<float> best_params;
  if (validate && options.baseline_validation) {
    state.best_val_loss = validation_loss(net, state.params, sources, options.val_epoch_size,
                                          options.augment, options.validation_seed);
    state.best_epoch = state.epoch;
    best_params = state.params;
    spdlog::info("baseline validation loss {:.5f}", state.best_val_loss);
  }

  ParamSet<float> grads = state.params.zeros_like();
  for (int epoch = state.epoch + 1; epoch <= options.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const ScheduleRow row = options.schedule.lookup(epoch);
    double train_sum = 0.0;
    for (int it = 0; it < options.train_epoch_size; ++it) {
      const SourceData& src = next_source(sources, state.source_toggle, &SourceData::train);
      const FovSample& fov = pick(src.train, state.rng);
      TrainingPatch patch =
          sample_patch(fov.image, fov.labels, fov.weights, state.rng, options.augment);
      PatchLoss<float> loss = loss_and_gradient(
          net, state.params, to_input_tensor<float>(patch.image), patch.labels,
          patch.weights, Mode::kTrain, &state.rng, options.l2, grads);
      train_sum += loss.data;
      sgd_step(state.params, state.velocity, grads, row.learning_rate, row.momentum);
      ++state.iteration;
    }
    state.epoch = epoch;

    EpochRecord rec{epoch, train_sum / options.train_epoch_size,
                    std::numeric_limits<double>::quiet_NaN(), row.learning_rate,
                    row.momentum};
    bool improved = false;
    if (validate) {
      rec.val_loss = validation_loss(net, state.params, sources, options.val_epoch_size,
                                     options.augment, options.validation_seed);
      if (rec.val_loss < state.best_val_loss) {
        state.best_val_loss = rec.val_loss;
        state.best_epoch = epoch;
        state.epochs_since_improvement = 0;
        best_params = state.params;
        improved = true;
      } else {
        ++state.epochs_since_improvement;
      }
    }
    state.history.push_back(rec);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    spdlog::info("epoch {} train {:.5f} val {:.5f} lr {:g} mom {:g} ({:.1f}s)", epoch,
                 rec.train_loss, rec.val_loss, rec.learning_rate, rec.momentum, secs);
    if (log.is_open()) {
      nlohmann::json j{{"epoch", rec.epoch},
                       {"train_loss", rec.train_loss},
                       {"val_loss", validate ? nlohmann::json(rec.val_loss) : nlohmann::json()},
                       {"lr", rec.learning_rate},
                       {"momentum", rec.momentum}};
      log << j.dump() << '\n' << std::flush;
      if (options.checkpoint_every > 0 && epoch % options.checkpoint_every == 0) {
        write_snapshot(options, state.params, epoch, fmt::format("epoch_{:04d}", epoch));
      }
      if (improved) write_snapshot(options, state.params, epoch, "best");
    }
    if (validate && state.epochs_since_improvement > options.patience) {
      spdlog::info("early stop after epoch {} (best epoch {})", epoch, state.best_epoch);
      break;
    }
  }
  if (validate && !best_params.tensors.empty()) state.params = std::move(best_params);
  if (log.is_open() && !validate) {
    write_snapshot(options, state.params, state.epoch, "best");
  }
  return state;
}

FineTuneJob assemble_finetune_job(std::vector<FovPtr> corrections,
                                  const std::vector<FovPtr>& prior, uint64_t seed) {
  if (corrections.empty()) throw InvalidInput("fine-tuning needs at least one correction FOV");
  size_t n = corrections.size();
  if (prior.size() < 2 * n) {
    const size_t shrunk = prior.size() / 2;
    spdlog::warn("only {} prior FOVs for {} correction FOVs; using {} for each of A and B",
                 prior.size(), n, shrunk);
    n = shrunk;
  }
  std::vector<size_t> order(prior.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  FineTuneJob job;
  job.corrections = std::move(corrections);
  for (size_t i = 0; i < n; ++i) job.prior_train.push_back(prior[order[i]]);
  for (size_t i = n; i < 2 * n; ++i) job.prior_val.push_back(prior[order[i]]);
  return job;
}

SourceData finetune_pool(const FineTuneJob& job) {
  if (job.corrections.empty()) throw InvalidInput("fine-tuning needs at least one correction FOV");
  SourceData pool;
  pool.name = "finetune";
  pool.train = job.corrections;
  pool.train.insert(pool.train.end(), job.prior_train.begin(), job.prior_train.end());
  pool.validation = job.prior_val;
  return pool;
}

TrainState finetune(const FcnNetwork<float>& net, const ParamSet<float>& params,
                    const FineTuneJob& job, const FineTuneOptions& options) {
  const SourceData pool = finetune_pool(job);

  TrainOptions opts;
  opts.schedule = Schedule::constant(options.learning_rate, options.momentum);
  opts.train_epoch_size = options.train_epoch_size;
  opts.l2 = options.l2;
  opts.augment = options.augment;
  opts.patience = options.patience;
  opts.baseline_validation = true;
  opts.validation_seed = options.seed ^ 0x9e3779b97f4a7c15ULL;
  if (pool.validation.empty()) {
    opts.epochs = options.epochs_without_validation;
    opts.val_epoch_size = 0;
  } else {
    opts.epochs = options.max_epochs;
    opts.val_epoch_size = options.val_epoch_size;
  }
  return train(net, make_train_state(params, options.seed), {pool}, opts);
}

}  // namespace lymphdet
