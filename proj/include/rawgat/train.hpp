#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "rawgat/data.hpp"
#include "rawgat/model.hpp"
#include "rawgat/rng.hpp"
#include "rawgat/tensor.hpp"

namespace rawgat {

struct TrainConfig {
  double lr = 1e-4;
  std::int64_t batch_size = 10;
  std::int64_t epochs = 50;  // desk-scale default; full runs use more
  double w_bona = 9.0;       // class-imbalance weights, bona:spoof = 9:1
  double w_spoof = 1.0;

  void validate() const;
};

// Mean over the batch of -w_label * log softmax(logits)[label].
// logits: (B, 2) with column 0 = spoof, column 1 = bona fide.
template <class S>
TensorT<S> wce_loss(const TensorT<S>& logits, const std::vector<Label>& labels,
                    double w_bona = 9.0, double w_spoof = 1.0);

// Multiplicative channel mask for frontend outputs: a contiguous run of
// `width <= f_mask` channels (width and start drawn uniformly) is zeroed;
// everything else stays 1. One draw serves a whole mini-batch.
template <class S>
std::vector<S> draw_channel_mask(std::int64_t channels, std::int64_t f_mask,
                                 Rng& rng);

// Standard bias-corrected Adam over named parameter tensors. Parameters
// without a gradient are treated as zero-gradient; non-finite gradients
// raise an error naming the tensor.
template <class S>
class AdamT {
 public:
  AdamT(std::vector<std::pair<std::string, TensorT<S>>> params, double lr,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  std::int64_t step_count() const { return t_; }

 private:
  struct Slot {
    std::string name;
    TensorT<S> param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct EpochStats {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double wall_seconds = 0.0;
};

// "epoch<TAB>train<TAB>dev<TAB>wall" with fixed-precision losses.
std::string format_epoch_line(const EpochStats& stats);

struct TrainResult {
  std::vector<EpochStats> history;
  double best_dev_loss = 0.0;
  std::int64_t best_epoch = 0;  // 0 if no checkpoint was ever saved
  bool aborted = false;         // non-finite loss stopped the run early
};

// Full training loop: shuffled mini-batches, per-batch channel masking,
// WCE + Adam, per-epoch dev evaluation, best-checkpoint retention at
// `checkpoint_path`. Log lines go to `log` when given. Deterministic for a
// fixed model seed. A non-finite train or dev loss aborts the run and keeps
// the last good checkpoint.
template <class S>
TrainResult train_model(RawGatModelT<S>& model,
                        const std::vector<Utterance>& train_set,
                        const std::vector<Utterance>& dev_set,
                        const TrainConfig& config,
                        const std::string& checkpoint_path,
                        std::ostream* log = nullptr);

// Counter-measure score for one utterance: bona-fide log-likelihood ratio
// log p(bona|x) - log p(spoof|x) from the eval-mode forward pass. Input of
// any length; it is normalized with fix_length first.
template <class S>
double score_utterance(RawGatModelT<S>& model,
                       const std::vector<float>& samples);

#define RAWGAT_DECLARE_TRAIN_OPS(S)                                           \
  extern template TensorT<S> wce_loss<S>(const TensorT<S>&,                   \
                                         const std::vector<Label>&, double,   \
                                         double);                             \
  extern template std::vector<S> draw_channel_mask<S>(std::int64_t,           \
                                                      std::int64_t, Rng&);    \
  extern template class AdamT<S>;                                             \
  extern template TrainResult train_model<S>(                                 \
      RawGatModelT<S>&, const std::vector<Utterance>&,                        \
      const std::vector<Utterance>&, const TrainConfig&, const std::string&,  \
      std::ostream*);                                                         \
  extern template double score_utterance<S>(RawGatModelT<S>&,                 \
                                            const std::vector<float>&);

RAWGAT_DECLARE_TRAIN_OPS(float)
RAWGAT_DECLARE_TRAIN_OPS(double)
#undef RAWGAT_DECLARE_TRAIN_OPS

}  // namespace rawgat
