#include "rawgat/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace rawgat {

void TrainConfig::validate() const {
  require(lr > 0.0, ErrorKind::config, "train config: lr must be positive");
  require(batch_size >= 1, ErrorKind::config,
          "train config: batch_size must be at least 1");
  require(epochs >= 1, ErrorKind::config,
          "train config: epochs must be at least 1");
  require(w_bona > 0.0 && w_spoof > 0.0, ErrorKind::config,
          "train config: class weights must be positive");
}

template <class S>
TensorT<S> wce_loss(const TensorT<S>& logits, const std::vector<Label>& labels,
                    double w_bona, double w_spoof) {
  require(!labels.empty(), ErrorKind::contract, "wce_loss: empty batch");
  require(logits.rank() == 2 && logits.dim(0) ==
              static_cast<std::int64_t>(labels.size()) && logits.dim(1) == 2,
          ErrorKind::dimension,
          concat_msg("wce_loss: logits must be (", labels.size(),
                     ", 2), got ", shape_str(logits.shape())));
  for (S v : logits.data())
    require(std::isfinite(static_cast<double>(v)), ErrorKind::numeric,
            "wce_loss: non-finite logit");

  // sum(lsm * M) with M[i, y_i] = -w_{y_i} / B realizes the weighted mean of
  // negative log-likelihoods without an explicit gather.
  const auto batch = static_cast<std::int64_t>(labels.size());
  std::vector<S> mask_data(static_cast<std::size_t>(2 * batch), S(0));
  for (std::int64_t i = 0; i < batch; ++i) {
    const bool bona = labels[static_cast<std::size_t>(i)] == Label::bona;
    mask_data[static_cast<std::size_t>(2 * i + (bona ? 1 : 0))] =
        static_cast<S>(-(bona ? w_bona : w_spoof) /
                       static_cast<double>(batch));
  }
  const auto mask =
      TensorT<S>::from_data({batch, 2}, std::move(mask_data), false);
  return sum(mul(log_softmax(logits), mask));
}

template <class S>
std::vector<S> draw_channel_mask(std::int64_t channels, std::int64_t f_mask,
                                 Rng& rng) {
  require(channels >= 1, ErrorKind::contract,
          "draw_channel_mask: need at least one channel");
  require(f_mask >= 0 && f_mask <= channels, ErrorKind::contract,
          concat_msg("draw_channel_mask: f_mask must lie in [0, ", channels,
                     "], got ", f_mask));
  const std::int64_t width = rng.uniform_int(0, f_mask);
  const std::int64_t start = rng.uniform_int(0, channels - width);
  std::vector<S> mask(static_cast<std::size_t>(channels), S(1));
  for (std::int64_t c = start; c < start + width; ++c)
    mask[static_cast<std::size_t>(c)] = S(0);
  return mask;
}

template <class S>
AdamT<S>::AdamT(std::vector<std::pair<std::string, TensorT<S>>> params,
                double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  require(lr >= 0.0, ErrorKind::config, "adam: lr must be non-negative");
  for (auto& [name, t] : params) {
    if (!t.requires_grad()) continue;
    Slot slot;
    slot.name = name;
    slot.param = t;
    slot.m.assign(static_cast<std::size_t>(t.numel()), 0.0);
    slot.v.assign(static_cast<std::size_t>(t.numel()), 0.0);
    slots_.push_back(std::move(slot));
  }
}

template <class S>
void AdamT<S>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& slot : slots_) {
    auto& value = slot.param.data();
    const std::vector<S>* grad =
        slot.param.has_grad() ? &slot.param.grad() : nullptr;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad ? static_cast<double>((*grad)[i]) : 0.0;
      require(std::isfinite(g), ErrorKind::numeric,
              concat_msg("adam: non-finite gradient in '", slot.name, "'"));
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      value[i] = static_cast<S>(static_cast<double>(value[i]) -
                                lr_ * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }
}

template <class S>
void AdamT<S>::zero_grad() {
  for (auto& slot : slots_) slot.param.zero_grad();
}

std::string format_epoch_line(const EpochStats& stats) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%lld\t%.6f\t%.6f\t%.3f",
                static_cast<long long>(stats.epoch), stats.train_loss,
                stats.dev_loss, stats.wall_seconds);
  return buf;
}

namespace {

template <class S>
struct PreparedSet {
  std::vector<std::vector<S>> waves;  // fixed-length
  std::vector<Label> labels;
};

template <class S>
PreparedSet<S> prepare(const std::vector<Utterance>& set, std::int64_t length,
                       const char* which) {
  PreparedSet<S> out;
  for (const auto& utt : set) {
    require(utt.label.has_value(), ErrorKind::contract,
            concat_msg("train: ", which, " utterance '", utt.id,
                       "' has no label"));
    const auto fixed = fix_length(utt.samples, length);
    std::vector<S> wave(fixed.size());
    for (std::size_t i = 0; i < fixed.size(); ++i)
      wave[i] = static_cast<S>(fixed[i]);
    out.waves.push_back(std::move(wave));
    out.labels.push_back(*utt.label);
  }
  return out;
}

template <class S>
TensorT<S> batch_tensor(const PreparedSet<S>& set,
                        const std::vector<std::int64_t>& order,
                        std::int64_t begin, std::int64_t end) {
  const auto length = static_cast<std::int64_t>(set.waves[0].size());
  std::vector<S> data;
  data.reserve(static_cast<std::size_t>((end - begin) * length));
  for (std::int64_t i = begin; i < end; ++i) {
    const auto& wave = set.waves[static_cast<std::size_t>(
        order[static_cast<std::size_t>(i)])];
    data.insert(data.end(), wave.begin(), wave.end());
  }
  return TensorT<S>::from_data({end - begin, length}, std::move(data), false);
}

}  // namespace

template <class S>
TrainResult train_model(RawGatModelT<S>& model,
                        const std::vector<Utterance>& train_set,
                        const std::vector<Utterance>& dev_set,
                        const TrainConfig& config,
                        const std::string& checkpoint_path,
                        std::ostream* log) {
  config.validate();
  require(!train_set.empty() && !dev_set.empty(), ErrorKind::contract,
          "train: datasets must be non-empty");

  const auto train_data =
      prepare<S>(train_set, model.config.input_length, "training");
  const auto dev_data = prepare<S>(dev_set, model.config.input_length, "dev");

  std::int64_t bona_count = 0;
  for (Label l : train_data.labels) bona_count += l == Label::bona ? 1 : 0;
  require(bona_count > 0 &&
              bona_count < static_cast<std::int64_t>(train_data.labels.size()),
          ErrorKind::contract,
          "train: training set must contain both classes");

  const Rng root(model.config.seed);
  Rng shuffle_rng = root.fork("train-shuffle");
  Rng mask_rng = root.fork("train-mask");
  AdamT<S> adam(model.named_parameters(), config.lr);

  const auto n_train = static_cast<std::int64_t>(train_data.waves.size());
  const auto n_dev = static_cast<std::int64_t>(dev_data.waves.size());
  const auto channels = model.frontend.num_channels();

  std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));
  for (std::int64_t i = 0; i < n_train; ++i)
    order[static_cast<std::size_t>(i)] = i;
  std::vector<std::int64_t> dev_order(static_cast<std::size_t>(n_dev));
  for (std::int64_t i = 0; i < n_dev; ++i)
    dev_order[static_cast<std::size_t>(i)] = i;

  TrainResult result;
  result.best_dev_loss = std::numeric_limits<double>::infinity();

  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto tick = std::chrono::steady_clock::now();

    // Fisher-Yates with the dedicated shuffle stream.
    for (std::int64_t i = n_train - 1; i > 0; --i) {
      const std::int64_t j = shuffle_rng.uniform_int(0, i);
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(j)]);
    }

    double train_loss_sum = 0.0;
    bool finite = true;
    for (std::int64_t begin = 0; begin < n_train && finite;
         begin += config.batch_size) {
      const std::int64_t end = std::min(n_train, begin + config.batch_size);
      const auto wave = batch_tensor(train_data, order, begin, end);
      std::vector<Label> labels;
      for (std::int64_t i = begin; i < end; ++i)
        labels.push_back(train_data.labels[static_cast<std::size_t>(
            order[static_cast<std::size_t>(i)])]);
      const auto mask =
          draw_channel_mask<S>(channels, model.config.f_mask, mask_rng);
      const auto logits = model.forward(wave, /*training=*/true, &mask);
      auto loss =
          wce_loss(logits, labels, config.w_bona, config.w_spoof);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        finite = false;
        break;
      }
      train_loss_sum += value * static_cast<double>(end - begin);
      backward(loss);
      adam.step();
      adam.zero_grad();
    }
    if (!finite) {
      result.aborted = true;
      if (log)
        *log << "# aborted: non-finite training loss at epoch " << epoch
             << "\n";
      break;
    }

    double dev_loss_sum = 0.0;
    {
      NoGradGuard no_grad;
      for (std::int64_t begin = 0; begin < n_dev;
           begin += config.batch_size) {
        const std::int64_t end = std::min(n_dev, begin + config.batch_size);
        const auto wave = batch_tensor(dev_data, dev_order, begin, end);
        std::vector<Label> labels(
            dev_data.labels.begin() + begin, dev_data.labels.begin() + end);
        const auto logits = model.forward(wave, /*training=*/false);
        const auto loss =
            wce_loss(logits, labels, config.w_bona, config.w_spoof);
        dev_loss_sum +=
            static_cast<double>(loss.item()) * static_cast<double>(end - begin);
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = train_loss_sum / static_cast<double>(n_train);
    stats.dev_loss = dev_loss_sum / static_cast<double>(n_dev);
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - tick)
            .count();
    if (!std::isfinite(stats.dev_loss)) {
      result.aborted = true;
      if (log)
        *log << "# aborted: non-finite dev loss at epoch " << epoch << "\n";
      break;
    }

    result.history.push_back(stats);
    if (log) *log << format_epoch_line(stats) << "\n";

    if (stats.dev_loss < result.best_dev_loss) {
      result.best_dev_loss = stats.dev_loss;
      result.best_epoch = epoch;
      model.save_checkpoint(checkpoint_path);
    }
  }
  return result;
}

template <class S>
double score_utterance(RawGatModelT<S>& model,
                       const std::vector<float>& samples) {
  NoGradGuard no_grad;
  const auto fixed = fix_length(samples, model.config.input_length);
  std::vector<S> wave(fixed.size());
  for (std::size_t i = 0; i < fixed.size(); ++i)
    wave[i] = static_cast<S>(fixed[i]);
  const auto length = static_cast<std::int64_t>(wave.size());
  const auto input = TensorT<S>::from_data({length}, std::move(wave), false);
  const auto logits = model.forward(input, /*training=*/false);
  const auto lsm = log_softmax(logits);
  return static_cast<double>(lsm.data()[1]) -
         static_cast<double>(lsm.data()[0]);
}

#define RAWGAT_INSTANTIATE_TRAIN_OPS(S)                                       \
  template TensorT<S> wce_loss<S>(const TensorT<S>&,                          \
                                  const std::vector<Label>&, double, double); \
  template std::vector<S> draw_channel_mask<S>(std::int64_t, std::int64_t,    \
                                               Rng&);                         \
  template class AdamT<S>;                                                    \
  template TrainResult train_model<S>(                                        \
      RawGatModelT<S>&, const std::vector<Utterance>&,                        \
      const std::vector<Utterance>&, const TrainConfig&, const std::string&,  \
      std::ostream*);                                                         \
  template double score_utterance<S>(RawGatModelT<S>&,                        \
                                     const std::vector<float>&);

RAWGAT_INSTANTIATE_TRAIN_OPS(float)
RAWGAT_INSTANTIATE_TRAIN_OPS(double)
#undef RAWGAT_INSTANTIATE_TRAIN_OPS

}  // namespace rawgat
