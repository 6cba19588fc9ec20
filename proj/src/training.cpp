#include <algorithm>
#include <numeric>

#include "idinv/training.hpp"

namespace idinv::training {

namespace {

using synthesis::GeneratorModel;

// Epoch-wise permutation sampler.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, SeededRng rng) : rng_(std::move(rng)), order_(count) {
    IDINV_REQUIRE(count >= 1, "cannot sample batches from an empty dataset");
    reshuffle();
  }

  std::vector<std::size_t> next(int batch) {
    std::vector<std::size_t> out;
    out.reserve(static_cast<std::size_t>(batch));
    while (out.size() < static_cast<std::size_t>(batch)) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
    cursor_ = 0;
  }

  SeededRng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

Var<float> gather(const workspace::Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<Image<float>> images;
  images.reserve(indices.size());
  for (auto i : indices) images.push_back(data.images[i]);
  return stack_images(images);
}

std::vector<Var<float>> grads_for(const Var<float>& loss, const nn::ParameterSet<float>& params) {
  return ad::grad(loss, params.vars());
}

void check_finite(double value, long step, const char* what) {
  if (!std::isfinite(value)) throw StepFailure(ErrorKind::kTrainingFailure, step, std::string("non-finite ") + what);
}

void check_shapes(const workspace::Dataset& data, int resolution, int channels) {
  IDINV_REQUIRE(data.size() >= 1, "training data is empty");
  const auto& first = data.images.front();
  IDINV_REQUIRE(first.height == resolution && first.width == resolution && first.channels == channels,
                "training images are " + std::to_string(first.channels) + "x" + std::to_string(first.height) + "x" +
                    std::to_string(first.width) + ", model expects " + std::to_string(channels) + "x" +
                    std::to_string(resolution) + "x" + std::to_string(resolution));
}

// Random W codes broadcast to every layer, [N, L, d], as constants.
Var<float> sample_codes(const GeneratorModel<float>& g, SeededRng& rng, int n) {
  Buffer<float> z = rng.normal_buffer<float>(static_cast<Eigen::Index>(n) * g.latent_dim());
  auto w = g.map(Var<float>::constant(std::move(z), {n, g.latent_dim()}));
  return broadcast_rows(w, g.layers());
}

// The head bias starts at the average W so the first reconstructions are the mean image.
void center_encoder_head(EncoderModel<float>& e, const GeneratorModel<float>& g, std::uint64_t seed) {
  ad::NoGrad ng;
  SeededRng rng = SeededRng(seed).fork(11);
  constexpr int kSamples = 1024;
  auto codes = sample_codes(g, rng, kSamples);
  const int width = g.layers() * g.latent_dim();
  Eigen::Map<const RowMatrix<float>> rows(codes.value().data(), kSamples, width);
  auto& params = e.parameters();
  const int bias = params.index_of("encoder/head/bias");
  auto var = params[bias];
  var.mutable_value() = rows.colwise().mean().transpose().array();
}

}  // namespace

GanResult train_gan(const workspace::Dataset& data, const synthesis::GeneratorConfig& config, const GanConfig& cfg,
                    const MetricsSink& sink) {
  config.validate();
  cfg.validate();
  check_shapes(data, config.resolution, config.channels);

  auto g = GeneratorModel<float>::create(config, cfg.seed);
  DiscriminatorConfig dc;
  dc.resolution = config.resolution;
  dc.channels = config.channels;
  auto d = DiscriminatorModel<float>::create(dc, cfg.seed + 1);

  const nn::AdamConfig adam{cfg.learning_rate, 0.0, 0.99, 1e-8};
  nn::Adam<float> opt_g(g.parameters().vars(), adam);
  nn::Adam<float> opt_d(d.parameters().vars(), adam);
  SeededRng root(cfg.seed);
  BatchSampler sampler(data.size(), root.fork(1));
  SeededRng latent = root.fork(2);
  const auto disc = as_discriminator(d);

  for (long step = 0; step < cfg.steps; ++step) {
    auto reals = gather(data, sampler.next(cfg.batch_size));
    Var<float> fakes;
    {
      ad::NoGrad ng;
      fakes = g.synthesize(sample_codes(g, latent, cfg.batch_size));
    }
    auto loss_d = gan_discriminator_loss(disc, fakes, reals, cfg.gamma);
    check_finite(loss_d.item(), step, "discriminator loss");
    opt_d.step(grads_for(loss_d, d.parameters()));

    auto loss_g = gan_generator_loss(disc, g.synthesize(sample_codes(g, latent, cfg.batch_size)));
    check_finite(loss_g.item(), step, "generator loss");
    opt_g.step(grads_for(loss_g, g.parameters()));

    if (sink) sink({"gan", step, {{"loss_d", loss_d.item()}, {"loss_g", loss_g.item()}}});
  }
  if (!g.parameters().all_finite() || !d.parameters().all_finite())
    throw StepFailure(ErrorKind::kTrainingFailure, cfg.steps, "non-finite GAN parameters");
  g.freeze();
  return {std::move(g), std::move(d)};
}

FeatureTrainingResult train_feature_extractor(const workspace::Dataset& data, const perception::FeatureConfig& config,
                                              const FeatureTrainingConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  check_shapes(data, config.resolution, config.channels);
  IDINV_REQUIRE(data.labeled(), "feature training needs labelled data");
  IDINV_REQUIRE(data.labels.cols() == config.attributes, "label columns do not match the attribute count");
  const auto holdout = static_cast<std::size_t>(std::ceil(cfg.holdout_fraction * static_cast<double>(data.size())));
  IDINV_REQUIRE(holdout >= 1 && holdout < data.size(), "dataset too small for the holdout split");
  auto [train, test] = data.split(data.size() - holdout);

  auto f = perception::FeatureExtractor<float>::create(config, cfg.seed);
  nn::Adam<float> opt(f.parameters().vars(), {cfg.learning_rate, 0.9, 0.999, 1e-8});
  BatchSampler sampler(train.size(), SeededRng(cfg.seed).fork(1));
  const int a = config.attributes;

  for (long step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(cfg.batch_size);
    Buffer<float> y(static_cast<Eigen::Index>(idx.size()) * a);
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (int j = 0; j < a; ++j)
        y(static_cast<Eigen::Index>(k) * a + j) = static_cast<float>(train.labels(static_cast<Eigen::Index>(idx[k]), j));
    auto logits = f.logits(gather(train, idx));
    auto targets = Var<float>::constant(std::move(y), logits.shape());
    // Binary cross-entropy from logits: softplus(l) - y * l.
    auto loss = mean(sub(softplus(logits), mul(targets, logits)));
    check_finite(loss.item(), step, "classifier loss");
    opt.step(grads_for(loss, f.parameters()));
    if (sink) sink({"features", step, {{"bce", loss.item()}}});
  }
  f.freeze();

  FeatureTrainingResult out{f, 0.0, std::vector<double>(static_cast<std::size_t>(a), 0.0)};
  const auto probs = classify_attributes(f, test.images);
  for (int j = 0; j < a; ++j) {
    long correct = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i)
      correct += ((probs(i, j) > 0.5f) == (test.labels(i, j) == 1)) ? 1 : 0;
    out.per_attribute_accuracy[static_cast<std::size_t>(j)] = static_cast<double>(correct) / static_cast<double>(probs.rows());
  }
  out.held_out_accuracy =
      std::accumulate(out.per_attribute_accuracy.begin(), out.per_attribute_accuracy.end(), 0.0) / a;
  return out;
}

RowMatrix<float> classify_attributes(const perception::FeatureExtractor<float>& f, const std::vector<Image<float>>& images) {
  const int a = f.config().attributes;
  RowMatrix<float> out(static_cast<Eigen::Index>(images.size()), a);
  ad::NoGrad ng;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t stop = std::min(images.size(), start + kChunk);
    std::vector<Image<float>> chunk(images.begin() + static_cast<long>(start), images.begin() + static_cast<long>(stop));
    auto probs = sigmoid(f.logits(stack_images(chunk)));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(stop - start)) =
        Eigen::Map<const RowMatrix<float>>(probs.value().data(), static_cast<Eigen::Index>(stop - start), a);
  }
  return out;
}

EncoderTrainingResult train_domain_guided_encoder(const GeneratorModel<float>& g, const DiscriminatorModel<float>& d_init,
                                                  const perception::FeatureExtractor<float>& f,
                                                  const workspace::Dataset& data, const TrainingConfig& cfg,
                                                  const MetricsSink& sink) {
  cfg.validate();
  IDINV_REQUIRE(g.frozen(), "the generator must be frozen during encoder training");
  check_shapes(data, g.config().resolution, g.config().channels);

  auto e = EncoderModel<float>::create(EncoderConfig::for_generator(g.config()), cfg.seed);
  center_encoder_head(e, g, cfg.seed);
  auto d = d_init.clone();
  d.parameters().set_trainable(true);
  auto frozen_f = f.clone();
  frozen_f.freeze();

  nn::Adam<float> opt_e(e.parameters().vars(), {cfg.lr_encoder, 0.9, 0.999, 1e-8});
  nn::Adam<float> opt_d(d.parameters().vars(), {cfg.lr_discriminator, 0.9, 0.999, 1e-8});
  BatchSampler sampler(data.size(), SeededRng(cfg.seed).fork(1));
  const auto enc = as_encoder(e);
  const auto gen = as_generator(g);
  const auto disc = as_discriminator(d);
  const auto feat = as_features(frozen_f);

  for (long step = 0; step < cfg.steps; ++step) {
    auto x = gather(data, sampler.next(cfg.batch_size));

    auto terms = domain_guided_encoder_loss(enc, gen, disc, feat, x, cfg.lambda_vgg, cfg.lambda_adv);
    check_finite(terms.total.item(), step, "encoder loss");
    opt_e.step(grads_for(terms.total, e.parameters()));

    Var<float> recon;
    {
      ad::NoGrad ng;
      recon = g.synthesize(e.encode(x));
    }
    auto dterms = discriminator_loss(disc, recon, x, cfg.gamma, step);
    check_finite(dterms.total.item(), step, "discriminator loss");
    opt_d.step(grads_for(dterms.total, d.parameters()));

    if (sink) {
      sink({"encoder", step,
            {{"total", terms.total.item()},
             {"pixel", terms.pixel},
             {"perceptual", terms.perceptual},
             {"adversarial", terms.adversarial}}});
      sink({"discriminator", step,
            {{"total", dterms.total.item()},
             {"fake_score", dterms.fake_score},
             {"real_score", dterms.real_score},
             {"penalty", dterms.penalty}}});
    }
  }
  if (!e.parameters().all_finite()) throw StepFailure(ErrorKind::kTrainingFailure, cfg.steps, "non-finite encoder parameters");
  e.set_trainable(false);
  d.parameters().set_trainable(false);
  return {std::move(e), std::move(d)};
}

EncoderModel<float> train_conventional_encoder(const GeneratorModel<float>& g, const TrainingConfig& cfg,
                                               const MetricsSink& sink) {
  cfg.validate();
  IDINV_REQUIRE(g.frozen(), "the generator must be frozen during encoder training");
  auto e = EncoderModel<float>::create(EncoderConfig::for_generator(g.config()), cfg.seed);
  center_encoder_head(e, g, cfg.seed);
  nn::Adam<float> opt(e.parameters().vars(), {cfg.lr_encoder, 0.9, 0.999, 1e-8});
  SeededRng latent = SeededRng(cfg.seed).fork(2);
  const auto enc = as_encoder(e);
  const auto gen = as_generator(g);

  for (long step = 0; step < cfg.steps; ++step) {
    Var<float> codes;
    {
      ad::NoGrad ng;
      codes = sample_codes(g, latent, cfg.batch_size);
    }
    auto loss = conventional_encoder_loss(enc, gen, codes);
    check_finite(loss.item(), step, "encoder loss");
    opt.step(grads_for(loss, e.parameters()));
    if (sink) sink({"conventional", step, {{"code_distance", loss.item()}}});
  }
  e.set_trainable(false);
  return e;
}

}  // namespace idinv::training
