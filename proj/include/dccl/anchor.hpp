#pragma once

#include <cstdint>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/losses.hpp"
#include "dccl/nets.hpp"
#include "dccl/optim.hpp"
#include "dccl/synthdata.hpp"
#include "dccl/training.hpp"

namespace dccl {

/// How the stand-in for a pre-trained model is produced. Input and class counts are taken from
/// the data.
struct AnchorOptions {
  Architecture arch;
  std::size_t batch_size = 24;
  double learning_rate = 2e-3;
  double split_fraction = 0.8;
  double augmentation = 0.1;  // additive jitter intensity
};

inline Architecture fit_architecture(Architecture arch, const Dataset& data) {
  arch.input_dim = data.dim;
  arch.classes = data.classes;
  return arch;
}

/// Supervised training on the training split of the pooled data.
inline Model train_anchor_model(const Dataset& pooled, std::size_t epochs, std::uint64_t seed,
                                const AnchorOptions& opt = {}) {
  if (pooled.samples.empty()) throw ConfigError("anchor pre-training needs a nonempty dataset", "anchor.data");
  if (epochs == 0) throw ConfigError("anchor epochs must be positive", "anchor.epochs");
  auto split = split_by_domain(pooled, pooled.all_indices(), opt.split_fraction, derive_seed(seed, "anchor-split"));
  Model model = Model::random(fit_architecture(opt.arch, pooled), derive_seed(seed, "anchor-model"));
  BatchStream stream(pooled, split.train, opt.batch_size, derive_seed(seed, "anchor-batches"));
  Rng aug_rng(derive_seed(seed, "anchor-augment"));
  auto jitter = AugmentationSpec::additive(opt.augmentation);
  Adam adam(opt.learning_rate);
  auto params = model.parameters();
  std::size_t steps = epochs * ((split.train.size() + opt.batch_size - 1) / opt.batch_size);
  for (std::size_t step = 1; step <= steps; ++step) {
    auto idx = stream.next();
    Tape tape;
    Binder b(tape, true);
    Var x = tape.constant(augment_rows(pooled.features(idx), jitter, aug_rng));
    Var loss = erm_loss(model.classifier.forward(b, model.net.encoder.forward(b, x)), pooled.labels(idx));
    if (!std::isfinite(loss.value().item())) throw DivergenceError("anchor pre-training diverged", step);
    auto grads = tape.backward(loss);
    adam.step(params, collect_grads(grads, b, params));
  }
  calibrate_statistics(model, pooled.features(split.train));
  return model;
}

/// Pre-trains on the pooled data, then freezes. Provenance records the seed and data hash.
inline AnchorEncoder build_anchor(const Dataset& pooled, std::size_t epochs, std::uint64_t seed,
                                  const AnchorOptions& opt = {}) {
  Model model = train_anchor_model(pooled, epochs, seed, opt);
  return AnchorEncoder(std::move(model), Provenance{"erm-pooled", seed, data_hash(pooled)});
}

/// Validation split used while pre-training an anchor with this seed.
inline std::vector<std::size_t> anchor_validation_split(const Dataset& pooled, std::uint64_t seed,
                                                        const AnchorOptions& opt = {}) {
  return split_by_domain(pooled, pooled.all_indices(), opt.split_fraction, derive_seed(seed, "anchor-split")).val;
}

}  // namespace dccl
