// Smallest end-to-end use of the library: a tiny synthetic dataset, a few
// epochs of SimCLR with HistoPerm at alpha = 0.75, then a linear probe.

#include <cstdio>

#include "histoperm.hpp"

int main() {
  using namespace histoperm;
  RunConfig cfg;
  cfg.generator.train_slides = 4;
  cfg.generator.dev_slides = 2;
  cfg.generator.test_slides = 2;
  cfg.generator.patches_per_slide = 16;
  cfg.method = Method::simclr;
  cfg.alpha = 0.75;
  cfg.simclr_heads = {128, 32};
  cfg.pretrain.epochs = 3;
  cfg.pretrain.batch_size = 64;
  cfg.pretrain.warmup_epochs = 1;
  cfg.linear.epochs = 10;
  cfg.linear.warmup_epochs = 1;

  const Dataset ds = generate_dataset(cfg.generator);
  const PretrainOutput pre = pretrain(ds, cfg);
  for (const auto& [epoch, loss] : pre.epoch_loss) std::printf("epoch %zu  loss %.4f\n", epoch, loss);

  const auto ev = linear_eval(ds, pre.state.encoder, cfg);
  std::printf("test patch accuracy %.3f  slide accuracy %.3f\n", ev.test.patch.accuracy, ev.test.slide.accuracy);
  return 0;
}
