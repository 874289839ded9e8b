#include <gtest/gtest.h>

#include <filesystem>

#include "uofs/checkpoint.hpp"
#include "uofs/pbbs.hpp"
#include "uofs/training.hpp"

using namespace uofs;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  Dataset full, base, pbbs;
  std::set<int> novel;
  std::vector<int> base_classes;
  ModelConfig model;
  TrainConfig train;

  Fixture() {
    SynthConfig s;
    s.n_base_classes = 3;
    s.n_novel_classes = 1;
    s.image_size = 64;
    s.max_instances = 2;
    s.max_size = 24;
    full = generate_synthetic(s, 16, 0);
    novel = synth_novel_classes(s);
    FewShotSplit split;
    split.novel_classes = novel;
    base = base_view(full, split);
    pbbs = build_pbbs_dataset(base, BackgroundSpec{}, {}).dataset;
    for (int c = 0; c < s.n_classes(); ++c)
      if (!novel.contains(c)) base_classes.push_back(c);
    model.backbone.feat_dim = 24;
    model.backbone.head_channels = 8;
    model.backbone.channels_per_stage = {6, 8, 10};
    train.batch_pairing = 1;
    train.sampler.n_pos = 4;
    train.sampler.n_neg = 12;
    train.warmup = 5;
    train.lr = 0.01;
  }

  template <class T>
  TrainState<T> fresh(std::uint64_t seed = 0) const {
    return init_state<T>(model, base_classes, base, seed);
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

template <class T>
std::vector<std::vector<T>> snapshot(Detector<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.value, p.value + p.size);
  return out;
}

template <class T>
std::vector<std::vector<T>> gradients(Detector<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.grad, p.grad + p.size);
  return out;
}

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.alpha = -0.1;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.obj_lr_scale = -1;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.flip_prob = 2;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Hbo, BlendedLossIsAlphaWeighted) {
  auto st = fx().fresh<double>();
  TrainConfig cfg = fx().train;
  const auto pidx = index_by_id(fx().pbbs);
  const auto p = plan_step(cfg, 3, fx().base, &fx().pbbs, &pidx);
  for (double a : {0.0, 0.25, 0.5, 1.0}) {
    cfg.alpha = a;
    st.model.zero_grad();
    const auto l = hbo_gradients<double>(st.model, p.base, p.pbbs, cfg);
    EXPECT_EQ(l.l_det, a * l.l_bs + (1 - a) * l.l_pbbs);
  }
}

TEST(Hbo, PairedBatchesShareSourceAndFlip) {
  const auto pidx = index_by_id(fx().pbbs);
  TrainConfig cfg = fx().train;
  cfg.batch_pairing = 3;
  for (int step = 0; step < 10; ++step) {
    const auto p = plan_step(cfg, step, fx().base, &fx().pbbs, &pidx);
    ASSERT_EQ(p.base.size(), p.pbbs.size());
    for (std::size_t j = 0; j < p.base.size(); ++j) {
      EXPECT_EQ(p.base[j].image->image_id, p.pbbs[j].image->image_id);
      EXPECT_EQ(p.base[j].flip, p.pbbs[j].flip);
    }
  }
}

TEST(Hbo, AlphaOneEqualsBaseOnlyStep) {
  const auto pidx = index_by_id(fx().pbbs);
  TrainConfig cfg = fx().train;
  cfg.alpha = 1.0;
  auto a = fx().fresh<float>(), b = fx().fresh<float>();
  for (int step = 0; step < 3; ++step) {
    const auto p = plan_step(cfg, step, fx().base, &fx().pbbs, &pidx);
    hbo_step<float>(a, p.base, p.pbbs, cfg);
    hbo_step<float>(b, p.base, {}, cfg);
  }
  EXPECT_EQ(snapshot(a.model), snapshot(b.model));
  EXPECT_EQ(a.history.back().l_det, b.history.back().l_det);
}

TEST(Hbo, GradientIsLinearInAlpha) {
  const auto pidx = index_by_id(fx().pbbs);
  TrainConfig cfg = fx().train;
  const auto p = plan_step(cfg, 1, fx().base, &fx().pbbs, &pidx);
  auto grad_at = [&](double alpha) {
    auto st = fx().fresh<double>();
    cfg.alpha = alpha;
    st.model.zero_grad();
    hbo_gradients<double>(st.model, p.base, p.pbbs, cfg);
    return gradients(st.model);
  };
  const auto g1 = grad_at(1.0), g0 = grad_at(0.0), gb = grad_at(0.5);
  double worst = 0;
  for (std::size_t i = 0; i < gb.size(); ++i)
    for (std::size_t j = 0; j < gb[i].size(); ++j)
      worst = std::max(worst, std::abs(gb[i][j] - (0.5 * g1[i][j] + 0.5 * g0[i][j])));
  EXPECT_LT(worst, 1e-6);
}

TEST(TrainBase, ZeroIterationsKeepsInitialization) {
  auto st = fx().fresh<float>(4);
  const auto before = snapshot(st.model);
  TrainConfig cfg = fx().train;
  cfg.iterations_base = 0;
  train_base(st, fx().base, &fx().pbbs, cfg);
  EXPECT_EQ(snapshot(st.model), before);
  EXPECT_TRUE(st.history.empty());
}

TEST(TrainBase, SameSeedSameHistory) {
  TrainConfig cfg = fx().train;
  cfg.iterations_base = 25;
  auto a = fx().fresh<float>(), b = fx().fresh<float>();
  train_base(a, fx().base, &fx().pbbs, cfg);
  train_base(b, fx().base, &fx().pbbs, cfg);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(snapshot(a.model), snapshot(b.model));
}

TEST(TrainBase, ResumeThroughCheckpointMatchesUninterrupted) {
  TrainConfig cfg = fx().train;
  const fs::path ck = fs::temp_directory_path() / "uofs_resume_test.ckpt";
  auto whole = fx().fresh<float>();
  cfg.iterations_base = 200;
  train_base(whole, fx().base, &fx().pbbs, cfg);

  auto first = fx().fresh<float>();
  cfg.iterations_base = 100;
  train_base(first, fx().base, &fx().pbbs, cfg);
  save_checkpoint(ck, first, {"fp"});
  auto resumed = load_checkpoint(ck);
  EXPECT_EQ(resumed.meta.fingerprint, "fp");
  cfg.iterations_base = 200;
  train_base(resumed.state, fx().base, &fx().pbbs, cfg);
  EXPECT_EQ(resumed.state.history, whole.history);
  EXPECT_EQ(snapshot(resumed.state.model), snapshot(whole.model));
  fs::remove(ck);
}

TEST(TrainBase, SmoothedLossDecreases) {
  TrainConfig cfg = fx().train;
  cfg.iterations_base = 200;
  auto st = fx().fresh<float>();
  train_base(st, fx().base, &fx().pbbs, cfg);
  double head = 0, tail = 0;
  for (int i = 0; i < 25; ++i) {
    head += st.history[i].l_det;
    tail += st.history[175 + i].l_det;
  }
  EXPECT_LT(tail, head);
}

TEST(TrainBase, PbbsMismatchIsFatal) {
  auto st = fx().fresh<float>();
  Dataset partial = fx().pbbs;
  partial.images.pop_back();
  TrainConfig cfg = fx().train;
  cfg.iterations_base = 1;
  EXPECT_THROW(train_base(st, fx().base, &partial, cfg), Error);
  EXPECT_THROW(train_base(st, fx().base, nullptr, cfg), Error);
}

TEST(Checkpoint, RoundTripIsExact) {
  TrainConfig cfg = fx().train;
  cfg.iterations_base = 5;
  auto st = fx().fresh<float>();
  train_base(st, fx().base, &fx().pbbs, cfg);
  const fs::path ck = fs::temp_directory_path() / "uofs_roundtrip.ckpt";
  save_checkpoint(ck, st, {"abc", {{"note", 1}}});
  auto back = load_checkpoint(ck);
  EXPECT_EQ(snapshot(back.state.model), snapshot(st.model));
  EXPECT_EQ(back.state.history, st.history);
  EXPECT_EQ(back.state.step, 5);
  EXPECT_EQ(back.state.model.class_ids, st.model.class_ids);
  EXPECT_EQ(back.meta.extra["note"], 1);
  EXPECT_EQ(back.state.optimizer.velocity.size(), st.optimizer.velocity.size());
  std::ofstream(ck, std::ios::binary) << "garbage";
  EXPECT_THROW(load_checkpoint(ck), Error);
  fs::remove(ck);
}

TEST(Finetune, FrozenParametersUntouched) {
  TrainConfig cfg = fx().train;
  cfg.iterations_base = 10;
  cfg.iterations_finetune = 15;
  auto st = fx().fresh<float>();
  train_base(st, fx().base, &fx().pbbs, cfg);
  const auto split = make_split(fx().full, fx().novel, 2, 0);
  const Dataset ft = finetune_view(fx().full, split);
  const std::vector<int> novel(fx().novel.begin(), fx().novel.end());
  auto tuned = finetune(st.model, ft, novel, cfg);
  auto before = st.model.parameters();
  auto after = tuned.model.parameters();
  ASSERT_EQ(before.size(), after.size());
  int trainable_changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].name == "head.W_cls") continue;  // grown by the novel prototypes
    const bool same = std::equal(before[i].value, before[i].value + before[i].size, after[i].value);
    if (frozen_in_finetune(before[i].name, false))
      EXPECT_TRUE(same) << before[i].name;
    else
      trainable_changed += !same;
  }
  EXPECT_GT(trainable_changed, 0);
  EXPECT_EQ(tuned.model.n_classes(), int(fx().base_classes.size() + novel.size()));
}

TEST(Finetune, ZeroIterationsIsPrototypeInitializedHead) {
  TrainConfig cfg = fx().train;
  cfg.iterations_finetune = 0;
  const auto st = fx().fresh<float>();
  const auto split = make_split(fx().full, fx().novel, 1, 0);
  const Dataset ft = finetune_view(fx().full, split);
  const std::vector<int> novel(fx().novel.begin(), fx().novel.end());
  auto tuned = finetune(st.model, ft, novel, cfg);
  Detector<float> manual = st.model;
  Mat<float> init = support_prototypes(manual, ft, novel);
  float mean_norm = 0;
  for (int c = 0; c < manual.n_classes(); ++c) mean_norm += manual.head.W_cls.col(c).norm();
  mean_norm /= float(manual.n_classes());
  init.col(0) *= mean_norm / init.col(0).norm();
  manual.add_classes(novel, init);
  EXPECT_EQ(snapshot(tuned.model), snapshot(manual));
}

TEST(Finetune, OverlappingClassIsFatal) {
  const auto st = fx().fresh<float>();
  EXPECT_THROW(finetune(st.model, fx().base, {fx().base_classes[0]}, fx().train), Error);
}
