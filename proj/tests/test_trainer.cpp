// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cma/gradcheck.hpp"
#include "cma/trainer.hpp"

using namespace cma;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_cfg() {
  TrainConfig c;
  c.image_size = 32;
  c.patch = 8;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 32;
  c.max_text_len = 16;
  c.batch_size = 2;
  c.max_steps = 4;
  c.n_samples = 4;
  c.n_val = 2;
  c.warmup_steps = 2;
  c.ckpt_every = 2;
  c.seed = 5;
  c.wpa.max_iters = 50;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<Sample> make_batch(const TrainConfig& cfg, int count,
                               std::vector<Mask>* masks) {
  SynthConfig sc = cfg.synth_config();
  std::vector<Sample> batch;
  for (int i = 0; i < count; ++i) {
    batch.push_back(synth_sample(mix_seed(cfg.seed, 1000 + uint64_t(i)), sc));
    masks->push_back(center_mask(cfg.image_size, cfg.image_size));
  }
  return batch;
}

}  // namespace

TEST_CASE("config serialize/parse round trip and unknown keys") {
  TrainConfig c = tiny_cfg();
  c.weights.lambda = 1.5;
  c.wpa.epsilon = 0.07;
  std::string text = serialize_config(c);
  TrainConfig back = parse_config_text(text);
  CHECK(serialize_config(back) == text);

  CHECK_THROWS_AS(parse_config_text("bogus_key = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("lr == 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("mask_mode = diagonal\n"), ConfigError);
  TrainConfig ok = parse_config_text("# comment only\n\n");
  CHECK(ok.lr == doctest::Approx(1e-4));
}

TEST_CASE("batch indices are stateless in (seed, step)") {
  auto a = batch_indices(7, 12, 8, 100);
  auto b = batch_indices(7, 12, 8, 100);
  CHECK(a == b);
  auto c = batch_indices(7, 13, 8, 100);
  CHECK(a != c);
  for (int i : a) {
    CHECK(i >= 0);
    CHECK(i < 100);
  }
}

TEST_CASE("gradient clipping normalizes the global norm") {
  std::vector<Tensor<float>> params;
  params.push_back(Tensor<float>::zeros({8}, true));
  params.push_back(Tensor<float>::zeros({3}, true));
  // plant a gradient with norm 10x the clip
  float mag = 10.0f / std::sqrt(11.0f);
  for (auto& p : params) {
    float* g = p.grad();
    for (int64_t i = 0; i < p.numel(); ++i) g[i] = mag;
  }
  clip_global_norm(params, 1.0);
  double sq = 0;
  for (auto& p : params)
    for (float g : p.grad_vec()) sq += double(g) * g;
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-5));

  // norms below the clip stay untouched
  for (auto& p : params) {
    p.zero_grad();
    float* g = p.grad();
    for (int64_t i = 0; i < p.numel(); ++i) g[i] = 0.01f;
  }
  std::vector<float> before = params[0].grad_vec();
  clip_global_norm(params, 1.0);
  CHECK(params[0].grad_vec() == before);
}

TEST_CASE("train_step produces a finite record and respects isolation") {
  TrainConfig cfg = tiny_cfg();
  TrainState st(cfg);
  std::vector<Mask> masks;
  auto batch = make_batch(cfg, cfg.batch_size, &masks);
  StepStats stats = train_step(st, batch, masks);
  const LossRecord& r = stats.record;
  for (double v : {r.cmad, r.isd, r.wpa, r.l1, r.g_adv_g, r.l_adv_g,
                   r.g_adv_d, r.l_adv_d, r.total_g, r.total_d})
    CHECK(std::isfinite(v));
  // the state trains on the resolved config (auto gamma overrides filled in)
  CHECK(r.total_g == total_g(r, st.cfg.weights));
  CHECK(r.total_d == total_d(r, st.cfg.weights));
  CHECK(stats.d_step_isolated);
  CHECK(stats.g_step_isolated);
  CHECK(st.step == 1);

  // warmup-linear learning rate
  CHECK(stats.lr == doctest::Approx(cfg.lr * 1.0 / cfg.warmup_steps)
                        .epsilon(1e-12));
  StepStats s2 = train_step(st, batch, masks);
  CHECK(s2.lr == doctest::Approx(cfg.lr).epsilon(1e-12));
  StepStats s3 = train_step(st, batch, masks);
  CHECK(s3.lr == doctest::Approx(cfg.lr).epsilon(1e-12));
}

TEST_CASE("training runs are bit-deterministic") {
  TrainConfig cfg = tiny_cfg();
  fs::remove_all("/tmp/cma_run_a");
  fs::remove_all("/tmp/cma_run_b");
  train(cfg, "/tmp/cma_run_a");
  train(cfg, "/tmp/cma_run_b");
  CHECK(slurp("/tmp/cma_run_a/loss.csv") == slurp("/tmp/cma_run_b/loss.csv"));
  CHECK(slurp("/tmp/cma_run_a/masked_l1.csv") ==
        slurp("/tmp/cma_run_b/masked_l1.csv"));
  CHECK(slurp("/tmp/cma_run_a/ckpt_000004.cma") ==
        slurp("/tmp/cma_run_b/ckpt_000004.cma"));
}

TEST_CASE("checkpoint round trip is byte-identical and rejects bad magic") {
  TrainConfig cfg = tiny_cfg();
  TrainState st(cfg);
  st.step = 3;
  save_checkpoint("/tmp/cma_ck1.cma", st.to_checkpoint());
  Checkpoint loaded = load_checkpoint("/tmp/cma_ck1.cma");
  save_checkpoint("/tmp/cma_ck2.cma", loaded);
  CHECK(slurp("/tmp/cma_ck1.cma") == slurp("/tmp/cma_ck2.cma"));

  std::ofstream bad("/tmp/cma_bad.cma", std::ios::binary);
  bad << "NOPE garbage";
  bad.close();
  CHECK_THROWS_AS(load_checkpoint("/tmp/cma_bad.cma"), IoError);
}

TEST_CASE("resume reproduces the continuous run bit-exactly") {
  TrainConfig four = tiny_cfg();
  fs::remove_all("/tmp/cma_full");
  fs::remove_all("/tmp/cma_half");
  fs::remove_all("/tmp/cma_resumed");
  train(four, "/tmp/cma_full");

  TrainConfig two = four;
  two.max_steps = 2;
  train(two, "/tmp/cma_half");
  train(four, "/tmp/cma_resumed", "/tmp/cma_half/ckpt_000002.cma");

  // final checkpoints byte-identical
  CHECK(slurp("/tmp/cma_full/ckpt_000004.cma") ==
        slurp("/tmp/cma_resumed/ckpt_000004.cma"));

  // resumed loss rows equal the tail of the continuous run
  auto rows = [](const std::string& path) {
    std::ifstream f(path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line)) out.push_back(line);
    return out;
  };
  auto full = rows("/tmp/cma_full/loss.csv");
  auto resumed = rows("/tmp/cma_resumed/loss.csv");
  REQUIRE(full.size() == 5);     // header + 4 steps
  REQUIRE(resumed.size() == 3);  // header + steps 3,4
  CHECK(resumed[1] == full[3]);
  CHECK(resumed[2] == full[4]);

  // config mismatch beyond the horizon fields is rejected
  TrainConfig other = four;
  other.lr = 5e-4;
  CHECK_THROWS_AS(
      train(other, "/tmp/cma_bad_resume", "/tmp/cma_half/ckpt_000002.cma"),
      ConfigError);
}

TEST_CASE("infer with an empty mask returns the input bit-exactly") {
  TrainConfig cfg = tiny_cfg();
  TrainState st(cfg);
  SynthConfig sc = cfg.synth_config();
  Sample s = synth_sample(42, sc);
  Mask empty;
  empty.h = empty.w = cfg.image_size;
  empty.grid.assign(size_t(cfg.image_size) * cfg.image_size, 0.0f);
  Tensor<float> out = infer(st, s.image, empty, s.caption);
  REQUIRE(out.shape() == s.image.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == s.image.data()[i]);

  // off-mask pixels equal the input exactly for a real mask too
  Mask cm = center_mask(cfg.image_size, cfg.image_size);
  Tensor<float> out2 = infer(st, s.image, cm, s.caption);
  for (int y = 0; y < cfg.image_size; ++y)
    for (int x = 0; x < cfg.image_size; ++x)
      if (cm.grid[size_t(y) * cfg.image_size + x] < 0.5f)
        for (int c = 0; c < 3; ++c) {
          int64_t off = (int64_t(c) * cfg.image_size + y) * cfg.image_size + x;
          CHECK(out2.data()[off] == s.image.data()[off]);
        }
}

TEST_CASE("ablate: empty drop reproduces train, dropping adv zeroes total_d") {
  TrainConfig cfg = tiny_cfg();
  cfg.max_steps = 2;
  fs::remove_all("/tmp/cma_ab_base");
  fs::remove_all("/tmp/cma_ab_empty");
  fs::remove_all("/tmp/cma_ab_noadv");
  train(cfg, "/tmp/cma_ab_base");
  ablate(cfg, {}, "/tmp/cma_ab_empty");
  CHECK(slurp("/tmp/cma_ab_base/loss.csv") ==
        slurp("/tmp/cma_ab_empty/loss.csv"));
  CHECK(slurp("/tmp/cma_ab_base/ckpt_000002.cma") ==
        slurp("/tmp/cma_ab_empty/ckpt_000002.cma"));

  ablate(cfg, {"g_adv", "l_adv"}, "/tmp/cma_ab_noadv");
  std::ifstream f("/tmp/cma_ab_noadv/loss.csv");
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    auto pos = line.find_last_of(',');
    CHECK(std::stod(line.substr(pos + 1)) == 0.0);
  }

  CHECK_THROWS_AS(ablate(cfg, {"nonsense"}, "/tmp/cma_ab_bad"), ConfigError);
}

TEST_CASE("full pipeline gradient check at tiny config") {
  auto results = gradcheck_pipeline(7);
  REQUIRE(results.size() >= 3);
  for (const auto& r : results) {
    INFO(r.name);
    CHECK(r.max_rel_err <= 1e-4);
  }
}
