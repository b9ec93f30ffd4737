// SPDX-License-Identifier: Apache-2.0
//
// cma: synth | train | eval | inpaint | gradcheck | ablate
// exit codes: 0 success, 2 configuration error, 3 numeric failure

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "cma/gradcheck.hpp"
#include "cma/image_io.hpp"
#include "cma/kernels.hpp"
#include "cma/trainer.hpp"

namespace {

using namespace cma;

int cmd_synth(const std::string& out_dir, int n, uint64_t seed, int size,
              int patch) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  SynthConfig cfg;
  cfg.image_size = size;
  cfg.patch = patch;
  cfg.validate();
  std::vector<Sample> set;
  for (int i = 0; i < n; ++i) {
    Sample s = synth_sample(mix_seed(seed, 1000 + uint64_t(i)), cfg);
    char name[64];
    std::snprintf(name, sizeof(name), "/%05d.ppm", i);
    write_ppm(out_dir + name, s.image);
    set.push_back(std::move(s));
  }
  write_manifest(out_dir + "/manifest.tsv", set);
  std::printf("wrote %d samples to %s\n", n, out_dir.c_str());
  return 0;
}

std::vector<Box> parse_boxes_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open boxes file " + path);
  std::vector<Box> boxes;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Box b;
    if (!(ss >> b.x0 >> b.y0 >> b.x1 >> b.y1))
      throw ConfigError("boxes file: expected 'x0 y0 x1 y1' per line");
    boxes.push_back(b);
  }
  return boxes;
}

int cmd_inpaint(const std::string& ckpt_path, const std::string& image_path,
                const std::string& mask_spec, const std::string& text,
                const std::string& out_path) {
  auto st = TrainState::from_checkpoint(load_checkpoint(ckpt_path));
  Tensor<float> image = read_ppm(image_path);
  int H = image.dim(1), W = image.dim(2);
  Mask mask;
  if (mask_spec == "center") {
    mask = center_mask(H, W);
  } else if (mask_spec.rfind("boxes:", 0) == 0) {
    mask = object_mask(H, W, parse_boxes_file(mask_spec.substr(6)));
  } else {
    throw ConfigError("mask must be 'center' or 'boxes:FILE'");
  }
  Tensor<float> restored = infer(*st, image, mask, text);
  write_ppm(out_path, restored);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_gradcheck() {
  std::printf("kernels backend: %s\n", kern::backend_name());
  bool ok = true;
  auto ops = gradcheck_op_battery(2024);
  for (const auto& r : ops) {
    bool pass = r.max_rel_err <= 1e-4;
    ok = ok && pass;
    std::printf("  %-24s %10.3e  %s\n", r.name.c_str(), r.max_rel_err,
                pass ? "ok" : "FAIL");
  }
  auto pipe = gradcheck_pipeline(7);
  for (const auto& r : pipe) {
    bool pass = r.max_rel_err <= 1e-4;
    ok = ok && pass;
    std::printf("  %-24s %10.3e  %s\n", r.name.c_str(), r.max_rel_err,
                pass ? "ok" : "FAIL");
  }
  if (!ok) throw NumericError("gradient check failed");
  std::printf("all gradient checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-guided image inpainting with cross-modal alignment"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a captioned-shapes dataset");
  std::string synth_out = "dataset";
  int synth_n = 100, synth_size = 64, synth_patch = 8;
  uint64_t synth_seed = 17;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n", synth_n, "sample count")->required();
  synth->add_option("--seed", synth_seed, "dataset seed");
  synth->add_option("--size", synth_size, "image size (32 or 64)");
  synth->add_option("--patch", synth_patch, "patch size");

  auto* train_cmd = app.add_subcommand("train", "train the model");
  std::string train_cfg, train_out = "run", train_resume;
  train_cmd->add_option("--config", train_cfg, "config file (key = value)")
      ->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");

  auto* eval_cmd = app.add_subcommand("eval", "compute metrics over image dirs");
  std::string eval_restored, eval_gt, eval_report, eval_method = "cma";
  eval_cmd->add_option("--restored", eval_restored, "restored image dir")
      ->required();
  eval_cmd->add_option("--gt", eval_gt, "ground-truth image dir")->required();
  eval_cmd->add_option("--report", eval_report, "report CSV path")->required();
  eval_cmd->add_option("--method", eval_method, "method label");

  auto* inpaint = app.add_subcommand("inpaint", "restore one image");
  std::string in_ckpt, in_image, in_mask = "center", in_text, in_out;
  inpaint->add_option("--ckpt", in_ckpt, "checkpoint file")->required();
  inpaint->add_option("--image", in_image, "input PPM image")->required();
  inpaint->add_option("--mask", in_mask, "center | boxes:FILE");
  inpaint->add_option("--text", in_text, "guiding caption")->required();
  inpaint->add_option("--out", in_out, "output PPM path")->required();

  auto* gc = app.add_subcommand("gradcheck", "run the gradient-check battery");
  (void)gc;

  auto* ab = app.add_subcommand("ablate", "train with objectives dropped");
  std::string ab_cfg, ab_out = "ablation", ab_drop;
  ab->add_option("--config", ab_cfg, "config file")->required();
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--drop", ab_drop,
                 "comma list from cmad,isd,wpa,recon,g_adv,l_adv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_out, synth_n, synth_seed, synth_size,
                       synth_patch);
    if (train_cmd->parsed()) {
      TrainConfig cfg = parse_config_file(train_cfg);
      TrainResult res = train(cfg, train_out, train_resume);
      std::printf("final checkpoint: %s\n", res.final_checkpoint.c_str());
      std::printf("%s\n", MetricReport::csv_header());
      std::printf("%s\n", res.val_report.csv_row("cma").c_str());
      return 0;
    }
    if (eval_cmd->parsed()) {
      MetricReport rep = evaluate_dir(eval_restored, eval_gt);
      write_metric_report(eval_report, rep, eval_method);
      std::printf("%s\n", MetricReport::csv_header());
      std::printf("%s\n", rep.csv_row(eval_method).c_str());
      return 0;
    }
    if (inpaint->parsed())
      return cmd_inpaint(in_ckpt, in_image, in_mask, in_text, in_out);
    if (gc->parsed()) return cmd_gradcheck();
    if (ab->parsed()) {
      std::set<std::string> drop;
      std::stringstream ss(ab_drop);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) drop.insert(item);
      TrainConfig cfg = parse_config_file(ab_cfg);
      TrainResult res = ablate(cfg, drop, ab_out);
      std::printf("%s\n", MetricReport::csv_header());
      std::printf("%s\n", res.val_report.csv_row("ablation").c_str());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
