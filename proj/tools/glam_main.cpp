// Command-line front end: dataset generation, training, evaluation,
// gradient and GLAM-algebra verification, cost reports, attention export.
// Exit codes: 0 success, 1 validation/config error, 2 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "glam/analysis.hpp"
#include "glam/config.hpp"
#include "glam/gradcheck.hpp"
#include "glam/serialize.hpp"

namespace fs = std::filesystem;
using namespace glam;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  u64 seed = 0;
  bool seed_set = false;
  int ng = -1;
  bool no_gmsa = false;
  bool no_nlu = false;
  int epochs = -1;
  int batch = -1;
  int stage = 0;
  std::string token = "0,0";
};

void add_config_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "config file (key = value lines)");
  cmd->add_option("--seed", o.seed, "PRNG seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  cmd->add_option("--ng", o.ng, "override number of global tokens");
  cmd->add_flag("--no-gmsa", o.no_gmsa, "disable the G-MSA phase (ablation)");
  cmd->add_flag("--no-nlu", o.no_nlu, "use nearest-neighbor + linear upsampling");
  cmd->add_option("--epochs", o.epochs, "override training epochs");
  cmd->add_option("--batch", o.batch, "override batch size");
}

RunConfig resolve(const CommonOpts& o, DatasetMeta* meta) {
  KvConfig kv;
  if (!o.config_path.empty()) kv = KvConfig::parse_file(o.config_path);
  if (o.seed_set) kv.set("seed", std::to_string(o.seed));
  if (o.ng >= 0) kv.set("ng", std::to_string(o.ng));
  if (o.no_gmsa) kv.set("gmsa", "false");
  if (o.no_nlu) kv.set("nlu", "false");
  if (o.epochs >= 0) kv.set("epochs", std::to_string(o.epochs));
  if (o.batch >= 1) kv.set("batch", std::to_string(o.batch));
  return resolve_config(kv, meta);
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot write '" + path + "'");
  f << content;
}

void echo_config(const RunConfig& rc, const DatasetMeta& meta,
                 const std::string& out_dir) {
  auto text = resolved_config_text(rc, meta);
  std::cout << "resolved config:\n" << text;
  if (!out_dir.empty()) write_text(out_dir + "/config.resolved", text);
}

struct LoadedDataset {
  TaskConfig task;
  int classes = TaskConfig::kClasses;
  std::vector<Sample> train, eval;
};

LoadedDataset load_dataset_dir(const std::string& dir) {
  auto kv = KvConfig::parse_file(dir + "/manifest.txt");
  DatasetMeta meta;
  auto rc = resolve_config(kv, &meta);
  LoadedDataset ds;
  ds.task = rc.task;
  for (int i = 0; i < meta.n_train; ++i)
    ds.train.push_back(load_sample(dir + "/" + sample_filename("train", i),
                                   ds.task.img_h, ds.task.img_w));
  for (int i = 0; i < meta.n_eval; ++i)
    ds.eval.push_back(load_sample(dir + "/" + sample_filename("eval", i),
                                  ds.task.img_h, ds.task.img_w));
  return ds;
}

int cmd_gen_data(const CommonOpts& o) {
  if (o.out_dir.empty()) throw ConfigError("gen-data needs --out DIR");
  DatasetMeta meta;
  auto rc = resolve(o, &meta);
  rc.task.validate();
  fs::create_directories(o.out_dir);
  echo_config(rc, meta, o.out_dir);

  auto train = generate(rc.task, rc.seed, meta.n_train, /*split_tag=*/1);
  auto eval = generate(rc.task, rc.seed, meta.n_eval, /*split_tag=*/2);
  for (int i = 0; i < meta.n_train; ++i)
    save_sample(o.out_dir + "/" + sample_filename("train", i),
                train[static_cast<std::size_t>(i)], rc.task.img_h, rc.task.img_w);
  for (int i = 0; i < meta.n_eval; ++i)
    save_sample(o.out_dir + "/" + sample_filename("eval", i),
                eval[static_cast<std::size_t>(i)], rc.task.img_h, rc.task.img_w);
  write_text(o.out_dir + "/manifest.txt",
             "# glam dataset manifest\n" + resolved_config_text(rc, meta));
  std::cout << "wrote " << meta.n_train << " train + " << meta.n_eval
            << " eval samples to " << o.out_dir << "\n";
  return 0;
}

int cmd_train(const CommonOpts& o) {
  if (o.out_dir.empty() || o.data_dir.empty())
    throw ConfigError("train needs --data DIR and --out DIR");
  DatasetMeta meta;
  auto rc = resolve(o, &meta);
  auto ds = load_dataset_dir(o.data_dir);
  if (ds.task.img_h != rc.model.img_h || ds.task.img_w != rc.model.img_w)
    throw ConfigError("dataset images are " + std::to_string(ds.task.img_h) + "x" +
                      std::to_string(ds.task.img_w) + " but the model expects " +
                      std::to_string(rc.model.img_h) + "x" +
                      std::to_string(rc.model.img_w));
  fs::create_directories(o.out_dir);
  echo_config(rc, meta, o.out_dir);

  Rng mr(rc.seed);
  auto model = SegModel<float>::build(rc.model, mr);
  std::cout << "model parameters: " << model.param_count() << "\n";
  auto result = train_model(model, ds.train, ds.task, rc.train);
  write_text(o.out_dir + "/log.csv", train_log_csv(result.log));
  auto params = model.params();
  save_checkpoint(o.out_dir + "/model.ckpt", params);
  const auto& last = result.log.back();
  std::cout << "trained " << result.total_steps << " steps; final loss "
            << fmt_g(last.loss) << ", final batch mIoU " << fmt_g(last.miou) << "\n";
  std::cout << "wrote " << o.out_dir << "/log.csv and " << o.out_dir
            << "/model.ckpt\n";
  return 0;
}

int cmd_eval(const CommonOpts& o) {
  if (o.out_dir.empty() || o.data_dir.empty())
    throw ConfigError("eval needs --data DIR and --out DIR");
  DatasetMeta meta;
  auto rc = resolve(o, &meta);
  auto ds = load_dataset_dir(o.data_dir);
  echo_config(rc, meta, "");

  Rng mr(rc.seed);
  auto model = SegModel<float>::build(rc.model, mr);
  auto params = model.params();
  load_checkpoint(o.out_dir + "/model.ckpt", params);
  auto res = eval_model(model, ds.eval, ds.task);

  std::string csv = "metric,value\n";
  csv += "miou," + fmt_g(res.metrics.miou) + "\n";
  csv += "mdice," + fmt_g(res.metrics.mdice) + "\n";
  csv += "pixel_acc," + fmt_g(res.metrics.pixel_acc) + "\n";
  csv += "target_acc," + fmt_g(res.target_acc) + "\n";
  for (std::size_t k = 0; k < res.metrics.iou.size(); ++k)
    if (res.metrics.present[k]) {
      csv += "iou_" + std::to_string(k) + "," + fmt_g(res.metrics.iou[k]) + "\n";
      csv += "dice_" + std::to_string(k) + "," + fmt_g(res.metrics.dice[k]) + "\n";
    }
  write_text(o.out_dir + "/eval.csv", csv);
  std::cout << "mIoU " << fmt_g(res.metrics.miou) << ", mDice "
            << fmt_g(res.metrics.mdice) << ", pixel acc "
            << fmt_g(res.metrics.pixel_acc) << ", target-pixel acc "
            << fmt_g(res.target_acc) << " (" << res.target_patches
            << " target patches)\n";
  std::cout << "wrote " << o.out_dir << "/eval.csv\n";
  return 0;
}

int cmd_grad_check(const CommonOpts& o) {
  u64 seed = o.seed_set ? o.seed : 0;
  std::cout << "grad-check seed = " << seed << ", h = " << fmt_g(kGradCheckStep)
            << ", tolerance = " << fmt_g(kGradCheckTolerance) << "\n";
  auto cases = run_grad_check_suite(seed);
  bool ok = true;
  for (const auto& c : cases) {
    bool pass = c.max_rel_err < kGradCheckTolerance;
    ok = ok && pass;
    std::printf("%-26s max rel err %.3e over %lld coords  %s\n", c.name.c_str(),
                c.max_rel_err, static_cast<long long>(c.coords),
                pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 2;
}

int cmd_verify_glam(i64 nr, i64 ng, i64 np, i64 c, u64 seed) {
  std::cout << "verify-glam nr = " << nr << ", ng = " << ng << ", np = " << np
            << ", c = " << c << ", seed = " << seed << "\n";
  if (nr < 1 || ng < 1 || np < 1 || c < 1)
    throw ConfigError("verify-glam dimensions must be positive");
  Rng rng(seed);
  auto p = BareGlamParams<double>::init(c, rng);
  auto g = Tensor<double>::randn({nr, ng, c}, rng);
  auto w = Tensor<double>::randn({nr, np, c}, rng);
  AttentionRecord rec;
  auto fwd = bare_glam_forward(p, g, w, &rec);
  auto composed = bare_global_embedding(rec, g, w);
  double comp_err = 0;
  for (std::size_t i = 0; i < composed.size(); ++i)
    comp_err = std::max(comp_err, std::fabs(composed[i] - fwd.g_out.values()[i]));
  double cons_err = 0, min_weight = 1.0;
  for (i64 r = 0; r < nr; ++r)
    for (i64 k = 0; k < ng; ++k) {
      auto ind = induced_attention(rec, k, r);
      cons_err = std::max(cons_err, std::fabs(ind.patch_mass + ind.global_mass - 1.0));
      for (double wt : ind.patch_weights) min_weight = std::min(min_weight, wt);
    }
  std::cout << "max composition error: " << fmt_g(comp_err, 6) << " (tolerance 1e-10)\n";
  std::cout << "max conservation error: " << fmt_g(cons_err, 6)
            << " (tolerance 1e-12)\n";
  std::cout << "min induced patch weight: " << fmt_g(min_weight, 6)
            << " (must be > 0)\n";
  bool ok = comp_err < 1e-10 && cons_err < 1e-12 && min_weight > 0.0;
  std::cout << (ok ? "verify-glam: ok\n" : "verify-glam: FAIL\n");
  return ok ? 0 : 2;
}

int cmd_flops(const CommonOpts& o) {
  DatasetMeta meta;
  auto rc = resolve(o, &meta);
  echo_config(rc, meta, "");
  auto rep = analyze_cost(rc.model);
  std::printf("%-24s %12s %16s\n", "module", "params", "flops");
  for (const auto& row : rep.rows)
    std::printf("%-24s %12lld %16llu\n", row.name.c_str(),
                static_cast<long long>(row.params),
                static_cast<unsigned long long>(row.flops));
  std::printf("%-24s %12lld %16llu\n", "total",
              static_cast<long long>(rep.total_params),
              static_cast<unsigned long long>(rep.total_flops));
  for (const auto& a : rep.attention)
    std::printf("%s: windowed+glam attention %llu vs full-attention %llu\n",
                a.stage.c_str(), static_cast<unsigned long long>(a.windowed_glam),
                static_cast<unsigned long long>(a.full_equiv));
  if (!o.out_dir.empty()) {
    fs::create_directories(o.out_dir);
    write_text(o.out_dir + "/flops.csv", rep.to_csv());
    write_text(o.out_dir + "/config.resolved", resolved_config_text(rc, meta));
    std::cout << "wrote " << o.out_dir << "/flops.csv\n";
  }
  return 0;
}

int cmd_attn_dump(const CommonOpts& o) {
  if (o.out_dir.empty() || o.data_dir.empty())
    throw ConfigError("attn-dump needs --data DIR and --out DIR");
  DatasetMeta meta;
  auto rc = resolve(o, &meta);
  auto ds = load_dataset_dir(o.data_dir);
  fs::create_directories(o.out_dir);
  echo_config(rc, meta, o.out_dir);

  long long kk = 0, rr = 0;
  if (std::sscanf(o.token.c_str(), "%lld,%lld", &kk, &rr) != 2)
    throw ConfigError("--token expects K,R");
  i64 k = kk, r = rr;

  Rng mr(rc.seed);
  auto model = SegModel<float>::build(rc.model, mr);
  bool loaded = false;
  if (fs::exists(o.out_dir + "/model.ckpt")) {
    auto params = model.params();
    load_checkpoint(o.out_dir + "/model.ckpt", params);
    loaded = true;
  }
  const auto& sample = ds.eval.empty() ? ds.train.front() : ds.eval.front();
  std::vector<float> img(sample.image.begin(), sample.image.end());
  auto image = Tensor<float>::from_values({1, rc.model.img_h, rc.model.img_w, 3},
                                          std::move(img));
  std::string base = "attn_s" + std::to_string(o.stage) + "_k" + std::to_string(k) +
                     "_r" + std::to_string(r);
  auto ex = export_attention(model, image, o.stage, k, r, o.out_dir, base);
  std::ofstream meta_f(ex.meta_path, std::ios::app | std::ios::binary);
  meta_f << "checkpoint: " << (loaded ? "loaded" : "random-init") << "\n";
  meta_f.close();
  std::cout << "patch mass " << fmt_g(ex.patch_mass, 6) << ", global mass "
            << fmt_g(ex.global_mass, 6) << "\n";
  std::cout << "wrote " << ex.csv_path << ", " << ex.pgm_path << ", " << ex.meta_path
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GLAM: windowed attention with global tokens, desk scale"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, eval_o, grad_o, flops_o, attn_o;
  i64 v_nr = 4, v_ng = 2, v_np = 4, v_c = 3;
  u64 v_seed = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic key-patch dataset");
  add_config_flags(gen, gen_o);
  gen->add_option("--out", gen_o.out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a segmentation model");
  add_config_flags(train, train_o);
  train->add_option("--data", train_o.data_dir, "dataset directory")->required();
  train->add_option("--out", train_o.out_dir, "run output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_config_flags(eval, eval_o);
  eval->add_option("--data", eval_o.data_dir, "dataset directory")->required();
  eval->add_option("--out", eval_o.out_dir, "run directory holding model.ckpt")
      ->required();

  auto* grad = app.add_subcommand("grad-check",
                                  "finite-difference check of every layer type");
  grad->add_option("--seed", grad_o.seed, "PRNG seed")->each([&](const std::string&) {
    grad_o.seed_set = true;
  });

  auto* verify = app.add_subcommand(
      "verify-glam", "check the global-embedding composition algebra");
  verify->add_option("--nr", v_nr, "number of windows");
  verify->add_option("--ng", v_ng, "global tokens per window");
  verify->add_option("--np", v_np, "patches per window");
  verify->add_option("--c", v_c, "channels");
  verify->add_option("--seed", v_seed, "PRNG seed");

  auto* flops = app.add_subcommand("flops", "parameter and FLOP report");
  add_config_flags(flops, flops_o);
  flops->add_option("--out", flops_o.out_dir, "directory for flops.csv");

  auto* attn = app.add_subcommand("attn-dump", "export an induced attention map");
  add_config_flags(attn, attn_o);
  attn->add_option("--data", attn_o.data_dir, "dataset directory")->required();
  attn->add_option("--out", attn_o.out_dir, "run directory (checkpoint + outputs)")
      ->required();
  attn->add_option("--stage", attn_o.stage, "capture stage index");
  attn->add_option("--token", attn_o.token, "global token as K,R");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_o);
    if (train->parsed()) return cmd_train(train_o);
    if (eval->parsed()) return cmd_eval(eval_o);
    if (grad->parsed()) return cmd_grad_check(grad_o);
    if (verify->parsed()) return cmd_verify_glam(v_nr, v_ng, v_np, v_c, v_seed);
    if (flops->parsed()) return cmd_flops(flops_o);
    if (attn->parsed()) return cmd_attn_dump(attn_o);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
