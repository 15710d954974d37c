#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "hiseg/commands.hpp"

namespace {

hiseg::RunConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  hiseg::RunConfig rc = hiseg::run_config_from_file(path);
  if (seed) {
    rc.seed = *seed;
    rc.model.seed = *seed;
    rc.data.seed = *seed;
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hiseg: hierarchical part/object segmentation on synthetic shapes"};
  app.require_subcommand(1);

  std::string config_path, out_path, train_path, val_path, data_path, checkpoint;
  std::optional<std::uint64_t> seed;
  int index = 0;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset file");
  gen->add_option("--config", config_path, "run config JSON")->required();
  gen->add_option("--out", out_path, "output dataset path")->required();
  gen->add_option("--seed", seed, "seed override");

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--train", train_path, "training dataset")->required();
  train->add_option("--val", val_path, "validation dataset")->required();
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--seed", seed, "seed override");

  hiseg::EvalOptions eopts;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_path, "dataset to evaluate")->required();
  eval->add_option("--out", out_path, "output directory")->required();
  eval->add_flag("--occlude", eopts.occlude, "also evaluate under the occlusion protocol");
  eval->add_option("--upsample", eopts.upsample, "assoc | bilinear")
      ->check(CLI::IsMember({"assoc", "bilinear"}));
  eval->add_option("--seed", seed, "seed for occluder placement");
  eval->add_option("--threads", eopts.threads, "worker threads (0 = auto)");

  hiseg::EmergeOptions mopts;
  auto* emerge = app.add_subcommand("emerge", "emergence probe over association matrices");
  emerge->add_option("--config", config_path, "run config JSON")->required();
  emerge->add_option("--train", train_path, "training dataset (when no checkpoint given)");
  emerge->add_option("--data", data_path, "probe dataset")->required();
  emerge->add_option("--checkpoint", mopts.checkpoint, "existing single-supervision checkpoint");
  emerge->add_option("--level", mopts.level, "superpixel | group")
      ->check(CLI::IsMember({"superpixel", "group"}));
  emerge->add_option("--topk", mopts.topk, "oracle mask budget");
  emerge->add_option("--out", out_path, "output directory")->required();
  emerge->add_option("--seed", seed, "seed override");

  auto* dump = app.add_subcommand("dump", "dump predictions and association maps for one sample");
  dump->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  dump->add_option("--data", data_path, "dataset")->required();
  dump->add_option("--index", index, "sample index");
  dump->add_option("--out", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return hiseg::cmd_gen(load_config(config_path, seed), out_path);
    if (train->parsed())
      return hiseg::cmd_train(load_config(config_path, seed), train_path, val_path, out_path);
    if (eval->parsed()) {
      if (seed) eopts.seed = *seed;
      return hiseg::cmd_eval(checkpoint, data_path, eopts, out_path);
    }
    if (emerge->parsed()) {
      if (mopts.checkpoint.empty() && train_path.empty())
        throw std::invalid_argument("emerge: provide --checkpoint or --train");
      return hiseg::cmd_emerge(load_config(config_path, seed), train_path, data_path, mopts,
                               out_path);
    }
    if (dump->parsed()) return hiseg::cmd_dump(checkpoint, data_path, index, out_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
