// ntpseg: dataset generation, tokenization, training, evaluation, prediction
// and self-checks from one binary.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>

#include "ntpseg/checkpoint.hpp"
#include "ntpseg/config.hpp"
#include "ntpseg/data.hpp"
#include "ntpseg/error.hpp"
#include "ntpseg/evaluate.hpp"
#include "ntpseg/gradcheck.hpp"
#include "ntpseg/inference.hpp"
#include "ntpseg/objective.hpp"
#include "ntpseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ntpseg;

namespace {

// --section.key overrides (plus hyphenated spellings) for every config key.
struct Overrides {
  std::map<std::string, std::string> values;
  std::string config_path;
  bool no_tcl = false, no_nktp = false, no_het = false;
  int threads = -1;

  void attach(CLI::App* app, bool with_toggles) {
    app->add_option("--config", config_path, "key = value config file");
    static const RunConfig defaults;
    for (const auto& k : config_keys()) {
      std::string names = "--" + k.key;
      std::string hyphen = k.key;
      std::replace(hyphen.begin(), hyphen.end(), '_', '-');
      if (hyphen != k.key) names += ",--" + hyphen;
      app->add_option_function<std::string>(
             names, [this, key = k.key](const std::string& v) { values[key] = v; }, k.help)
          ->default_str(defaults.get(k.key))
          ->type_name("VALUE");
    }
    app->add_option("--threads", threads, "worker threads (falls back to NTPSEG_THREADS, then 1)");
    if (with_toggles) {
      app->add_flag("--no-tcl", no_tcl, "ablation: loss.lambda1 = 0");
      app->add_flag("--no-nktp", no_nktp, "ablation: loss.k = 1");
      app->add_flag("--no-het", no_het, "ablation: loss.het_start_epoch = never");
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& [k, v] : values) cfg.set(k, v);
    if (threads >= 0) cfg.train.threads = threads;
    if (no_tcl) disable_tcl(cfg);
    if (no_nktp) disable_nktp(cfg);
    if (no_het) disable_het(cfg);
    cfg.finalize();
    return cfg;
  }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + p.string() + "'");
  out << text;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_synth(uint64_t seed, int n, int img_size, int n_val, int n_test, const fs::path& out) {
  SynthConfig cfg{seed, n, img_size, n_val, n_test};
  const auto records = generate_synthetic(out, cfg);
  std::printf("wrote %zu samples to %s\n", records.size(), out.string().c_str());
  return 0;
}

int cmd_tokenize(const Overrides& ov, const fs::path& image, const fs::path& mask,
                 const fs::path& text) {
  const RunConfig cfg = ov.resolve();
  const VocabLayout layout = cfg.vocab();
  const MultimodalDocument doc = make_document(read_png(image), read_mask_png(mask),
                                               read_file(text), layout, image.stem().string());
  nlohmann::ordered_json j;
  j["sample_id"] = doc.sample_id;
  j["length"] = doc.ids.size();
  j["grid"] = {doc.grid_h, doc.grid_w};
  j["spans"] = {{"image", {doc.image_block.begin, doc.image_block.end}},
                {"text", {doc.text_block.begin, doc.text_block.end}},
                {"mask", {doc.mask_block.begin, doc.mask_block.end}}};
  j["loss_positions"] = doc.loss_positions();
  j["vocab_size"] = layout.vocab_size;
  j["ids"] = doc.ids;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_train(const Overrides& ov, const fs::path& data, const fs::path& out, bool resume,
              int stop_after) {
  RunConfig cfg = ov.resolve();
  fs::create_directories(out);
  const VocabLayout layout = cfg.vocab();
  const auto train = load_split(data, "train", layout);
  if (train.empty()) throw InvalidInput("no train split in '" + data.string() + "'");
  std::vector<LoadedSample> val;
  if (cfg.train.eval_every > 0) val = load_split(data, "val", layout);

  const fs::path last = out / "last.ckpt";
  std::optional<TrainState> state;
  if (resume && fs::exists(last)) {
    LoadedCheckpoint ck = load_checkpoint(last);
    if (ck.config != cfg)
      throw ConfigError("resume: configuration differs from the one stored in " + last.string());
    state = std::move(ck.state);
    std::fprintf(stderr, "resuming from %s at epoch %d\n", last.string().c_str(), state->epoch);
  }
  write_file(out / "config.txt", cfg.to_text());
  std::ofstream log(out / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);

  TrainHooks hooks;
  hooks.log = &log;
  auto t0 = std::chrono::steady_clock::now();
  hooks.after_epoch = [&](const Trainer& tr, const EpochReport& rep) {
    save_checkpoint(last, cfg, tr.state());
    std::fprintf(stderr,
                 "epoch %3d  step %6lld  loss %.4f  ntp %.4f  tcl %.4f  nktp %.4f  het %.4f%s  acc %.4f  %.0fs\n",
                 rep.epoch, static_cast<long long>(rep.steps), rep.total, rep.ntp, rep.tcl, rep.nktp,
                 rep.het, rep.het_active ? "*" : " ", rep.token_accuracy, seconds_since(t0));
    if (!val.empty() && (rep.epoch + 1) % cfg.train.eval_every == 0) {
      const EvalReport er = evaluate(tr.state().model, val, layout, cfg.decode, cfg.train.threads, "val");
      nlohmann::ordered_json j;
      j["type"] = "eval";
      j["epoch"] = rep.epoch;
      j["split"] = "val";
      j["macro_dice"] = er.macro_dice;
      j["macro_miou"] = er.macro_miou;
      j["micro_dice"] = er.micro_dice;
      j["micro_miou"] = er.micro_miou;
      log << j.dump() << std::endl;
      std::fprintf(stderr, "          val macro dice %.4f  miou %.4f\n", er.macro_dice, er.macro_miou);
    }
    return stop_after <= 0 || rep.epoch + 1 < stop_after;
  };
  TrainState final_state = train_model(cfg, train, hooks, state ? &*state : nullptr);
  if (final_state.epoch < cfg.train.epochs) {
    std::printf("stopped after epoch %d of %d; continue with --resume\n", final_state.epoch,
                cfg.train.epochs);
    return 0;
  }
  save_checkpoint(out / "final.ckpt", cfg, final_state);
  std::printf("trained %d epochs (%lld steps); checkpoint %s\n", final_state.epoch,
              static_cast<long long>(final_state.step), (out / "final.ckpt").string().c_str());
  return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, const std::string& split,
             std::optional<int> beam, int threads, fs::path report_path) {
  LoadedCheckpoint ck = load_checkpoint(ckpt);
  DecodeConfig dc = ck.config.decode;
  if (beam) dc.beam_width = *beam;
  const auto samples = load_split(data, split, ck.config.vocab());
  if (samples.empty()) throw InvalidInput("split '" + split + "' is empty in '" + data.string() + "'");
  const EvalReport rep = evaluate(ck.state.model, samples, ck.config.vocab(), dc,
                                  threads >= 0 ? threads : ck.config.train.threads, split);
  if (report_path.empty()) report_path = ckpt.parent_path() / ("eval_" + split + ".json");
  write_file(report_path, rep.to_json() + "\n");
  std::cout << rep.to_table();
  std::printf("report: %s\n", report_path.string().c_str());
  return 0;
}

int cmd_predict(const fs::path& ckpt, const fs::path& image_path, const std::string& text,
                const fs::path& out, std::optional<int> beam) {
  LoadedCheckpoint ck = load_checkpoint(ckpt);
  DecodeConfig dc = ck.config.decode;
  if (beam) dc.beam_width = *beam;
  const VocabLayout layout = ck.config.vocab();
  const ImageGrid image = read_png(image_path);
  const CodecConfig cc = layout.codec();
  const auto prompt = build_prompt(to_image_ids(encode_image(image, cc), layout), text,
                                   image.height / cc.patch_size, image.width / cc.patch_size, layout);
  const MaskPrediction pred = generate_mask(ck.state.model, prompt, layout, dc);
  write_mask_png(out, pred.mask);
  nlohmann::ordered_json j;
  j["sample_id"] = image_path.stem().string();
  j["logprob"] = pred.logprob;
  j["beam_width"] = dc.beam_width;
  j["grid"] = {image.height / cc.patch_size, image.width / cc.patch_size};
  j["tokens"] = pred.patterns;
  fs::path sidecar = out;
  sidecar.replace_extension(".json");
  write_file(sidecar, j.dump() + "\n");
  std::printf("wrote %s (%dx%d) and %s\n", out.string().c_str(), pred.mask.height, pred.mask.width,
              sidecar.string().c_str());
  return 0;
}

int cmd_gradcheck(const Overrides& ov, int params, uint64_t seed) {
  const RunConfig cfg = ov.resolve();
  GradcheckConfig gc;
  gc.params_per_check = params;
  gc.seed = seed;
  // The check runs on its own tiny model; only the loss weights carry over.
  gc.loss = cfg.loss;
  const auto results = run_gradcheck(gc);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-9s %4zu params  max rel err %.3e  (%s)  %s\n", r.name.c_str(), r.checked,
                r.max_rel_err, r.worst_param.c_str(), r.passed ? "ok" : "FAILED");
    ok = ok && r.passed;
  }
  if (!ok) throw Error("gradcheck_failed", "analytic and numeric gradients disagree");
  return 0;
}

int cmd_ablate(const Overrides& ov, const fs::path& data, const std::string& seeds_text,
               fs::path out) {
  const RunConfig cfg = ov.resolve();
  std::vector<uint64_t> seeds;
  std::stringstream ss(seeds_text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    try {
      seeds.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw ConfigError("--seeds: bad seed '" + tok + "'");
    }
  }
  if (seeds.empty()) seeds = {cfg.train.seed, cfg.train.seed + 1, cfg.train.seed + 2};
  const auto train = load_split(data, "train", cfg.vocab());
  const auto test = load_split(data, "test", cfg.vocab());
  const auto rows = run_ablation(cfg, train, test, seeds, {}, &std::cerr);
  std::cout << ablation_table(rows);
  if (out.empty()) out = data / "ablation.json";
  write_file(out, ablation_json(rows) + "\n");
  std::printf("report: %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ntpseg: referring segmentation as next-token prediction"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  uint64_t synth_seed = 0;
  int synth_n = 32, synth_size = 32, synth_val = 0;
  std::optional<int> synth_test;
  std::string synth_out;
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--n", synth_n, "number of samples")->capture_default_str();
  synth->add_option("--img-size", synth_size, "image side in pixels")->capture_default_str();
  synth->add_option("--n-val", synth_val, "samples in the val split")->capture_default_str();
  synth->add_option("--n-test", synth_test, "samples in the test split (default n / 8)");
  synth->add_option("--out", synth_out, "output directory")->required();

  // tokenize
  auto* tokenize = app.add_subcommand("tokenize", "print the token document of one sample");
  Overrides tok_ov;
  std::string tok_image, tok_mask, tok_text;
  tokenize->add_option("--image", tok_image, "grayscale PNG")->required()->check(CLI::ExistingFile);
  tokenize->add_option("--mask", tok_mask, "mask PNG")->required()->check(CLI::ExistingFile);
  tokenize->add_option("--text", tok_text, "description text file")->required()->check(CLI::ExistingFile);
  tok_ov.attach(tokenize, false);

  // train
  auto* train = app.add_subcommand("train", "train a model");
  Overrides train_ov;
  std::string train_data, train_out;
  bool train_resume = false;
  int train_stop = 0;
  train->add_option("--data", train_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", train_out, "run directory")->required();
  train->add_flag("--resume", train_resume, "continue from <out>/last.ckpt if present");
  train->add_option("--stop-after", train_stop, "end this session once N epochs are complete (0 = run to the end)");
  train_ov.attach(train, true);

  // eval
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_report;
  std::optional<int> eval_beam;
  int eval_threads = -1;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", eval_split, "train, val or test")->capture_default_str();
  eval->add_option("--beam", eval_beam, "beam width (default from the checkpoint config)");
  eval->add_option("--threads", eval_threads, "worker threads");
  eval->add_option("--report", eval_report, "report path (default <ckpt dir>/eval_<split>.json)");

  // predict
  auto* predict = app.add_subcommand("predict", "segment one image");
  std::string pred_ckpt, pred_image, pred_text, pred_out;
  std::optional<int> pred_beam;
  predict->add_option("--ckpt", pred_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--image", pred_image, "grayscale PNG")->required()->check(CLI::ExistingFile);
  predict->add_option("--text", pred_text, "description")->required();
  predict->add_option("--out", pred_out, "output mask PNG (a .json sidecar is written next to it)")->required();
  predict->add_option("--beam", pred_beam, "beam width");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  Overrides gc_ov;
  int gc_params = 200;
  uint64_t gc_seed = 7;
  gradcheck->add_option("--params", gc_params, "parameters sampled per objective")->capture_default_str();
  gradcheck->add_option("--seed", gc_seed, "sampling seed")->capture_default_str();
  gc_ov.attach(gradcheck, false);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "baseline / +TCL / +NkTP / +HET comparison");
  Overrides ab_ov;
  std::string ab_data, ab_seeds, ab_out;
  ablate->add_option("--data", ab_data, "dataset root with train and test splits")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--seeds", ab_seeds, "comma-separated seeds (default: train.seed + 0,1,2)");
  ablate->add_option("--out", ab_out, "JSON report path (default <data>/ablation.json)");
  ab_ov.attach(ablate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_seed, synth_n, synth_size, synth_val, synth_test.value_or(synth_n / 8), synth_out);
    if (*tokenize) return cmd_tokenize(tok_ov, tok_image, tok_mask, tok_text);
    if (*train) return cmd_train(train_ov, train_data, train_out, train_resume, train_stop);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_beam, eval_threads, eval_report);
    if (*predict) return cmd_predict(pred_ckpt, pred_image, pred_text, pred_out, pred_beam);
    if (*gradcheck) return cmd_gradcheck(gc_ov, gc_params, gc_seed);
    if (*ablate) return cmd_ablate(ab_ov, ab_data, ab_seeds, ab_out);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error: %s: %s\n", e.kind().c_str(), msg.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error: internal: %s\n", msg.c_str());
    return 1;
  }
  return 1;
}
