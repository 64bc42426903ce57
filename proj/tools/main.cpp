#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "commands.hpp"
#include "errors.hpp"
#include "options.hpp"
#include "tpmcf/errors.hpp"

using namespace tpmcf::cli;

namespace {

CLI::App* stage_command(CLI::App& app, const char* name, const char* about, StageOptions& o, const char* output_help) {
  auto* sub = app.add_subcommand(name, about);
  add_run_options(*sub, o.run);
  sub->add_option("-o,--output", o.output, output_help)->group("Output");
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("tpmcf"));
  spdlog::set_level(spdlog::level::warn);

  CLI::App app{"Temporal QoS prediction: features, graph convolution, transformer encoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tpmcf 0.3.0");

  IngestOptions ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Parse a WSDREAM file into a tensor cache and print its summary");
  ingest_cmd->option_defaults()->always_capture_default();
  ingest_cmd->add_option("-i,--input", ingest.input, "WSDREAM text file (plain or gzip)")->required();
  ingest_cmd->add_option("-o,--output", ingest.output, "Tensor cache to write");
  ingest_cmd->add_option("--qos", ingest.qos, "QoS parameter (rt caps values at 20)")
      ->check(CLI::IsMember({"rt", "tp"}));
  ingest_cmd->add_option("--n", ingest.n, "Number of users");
  ingest_cmd->add_option("--m", ingest.m, "Number of services");
  ingest_cmd->add_option("--T", ingest.T, "Number of time-steps");
  ingest_cmd->add_option("--seed", ingest.seed, "Accepted for uniformity; ingestion is deterministic");
  ingest_cmd->add_option("--log-level", ingest.log_level, "trace, debug, info, warn, error or off");

  OutliersOptions outliers;
  auto* outliers_cmd = app.add_subcommand("outliers", "Isolation-forest filter: write filtered tensor and report");
  add_run_options(*outliers_cmd, outliers.run);
  outliers_cmd->add_option("-o,--output", outliers.output, "Filtered tensor cache")->group("Output");
  outliers_cmd->add_option("--report", outliers.report, "Outlier report JSON")->group("Output");
  outliers_cmd->add_flag("--scores", outliers.scores, "Include every anomaly score in the report")->group("Output");

  StageOptions features, gcmf, pte;
  auto* features_cmd =
      stage_command(app, "features", "Build and store the initial embeddings of every time-step", features,
                    "Directory for F####.bin and split.json (default: features)");
  auto* gcmf_cmd = stage_command(app, "train-gcmf", "Train the graph-convolution model and store embeddings", gcmf,
                                 "Directory for W####.bin and E####.bin (default: gcmf)");
  auto* pte_cmd = stage_command(app, "train-pte", "Train the transformer encoder (--mode pte or full)", pte,
                                "Checkpoint path (default: pte.bin)");

  PredictOptions predict;
  auto* predict_cmd = app.add_subcommand("predict", "Predict QoS for a triples file (default: the test split)");
  add_run_options(*predict_cmd, predict.run);
  predict_cmd->add_option("--triples", predict.triples, "File of 'user service timestep' lines")->group("Input");
  predict_cmd->add_option("-o,--output", predict.output, "Predictions CSV ('-' = stdout)")->group("Output");

  EvaluateOptions evaluate;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Run the full experiment and print the JSON report");
  add_run_options(*evaluate_cmd, evaluate.run);
  evaluate_cmd->add_option("-o,--output", evaluate.output, "JSON report ('-' = stdout)")->group("Output");
  evaluate_cmd->add_option("--csv", evaluate.csv, "Append a one-line CSV summary to this file")->group("Output");
  evaluate_cmd->add_option("--per-step-csv", evaluate.per_step_csv, "Write timestep,mae rows")->group("Output");
  evaluate_cmd->add_flag("--timing", evaluate.timing, "Include prediction latency in the JSON report")
      ->group("Output");

  AblateOptions ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Module and feature ablations as CSV rows");
  add_run_options(*ablate_cmd, ablate.run);
  ablate_cmd->add_option("--modes", ablate.modes, "Modes compared on the full feature set")
      ->delimiter(',')
      ->group("Ablation");
  ablate_cmd->add_option("--masks", ablate.masks, "Feature masks ('+' joins blocks) run with --mode")
      ->delimiter(',')
      ->group("Ablation");
  ablate_cmd->add_option("-o,--output", ablate.output, "CSV output ('-' = stdout)")->group("Output");

  SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate over a grid of one hyperparameter");
  add_run_options(*sweep_cmd, sweep.run);
  sweep_cmd
      ->add_option("--param", sweep.param,
                   "T|window, h|heads, C1|blocks, f_prime, gamma_s, gamma_t, lambda or density")
      ->required()
      ->group("Sweep");
  sweep_cmd->add_option("--values", sweep.values, "Comma-separated values")->delimiter(',')->required()->group("Sweep");
  sweep_cmd->add_option("-o,--output", sweep.output, "CSV output ('-' = stdout)")->group("Output");

  SynthCommandOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset in WSDREAM format");
  synth_cmd->option_defaults()->always_capture_default();
  synth_cmd->add_option("-o,--output", synth.output, "Output text file")->required();
  synth_cmd->add_option("--planted", synth.planted, "Write planted outlier triples as CSV");
  synth_cmd->add_option("--n", synth.synth.n, "Users");
  synth_cmd->add_option("--m", synth.synth.m, "Services");
  synth_cmd->add_option("--T", synth.synth.T, "Time-steps");
  synth_cmd->add_option("--rank", synth.synth.rank, "Latent rank");
  synth_cmd->add_option("--density", synth.synth.density, "Observed fraction per time-step");
  synth_cmd->add_option("--noise", synth.synth.noise, "Gaussian noise level");
  synth_cmd->add_option("--outliers", synth.synth.outlier_fraction, "Fraction of entries scaled by 10");
  synth_cmd->add_option("--amplitude", synth.synth.max_amplitude, "Maximum temporal modulation amplitude");
  synth_cmd->add_flag("--unit-factors", synth.synth.unit_factors, "All latent factors equal to 1");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--log-level", synth.log_level, "trace, debug, info, warn, error or off");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const std::pair<CLI::App*, RunOptions*> configurable[] = {
        {outliers_cmd, &outliers.run}, {features_cmd, &features.run}, {gcmf_cmd, &gcmf.run},
        {pte_cmd, &pte.run},           {predict_cmd, &predict.run},   {evaluate_cmd, &evaluate.run},
        {ablate_cmd, &ablate.run},     {sweep_cmd, &sweep.run}};
    for (const auto& [cmd, run] : configurable) {
      if (*cmd && !run->config_file.empty()) apply_config_file(*cmd, run->config_file);
    }
    if (*ingest_cmd) return run_ingest(ingest);
    if (*outliers_cmd) return run_outliers(outliers);
    if (*features_cmd) return run_features(features);
    if (*gcmf_cmd) return run_train_gcmf(gcmf);
    if (*pte_cmd) return run_train_pte(pte);
    if (*predict_cmd) return run_predict(predict);
    if (*evaluate_cmd) return run_evaluate(evaluate);
    if (*ablate_cmd) return run_ablate(ablate);
    if (*sweep_cmd) return run_sweep(sweep);
    if (*synth_cmd) return run_synth(synth);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for the list of options.\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
