#include "options.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include <spdlog/spdlog.h>

#include "errors.hpp"
#include "tpmcf/errors.hpp"

namespace tpmcf::cli {

void add_run_options(CLI::App& app, RunOptions& o) {
  auto& c = o.config;
  app.option_defaults()->always_capture_default();
  app.add_option("--config", o.config_file, "Flat 'key = value' file; command-line flags take precedence");

  app.add_option("--dataset", c.dataset, "WSDREAM file (plain or gzip) or tensor cache; empty = synthetic")
      ->group("Data");
  app.add_option("--qos", c.qos, "QoS parameter")->check(CLI::IsMember({"rt", "tp"}))->group("Data");
  app.add_option("--n", c.n, "Number of users")->group("Data");
  app.add_option("--m", c.m, "Number of services")->group("Data");
  app.add_option("--T", c.T, "Number of time-steps")->group("Data");
  app.add_option("--density", c.density, "Fraction of observed entries used for training")->group("Data");
  app.add_option("--lambda", c.lambda, "Outlier ratio removed before splitting")->group("Data");
  app.add_option("--forest-trees", c.forest_trees, "Isolation forest size")->group("Data");
  app.add_option("--forest-subsample", c.forest_subsample, "Isolation forest subsample size")->group("Data");

  app.add_option("--synth-n", c.synth.n, "Synthetic users")->group("Synthetic data");
  app.add_option("--synth-m", c.synth.m, "Synthetic services")->group("Synthetic data");
  app.add_option("--synth-T", c.synth.T, "Synthetic time-steps")->group("Synthetic data");
  app.add_option("--synth-rank", c.synth.rank, "Latent rank")->group("Synthetic data");
  app.add_option("--synth-density", c.synth.density, "Observed fraction per time-step")->group("Synthetic data");
  app.add_option("--synth-noise", c.synth.noise, "Gaussian noise level")->group("Synthetic data");
  app.add_option("--synth-outliers", c.synth.outlier_fraction, "Fraction of entries scaled by 10")
      ->group("Synthetic data");
  app.add_option("--synth-amplitude", c.synth.max_amplitude, "Maximum temporal modulation amplitude")
      ->group("Synthetic data");
  app.add_option("--synth-seed", c.synth.seed, "Generator seed")->group("Synthetic data");

  app.add_option("--f-q", c.features.f_q, "QoS matrix-factorisation feature width")->group("Features");
  app.add_option("--f-c", c.features.f_c, "Correlation autoencoder code width")->group("Features");
  app.add_option("--mask", o.mask, "Feature blocks: comma list of stat,qos,corr or 'all'")->group("Features");
  app.add_option("--mf-iterations", c.features.mf.iterations, "Matrix factorisation iterations")->group("Features");
  app.add_option("--mf-reg", c.features.mf.reg, "Matrix factorisation L2 weight")->group("Features");
  app.add_option("--ae-hidden", c.features.autoencoder.hidden, "Autoencoder hidden width")->group("Features");
  app.add_option("--ae-epochs", c.features.autoencoder.epochs, "Autoencoder epochs")->group("Features");
  app.add_option("--ae-lr", c.features.autoencoder.lr, "Autoencoder learning rate")->group("Features");
  app.add_option("--ae-max-rows", c.features.autoencoder_max_rows, "Autoencoder training rows per side")
      ->group("Features");
  app.add_option("--standardize", c.features.standardize, "Standardise embedding columns")->group("Features");

  app.add_option("--f-prime", c.gcmf.f_prime, "Graph-convolution width f'")->group("GCMF");
  app.add_option("--gamma-s", c.gcmf.gamma_s, "Cauchy scale of the spatial loss")->group("GCMF");
  app.add_option("--gcmf-lr", c.gcmf.optimizer.lr, "GCMF learning rate")->group("GCMF");
  app.add_option("--gcmf-weight-decay", c.gcmf.optimizer.weight_decay, "GCMF AdamW weight decay")->group("GCMF");
  app.add_option("--gcmf-epochs", c.gcmf.epochs, "GCMF epochs")->group("GCMF");
  app.add_option("--gcmf-patience", c.gcmf.patience, "Epochs without improvement before stopping")->group("GCMF");
  app.add_option("--per-time-step", c.gcmf.per_time_step, "Separate GCMF weights per time-step")->group("GCMF");

  app.add_option("--window", c.pte.window, "Window length")->group("PTE");
  app.add_option("--heads", c.pte.heads, "Attention heads")->group("PTE");
  app.add_option("--d-k", c.pte.d_k, "Query/key width per head")->group("PTE");
  app.add_option("--d-v", c.pte.d_v, "Value width per head")->group("PTE");
  app.add_option("--blocks", c.pte.blocks, "Number of encoder blocks (C1)")->group("PTE");
  app.add_option("--fc-layers", c.pte.fc_layers, "Fully connected layers in the head (C2)")->group("PTE");
  app.add_option("--fc-hidden", c.pte.fc_hidden, "Hidden width of the head")->group("PTE");
  app.add_option("--conv-channels", c.pte.conv_channels, "Channels of the first convolution")->group("PTE");
  app.add_option("--dropout", c.pte.dropout, "Dropout between the convolutions")->group("PTE");
  app.add_option("--gamma-t", c.pte.gamma_t, "Cauchy scale of the temporal loss")->group("PTE");
  app.add_option("--pte-lr", c.pte.optimizer.lr, "PTE learning rate")->group("PTE");
  app.add_option("--pte-weight-decay", c.pte.optimizer.weight_decay, "PTE AdamW weight decay")->group("PTE");
  app.add_option("--pte-epochs", c.pte.epochs, "PTE epochs")->group("PTE");
  app.add_option("--batch", c.pte.batch, "PTE minibatch size")->group("PTE");
  app.add_option("--pad-short-windows", c.pte.pad_short_windows, "Pad windows that start before t = 0")
      ->group("PTE");

  app.add_option("--mode", o.mode, "Model: gcmf, pte or full")
      ->check(CLI::IsMember({"gcmf", "pte", "full"}))
      ->group("Run");
  app.add_option("--seeds", c.seeds, "Master seeds, one run each")->delimiter(',')->group("Run");
  app.add_option("--seed", o.seed, "Single master seed (overrides --seeds)")->group("Run");
  app.add_option("--cache-dir", o.cache_dir, "Artifact cache (default: $TPMCF_CACHE_DIR or .tpmcf-cache)")
      ->group("Run");
  app.add_flag("--no-cache", o.no_cache, "Do not read or write cached artifacts")->group("Run");
  app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error or off")->group("Run");
}

void apply_config_file(CLI::App& app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  const auto items = CLI::ConfigTOML().from_config(in);
  for (const auto& item : items) {
    if (!item.parents.empty() || item.name == "++" || item.name == "--") {
      throw UsageError(path + ": sections are not supported (" + item.fullname() + ")");
    }
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = app.get_option_no_throw("--" + key);
    if (opt == nullptr || item.name == "config") throw UsageError(path + ": unknown key '" + item.name + "'");
    if (opt->count() > 0) continue;  // the command line wins
    try {
      if (opt->get_type_size() == 0) {
        opt->add_result(item.inputs.empty() ? std::string("true") : item.inputs.front());
      } else {
        for (const auto& v : item.inputs) opt->add_result(v);
      }
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError(path + ": " + item.name + ": " + e.what());
    }
  }
}

ExperimentConfig resolve(const RunOptions& o) {
  ExperimentConfig c = o.config;
  c.features.mask = FeatureMask::parse(o.mask);
  c.mode = parse_mode(o.mode);
  if (o.seed) c.seeds = {*o.seed};
  if (o.no_cache) {
    c.cache_dir.clear();
  } else if (!o.cache_dir.empty()) {
    c.cache_dir = o.cache_dir;
  } else if (const char* env = std::getenv("TPMCF_CACHE_DIR"); env != nullptr && *env != '\0') {
    c.cache_dir = env;
  } else {
    c.cache_dir = ".tpmcf-cache";
  }
  c.validate();
  return c;
}

void apply_log_level(const std::string& level) {
  const auto parsed = spdlog::level::from_str(level);
  if (parsed == spdlog::level::off && level != "off") throw InvalidParameter("unknown log level '" + level + "'");
  spdlog::set_level(parsed);
}

}  // namespace tpmcf::cli
