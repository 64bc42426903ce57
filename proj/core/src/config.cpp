#include "tpmcf/config.hpp"

#include <nlohmann/json.hpp>

#include "tpmcf/errors.hpp"

namespace tpmcf {

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::gcmf: return "gcmf";
    case Mode::pte: return "pte";
    case Mode::full: return "full";
  }
  return "full";
}

Mode parse_mode(std::string_view text) {
  if (text == "gcmf") return Mode::gcmf;
  if (text == "pte") return Mode::pte;
  if (text == "full" || text == "tpmcf") return Mode::full;
  throw InvalidParameter("unknown mode '" + std::string(text) + "' (expected gcmf, pte or full)");
}

std::optional<double> ExperimentConfig::value_cap() const {
  if (qos == "rt") return 20.0;
  return std::nullopt;
}

std::string ExperimentConfig::dataset_name() const {
  if (synthetic()) return "synthetic";
  return dataset.filename().string();
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidParameter("config: " + what); };
  if (qos != "rt" && qos != "tp") fail("qos must be rt or tp");
  if (!synthetic() && (n == 0 || m == 0 || T == 0)) fail("n, m and T must be positive");
  if (!(density > 0.0 && density < 1.0)) fail("density must be in (0, 1)");
  if (!(lambda >= 0.0 && lambda < 1.0)) fail("lambda must be in [0, 1)");
  if (forest_trees == 0) fail("forest_trees must be positive");
  if (forest_subsample < 2) fail("forest_subsample must be at least 2");
  if (features.mask.empty()) fail("feature mask selects nothing");
  if (features.mask.qos && features.f_q == 0) fail("f_q must be positive");
  if (features.mask.correlation && features.f_c == 0) fail("f_c must be positive");
  if (gcmf.f_prime == 0) fail("f_prime must be positive");
  if (!(gcmf.gamma_s > 0.0)) fail("gamma_s must be positive");
  if (!(pte.gamma_t > 0.0)) fail("gamma_t must be positive");
  if (pte.window == 0) fail("window must be positive");
  if (pte.heads == 0 || pte.d_k == 0 || pte.d_v == 0) fail("heads, d_k and d_v must be positive");
  if (pte.fc_layers == 0) fail("fc_layers must be positive");
  if (pte.conv_width % 2 == 0) fail("conv_width must be odd");
  if (!(pte.dropout >= 0.0 && pte.dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (pte.batch == 0) fail("batch must be positive");
  if (seeds.empty()) fail("at least one seed is required");
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.synth.n = 40;
  c.synth.m = 120;
  c.synth.T = 32;
  c.synth.rank = 3;
  c.synth.density = 0.2;
  c.synth.seed = 7;
  c.n = c.synth.n;
  c.m = c.synth.m;
  c.T = c.synth.T;
  c.density = 0.8;
  c.lambda = 0.0;
  c.features.f_q = 10;
  c.features.f_c = 10;
  c.features.mf.iterations = 150;
  c.features.autoencoder.hidden = 64;
  c.features.autoencoder.epochs = 40;
  c.gcmf.f_prime = 32;
  c.gcmf.epochs = 600;
  c.gcmf.optimizer.lr = 2e-3;
  c.pte.heads = 2;
  c.pte.d_k = 16;
  c.pte.d_v = 16;
  c.pte.blocks = 2;
  c.pte.fc_hidden = 32;
  c.pte.epochs = 20;
  c.pte.batch = 64;
  c.pte.dropout = 0.0;
  c.seeds = {1};
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  auto adamw = [](const AdamWConfig& a) {
    return json{{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"epsilon", a.epsilon},
                {"weight_decay", a.weight_decay}};
  };
  json j;
  j["dataset"] = c.dataset.string();
  j["qos"] = c.qos;
  j["n"] = c.n;
  j["m"] = c.m;
  j["T"] = c.T;
  j["density"] = c.density;
  j["lambda"] = c.lambda;
  j["forest"] = {{"trees", c.forest_trees}, {"subsample", c.forest_subsample}};
  j["features"] = {{"f_q", c.features.f_q},
                   {"f_c", c.features.f_c},
                   {"mask", c.features.mask.to_string()},
                   {"mf", {{"iterations", c.features.mf.iterations},
                           {"reg", c.features.mf.reg},
                           {"init_scale", c.features.mf.init_scale}}},
                   {"autoencoder", {{"hidden", c.features.autoencoder.hidden},
                                    {"epochs", c.features.autoencoder.epochs},
                                    {"batch", c.features.autoencoder.batch},
                                    {"lr", c.features.autoencoder.lr},
                                    {"weight_decay", c.features.autoencoder.weight_decay}}},
                   {"autoencoder_max_rows", c.features.autoencoder_max_rows},
                   {"standardize", c.features.standardize}};
  j["gcmf"] = {{"f_prime", c.gcmf.f_prime},
               {"gamma_s", c.gcmf.gamma_s},
               {"optimizer", adamw(c.gcmf.optimizer)},
               {"epochs", c.gcmf.epochs},
               {"patience", c.gcmf.patience},
               {"min_rel_improvement", c.gcmf.min_rel_improvement},
               {"per_time_step", c.gcmf.per_time_step}};
  j["pte"] = {{"window", c.pte.window},
              {"heads", c.pte.heads},
              {"d_k", c.pte.d_k},
              {"d_v", c.pte.d_v},
              {"blocks", c.pte.blocks},
              {"fc_layers", c.pte.fc_layers},
              {"fc_hidden", c.pte.fc_hidden},
              {"conv_channels", c.pte.conv_channels},
              {"conv_width", c.pte.conv_width},
              {"dropout", c.pte.dropout},
              {"gamma_t", c.pte.gamma_t},
              {"optimizer", adamw(c.pte.optimizer)},
              {"epochs", c.pte.epochs},
              {"batch", c.pte.batch},
              {"plateau_factor", c.pte.plateau_factor},
              {"plateau_patience", c.pte.plateau_patience},
              {"pad_short_windows", c.pte.pad_short_windows}};
  j["mode"] = to_string(c.mode);
  j["seeds"] = c.seeds;
  if (c.synthetic()) {
    j["synth"] = {{"n", c.synth.n},
                  {"m", c.synth.m},
                  {"T", c.synth.T},
                  {"rank", c.synth.rank},
                  {"density", c.synth.density},
                  {"noise", c.synth.noise},
                  {"outlier_fraction", c.synth.outlier_fraction},
                  {"max_amplitude", c.synth.max_amplitude},
                  {"unit_factors", c.synth.unit_factors},
                  {"seed", c.synth.seed}};
  }
  return j;
}

}  // namespace tpmcf
