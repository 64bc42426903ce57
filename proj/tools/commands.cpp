#include "commands.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "errors.hpp"
#include "tpmcf/errors.hpp"
#include "tpmcf/eval.hpp"

namespace tpmcf::cli {

namespace {

ExperimentConfig checked(const RunOptions& o) {
  try {
    apply_log_level(o.log_level);
    return resolve(o);
  } catch (const InvalidParameter& e) {
    throw UsageError(e.what());
  }
}

// "-" selects standard output.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) {
      std::filesystem::create_directories(parent);
    }
    file_.open(path);
    if (!file_) throw IoError("cannot write " + path);
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

void print_json(const nlohmann::json& j, const std::string& path) {
  Output out(path);
  out.stream() << j.dump(2) << '\n';
}

std::shared_ptr<const QosTensor> load_shared(const ExperimentConfig& cfg) {
  return std::make_shared<const QosTensor>(load_dataset(cfg));
}

std::filesystem::path prepare_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
  return dir;
}

std::string step_name(const char* prefix, std::size_t t) {
  std::ostringstream s;
  s << prefix << std::setw(4) << std::setfill('0') << t << ".bin";
  return s.str();
}

}  // namespace

std::vector<Triple> read_triples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open triples file " + path);
  std::vector<Triple> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    for (char& ch : line) {
      if (ch == ',' || ch == '\t' || ch == '\r') ch = ' ';
    }
    const auto first = line.find_first_not_of(' ');
    if (first == std::string::npos || line[first] == '#') continue;
    if (std::isdigit(static_cast<unsigned char>(line[first])) == 0) {
      if (out.empty() && number == 1) continue;  // header
      throw ParseError(number, "expected 'user service timestep'");
    }
    std::istringstream fields(line);
    std::uint64_t u = 0, s = 0, t = 0;
    if (!(fields >> u >> s >> t)) throw ParseError(number, "expected 'user service timestep'");
    out.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(t)});
  }
  return out;
}

int run_ingest(const IngestOptions& o) {
  try {
    apply_log_level(o.log_level);
  } catch (const InvalidParameter& e) {
    throw UsageError(e.what());
  }
  LoadOptions opts;
  if (o.qos == "rt") opts.cap = 20.0;
  const QosTensor tensor = load_wsdream(o.input, o.n, o.m, o.T, opts);
  write_tensor_cache(tensor, o.output);
  nlohmann::json j{{"input", o.input}, {"output", o.output}, {"entries", tensor.size()}};
  if (const auto s = try_summarize(tensor)) {
    j["summary"] = to_json(*s);
  } else {
    j["summary"] = nullptr;
  }
  print_json(j, "-");
  return 0;
}

int run_outliers(const OutliersOptions& o) {
  const ExperimentConfig cfg = checked(o.run);
  const QosTensor tensor = load_dataset(cfg);
  IsolationForestOptions opts;
  opts.lambda = cfg.lambda;
  opts.trees = cfg.forest_trees;
  opts.subsample = cfg.forest_subsample;
  // same stream as the pipeline so both remove the same entries
  opts.seed = derive_seed(cfg.seeds.front(), 1);
  const FilterResult r = isolation_forest_filter(tensor, opts);
  write_tensor_cache(r.filtered, o.output);
  print_json(to_json(r.report, o.scores), o.report);
  print_json({{"observed", tensor.size()}, {"removed", r.report.removed.size()}, {"lambda", cfg.lambda},
              {"filtered", o.output}, {"report", o.report}},
             "-");
  return 0;
}

int run_features(const StageOptions& o) {
  const ExperimentConfig cfg = checked(o.run);
  Pipeline p(cfg, cfg.seeds.front());
  const auto& features = p.features();
  const auto dir = prepare_dir(o.output.empty() ? "features" : o.output);
  for (const auto& e : features) write_embedding_cache(e, dir / step_name("F", e.t));
  print_json(to_json(p.split()), (dir / "split.json").string());
  print_json({{"time_steps", features.size()},
              {"rows", features.empty() ? 0 : features.front().matrix.rows()},
              {"cols", features.empty() ? 0 : features.front().matrix.cols()},
              {"output", dir.string()}},
             "-");
  return 0;
}

int run_train_gcmf(const StageOptions& o) {
  const ExperimentConfig cfg = checked(o.run);
  Pipeline p(cfg, cfg.seeds.front());
  const auto& r = p.gcmf();
  const auto dir = prepare_dir(o.output.empty() ? "gcmf" : o.output);
  for (std::size_t k = 0; k < r.models.size(); ++k) save_gcmf(r.models[k], dir / step_name("W", k));
  for (const auto& e : r.embeddings) save_spatial_embeddings(e, dir / step_name("E", e.t));
  nlohmann::json j{{"models", r.models.size()}, {"time_steps", r.embeddings.size()}, {"output", dir.string()}};
  if (!r.epoch_loss.empty()) {
    j["epochs"] = r.epoch_loss.size();
    j["final_loss"] = r.epoch_loss.back();
  }
  print_json(j, "-");
  return 0;
}

int run_train_pte(const StageOptions& o) {
  const ExperimentConfig cfg = checked(o.run);
  if (cfg.mode == Mode::gcmf) throw UsageError("train-pte needs --mode pte or --mode full");
  Pipeline p(cfg, cfg.seeds.front());
  const PteModel& model = p.pte(cfg.mode);
  const std::string path = o.output.empty() ? "pte.bin" : o.output;
  save_pte(model, path);
  print_json({{"mode", to_string(cfg.mode)}, {"window", model.window}, {"width", model.width}, {"output", path}},
             "-");
  return 0;
}

int run_predict(const PredictOptions& o) {
  const ExperimentConfig cfg = checked(o.run);
  Pipeline p(cfg, cfg.seeds.front());
  const std::vector<Triple> triples = o.triples.empty() ? p.split().test : read_triples(o.triples);
  const QosTensor& raw = p.raw();
  for (const auto& t : triples) {
    if (t.user >= raw.users() || t.service >= raw.services() || t.time >= raw.time_steps()) {
      throw RangeError("predict: triple (" + std::to_string(t.user) + ", " + std::to_string(t.service) + ", " +
                       std::to_string(t.time) + ") is outside the dataset");
    }
  }
  const std::vector<double> predicted = p.predict(cfg.mode, triples);
  Output out(o.output);
  auto& s = out.stream();
  s << "user,service,timestep,actual,predicted\n" << std::setprecision(10);
  for (std::size_t k = 0; k < triples.size(); ++k) {
    const auto& t = triples[k];
    s << t.user << ',' << t.service << ',' << t.time << ',';
    if (const auto actual = raw.find(t)) s << *actual;
    s << ',' << predicted[k] << '\n';
  }
  return 0;
}

int run_evaluate(const EvaluateOptions& o) {
  const ExperimentConfig cfg = checked(o.run);
  const EvalReport report = run_experiment(cfg);
  print_json(to_json(report, o.timing), o.output);
  if (!o.csv.empty()) {
    const bool fresh = !std::filesystem::exists(o.csv) || std::filesystem::file_size(o.csv) == 0;
    std::ofstream csv(o.csv, std::ios::app);
    if (!csv) throw IoError("cannot write " + o.csv);
    if (fresh) csv << csv_header() << '\n';
    csv << csv_row(report) << '\n';
  }
  if (!o.per_step_csv.empty()) {
    Output out(o.per_step_csv);
    write_per_step_csv(report, out.stream());
  }
  return 0;
}

int run_ablate(const AblateOptions& o) {
  const ExperimentConfig base = checked(o.run);
  std::vector<Mode> modes;
  std::vector<FeatureMask> masks;
  try {
    for (const auto& m : o.modes) modes.push_back(parse_mode(m));
    for (const auto& m : o.masks) masks.push_back(FeatureMask::parse(m));
  } catch (const InvalidParameter& e) {
    throw UsageError(e.what());
  }
  const auto tensor = load_shared(base);
  Output out(o.output);
  out.stream() << csv_header() << '\n';
  for (const auto& mask : masks) {
    ExperimentConfig cfg = base;
    cfg.features.mask = mask;
    // module ablation on the full feature set, feature ablation on the chosen mode
    const std::vector<Mode> run_modes = mask == FeatureMask{} ? modes : std::vector<Mode>{base.mode};
    std::map<Mode, std::vector<SeedResult>> results;
    for (const auto seed : cfg.seeds) {
      Pipeline p(cfg, seed, tensor);
      for (const auto mode : run_modes) results[mode].push_back(p.evaluate(mode));
    }
    for (const auto mode : run_modes) {
      out.stream() << csv_row(make_report(cfg, mode, std::move(results[mode]))) << '\n' << std::flush;
    }
  }
  return 0;
}

int run_sweep(const SweepOptions& o) {
  const ExperimentConfig base = checked(o.run);
  if (o.values.empty()) throw UsageError("sweep: --values is empty");
  auto as_count = [&](double v) {
    if (!(v >= 1.0) || v != std::floor(v)) {
      throw UsageError("sweep: " + o.param + " takes positive integers, got " + std::to_string(v));
    }
    return static_cast<std::size_t>(v);
  };
  std::vector<ExperimentConfig> configs;
  for (const double v : o.values) {
    ExperimentConfig c = base;
    const std::string& p = o.param;
    if (p == "T" || p == "window") {
      c.pte.window = as_count(v);
    } else if (p == "h" || p == "heads") {
      c.pte.heads = as_count(v);
    } else if (p == "C1" || p == "blocks") {
      c.pte.blocks = as_count(v);
    } else if (p == "f_prime" || p == "f-prime") {
      c.gcmf.f_prime = as_count(v);
    } else if (p == "gamma_s" || p == "gamma-s") {
      c.gcmf.gamma_s = v;
    } else if (p == "gamma_t" || p == "gamma-t") {
      c.pte.gamma_t = v;
    } else if (p == "lambda") {
      c.lambda = v;
    } else if (p == "density") {
      c.density = v;
    } else {
      throw UsageError("sweep: unknown parameter '" + p + "'");
    }
    try {
      c.validate();
    } catch (const InvalidParameter& e) {
      throw UsageError(e.what());
    }
    configs.push_back(std::move(c));
  }
  const auto tensor = load_shared(base);
  Output out(o.output);
  out.stream() << o.param << ",mae,nmae,baseline_mae\n" << std::setprecision(10);
  for (std::size_t k = 0; k < configs.size(); ++k) {
    const EvalReport r = run_experiment(configs[k], tensor);
    out.stream() << o.values[k] << ',' << r.mae << ',' << r.nmae << ',' << r.baseline_mae << '\n' << std::flush;
  }
  return 0;
}

int run_synth(const SynthCommandOptions& o) {
  try {
    apply_log_level(o.log_level);
  } catch (const InvalidParameter& e) {
    throw UsageError(e.what());
  }
  SynthOptions s = o.synth;
  if (o.seed) s.seed = *o.seed;
  std::vector<Triple> planted;
  const QosTensor tensor = synth_tensor(s, nullptr, &planted);
  save_wsdream(tensor, o.output);
  if (!o.planted.empty()) {
    std::ofstream out(o.planted);
    if (!out) throw IoError("cannot write " + o.planted);
    out << "user,service,timestep\n";
    for (const auto& t : planted) out << t.user << ',' << t.service << ',' << t.time << '\n';
  }
  print_json({{"output", o.output}, {"n", s.n}, {"m", s.m}, {"T", s.T}, {"entries", tensor.size()},
              {"planted", planted.size()}},
             "-");
  return 0;
}

}  // namespace tpmcf::cli
