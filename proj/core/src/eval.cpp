#include "tpmcf/eval.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "tpmcf/errors.hpp"

namespace tpmcf {

double mae(std::span<const double> actual, std::span<const double> predicted) {
  if (actual.size() != predicted.size()) throw DimensionError("mae: actual and predicted differ in length");
  if (actual.empty()) throw EmptyInput("mae: no pairs");
  double sum = 0.0;
  for (std::size_t k = 0; k < actual.size(); ++k) sum += std::abs(actual[k] - predicted[k]);
  return sum / static_cast<double>(actual.size());
}

double nmae_from_mean(double mae_value, double actual_mean) {
  if (!(actual_mean > 0.0)) throw InvalidParameter("nmae: mean of actual values must be positive");
  return mae_value / actual_mean;
}

double nmae(double mae_value, std::span<const double> actual) {
  if (actual.empty()) throw EmptyInput("nmae: no actual values");
  double sum = 0.0;
  for (double v : actual) sum += v;
  return nmae_from_mean(mae_value, sum / static_cast<double>(actual.size()));
}

double performance_gain(double m1, double m2) {
  if (!(m2 > 0.0)) throw InvalidParameter("performance_gain: reference value must be positive");
  return (m1 - m2) / m2 * 100.0;
}

double improvement_over(double ours, double baseline) {
  if (!(baseline > 0.0)) throw InvalidParameter("improvement_over: baseline must be positive");
  return (baseline - ours) / baseline * 100.0;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned int k = 0; k < len; ++k) out << std::setw(2) << static_cast<int>(digest[k]);
  return out.str();
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  return sha256_hex(std::string_view(reinterpret_cast<const char*>(digest), len));
}

std::string tensor_sha256(const QosTensor& tensor) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  for (const auto& e : tensor.entries()) {
    const std::uint32_t idx[3] = {e.at.user, e.at.service, e.at.time};
    EVP_DigestUpdate(ctx.get(), idx, sizeof(idx));
    EVP_DigestUpdate(ctx.get(), &e.value, sizeof(e.value));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  return sha256_hex(std::string_view(reinterpret_cast<const char*>(digest), len));
}

namespace {

// derive_seed stream tags, one per pipeline stage
enum Stream : std::uint64_t { kForest = 1, kSplit = 2, kFeatures = 3, kGcmf = 4, kPte = 5 };

std::string annotated(const char* stage, const std::exception& e) { return std::string(stage) + ": " + e.what(); }

// Runs one pipeline stage, prefixing the stage name to any library error
// while keeping its type.
template <typename F>
decltype(auto) stage(const char* name, F&& fn) {
  try {
    return fn();
  } catch (const ParseError&) {
    throw;
  } catch (const InvalidParameter& e) {
    throw InvalidParameter(annotated(name, e));
  } catch (const DimensionError& e) {
    throw DimensionError(annotated(name, e));
  } catch (const RangeError& e) {
    throw RangeError(annotated(name, e));
  } catch (const EmptyInput& e) {
    throw EmptyInput(annotated(name, e));
  } catch (const InsufficientData& e) {
    throw InsufficientData(annotated(name, e));
  } catch (const NumericInstability& e) {
    throw NumericInstability(annotated(name, e));
  } catch (const IoError& e) {
    throw IoError(annotated(name, e));
  } catch (const Error& e) {
    throw Error(annotated(name, e));
  }
}

std::string key_of(const nlohmann::json& j) { return sha256_hex(j.dump()); }

void mark_complete(const std::filesystem::path& tmp, const std::filesystem::path& final_dir) {
  std::ofstream(tmp / "complete") << "ok\n";
  std::error_code ec;
  std::filesystem::remove_all(final_dir, ec);
  std::filesystem::rename(tmp, final_dir);
}

std::filesystem::path fresh_tmp(const std::filesystem::path& final_dir) {
  auto tmp = final_dir;
  tmp += ".tmp";
  std::error_code ec;
  std::filesystem::remove_all(tmp, ec);
  std::filesystem::create_directories(tmp);
  return tmp;
}

std::string step_file(const char* prefix, std::size_t t) {
  std::ostringstream name;
  name << prefix << std::setw(4) << std::setfill('0') << t << ".bin";
  return name.str();
}

}  // namespace

bool is_tensor_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::string_view(magic, 4) == "TPMC";
}

QosTensor load_dataset(const ExperimentConfig& config) {
  if (config.synthetic()) return synth_tensor(config.synth);
  if (is_tensor_cache(config.dataset)) return read_tensor_cache(config.dataset);
  LoadOptions opts;
  opts.cap = config.value_cap();
  return load_wsdream(config.dataset, config.n, config.m, config.T, opts);
}

Pipeline::Pipeline(ExperimentConfig config, std::uint64_t seed, std::shared_ptr<const QosTensor> raw)
    : config_(std::move(config)), seed_(seed), raw_(std::move(raw)) {
  config_.validate();
}

std::optional<std::filesystem::path> Pipeline::stage_dir(const std::string& key) const {
  if (config_.cache_dir.empty()) return std::nullopt;
  return config_.cache_dir / key;
}

std::string Pipeline::raw_key() {
  if (!raw_key_) {
    nlohmann::json j;
    if (raw_) {
      // a caller-supplied tensor is keyed by its contents
      j = {{"tensor", tensor_sha256(*raw_)}, {"shape", {raw_->users(), raw_->services(), raw_->time_steps()}}};
    } else if (config_.synthetic()) {
      j["synth"] = to_json(config_)["synth"];
    } else {
      j["file"] = file_sha256(config_.dataset);
      j["qos"] = config_.qos;
      j["shape"] = {config_.n, config_.m, config_.T};
    }
    raw_key_ = key_of(j);
  }
  return *raw_key_;
}

std::string Pipeline::filter_key() {
  return key_of({{"raw", raw_key()},
                 {"lambda", config_.lambda},
                 {"trees", config_.forest_trees},
                 {"subsample", config_.forest_subsample},
                 {"seed", derive_seed(seed_, kForest)}});
}

std::string Pipeline::feature_key() {
  const auto full = to_json(config_);
  return key_of({{"filter", filter_key()},
                 {"density", config_.density},
                 {"split_seed", derive_seed(seed_, kSplit)},
                 {"features", full["features"]},
                 {"seed", derive_seed(seed_, kFeatures)}});
}

std::string Pipeline::gcmf_key() {
  return key_of({{"features", feature_key()}, {"gcmf", to_json(config_)["gcmf"]}, {"seed", derive_seed(seed_, kGcmf)}});
}

std::string Pipeline::pte_key(Mode mode) {
  return key_of({{"upstream", mode == Mode::full ? gcmf_key() : feature_key()},
                 {"mode", to_string(mode)},
                 {"pte", to_json(config_)["pte"]},
                 {"seed", derive_seed(seed_, kPte)}});
}

const QosTensor& Pipeline::raw() {
  if (raw_) return *raw_;
  stage("ingest", [&] {
    std::optional<std::filesystem::path> dir;
    if (!config_.synthetic()) dir = stage_dir("tensor-" + raw_key());
    if (dir && std::filesystem::exists(*dir / "complete")) {
      raw_ = std::make_shared<const QosTensor>(read_tensor_cache(*dir / "tensor.bin"));
      return;
    }
    raw_ = std::make_shared<const QosTensor>(load_dataset(config_));
    if (dir) {
      const auto tmp = fresh_tmp(*dir);
      write_tensor_cache(*raw_, tmp / "tensor.bin");
      mark_complete(tmp, *dir);
    }
  });
  return *raw_;
}

const FilterResult& Pipeline::filtered() {
  if (filtered_) return *filtered_;
  const QosTensor& source = raw();
  stage("outliers", [&] {
    if (config_.lambda == 0.0) {
      filtered_ = FilterResult{source, OutlierReport{}};
      return;
    }
    const auto dir = stage_dir("filter-" + filter_key());
    if (dir && std::filesystem::exists(*dir / "complete")) {
      FilterResult r{read_tensor_cache(*dir / "filtered.bin"), OutlierReport{}};
      r.report.lambda = config_.lambda;
      for (const auto& e : read_tensor_cache(*dir / "removed.bin").entries()) r.report.removed.push_back(e.at);
      filtered_ = std::move(r);
      return;
    }
    IsolationForestOptions opts;
    opts.lambda = config_.lambda;
    opts.trees = config_.forest_trees;
    opts.subsample = config_.forest_subsample;
    opts.seed = derive_seed(seed_, kForest);
    filtered_ = isolation_forest_filter(source, opts);
    if (dir) {
      const auto tmp = fresh_tmp(*dir);
      write_tensor_cache(filtered_->filtered, tmp / "filtered.bin");
      write_tensor_cache(source.restrict_to(filtered_->report.removed), tmp / "removed.bin");
      mark_complete(tmp, *dir);
    }
  });
  return *filtered_;
}

const SplitAssignment& Pipeline::split() {
  if (!split_) {
    const QosTensor& source = filtered().filtered;
    split_ = stage("split", [&] { return split_train_test(source, config_.density, derive_seed(seed_, kSplit)); });
  }
  return *split_;
}

const QosTensor& Pipeline::train() {
  if (!train_) {
    const auto& s = split();
    train_ = filtered().filtered.restrict_to(s.train);
  }
  return *train_;
}

const std::vector<InitialEmbedding>& Pipeline::features() {
  if (features_) return *features_;
  const QosTensor& source = filtered().filtered;
  const SplitAssignment& s = split();
  stage("features", [&] {
    const auto dir = stage_dir("features-" + feature_key());
    if (dir && std::filesystem::exists(*dir / "complete")) {
      std::vector<InitialEmbedding> out;
      for (std::uint32_t t = 0; t < source.time_steps(); ++t) {
        out.push_back(read_embedding_cache(*dir / step_file("F", t)));
      }
      features_ = std::move(out);
      return;
    }
    FeatureOptions opts = config_.features;
    opts.seed = derive_seed(seed_, kFeatures);
    features_ = build_all_embeddings(source, s, opts);
    if (dir) {
      const auto tmp = fresh_tmp(*dir);
      for (const auto& e : *features_) write_embedding_cache(e, tmp / step_file("F", e.t));
      mark_complete(tmp, *dir);
    }
  });
  return *features_;
}

const std::vector<NormalizedAdjacency>& Pipeline::adjacencies() {
  if (!adjacencies_) {
    const QosTensor& tr = train();
    adjacencies_ = stage("graph", [&] { return build_all_adjacencies(tr); });
  }
  return *adjacencies_;
}

const GcmfTrainResult& Pipeline::gcmf() {
  if (gcmf_) return *gcmf_;
  const QosTensor& tr = train();
  const auto& f = features();
  const auto& adj = adjacencies();
  stage("gcmf", [&] {
    const auto dir = stage_dir("gcmf-" + gcmf_key());
    const std::size_t model_count = config_.gcmf.per_time_step ? tr.time_steps() : 1;
    if (dir && std::filesystem::exists(*dir / "complete")) {
      GcmfTrainResult r;
      for (std::size_t k = 0; k < model_count; ++k) r.models.push_back(load_gcmf(*dir / step_file("W", k)));
      for (std::uint32_t t = 0; t < tr.time_steps(); ++t) {
        r.embeddings.push_back(load_spatial_embeddings(*dir / step_file("E", t)));
      }
      gcmf_ = std::move(r);
      return;
    }
    GcmfConfig cfg = config_.gcmf;
    cfg.seed = derive_seed(seed_, kGcmf);
    gcmf_ = train_gcmf(tr, f, adj, cfg);
    if (dir) {
      const auto tmp = fresh_tmp(*dir);
      for (std::size_t k = 0; k < gcmf_->models.size(); ++k) save_gcmf(gcmf_->models[k], tmp / step_file("W", k));
      for (const auto& e : gcmf_->embeddings) save_spatial_embeddings(e, tmp / step_file("E", e.t));
      mark_complete(tmp, *dir);
    }
  });
  return *gcmf_;
}

const std::vector<SpatialEmbeddings>& Pipeline::temporal_inputs(Mode mode) {
  if (mode == Mode::gcmf) throw InvalidParameter("temporal_inputs: gcmf mode has no temporal model");
  if (mode == Mode::full) return gcmf().embeddings;
  if (!raw_inputs_) {
    const auto users = static_cast<Eigen::Index>(filtered().filtered.users());
    std::vector<SpatialEmbeddings> out;
    for (const auto& f : features()) {
      out.push_back({f.t, f.matrix.topRows(users), f.matrix.bottomRows(f.matrix.rows() - users)});
    }
    raw_inputs_ = std::move(out);
  }
  return *raw_inputs_;
}

const PteModel& Pipeline::pte(Mode mode) {
  if (mode == Mode::gcmf) throw InvalidParameter("pte: gcmf mode has no temporal model");
  auto& slot = mode == Mode::full ? pte_full_ : pte_raw_;
  if (slot) return *slot;
  const auto& inputs = temporal_inputs(mode);
  const QosTensor& tr = train();
  stage("pte", [&] {
    const auto dir = stage_dir("pte-" + pte_key(mode));
    if (dir && std::filesystem::exists(*dir / "complete")) {
      slot = load_pte(*dir / "pte.bin");
      return;
    }
    std::vector<PteSample> samples;
    samples.reserve(tr.size());
    for (const auto& e : tr.entries()) samples.push_back({e.at.user, e.at.service, e.at.time, e.value});
    PteConfig cfg = config_.pte;
    cfg.seed = derive_seed(seed_, kPte);
    slot = train_pte(inputs, samples, cfg).model;
    if (dir) {
      const auto tmp = fresh_tmp(*dir);
      save_pte(*slot, tmp / "pte.bin");
      mark_complete(tmp, *dir);
    }
  });
  return *slot;
}

std::vector<double> Pipeline::predict(Mode mode, std::span<const Triple> triples) {
  if (mode == Mode::gcmf) {
    const auto& emb = gcmf().embeddings;
    std::vector<double> out;
    out.reserve(triples.size());
    for (const auto& t : triples) {
      if (t.time >= emb.size()) throw RangeError("predict: time-step " + std::to_string(t.time) + " out of range");
      out.push_back(gcmf_predict(emb[t.time], t.user, t.service));
    }
    return out;
  }
  const PteModel& model = pte(mode);
  return tpmcf::predict(model, temporal_inputs(mode), triples);
}

SeedResult Pipeline::evaluate(Mode mode) {
  const QosTensor& data = filtered().filtered;
  const SplitAssignment& s = split();
  const QosTensor& tr = train();
  if (s.test.empty()) throw InsufficientData("evaluate: the split left no test entries");
  if (tr.empty()) throw InsufficientData("evaluate: the split left no train entries");

  // make sure training time is not counted as prediction latency
  if (mode == Mode::gcmf) {
    gcmf();
  } else {
    pte(mode);
  }
  const auto start = std::chrono::steady_clock::now();
  const std::vector<double> predicted = predict(mode, s.test);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  double train_sum = 0.0;
  for (const auto& e : tr.entries()) train_sum += e.value;
  const double train_mean = train_sum / static_cast<double>(tr.size());

  SeedResult r;
  r.seed = seed_;
  r.train_count = s.train.size();
  r.test_count = s.test.size();
  r.removed = filtered().report.removed.size();
  r.latency = elapsed / static_cast<double>(s.test.size());
  std::map<std::uint32_t, std::pair<std::size_t, double>> steps;
  for (std::size_t k = 0; k < s.test.size(); ++k) {
    const double actual = *data.find(s.test[k]);
    const double err = std::abs(actual - predicted[k]);
    r.abs_error_sum += err;
    r.actual_sum += actual;
    r.baseline_abs_error_sum += std::abs(actual - train_mean);
    auto& st = steps[s.test[k].time];
    ++st.first;
    st.second += err;
  }
  const auto count = static_cast<double>(s.test.size());
  r.mae = r.abs_error_sum / count;
  r.nmae = nmae_from_mean(r.mae, r.actual_sum / count);
  r.baseline_mae = r.baseline_abs_error_sum / count;
  for (const auto& [t, st] : steps) r.per_step.push_back({t, st.first, st.second / static_cast<double>(st.first)});
  spdlog::info("seed {} mode {}: mae {:.6f} (mean predictor {:.6f})", seed_, to_string(mode), r.mae, r.baseline_mae);
  return r;
}

EvalReport make_report(const ExperimentConfig& config, Mode mode, std::vector<SeedResult> seeds) {
  if (seeds.empty()) throw EmptyInput("make_report: no seed results");
  EvalReport rep;
  rep.dataset = config.dataset_name();
  rep.density = config.density;
  rep.lambda = config.lambda;
  rep.mode = mode;
  rep.mask = config.features.mask;
  rep.config = config;
  rep.config.mode = mode;
  double abs_sum = 0.0, actual_sum = 0.0, base_sum = 0.0, latency = 0.0, seed_mae = 0.0;
  std::size_t count = 0;
  std::map<std::uint32_t, std::pair<std::size_t, double>> steps;
  for (const auto& s : seeds) {
    abs_sum += s.abs_error_sum;
    actual_sum += s.actual_sum;
    base_sum += s.baseline_abs_error_sum;
    count += s.test_count;
    latency += s.latency;
    seed_mae += s.mae;
    for (const auto& st : s.per_step) {
      steps[st.t].first += st.count;
      steps[st.t].second += st.mae * static_cast<double>(st.count);
    }
  }
  const auto n = static_cast<double>(count);
  rep.mae = abs_sum / n;
  rep.nmae = nmae_from_mean(rep.mae, actual_sum / n);
  rep.baseline_mae = base_sum / n;
  rep.seed_mean_mae = seed_mae / static_cast<double>(seeds.size());
  rep.latency = latency / static_cast<double>(seeds.size());
  for (const auto& [t, st] : steps) rep.per_step.push_back({t, st.first, st.second / static_cast<double>(st.first)});
  rep.seeds = std::move(seeds);
  return rep;
}

EvalReport run_experiment(const ExperimentConfig& config) { return run_experiment(config, nullptr); }

EvalReport run_experiment(const ExperimentConfig& config, std::shared_ptr<const QosTensor> tensor) {
  config.validate();
  if (!tensor) tensor = std::make_shared<const QosTensor>(stage("ingest", [&] { return load_dataset(config); }));
  std::vector<SeedResult> results;
  for (const auto seed : config.seeds) {
    Pipeline p(config, seed, tensor);
    results.push_back(p.evaluate(config.mode));
  }
  return make_report(config, config.mode, std::move(results));
}

nlohmann::json to_json(const EvalReport& r, bool include_latency) {
  using nlohmann::json;
  json j;
  j["dataset"] = r.dataset;
  j["density"] = r.density;
  j["lambda"] = r.lambda;
  j["mode"] = to_string(r.mode);
  j["feature_mask"] = r.mask.to_string();
  j["mae"] = r.mae;
  j["nmae"] = r.nmae;
  j["baseline_mae"] = r.baseline_mae;
  j["seed_mean_mae"] = r.seed_mean_mae;
  if (include_latency) j["latency_seconds"] = r.latency;
  j["per_time_step"] = json::array();
  for (const auto& s : r.per_step) j["per_time_step"].push_back({{"t", s.t}, {"count", s.count}, {"mae", s.mae}});
  j["seeds"] = json::array();
  for (const auto& s : r.seeds) {
    json e{{"seed", s.seed},       {"mae", s.mae},           {"nmae", s.nmae},
           {"baseline_mae", s.baseline_mae}, {"train_count", s.train_count}, {"test_count", s.test_count},
           {"removed", s.removed}};
    if (include_latency) e["latency_seconds"] = s.latency;
    j["seeds"].push_back(std::move(e));
  }
  j["config"] = to_json(r.config);
  return j;
}

std::string csv_header() {
  return "dataset,density,lambda,mode,feature_mask,seeds,mae,nmae,baseline_mae,latency_seconds";
}

std::string csv_row(const EvalReport& r) {
  std::ostringstream out;
  out << std::setprecision(10) << r.dataset << ',' << r.density << ',' << r.lambda << ',' << to_string(r.mode) << ','
      << r.mask.to_string() << ',' << r.seeds.size() << ',' << r.mae << ',' << r.nmae << ','
      << r.baseline_mae << ',' << r.latency;
  return out.str();
}

void write_per_step_csv(const EvalReport& report, std::ostream& out) {
  out << "timestep,mae\n" << std::setprecision(10);
  for (const auto& s : report.per_step) out << s.t << ',' << s.mae << '\n';
}

}  // namespace tpmcf
