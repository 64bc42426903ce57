#include "tpmcf/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>
#include <zlib.h>

#include "tpmcf/binio.hpp"
#include "tpmcf/errors.hpp"
#include "tpmcf/numcore.hpp"

namespace tpmcf {

namespace {

constexpr std::uint32_t kTensorCacheVersion = 1;

std::size_t ceil_fraction(double fraction, std::size_t count) {
  // guard against 0.7 * 10 = 7.000000000000001 style round-up
  const double raw = fraction * static_cast<double>(count);
  return std::min(count, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

struct GzCloser {
  void operator()(gzFile f) const noexcept {
    if (f != nullptr) gzclose(f);
  }
};

std::string_view next_token(std::string_view& rest) {
  std::size_t b = 0;
  while (b < rest.size() && (rest[b] == ' ' || rest[b] == '\t' || rest[b] == '\r' || rest[b] == '\n')) ++b;
  std::size_t e = b;
  while (e < rest.size() && !(rest[e] == ' ' || rest[e] == '\t' || rest[e] == '\r' || rest[e] == '\n')) ++e;
  std::string_view tok = rest.substr(b, e - b);
  rest.remove_prefix(e);
  return tok;
}

template <typename T>
T parse_number(std::string_view tok, std::size_t line, const char* field) {
  if (tok.empty()) throw ParseError(line, std::string("missing ") + field);
  T value{};
  const char* first = tok.data();
  if constexpr (std::is_floating_point_v<T>) {
    if (*first == '+') ++first;
  }
  auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), value);
  if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
    throw ParseError(line, std::string("malformed ") + field + " '" + std::string(tok) + "'");
  }
  return value;
}

}  // namespace

QosTensor::QosTensor(std::uint32_t n, std::uint32_t m, std::uint32_t T)
    : n_(n), m_(m), T_(T), offsets_(static_cast<std::size_t>(T) + 1, 0) {}

QosTensor QosTensor::from_entries(std::uint32_t n, std::uint32_t m, std::uint32_t T,
                                  std::vector<Entry> entries) {
  QosTensor out(n, m, T);
  for (const auto& e : entries) {
    if (e.at.user >= n || e.at.service >= m || e.at.time >= T) {
      throw RangeError("entry (" + std::to_string(e.at.user) + "," + std::to_string(e.at.service) + "," +
                       std::to_string(e.at.time) + ") outside " + std::to_string(n) + "x" +
                       std::to_string(m) + "x" + std::to_string(T));
    }
    if (!(e.value > 0.0) || !std::isfinite(e.value)) {
      throw InvalidParameter("stored QoS values must be finite and positive");
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return triple_less(a.at, b.at); });
  std::size_t duplicates = 0;
  std::vector<Entry> unique;
  unique.reserve(entries.size());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (k + 1 < entries.size() && entries[k + 1].at == entries[k].at) {
      ++duplicates;  // a later occurrence follows; stable sort keeps input order
      continue;
    }
    unique.push_back(entries[k]);
  }
  if (duplicates > 0) {
    spdlog::warn("{} duplicate (user, service, time) entries; last occurrence kept", duplicates);
  }
  out.entries_ = std::move(unique);
  out.rebuild_offsets();
  return out;
}

void QosTensor::rebuild_offsets() {
  offsets_.assign(static_cast<std::size_t>(T_) + 1, 0);
  for (const auto& e : entries_) ++offsets_[e.at.time + 1];
  std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
}

std::span<const Entry> QosTensor::slice(std::uint32_t t) const {
  if (t >= T_) throw RangeError("time-step " + std::to_string(t) + " out of range");
  return std::span<const Entry>(entries_).subspan(offsets_[t], offsets_[t + 1] - offsets_[t]);
}

std::optional<double> QosTensor::find(const Triple& at) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), at,
                             [](const Entry& e, const Triple& key) { return triple_less(e.at, key); });
  if (it != entries_.end() && it->at == at) return it->value;
  return std::nullopt;
}

QosTensor QosTensor::restrict_to(std::span<const Triple> keep) const {
  std::vector<Entry> out;
  out.reserve(keep.size());
  for (const auto& at : keep) {
    auto v = find(at);
    if (!v) throw RangeError("restrict_to: triple is not observed in the tensor");
    out.push_back({at, *v});
  }
  return from_entries(n_, m_, T_, std::move(out));
}

QosTensor QosTensor::without(std::span<const Triple> drop) const {
  std::vector<Triple> sorted(drop.begin(), drop.end());
  std::sort(sorted.begin(), sorted.end(), triple_less);
  QosTensor out(n_, m_, T_);
  out.entries_.reserve(entries_.size());
  for (const auto& e : entries_) {
    if (!std::binary_search(sorted.begin(), sorted.end(), e.at, triple_less)) out.entries_.push_back(e);
  }
  out.rebuild_offsets();
  return out;
}

std::vector<double> QosTensor::values() const {
  std::vector<double> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw EmptyInput("summarize: no observed values");
  Summary s;
  s.count = values.size();
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  s.min = sorted.front();
  s.max = sorted.back();
  const std::size_t mid = sorted.size() / 2;
  s.median = sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  // Welford in input order for a stable mean/variance
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t k = 0;
  for (double v : values) {
    ++k;
    const double delta = v - mean;
    mean += delta / static_cast<double>(k);
    m2 += delta * (v - mean);
  }
  s.mean = mean;
  s.std = std::sqrt(m2 / static_cast<double>(k));
  return s;
}

Summary summarize(const QosTensor& tensor) {
  if (tensor.empty()) throw EmptyInput("summarize: tensor has no observed entries");
  return summarize(tensor.values());
}

std::optional<Summary> try_summarize(const QosTensor& tensor) {
  if (tensor.empty()) return std::nullopt;
  return summarize(tensor);
}

QosTensor load_wsdream(const std::filesystem::path& path, std::uint32_t n, std::uint32_t m,
                       std::uint32_t T, const LoadOptions& options) {
  if (!std::filesystem::exists(path)) throw IoError("dataset file not found: " + path.string());
  {
    std::ifstream probe(path, std::ios::binary);
    std::array<unsigned char, 2> magic{};
    probe.read(reinterpret_cast<char*>(magic.data()), 2);
    if (probe.gcount() == 2 && magic[0] == 0x1f && magic[1] == 0x8b) {
      spdlog::debug("{}: gzip stream detected", path.string());
    }
  }
  // zlib reads plain files transparently when the gzip magic is absent
  std::unique_ptr<gzFile_s, GzCloser> file(gzopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open dataset file: " + path.string());
  gzbuffer(file.get(), 1 << 20);

  std::vector<Entry> entries;
  std::array<char, 4096> buf{};
  std::size_t line = 0;
  std::size_t capped = 0;
  while (gzgets(file.get(), buf.data(), static_cast<int>(buf.size())) != nullptr) {
    ++line;
    std::string_view rest(buf.data(), std::strlen(buf.data()));
    const auto t_user = next_token(rest);
    if (t_user.empty()) continue;  // blank line
    const auto t_service = next_token(rest);
    const auto t_time = next_token(rest);
    const auto t_value = next_token(rest);
    if (!next_token(rest).empty()) throw ParseError(line, "expected 4 fields");
    const auto user = parse_number<std::uint32_t>(t_user, line, "user id");
    const auto service = parse_number<std::uint32_t>(t_service, line, "service id");
    const auto time = parse_number<std::uint32_t>(t_time, line, "time-slice id");
    const auto value = parse_number<double>(t_value, line, "value");
    if (user >= n || service >= m || time >= T) {
      throw RangeError("line " + std::to_string(line) + ": index outside declared " + std::to_string(n) +
                       "x" + std::to_string(m) + "x" + std::to_string(T));
    }
    if (!(value > 0.0)) continue;
    if (options.cap && value > *options.cap) {
      ++capped;
      continue;
    }
    entries.push_back({{user, service, time}, value});
  }
  int errnum = 0;
  gzerror(file.get(), &errnum);
  if (errnum != Z_OK && errnum != Z_STREAM_END) throw IoError("read error in " + path.string());
  if (capped > 0) spdlog::warn("{}: {} values above cap dropped", path.string(), capped);
  return QosTensor::from_entries(n, m, T, std::move(entries));
}

void save_wsdream(const QosTensor& tensor, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  std::array<char, 64> num{};
  for (const auto& e : tensor.entries()) {
    auto [ptr, ec] = std::to_chars(num.data(), num.data() + num.size(), e.value);
    out << e.at.user << ' ' << e.at.service << ' ' << e.at.time << ' ' << std::string_view(num.data(), ptr - num.data())
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_tensor_cache(const QosTensor& tensor, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("TPMC");
  w.u32(kTensorCacheVersion);
  w.u32(tensor.users());
  w.u32(tensor.services());
  w.u32(tensor.time_steps());
  w.u64(tensor.size());
  for (const auto& e : tensor.entries()) {
    w.u32(e.at.user);
    w.u32(e.at.service);
    w.u32(e.at.time);
    w.f64(e.value);
  }
  w.finish();
}

QosTensor read_tensor_cache(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("TPMC");
  const auto version = r.u32();
  if (version != kTensorCacheVersion) throw IoError("unsupported tensor cache version " + std::to_string(version));
  const auto n = r.u32();
  const auto m = r.u32();
  const auto T = r.u32();
  const auto count = r.u64();
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    Entry e;
    e.at.user = r.u32();
    e.at.service = r.u32();
    e.at.time = r.u32();
    e.value = r.f64();
    entries.push_back(e);
  }
  return QosTensor::from_entries(n, m, T, std::move(entries));
}

SplitAssignment split_train_test(const QosTensor& tensor, double density, std::uint64_t seed) {
  if (!(density > 0.0 && density < 1.0)) {
    throw InvalidParameter("split density must lie in (0, 1), got " + std::to_string(density));
  }
  SplitAssignment split;
  split.density = density;
  split.seed = seed;
  for (std::uint32_t t = 0; t < tensor.time_steps(); ++t) {
    const auto slice = tensor.slice(t);
    if (slice.empty()) continue;
    std::vector<std::size_t> order(slice.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, t));
    const std::size_t k = ceil_fraction(density, slice.size());
    // partial Fisher-Yates: the first k positions become the train subset
    for (std::size_t a = 0; a < k; ++a) {
      std::uniform_int_distribution<std::size_t> pick(a, order.size() - 1);
      std::swap(order[a], order[pick(rng)]);
    }
    std::vector<bool> is_train(slice.size(), false);
    for (std::size_t a = 0; a < k; ++a) is_train[order[a]] = true;
    for (std::size_t a = 0; a < slice.size(); ++a) {
      (is_train[a] ? split.train : split.test).push_back(slice[a].at);
    }
  }
  return split;
}

double isolation_normalizer(std::size_t psi) {
  if (psi <= 1) return 0.0;
  if (psi == 2) return 1.0;
  const double k = static_cast<double>(psi - 1);
  constexpr double euler_gamma = 0.5772156649;
  return 2.0 * (std::log(k) + euler_gamma) - 2.0 * k / static_cast<double>(psi);
}

namespace {

struct IsoNode {
  double split = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::uint32_t size = 0;  // sample count reaching a leaf
};

class IsolationTree {
 public:
  IsolationTree(std::vector<double> sample, std::size_t height_limit, Rng& rng) {
    nodes_.reserve(2 * sample.size());
    build(sample, 0, height_limit, rng);
  }

  double path_length(double x) const {
    std::size_t depth = 0;
    std::int32_t at = 0;
    while (nodes_[at].left >= 0) {
      at = x < nodes_[at].split ? nodes_[at].left : nodes_[at].right;
      ++depth;
    }
    return static_cast<double>(depth) + isolation_normalizer(nodes_[at].size);
  }

 private:
  std::int32_t build(std::span<double> values, std::size_t depth, std::size_t limit, Rng& rng) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({});
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    if (values.size() <= 1 || depth >= limit || *lo_it == *hi_it) {
      nodes_[id].size = static_cast<std::uint32_t>(values.size());
      return id;
    }
    std::uniform_real_distribution<double> dist(*lo_it, *hi_it);
    double split = dist(rng);
    if (split <= *lo_it) split = std::nextafter(*lo_it, *hi_it);
    auto mid = std::partition(values.begin(), values.end(), [split](double v) { return v < split; });
    const auto cut = static_cast<std::size_t>(mid - values.begin());
    const auto left = build(values.subspan(0, cut), depth + 1, limit, rng);
    const auto right = build(values.subspan(cut), depth + 1, limit, rng);
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  std::vector<IsoNode> nodes_;
};

}  // namespace

std::vector<double> isolation_scores(std::span<const double> values, std::size_t trees,
                                     std::size_t subsample, std::uint64_t seed) {
  if (trees < 1) throw InvalidParameter("isolation forest needs at least one tree");
  if (subsample < 2) throw InvalidParameter("isolation forest subsample must be >= 2");
  std::vector<double> scores(values.size(), 0.5);
  if (values.size() < 2) return scores;
  std::size_t psi = subsample;
  if (psi > values.size()) {
    spdlog::warn("isolation forest subsample {} exceeds population {}; clamped", psi, values.size());
    psi = values.size();
  }
  const auto height_limit = static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(psi))));

  // scores depend only on the value, so evaluate each distinct value once
  std::vector<double> distinct(values.begin(), values.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> mean_path(distinct.size(), 0.0);

  std::vector<std::size_t> index(values.size());
  for (std::size_t tree = 0; tree < trees; ++tree) {
    Rng rng(derive_seed(seed, tree));
    std::iota(index.begin(), index.end(), 0);
    std::vector<double> sample(psi);
    for (std::size_t a = 0; a < psi; ++a) {
      std::uniform_int_distribution<std::size_t> pick(a, index.size() - 1);
      std::swap(index[a], index[pick(rng)]);
      sample[a] = values[index[a]];
    }
    const IsolationTree itree(std::move(sample), height_limit, rng);
    for (std::size_t d = 0; d < distinct.size(); ++d) mean_path[d] += itree.path_length(distinct[d]);
  }
  const double c = isolation_normalizer(psi);
  for (std::size_t k = 0; k < values.size(); ++k) {
    const auto d = static_cast<std::size_t>(std::lower_bound(distinct.begin(), distinct.end(), values[k]) -
                                            distinct.begin());
    const double expected = mean_path[d] / static_cast<double>(trees);
    scores[k] = std::pow(2.0, -expected / c);
  }
  return scores;
}

FilterResult isolation_forest_filter(const QosTensor& tensor, const IsolationForestOptions& options) {
  if (!(options.lambda >= 0.0 && options.lambda < 1.0)) {
    throw InvalidParameter("outlier ratio lambda must lie in [0, 1), got " + std::to_string(options.lambda));
  }
  if (options.trees < 1) throw InvalidParameter("isolation forest needs at least one tree");
  if (options.subsample < 2) throw InvalidParameter("isolation forest subsample must be >= 2");

  FilterResult result;
  result.report.lambda = options.lambda;
  const auto entries = tensor.entries();
  result.report.scored.reserve(entries.size());
  for (const auto& e : entries) result.report.scored.push_back(e.at);
  const auto values = tensor.values();
  result.report.scores = isolation_scores(values, options.trees, options.subsample, options.seed);

  const std::size_t k = ceil_fraction(options.lambda, entries.size());
  if (k == 0) {
    result.filtered = tensor;
    return result;
  }
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  const auto& scores = result.report.scores;
  // entries are already in canonical order, so index order breaks ties
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  for (std::size_t a = 0; a < k; ++a) result.report.removed.push_back(entries[order[a]].at);
  std::sort(result.report.removed.begin(), result.report.removed.end(), triple_less);
  result.filtered = tensor.without(result.report.removed);
  return result;
}

QosTensor synth_tensor(const SynthOptions& o, SynthFactors* factors, std::vector<Triple>* planted) {
  if (o.n == 0 || o.m == 0 || o.T == 0) throw InvalidParameter("synth_tensor: empty shape");
  if (o.rank == 0 || o.rank > std::min(o.n, o.m)) throw InvalidParameter("synth_tensor: rank must be in [1, min(n, m)]");
  if (!(o.density > 0.0 && o.density <= 1.0)) throw InvalidParameter("synth_tensor: density must be in (0, 1]");
  if (!(o.outlier_fraction >= 0.0 && o.outlier_fraction < 1.0)) {
    throw InvalidParameter("synth_tensor: outlier fraction must be in [0, 1)");
  }
  if (o.noise < 0.0 || o.max_amplitude < 0.0) throw InvalidParameter("synth_tensor: negative noise or amplitude");

  Rng rng(o.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SynthFactors f;
  f.users.assign(o.n, std::vector<double>(o.rank));
  f.services.assign(o.m, std::vector<double>(o.rank));
  for (auto& row : f.users)
    for (auto& v : row) v = o.unit_factors ? 1.0 : unit(rng);
  for (auto& row : f.services)
    for (auto& v : row) v = o.unit_factors ? 1.0 : unit(rng);
  f.amplitude.resize(o.n);
  for (auto& a : f.amplitude) a = o.max_amplitude * unit(rng);
  f.phase.resize(o.m);
  for (auto& p : f.phase) p = 2.0 * std::numbers::pi * unit(rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t cells = static_cast<std::size_t>(o.n) * o.m;
  const std::size_t per_step = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(o.density * static_cast<double>(cells))));
  std::vector<std::size_t> cell(cells);
  std::vector<Entry> entries;
  entries.reserve(per_step * o.T);
  for (std::uint32_t t = 0; t < o.T; ++t) {
    std::iota(cell.begin(), cell.end(), 0);
    for (std::size_t a = 0; a < per_step; ++a) {
      std::uniform_int_distribution<std::size_t> pick(a, cells - 1);
      std::swap(cell[a], cell[pick(rng)]);
    }
    std::sort(cell.begin(), cell.begin() + static_cast<std::ptrdiff_t>(per_step));
    const double angle = 2.0 * std::numbers::pi * t / o.T;
    for (std::size_t a = 0; a < per_step; ++a) {
      const auto i = static_cast<std::uint32_t>(cell[a] / o.m);
      const auto j = static_cast<std::uint32_t>(cell[a] % o.m);
      double dot = 0.0;
      for (std::uint32_t r = 0; r < o.rank; ++r) dot += f.users[i][r] * f.services[j][r];
      double q = dot * (1.0 + f.amplitude[i] * std::sin(angle + f.phase[j]));
      if (o.noise > 0.0) q += o.noise * noise(rng);
      entries.push_back({{i, j, t}, std::max(q, 1e-3)});
    }
  }

  const std::size_t outliers = ceil_fraction(o.outlier_fraction, entries.size());
  std::vector<std::size_t> pick_order(entries.size());
  std::iota(pick_order.begin(), pick_order.end(), 0);
  for (std::size_t a = 0; a < outliers; ++a) {
    std::uniform_int_distribution<std::size_t> pick(a, pick_order.size() - 1);
    std::swap(pick_order[a], pick_order[pick(rng)]);
    entries[pick_order[a]].value *= 10.0;
    if (planted != nullptr) planted->push_back(entries[pick_order[a]].at);
  }
  if (planted != nullptr) std::sort(planted->begin(), planted->end(), triple_less);
  if (factors != nullptr) *factors = std::move(f);
  return QosTensor::from_entries(o.n, o.m, o.T, std::move(entries));
}

namespace {

nlohmann::json triple_json(const Triple& t) { return nlohmann::json::array({t.user, t.service, t.time}); }

}  // namespace

nlohmann::json to_json(const SplitAssignment& split) {
  nlohmann::json j;
  j["density"] = split.density;
  j["seed"] = split.seed;
  j["train"] = nlohmann::json::array();
  for (const auto& t : split.train) j["train"].push_back(triple_json(t));
  j["test"] = nlohmann::json::array();
  for (const auto& t : split.test) j["test"].push_back(triple_json(t));
  return j;
}

nlohmann::json to_json(const OutlierReport& report, bool include_all_scores) {
  nlohmann::json j;
  j["lambda"] = report.lambda;
  j["observed"] = report.scored.size();
  j["removed_count"] = report.removed.size();
  j["removed"] = nlohmann::json::array();
  for (const auto& t : report.removed) j["removed"].push_back(triple_json(t));
  nlohmann::json scores = nlohmann::json::array();
  std::vector<Triple> removed_sorted = report.removed;
  for (std::size_t k = 0; k < report.scored.size(); ++k) {
    const bool removed = std::binary_search(removed_sorted.begin(), removed_sorted.end(), report.scored[k], triple_less);
    if (include_all_scores || removed) {
      const auto& t = report.scored[k];
      scores.push_back(nlohmann::json::array({t.user, t.service, t.time, report.scores[k]}));
    }
  }
  j["scores"] = std::move(scores);
  return j;
}

nlohmann::json to_json(const Summary& s) {
  return nlohmann::json{{"count", s.count}, {"min", s.min},       {"max", s.max},
                        {"mean", s.mean},   {"median", s.median}, {"std", s.std}};
}

}  // namespace tpmcf
