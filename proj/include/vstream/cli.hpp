#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vstream/assembly.hpp"
#include "vstream/config.hpp"
#include "vstream/csm.hpp"
#include "vstream/errors.hpp"
#include "vstream/log.hpp"
#include "vstream/policies.hpp"
#include "vstream/runtime.hpp"
#include "vstream/synth.hpp"

namespace vstream::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitError = 3;
inline constexpr int kSchemaVersion = 1;

struct Options {
  std::string config_path;
  std::string seed;
  std::string steps;
  bool paper_shapes = false;
  std::string policy;
  std::string watermark;
  std::string out;
  std::string format = "json";

  std::string stream_path;
  std::uint32_t scenes = 0;
  std::string metrics_path;
  std::string save_snapshot;
  std::string dump_prefix;
  std::string low_path;
  std::string high_path;
  std::string snapshot_path;
  std::string at;
  std::uint32_t queries = 50;
  std::string dam_policy;
  bool grid = false;
  std::string r_csm = "1/3,1/2,2/3";
  std::string r_pool = "1,4,16";
};

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Everything a command produces. Rendered as one JSON document or as CSV
// with '#' comment lines carrying header, summary and checks.
struct Report {
  std::string command;
  nlohmann::json header = nlohmann::json::object();
  nlohmann::json summary = nlohmann::json::object();
  std::vector<std::string> columns;
  std::vector<std::vector<nlohmann::json>> rows;
  bool compact_rows = false;
  std::vector<Check> checks;

  void check(std::string name, bool pass, std::string detail = {}) {
    checks.push_back({std::move(name), pass, std::move(detail)});
  }

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }
};

namespace detail {

inline Error usage(const std::string& m) { return Error(ErrorKind::Usage, m); }

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    auto t = vstream::detail::trim(item);
    if (t.empty()) throw usage("empty element in list '" + text + "'");
    out.emplace_back(t);
  }
  if (out.empty()) throw usage("empty list");
  return out;
}

inline std::uint64_t parse_u64(const std::string& flag, const std::string& text) {
  try {
    return vstream::detail::parse_number<std::uint64_t>(flag, text);
  } catch (const Error& e) {
    throw usage(e.what());
  }
}

// Flag values that fail to parse are usage errors.
template <typename Parse>
auto flag_value(Parse&& parse) {
  try {
    return parse();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::InvalidConfig) throw;
    throw usage(e.what());
  }
}

inline std::vector<std::uint64_t> parse_steps(const Options& o, const std::string& fallback) {
  std::vector<std::uint64_t> out;
  for (const auto& s : split_list(o.steps.empty() ? fallback : o.steps)) out.push_back(parse_u64("--steps", s));
  return out;
}

inline std::uint64_t single_steps(const Options& o, std::uint64_t fallback) {
  if (o.steps.empty()) return fallback;
  auto v = parse_steps(o, "");
  if (v.size() != 1) throw usage("--steps takes a single value for this command");
  return v.front();
}

// Accepts decimals or "a/b" fractions.
inline double parse_ratio(const std::string& text) {
  try {
    std::size_t used = 0;
    if (auto slash = text.find('/'); slash != std::string::npos) {
      double a = std::stod(text.substr(0, slash), &used);
      if (used != slash) throw std::invalid_argument("");
      auto rest = text.substr(slash + 1);
      double b = std::stod(rest, &used);
      if (used != rest.size() || b == 0.0) throw std::invalid_argument("");
      return a / b;
    }
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw usage("bad ratio '" + text + "'");
  }
}

inline MemoryConfig base_config(const Options& o) {
  return o.paper_shapes ? MemoryConfig::paper_shapes() : MemoryConfig::scaled();
}

// Base shapes, then the config file, then explicit flags.
inline MemoryConfig resolve_config(const Options& o, MemoryConfig base, bool policy_is_clustering = true) {
  MemoryConfig c = base;
  if (!o.config_path.empty()) c = load_config(o.config_path, c);
  if (!o.seed.empty()) c.seed = parse_u64("--seed", o.seed);
  if (policy_is_clustering && !o.policy.empty()) {
    c.clustering_policy = flag_value([&] { return parse_clustering_policy(o.policy); });
  }
  if (!o.watermark.empty()) {
    c.low_bank_watermark = c.high_bank_watermark =
        flag_value([&] { return vstream::detail::parse_watermark("--watermark", o.watermark); });
  }
  validate(c);
  return c;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Storage, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline StreamSpec stream_for(const Options& o, const MemoryConfig& c, std::uint64_t steps, std::uint32_t default_scenes = 0) {
  StreamSpec s = StreamSpec::for_config(c, c.seed, steps);
  if (default_scenes != 0) s.scenes = default_scenes;
  if (!o.stream_path.empty()) s = parse_stream_spec(read_file(o.stream_path), s);
  if (o.scenes != 0) s.scenes = o.scenes;
  s.steps = steps;
  s.validate();
  if (!(s.low_shape() == grid_shape(c, Tier::Low)) || !(s.high_shape() == grid_shape(c, Tier::High))) {
    throw usage("stream grid does not match the memory configuration");
  }
  return s;
}

inline nlohmann::json config_json(const MemoryConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(to_config_text(c));
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find(" = ");
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

inline nlohmann::json stream_json(const StreamSpec& s) {
  return {{"seed", s.seed},         {"steps", s.steps},
          {"scenes", s.scenes},     {"scene_len_min", s.scene_len_min},
          {"scene_len_max", s.scene_len_max}, {"spread", s.spread},
          {"scene_scale", s.scene_scale}, {"drift", s.drift},
          {"detail_noise", s.detail_noise}, {"low_side", s.low_side},
          {"pool_side", s.pool_side}, {"dim", s.dim}};
}

inline nlohmann::json make_header(const std::string& command, const MemoryConfig& c, nlohmann::json steps) {
  return {{"tool", "vstream"}, {"schema_version", kSchemaVersion}, {"command", command},
          {"seed", c.seed},    {"steps", std::move(steps)},        {"config", config_json(c)}};
}

inline std::string csv_cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  if (!v.is_string()) return v.dump();
  auto s = v.get<std::string>();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

inline void write_json(std::ostream& o, const Report& r) {
  nlohmann::json doc = {{"header", r.header}, {"summary", r.summary}};
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  doc["checks"] = std::move(checks);
  if (!r.columns.empty()) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
      if (r.compact_rows) {
        rows.push_back(row);
      } else {
        nlohmann::json obj = nlohmann::json::object();
        for (std::size_t i = 0; i < r.columns.size(); ++i) obj[r.columns[i]] = row[i];
        rows.push_back(std::move(obj));
      }
    }
    if (r.compact_rows) doc["columns"] = r.columns;
    doc["rows"] = std::move(rows);
  }
  o << doc.dump(2) << '\n';
}

inline void write_csv(std::ostream& o, const Report& r) {
  o << "# vstream " << r.command << " schema_version=" << kSchemaVersion << '\n';
  for (const auto& [k, v] : r.header.items()) {
    if (k == "config" || k == "tool" || k == "schema_version" || k == "command") continue;
    o << "# " << k << ": " << csv_cell(v) << '\n';
  }
  for (const auto& [k, v] : r.header.at("config").items()) o << "# config " << k << " = " << v.get<std::string>() << '\n';
  const auto flat = r.summary.flatten();
  for (const auto& [k, v] : flat.items()) o << "# summary " << k << ": " << csv_cell(v) << '\n';
  for (const auto& c : r.checks) {
    o << "# check " << c.name << ": " << (c.pass ? "pass" : "FAIL");
    if (!c.detail.empty()) o << " (" << c.detail << ')';
    o << '\n';
  }
  if (r.columns.empty()) return;
  for (std::size_t i = 0; i < r.columns.size(); ++i) o << (i ? "," : "") << r.columns[i];
  o << '\n';
  for (const auto& row : r.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) o << (i ? "," : "") << csv_cell(row[i]);
    o << '\n';
  }
}

inline std::int64_t median_ns(std::vector<std::int64_t> v) {
  if (v.empty()) return 0;
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

inline bool temporally_sorted(const FlashMemorySnapshot& s) {
  auto key = [](const MemoryItem& i) { return std::tuple(i.temporal_position, static_cast<int>(i.source), i.index); };
  for (std::size_t i = 1; i < s.items.size(); ++i) {
    if (key(s.items[i]) < key(s.items[i - 1])) return false;
  }
  return true;
}

inline void item_rows(Report& r, const FlashMemorySnapshot& s) {
  r.columns = {"source", "index", "temporal_position", "tier"};
  for (const auto& item : s.items) {
    r.rows.push_back({std::string(to_string(item.source)), item.index, item.temporal_position,
                      std::string(to_string(item.feature.tier()))});
  }
}

inline nlohmann::json latency_json(const LatencyReport& l) {
  return {{"snapshot_acquire_ns", l.snapshot_acquire_ns},
          {"retrieval_ns", l.retrieval_ns},
          {"assembly_ns", l.assembly_ns},
          {"total_ns", l.total_ns}};
}

// Summary and self-checks shared by simulate and ingest.
inline void describe_memory(Report& r, const MemoryConfig& c, std::uint64_t frames, const QueryResult& q,
                            const Engine& engine) {
  const auto& csm = q.published->csm;
  const auto& snap = q.snapshot;
  const auto low_tokens = llm_tokens_per_map(c, Tier::Low);
  const auto high_tokens = llm_tokens_per_map(c, Tier::High);
  const auto n_csm = snap.count(MemorySource::Csm);
  const auto n_dam = snap.count(MemorySource::Dam);
  r.summary["frames"] = frames;
  r.summary["csm_items"] = n_csm;
  r.summary["dam_items"] = n_dam;
  r.summary["token_count"] = snap.token_count;
  r.summary["token_budget"] = token_budget(c);
  r.summary["budget_limit"] = c.budget_limit;
  r.summary["total_weight"] = csm.total_weight();
  r.summary["latency_ns"] = latency_json(q.latency);
  r.summary["low_bank"] = {{"count", engine.low_bank().count()}, {"spilled", engine.low_bank().spilled_count()}};
  r.summary["high_bank"] = {{"count", engine.high_bank().count()}, {"spilled", engine.high_bank().spilled_count()}};

  r.columns = {"source", "index", "temporal_position", "weight", "tokens"};
  for (const auto& item : snap.items) {
    const bool is_csm = item.source == MemorySource::Csm;
    nlohmann::json weight = nullptr;
    if (is_csm) weight = csm.weight(item.index);
    r.rows.push_back({std::string(to_string(item.source)), item.index, item.temporal_position, weight,
                      is_csm ? low_tokens : high_tokens});
  }

  const auto expected_csm = std::min<std::uint64_t>(frames, c.n_csm);
  r.check("frames_published", q.published->frame_count == frames,
          std::to_string(q.published->frame_count) + " of " + std::to_string(frames));
  if (c.clustering_policy == ClusteringPolicy::KMeans) {
    r.check("csm_capacity", csm.size() == expected_csm, std::to_string(csm.size()) + " clusters");
  } else {
    r.check("csm_capacity", csm.size() <= c.n_csm, std::to_string(csm.size()) + " clusters");
  }
  if (make_consolidator(c.clustering_policy, c)->conserves_weight()) {
    r.check("weight_conserved", csm.total_weight() == frames, "total weight " + std::to_string(csm.total_weight()));
  }
  r.check("dam_count", n_dam == std::min<std::uint64_t>(c.n_dam, csm.size()), std::to_string(n_dam) + " key frames");
  r.check("token_count", snap.token_count == n_csm * low_tokens + n_dam * high_tokens &&
                             snap.token_positions.size() == snap.token_count,
          std::to_string(snap.token_count) + " tokens");
  r.check("token_budget", snap.token_count <= c.budget_limit && token_budget(c) <= c.budget_limit);
  r.check("temporal_order", temporally_sorted(snap));
}

struct EngineRun {
  std::uint64_t frames = 0;
  QueryResult result;
};

template <typename Next>
EngineRun drive_engine(Engine& engine, Next&& next, FvsbWriter* dump_low, FvsbWriter* dump_high) {
  EngineRun run;
  engine.start();
  while (auto f = next()) {
    if (dump_low) dump_low->write(f->low);
    if (dump_high) dump_high->write(f->high);
    engine.ingest_frame(std::move(f->low), std::move(f->high));
    ++run.frames;
  }
  engine.wait_idle();
  run.result = engine.query();
  engine.stop();
  return run;
}

inline void save_snapshot(const std::string& path, const FlashMemorySnapshot& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Storage, "cannot create " + path);
  write_snapshot(out, s);
  if (!out) throw Error(ErrorKind::Storage, "write failed for " + path);
}

// ---------------------------------------------------------------------------

inline Report cmd_simulate(const Options& o) {
  auto c = resolve_config(o, base_config(o));
  const auto steps = single_steps(o, 200);
  const auto spec = stream_for(o, c, steps);

  std::ofstream metrics;
  if (!o.metrics_path.empty()) {
    metrics.open(o.metrics_path);
    if (!metrics) throw Error(ErrorKind::Storage, "cannot create " + o.metrics_path);
  }
  Engine::Options eo;
  eo.metrics = metrics.is_open() ? &metrics : nullptr;
  Engine engine(c, eo);

  std::optional<FvsbWriter> dump_low, dump_high;
  if (!o.dump_prefix.empty()) {
    dump_low.emplace(o.dump_prefix + ".low.fvsb", FvsbHeader{Tier::Low, spec.low_shape()});
    dump_high.emplace(o.dump_prefix + ".high.fvsb", FvsbHeader{Tier::High, spec.high_shape()});
  }
  SyntheticStream stream(spec);
  auto run = drive_engine(engine, [&] { return stream.next(); }, dump_low ? &*dump_low : nullptr,
                          dump_high ? &*dump_high : nullptr);
  if (dump_low) dump_low->flush();
  if (dump_high) dump_high->flush();

  Report r;
  r.command = "simulate";
  r.header = make_header(r.command, c, steps);
  r.header["stream"] = stream_json(spec);
  describe_memory(r, c, run.frames, run.result, engine);
  if (!o.save_snapshot.empty()) save_snapshot(o.save_snapshot, run.result.snapshot);
  log::info("simulate: {} frames, {} tokens", run.frames, run.result.snapshot.token_count);
  return r;
}

inline Report cmd_ingest(const Options& o) {
  if (o.low_path.empty() || o.high_path.empty()) throw usage("ingest needs --low and --high");
  FileStream files(o.low_path, o.high_path);
  MemoryConfig base = base_config(o);
  if (o.config_path.empty() && !o.paper_shapes) {
    const auto& lo = files.low_header().shape;
    const auto& hi = files.high_header().shape;
    if (lo.dim != hi.dim) throw Error(ErrorKind::InvalidConfig, "low and high files differ in channel count");
    base.spatial_size_low = lo.spatial();
    base.spatial_size_high = hi.spatial();
    base.dim = lo.dim;
    base.pool_ratio = lo.spatial() == 0 ? 0 : static_cast<std::uint32_t>(hi.spatial() / lo.spatial());
  }
  auto c = resolve_config(o, base);
  if (!(files.low_header().shape == grid_shape(c, Tier::Low)) ||
      !(files.high_header().shape == grid_shape(c, Tier::High))) {
    throw Error(ErrorKind::InvalidConfig, "file grids do not match the memory configuration");
  }
  const auto limit = single_steps(o, 0);

  std::ofstream metrics;
  if (!o.metrics_path.empty()) {
    metrics.open(o.metrics_path);
    if (!metrics) throw Error(ErrorKind::Storage, "cannot create " + o.metrics_path);
  }
  Engine::Options eo;
  eo.metrics = metrics.is_open() ? &metrics : nullptr;
  Engine engine(c, eo);
  std::uint64_t taken = 0;
  auto run = drive_engine(
      engine,
      [&]() -> std::optional<FramePair> {
        if (limit != 0 && taken >= limit) return std::nullopt;
        auto f = files.next();
        if (f) ++taken;
        return f;
      },
      nullptr, nullptr);

  Report r;
  r.command = "ingest";
  r.header = make_header(r.command, c, limit);
  r.header["low"] = o.low_path;
  r.header["high"] = o.high_path;
  describe_memory(r, c, run.frames, run.result, engine);
  if (!o.save_snapshot.empty()) save_snapshot(o.save_snapshot, run.result.snapshot);
  return r;
}

inline Report cmd_query_file(const Options& o) {
  std::ifstream in(o.snapshot_path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Storage, "cannot open " + o.snapshot_path);
  auto snap = read_snapshot(in);
  auto c = resolve_config(o, base_config(o));
  Report r;
  r.command = "query";
  r.header = make_header(r.command, c, nullptr);
  r.header["snapshot"] = o.snapshot_path;
  auto meta = snapshot_metadata(snap);
  meta.erase("items");
  r.summary = std::move(meta);
  item_rows(r, snap);
  r.check("token_positions", snap.token_positions.size() == snap.token_count);
  r.check("temporal_order", temporally_sorted(snap));
  return r;
}

// Queries the running engine at each watermark and compares against a
// synchronous replay to the same frame count.
inline Report cmd_query(const Options& o) {
  if (!o.snapshot_path.empty()) return cmd_query_file(o);
  auto c = resolve_config(o, base_config(o));
  const auto steps = single_steps(o, 200);
  std::vector<std::uint64_t> marks;
  if (o.at.empty()) {
    marks.push_back(steps);
  } else {
    for (const auto& s : split_list(o.at)) marks.push_back(parse_u64("--at", s));
  }
  std::sort(marks.begin(), marks.end());
  if (marks.back() > steps) throw usage("--at watermark beyond --steps");
  const auto spec = stream_for(o, c, steps);

  Engine engine(c);
  MemoryPipeline replay(c);
  SyntheticStream stream(spec);
  engine.start();

  Report r;
  r.command = "query";
  r.header = make_header(r.command, c, steps);
  r.header["stream"] = stream_json(spec);
  r.columns = {"t", "total_ns", "snapshot_acquire_ns", "retrieval_ns", "assembly_ns", "tokens", "csm_items",
               "dam_items", "replay_match"};
  bool all_match = true;
  std::uint64_t fed = 0;
  for (auto w : marks) {
    for (; fed < w; ++fed) {
      auto f = stream.next();
      replay.push(f->low, f->high);
      engine.ingest_frame(f->low, f->high);
    }
    engine.wait_for(w);
    auto q = engine.query();
    const bool match = q.published->frame_count == w &&
                       serialize_state(q.published->csm) == serialize_state(replay.state()) &&
                       q.snapshot == replay.snapshot();
    all_match = all_match && match;
    r.rows.push_back({w, q.latency.total_ns, q.latency.snapshot_acquire_ns, q.latency.retrieval_ns,
                      q.latency.assembly_ns, q.snapshot.token_count, q.snapshot.count(MemorySource::Csm),
                      q.snapshot.count(MemorySource::Dam), match});
  }
  engine.stop();
  r.summary["queries"] = marks.size();
  r.check("replay_equivalence", all_match);
  return r;
}

inline Report cmd_bench(const Options& o) {
  MemoryConfig base = base_config(o);
  base.low_bank_watermark = 1000;
  base.high_bank_watermark = 1000;
  auto c = resolve_config(o, base);
  const auto steps = parse_steps(o, "1000,100000");
  if (o.queries == 0) throw usage("--queries must be positive");

  Report r;
  r.command = "bench";
  r.header = make_header(r.command, c, steps);
  r.columns = {"t",           "queries",      "median_query_ns",     "median_snapshot_acquire_ns",
               "median_retrieval_ns", "median_assembly_ns", "ingest_ns_per_frame", "tokens"};
  std::vector<std::int64_t> medians;
  for (auto t : steps) {
    const auto sample = measure_query_latency(c, stream_for(o, c, t), o.queries);
    std::vector<std::int64_t> total, acquire, retrieval, assembly;
    for (const auto& q : sample.queries) {
      total.push_back(q.total_ns);
      acquire.push_back(q.snapshot_acquire_ns);
      retrieval.push_back(q.retrieval_ns);
      assembly.push_back(q.assembly_ns);
    }
    medians.push_back(median_ns(total));
    r.rows.push_back({t, o.queries, medians.back(), median_ns(acquire), median_ns(retrieval), median_ns(assembly),
                      sample.ingest_ns_per_frame, sample.tokens});
    log::info("bench: t={} median query {} ns", t, medians.back());
  }
  if (medians.size() >= 2) {
    // median at the longest stream over median at the shortest
    const auto lo = std::min_element(steps.begin(), steps.end()) - steps.begin();
    const auto hi = std::max_element(steps.begin(), steps.end()) - steps.begin();
    const double ratio = static_cast<double>(medians[static_cast<std::size_t>(hi)]) /
                         static_cast<double>(std::max<std::int64_t>(medians[static_cast<std::size_t>(lo)], 1));
    r.summary["query_time_ratio"] = ratio;
    std::ostringstream d;
    d << "t=" << steps[static_cast<std::size_t>(hi)] << " vs t=" << steps[static_cast<std::size_t>(lo)] << ": " << ratio;
    r.check("bounded_query_latency", ratio < 1.5, d.str());
  }
  return r;
}

inline Report cmd_ablate(const Options& o) {
  auto c = resolve_config(o, base_config(o), false);
  const auto steps = single_steps(o, 200);
  const auto spec = stream_for(o, c, steps);

  std::vector<ClusteringPolicy> clustering;
  if (o.policy.empty() || o.policy == "all") {
    clustering = {ClusteringPolicy::KMeans,        ClusteringPolicy::DBScan,       ClusteringPolicy::GMM,
                  ClusteringPolicy::NeighborMerge, ClusteringPolicy::NeighborDrop, ClusteringPolicy::UniformSample};
  } else {
    for (const auto& s : split_list(o.policy)) clustering.push_back(flag_value([&] { return parse_clustering_policy(s); }));
  }
  std::vector<RetrievalPolicy> retrieval;
  if (o.dam_policy.empty()) {
    retrieval = {c.retrieval_policy};
  } else if (o.dam_policy == "all") {
    retrieval = {RetrievalPolicy::FeatureCentric, RetrievalPolicy::CosineSimilarity, RetrievalPolicy::TemporalCentric,
                 RetrievalPolicy::UniformSample};
  } else {
    for (const auto& s : split_list(o.dam_policy)) retrieval.push_back(flag_value([&] { return parse_retrieval_policy(s); }));
  }
  std::vector<PolicyCase> cases;
  for (auto cp : clustering) {
    for (auto rp : retrieval) cases.push_back({cp, rp, c.selection_policy});
  }

  std::vector<PolicyMetrics> metrics;
  if (o.grid) {
    std::vector<double> r_csm;
    for (const auto& s : split_list(o.r_csm)) r_csm.push_back(parse_ratio(s));
    std::vector<std::uint32_t> r_pool;
    for (const auto& s : split_list(o.r_pool)) r_pool.push_back(static_cast<std::uint32_t>(parse_u64("--r-pool", s)));
    metrics = bench_capacity_grid(spec, cases, c, r_csm, r_pool);
  } else {
    metrics = bench_policies(spec, cases, c);
  }

  Report r;
  r.command = "ablate";
  r.header = make_header(r.command, c, steps);
  r.header["stream"] = stream_json(spec);
  r.columns = {"policy",       "dam_policy",       "selection",       "r_csm",
               "r_pool",       "n_csm",            "n_dam",           "tokens",
               "valid",        "note",             "steps",           "mean_update_ns",
               "median_update_ns", "within_cluster_variance", "memory_items", "total_weight",
               "weight_conserved", "fallbacks",    "selection_overlap"};
  bool capacity_ok = true, weight_ok = true, ranges_ok = true;
  std::size_t valid_rows = 0;
  for (const auto& m : metrics) {
    r.rows.push_back({std::string(to_string(m.policy.clustering)), std::string(to_string(m.policy.retrieval)),
                      std::string(to_string(m.policy.selection)), m.r_csm, m.r_pool, m.n_csm, m.n_dam, m.tokens,
                      m.valid, m.note, m.steps, m.mean_update_ns, m.median_update_ns, m.within_cluster_variance,
                      m.memory_items, m.total_weight, m.weight_conserved, m.fallbacks, m.selection_overlap});
    if (!m.valid) continue;
    ++valid_rows;
    capacity_ok = capacity_ok && m.memory_items <= m.n_csm;
    MemoryConfig pc = c;
    pc.n_csm = m.n_csm;
    if (make_consolidator(m.policy.clustering, pc)->conserves_weight()) weight_ok = weight_ok && m.weight_conserved;
    ranges_ok = ranges_ok && std::isfinite(m.within_cluster_variance) && m.within_cluster_variance >= 0.0 &&
                m.selection_overlap >= 0.0 && m.selection_overlap <= 1.0;
  }
  r.summary["rows"] = metrics.size();
  r.summary["valid_rows"] = valid_rows;
  r.check("capacity_bound", capacity_ok);
  r.check("weight_conserved", weight_ok);
  r.check("metric_ranges", ranges_ok);
  return r;
}

// One row per memory item (DAM maps average-pooled to the low grid) and one
// per frame, all over the same low-res column space.
inline Report cmd_export_pca(const Options& o) {
  auto c = resolve_config(o, base_config(o));
  const auto steps = single_steps(o, 200);
  const auto spec = stream_for(o, c, steps, 3);

  MemoryPipeline pipeline(c);
  SyntheticStream stream(spec);
  while (auto f = stream.next()) pipeline.push(f->low, f->high);
  const auto snap = pipeline.snapshot();
  const auto& labels = stream.labels();
  const auto pool = grid_side(c, Tier::High) / grid_side(c, Tier::Low);

  Report r;
  r.command = "export-pca";
  r.header = make_header(r.command, c, steps);
  r.header["stream"] = stream_json(spec);
  r.compact_rows = true;
  r.columns = {"kind", "source", "index", "temporal_position", "scene"};
  const auto width = grid_shape(c, Tier::Low).elements();
  for (std::size_t i = 0; i < width; ++i) r.columns.push_back("v" + std::to_string(i));

  auto push_row = [&](std::string kind, std::string source, std::uint64_t index, double position,
                      nlohmann::json scene, const FeatureMap& f) {
    std::vector<nlohmann::json> row{std::move(kind), std::move(source), index, position, std::move(scene)};
    row.reserve(5 + width);
    for (float v : f.values()) row.emplace_back(static_cast<double>(v));
    r.rows.push_back(std::move(row));
  };
  for (const auto& item : snap.items) {
    if (item.source == MemorySource::Csm) {
      push_row("memory", "csm", item.index, item.temporal_position, nullptr, item.feature);
    } else {
      push_row("memory", "dam", item.index, item.temporal_position, labels.at(item.index),
               average_pool(item.feature, pool));
    }
  }
  const auto frames = pipeline.low_bank().count();
  for (std::uint64_t i = 0; i < frames; ++i) {
    push_row("frame", "", i, static_cast<double>(i), labels.at(i), pipeline.low_bank().read(i));
  }
  r.summary["memory_items"] = snap.items.size();
  r.summary["frames"] = frames;
  r.summary["columns"] = r.columns.size();
  r.check("row_count", r.rows.size() == snap.items.size() + frames,
          std::to_string(r.rows.size()) + " rows");
  return r;
}

inline void emit(const Report& r, const Options& o, std::ostream& out) {
  std::ofstream file;
  std::ostream* sink = &out;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw Error(ErrorKind::Storage, "cannot create " + o.out);
    sink = &file;
  }
  if (o.format == "csv") write_csv(*sink, r);
  else write_json(*sink, r);
  sink->flush();
  if (!*sink) throw Error(ErrorKind::Storage, "write failed");
}

}  // namespace detail

// Exit status: 0 when every self-check passes, 1 when one fails, 2 on usage
// errors, 3 on runtime errors.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Streaming video memory engine"};
  app.name("vstream");
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value memory configuration file");
    sub->add_option("--seed", o.seed, "seed for the memory and the synthetic stream");
    sub->add_option("--steps", o.steps, "number of frames");
    sub->add_flag("--paper-shapes", o.paper_shapes, "full-size grids instead of desk-scale ones");
    sub->add_option("--policy", o.policy, "clustering policy");
    sub->add_option("--watermark", o.watermark, "resident frames per feature bank (or inf)");
    sub->add_option("--out", o.out, "write the report here instead of stdout");
    sub->add_option("--format", o.format, "report format")->check(CLI::IsMember({"json", "csv"}));
  };
  auto streamed = [&](CLI::App* sub) {
    sub->add_option("--stream", o.stream_path, "stream spec file");
    sub->add_option("--scenes", o.scenes, "number of synthetic scenes");
  };

  auto* simulate = app.add_subcommand("simulate", "run a synthetic stream through the engine");
  common(simulate);
  streamed(simulate);
  simulate->add_option("--metrics", o.metrics_path, "JSON-lines event log");
  simulate->add_option("--save-snapshot", o.save_snapshot, "binary snapshot output");
  simulate->add_option("--dump-frames", o.dump_prefix, "also write PREFIX.low.fvsb and PREFIX.high.fvsb");

  auto* ingest = app.add_subcommand("ingest", "run FVSB feature files through the engine");
  common(ingest);
  ingest->add_option("--low", o.low_path, "low-res FVSB file or FIFO")->required();
  ingest->add_option("--high", o.high_path, "high-res FVSB file or FIFO")->required();
  ingest->add_option("--metrics", o.metrics_path, "JSON-lines event log");
  ingest->add_option("--save-snapshot", o.save_snapshot, "binary snapshot output");

  auto* query = app.add_subcommand("query", "query a live engine at watermarks, or inspect a saved snapshot");
  common(query);
  streamed(query);
  query->add_option("--at", o.at, "comma-separated frame counts to query at");
  query->add_option("--snapshot", o.snapshot_path, "saved snapshot to inspect");

  auto* bench = app.add_subcommand("bench", "query latency versus stream length");
  common(bench);
  streamed(bench);
  bench->add_option("--queries", o.queries, "queries per stream length");

  auto* ablate = app.add_subcommand("ablate", "policy metrics table");
  common(ablate);
  streamed(ablate);
  ablate->add_option("--dam-policy", o.dam_policy, "retrieval policies (comma list or all)");
  ablate->add_flag("--grid", o.grid, "capacity grid over --r-csm x --r-pool");
  ablate->add_option("--r-csm", o.r_csm, "CSM token fractions");
  ablate->add_option("--r-pool", o.r_pool, "pool ratios");

  auto* export_pca = app.add_subcommand("export-pca", "memory items and frame features as rows");
  common(export_pca);
  streamed(export_pca);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    Report r;
    if (simulate->parsed()) r = detail::cmd_simulate(o);
    else if (ingest->parsed()) r = detail::cmd_ingest(o);
    else if (query->parsed()) r = detail::cmd_query(o);
    else if (bench->parsed()) r = detail::cmd_bench(o);
    else if (ablate->parsed()) r = detail::cmd_ablate(o);
    else r = detail::cmd_export_pca(o);
    detail::emit(r, o, out);
    if (!r.passed()) {
      for (const auto& c : r.checks) {
        if (!c.pass) err << "self-check failed: " << c.name << (c.detail.empty() ? "" : " (" + c.detail + ")") << '\n';
      }
      return kExitCheckFailed;
    }
    return kExitOk;
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return e.kind() == ErrorKind::Usage ? kExitUsage : kExitError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

}  // namespace vstream::cli
