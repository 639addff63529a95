#include "pm25/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pm25/similarity.hpp"

namespace fs = std::filesystem;

namespace pm25 {

namespace {

json section(const json& j, const char* key) {
  if (!j.contains(key)) return json::object();
  if (!j.at(key).is_object()) {
    throw Error(Errc::config_invalid, std::string("config section '") + key + "' must be an object", {{"field", key}});
  }
  return j.at(key);
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io_error, "cannot write " + path, {{"path", path}});
  out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot read " + path, {{"path", path}});
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::io_error, "malformed JSON in " + path + ": " + e.what(), {{"path", path}});
  }
}

void stamp_config(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_json(path_in(cfg.output_dir, "config.json"), cfg.to_json());
}

json similarity_json(const RunConfig& cfg) {
  return json{{"k", cfg.k},
              {"window_start", cfg.sim_window_start},
              {"window_len", cfg.sim_window_len ? json(*cfg.sim_window_len) : json(nullptr)},
              {"normalize", cfg.normalize}};
}

json merge_preset(json base, const json& user) {
  for (const auto& [key, value] : user.items()) {
    if (key != "preset") base[key] = value;
  }
  return base;
}

struct Prepared {
  HourlyPanel panel;
  std::vector<PeerSet> peers;
  SplitSpec split;
  FeatureScalers scalers;
};

Prepared prepare_inputs(const RunConfig& cfg) {
  Prepared p;
  p.panel = load_panel(cfg.output_dir);
  p.peers = load_or_compute_peers(cfg, p.panel);
  p.split = chronological_split(p.panel, cfg.split);
  p.scalers = fit_scalers(p.panel, p.split);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string RunConfig::stations_path() const {
  return station_dir.empty() ? path_in(output_dir, "synth") : station_dir;
}

json RunConfig::to_json() const {
  json features_j = feature_config_to_json(features);
  features_j["split"] = split;
  json model_j = model.to_json();
  model_j["preset"] = model_preset;
  json train_j = train.to_json();
  train_j["preset"] = train_preset;
  return json{{"output_dir", output_dir},
              {"seed", seed},
              {"data", {{"station_dir", station_dir}}},
              {"synth", synth.to_json()},
              {"ingest",
               {{"max_gap", max_gap},
                {"max_missing_frac", max_missing_frac},
                {"columns",
                 {{"timestamp", columns.timestamp},
                  {"pm25", columns.pm25},
                  {"ws", columns.ws},
                  {"wd", columns.wd},
                  {"temp", columns.temp}}}}},
              {"similarity", similarity_json(*this)},
              {"features", features_j},
              {"model", model_j},
              {"train", train_j},
              {"evaluation", eval.to_json()}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error(Errc::config_invalid, "config must be a JSON object");
  try {
    RunConfig c;
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
    c.station_dir = section(j, "data").value("station_dir", c.station_dir);

    json synth_j = section(j, "synth");
    if (!synth_j.contains("seed")) synth_j["seed"] = c.seed;
    c.synth = SynthSpec::from_json(synth_j);
    c.synth.validate();

    const json ing = section(j, "ingest");
    c.max_gap = ing.value("max_gap", c.max_gap);
    c.max_missing_frac = ing.value("max_missing_frac", c.max_missing_frac);
    const json cols = section(ing, "columns");
    c.columns.timestamp = cols.value("timestamp", c.columns.timestamp);
    c.columns.pm25 = cols.value("pm25", c.columns.pm25);
    c.columns.ws = cols.value("ws", c.columns.ws);
    c.columns.wd = cols.value("wd", c.columns.wd);
    c.columns.temp = cols.value("temp", c.columns.temp);
    if (c.max_gap < 0) throw Error(Errc::config_invalid, "max_gap must be >= 0", {{"field", "ingest.max_gap"}});
    if (!(c.max_missing_frac >= 0.0 && c.max_missing_frac <= 1.0)) {
      throw Error(Errc::config_invalid, "max_missing_frac must lie in [0, 1]", {{"field", "ingest.max_missing_frac"}});
    }

    const json sim = section(j, "similarity");
    c.k = sim.value("k", c.k);
    c.sim_window_start = sim.value("window_start", c.sim_window_start);
    if (sim.contains("window_len") && !sim.at("window_len").is_null()) c.sim_window_len = sim.at("window_len").get<Index>();
    c.normalize = sim.value("normalize", c.normalize);
    if (c.k < 1) throw Error(Errc::config_invalid, "similarity.k must be >= 1", {{"field", "similarity.k"}});

    const json feat = section(j, "features");
    c.features = feature_config_from_json(feat);
    c.features.validate();
    if (feat.contains("split")) {
      const auto s = feat.at("split").get<std::vector<double>>();
      if (s.size() != 3) throw Error(Errc::bad_fractions, "features.split must hold three fractions");
      c.split = {s[0], s[1], s[2]};
    }
    (void)chronological_split(100, c.split);  // validates the fractions

    const json model_j = section(j, "model");
    c.model_preset = model_j.value("preset", c.model_preset);
    c.model = ModelConfig::from_json(merge_preset(ModelConfig::preset(c.model_preset, c.k).to_json(), model_j));
    c.model.peers = c.k;
    c.model.window = c.features.window;
    c.model.leads = c.features.leads;
    c.model.analog_rows = c.features.analogs;
    c.model.aux_features = c.features.aux_features();
    c.model.validate();

    const json train_j = section(j, "train");
    c.train_preset = train_j.value("preset", c.train_preset);
    json tj = merge_preset(TrainConfig::preset(c.train_preset).to_json(), train_j);
    if (!train_j.contains("seed")) tj["seed"] = c.seed;
    c.train = TrainConfig::from_json(tj);
    c.train.validate();

    c.eval = EvaluationConfig::from_json(section(j, "evaluation"));
    c.eval.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(Errc::config_invalid, std::string("invalid config value: ") + e.what());
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(Errc::config_invalid, "override must look like key.path=value", {{"override", assignment}});
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw Error(Errc::config_invalid, "empty key segment", {{"override", assignment}});
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

RunConfig load_run_config(const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw Error(Errc::config_invalid, "cannot read config " + *path, {{"path", *path}});
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw Error(Errc::config_invalid, std::string("config is not valid JSON: ") + e.what(), {{"path", *path}});
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return RunConfig::from_json(doc);
}

// ---------------------------------------------------------------------------

HourlyPanel load_panel(const std::string& output_dir) {
  const std::string path = path_in(output_dir, "panel.csv");
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "no panel at " + path + " (run ingest first)", {{"path", path}});
  HourlyPanel panel = read_panel_csv(in);
  const std::string meta = path_in(output_dir, "stations.json");
  if (fs::exists(meta)) apply_panel_meta(panel, read_json(meta));
  return panel;
}

std::vector<PeerSet> load_or_compute_peers(const RunConfig& cfg, const HourlyPanel& panel) {
  const std::string path = path_in(cfg.output_dir, "peers.json");
  if (fs::exists(path)) {
    const json j = read_json(path);
    if (j.value("similarity", json()) == similarity_json(cfg) && j.value("station_ids", json()) == panel_meta_json(panel)["stations"]) {
      return peers_from_json(j.at("peers"));
    }
  }
  run_similarity(cfg);
  return peers_from_json(read_json(path).at("peers"));
}

std::string run_synth(const RunConfig& cfg) {
  stamp_config(cfg);
  const SynthResult res = generate(cfg.synth);
  const std::string dir = cfg.stations_path();
  const auto paths = write_station_csvs(dir, res.panel);
  write_json(path_in(dir, "truth.json"), res.truth.to_json(cfg.synth));
  std::ostringstream msg;
  msg << "synth: wrote " << paths.size() << " stations x " << cfg.synth.n_hours << " hours to " << dir << " ("
      << res.truth.gaps.size() << " gaps, " << res.truth.clamp_count << " clamped)";
  return msg.str();
}

std::string run_ingest(const RunConfig& cfg) {
  stamp_config(cfg);
  const std::string dir = cfg.stations_path();
  if (!fs::is_directory(dir)) throw Error(Errc::io_error, "station directory not found: " + dir, {{"path", dir}});
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(Errc::no_stations, "no station CSV files in " + dir, {{"path", dir}});

  std::vector<StationInput> inputs;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw Error(Errc::io_error, "cannot read " + f.string(), {{"path", f.string()}});
    StationInput si;
    si.id = f.stem().string();
    si.name = si.id;
    try {
      si.data = parse_station_csv(in, cfg.columns);
    } catch (Error& e) {
      json detail = e.detail();
      detail["file"] = f.string();
      throw Error(e.code(), f.filename().string() + ": " + e.what(), detail);
    }
    inputs.push_back(std::move(si));
  }
  const HourlyPanel aligned = align_panel(inputs);
  const HourlyPanel filtered = filter_stations(aligned, cfg.max_missing_frac);
  const ImputeResult imputed = impute_gaps(filtered, cfg.max_gap);

  {
    std::ostringstream os;
    write_panel_csv(os, imputed.panel);
    write_text(path_in(cfg.output_dir, "panel.csv"), os.str());
  }
  write_json(path_in(cfg.output_dir, "stations.json"), panel_meta_json(imputed.panel));
  write_json(path_in(cfg.output_dir, "imputation_report.json"), imputed.report.to_json());
  std::ostringstream msg;
  msg << "ingest: " << imputed.panel.n_stations() << " stations kept, " << filtered.excluded.size() << " excluded, "
      << imputed.panel.n_hours() << " hours";
  return msg.str();
}

std::string run_similarity(const RunConfig& cfg) {
  stamp_config(cfg);
  const HourlyPanel panel = load_panel(cfg.output_dir);
  const SplitSpec split = chronological_split(panel, cfg.split);
  const Index len = cfg.sim_window_len.value_or(split.train_end - cfg.sim_window_start);
  const SimilarityMatrix sim = pairwise_matrix(panel, cfg.sim_window_start, len, cfg.normalize);
  const auto peers = select_all_peers(sim, cfg.k);
  {
    std::ostringstream os;
    sim.write_csv(os);
    write_text(path_in(cfg.output_dir, "similarity.csv"), os.str());
  }
  write_json(path_in(cfg.output_dir, "similarity.json"), sim.to_json());
  write_json(path_in(cfg.output_dir, "peers.json"),
             json{{"similarity", similarity_json(cfg)}, {"station_ids", panel_meta_json(panel)["stations"]},
                  {"window", {{"start", cfg.sim_window_start}, {"len", len}}}, {"peers", peers_to_json(peers)}});
  std::ostringstream msg;
  msg << "similarity: " << sim.station_ids.size() << " stations, window [" << cfg.sim_window_start << ", "
      << cfg.sim_window_start + len << "), K=" << cfg.k;
  return msg.str();
}

std::string run_prepare(const RunConfig& cfg) {
  stamp_config(cfg);
  const Prepared p = prepare_inputs(cfg);
  const SampleSet samples = build_samples(p.panel, p.peers, p.scalers, p.split, cfg.features);
  {
    std::ostringstream os(std::ios::binary);
    write_sample_cache(os, samples);
    write_text(path_in(cfg.output_dir, "samples.bin"), os.str());
  }
  write_json(path_in(cfg.output_dir, "scalers.json"), p.scalers.to_json());
  json report = samples.report.to_json();
  report["split"] = {{"train_end", p.split.train_end}, {"val_end", p.split.val_end}, {"n_hours", p.split.n_hours}};
  write_json(path_in(cfg.output_dir, "build_report.json"), report);
  std::ostringstream msg;
  msg << "prepare: " << samples.train.size() << " train / " << samples.val.size() << " val / " << samples.test.size()
      << " test samples";
  return msg.str();
}

std::string run_train(const RunConfig& cfg) {
  stamp_config(cfg);
  const Prepared p = prepare_inputs(cfg);
  const SampleSet samples = build_samples(p.panel, p.peers, p.scalers, p.split, cfg.features);
  std::ofstream log(path_in(cfg.output_dir, "train_log.jsonl"));
  if (!log) throw Error(Errc::io_error, "cannot write the training log");
  const TrainResult res = train(samples, cfg.model, cfg.train, TrainOptions{&p.scalers, &log, nullptr});

  Checkpoint ck;
  ck.model = cfg.model;
  ck.features = cfg.features;
  ck.scalers = p.scalers;
  ck.peers = p.peers;
  ck.params = res.params;
  ck.training = {{"train_config", cfg.train.to_json()},
                 {"state", res.state.to_json()},
                 {"split", {{"train_end", p.split.train_end}, {"val_end", p.split.val_end}}},
                 {"samples", samples.report.to_json()},
                 {"parameter_count", res.params.count()}};
  ck.save(path_in(cfg.output_dir, "best.ckpt.json"));
  std::ostringstream msg;
  msg << "train: " << res.state.epoch << " epochs, " << res.state.step << " steps, best val loss "
      << res.state.best_val_loss << " at epoch " << res.state.best_epoch << ", " << res.params.count() << " parameters";
  return msg.str();
}

std::string run_evaluate(const RunConfig& cfg) {
  stamp_config(cfg);
  const Prepared p = prepare_inputs(cfg);
  const std::string models_dir = path_in(cfg.output_dir, "models");
  fs::create_directories(models_dir);
  const HorizonInputs in{p.panel, p.split, p.peers, p.scalers, cfg.features, cfg.model, cfg.train};
  const auto on_trained = [&](const std::vector<Index>& leads, const TrainResult& res, const SampleSet& samples) {
    Checkpoint ck;
    ck.model = cfg.model;
    ck.model.leads = leads;
    ck.features = cfg.features;
    ck.features.leads = leads;
    ck.scalers = p.scalers;
    ck.peers = p.peers;
    ck.params = res.params;
    ck.training = {{"state", res.state.to_json()}, {"samples", samples.report.to_json()}};
    std::string name = "lead";
    for (const Index l : leads) name += "_" + std::to_string(l);
    ck.save(path_in(models_dir, name + ".ckpt.json"));
  };
  const HorizonEvaluation ev = evaluate_horizons(in, cfg.eval, on_trained);
  {
    std::ostringstream os;
    ev.model.write_csv(os);
    write_text(path_in(cfg.output_dir, "metrics.csv"), os.str());
  }
  {
    std::ostringstream os;
    ev.persistence.write_csv(os);
    write_text(path_in(cfg.output_dir, "persistence.csv"), os.str());
  }
  write_json(path_in(cfg.output_dir, "metrics.json"),
             json{{"model", ev.model.to_json()}, {"persistence", ev.persistence.to_json()}, {"training", ev.training}});

  std::ostringstream msg;
  msg << "evaluate: " << ev.model.stations.size() << " stations x " << ev.model.leads.size() << " leads";
  for (const Index lead : ev.model.leads) {
    const auto* c = ev.model.find("ALL", lead);
    if (c && c->metrics.r2) msg << "; R2(" << lead << ")=" << *c->metrics.r2;
  }
  return msg.str();
}

Forecast run_forecast(const RunConfig& cfg, const std::string& station, const std::string& origin) {
  const auto hour = parse_iso8601_hour(origin);
  if (!hour) throw Error(Errc::bad_timestamp, "cannot parse origin '" + origin + "'", {{"origin", origin}});
  const HourlyPanel panel = load_panel(cfg.output_dir);
  const Checkpoint ck = Checkpoint::load(path_in(cfg.output_dir, "best.ckpt.json"));
  const Index t = panel.require_hour(*hour);
  return predict(panel, station, t, ck.params, ck.model, ck.scalers, ck.peers, ck.features);
}

}  // namespace pm25
