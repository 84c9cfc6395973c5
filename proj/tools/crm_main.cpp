// crm: command-line front end for calibration, evaluation, synthetic data,
// the audit server and its benchmark.

#include <algorithm>
#include <cctype>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "crm/audit_service.hpp"
#include "crm/bench.hpp"
#include "crm/calibration.hpp"
#include "crm/error.hpp"
#include "crm/experiments.hpp"
#include "crm/reports.hpp"
#include "crm/synth_oracle.hpp"

namespace {

using nlohmann::json;

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw crm::InvalidInput("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw crm::InvalidInput(path + " is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw crm::InvalidInput("cannot write " + path);
}

void require_file(const std::string& flag, const std::string& path) {
  if (path.empty()) throw crm::InvalidInput(flag + " is required");
  if (!std::filesystem::exists(path)) throw crm::InvalidInput(flag + ": no such file " + path);
}

std::pair<std::string, int> parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw crm::InvalidInput("--bind must look like host:port");
  const std::string port = bind.substr(colon + 1);
  if (port.empty() || !std::all_of(port.begin(), port.end(), ::isdigit) || port.size() > 5)
    throw crm::InvalidInput("--bind port must be a number");
  return {bind.substr(0, colon), std::stoi(port)};
}

struct Common {
  std::string trace;
  std::string artifact;
  std::string out;
  std::uint64_t seed = 42;
};

void add_trace(CLI::App* cmd, Common& c) {
  cmd->add_option("--trace", c.trace, "CRMT trace file")->envname("CRM_TRACE");
}
void add_artifact(CLI::App* cmd, Common& c) {
  cmd->add_option("--artifact", c.artifact, "Calibration artifact (JSON)")->envname("CRM_ARTIFACT");
}
void add_out(CLI::App* cmd, Common& c, const std::string& what) {
  cmd->add_option("--out", c.out, what)->envname("CRM_OUT");
}
void add_seed(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->envname("CRM_SEED")->capture_default_str();
}

struct EvalFlags {
  std::size_t folds = 5;
  std::string levels = "L1,L2,L3";
  std::string controls;
  std::size_t n_boot = 1000;
  std::size_t n_perms = 10;
  bool compact_l2 = false;
  std::size_t early_window = crm::kDefaultEarlyWindow;
  std::vector<std::string> noise_blocks;
  std::vector<double> noise_eps;
  std::string table;
  std::string format = "text";
};

void add_eval_flags(CLI::App* cmd, EvalFlags& f, const std::string& default_controls) {
  f.controls = default_controls;
  cmd->add_option("--folds", f.folds, "Cross-validation folds")->envname("CRM_FOLDS")->capture_default_str();
  cmd->add_option("--levels", f.levels, "Feature levels, e.g. L1,L2,L3 or L3")
      ->envname("CRM_LEVELS")
      ->capture_default_str();
  cmd->add_option("--controls", f.controls,
                  "Controls: permutation,l3-only,loo,pca-sweep,pc-rank,same-topic,layer-sweep,baselines,noise | all | none")
      ->envname("CRM_CONTROLS")
      ->capture_default_str();
  cmd->add_option("--n-boot", f.n_boot, "Bootstrap resamples")->envname("CRM_N_BOOT")->capture_default_str();
  cmd->add_option("--n-perms", f.n_perms, "Label shuffles for the permutation control")
      ->envname("CRM_N_PERMS")
      ->capture_default_str();
  cmd->add_flag("--compact-l2", f.compact_l2, "Emit only kl_mean for L2")->envname("CRM_COMPACT_L2");
  cmd->add_option("--early-window", f.early_window, "KL early window")->envname("CRM_EARLY_WINDOW")->capture_default_str();
  cmd->add_option("--noise-block", f.noise_blocks, "Noise block name=a-b (repeatable)")->envname("CRM_NOISE_BLOCK");
  cmd->add_option("--noise-eps", f.noise_eps, "Noise scales (repeatable)")->envname("CRM_NOISE_EPS");
  cmd->add_option("--table", f.table, "Also write the aligned-text report here")->envname("CRM_TABLE");
  cmd->add_option("--format", f.format, "stdout format: text or json")
      ->envname("CRM_FORMAT")
      ->check(CLI::IsMember({"text", "json"}))
      ->capture_default_str();
}

int run_evaluate(const Common& c, const EvalFlags& f) {
  require_file("--trace", c.trace);
  require_file("--artifact", c.artifact);
  const crm::Dataset ds = crm::load_trace(c.trace);
  const crm::CalibrationArtifact artifact = crm::load_artifact(c.artifact);

  crm::ExperimentConfig cfg;
  cfg.folds = f.folds;
  cfg.fold_seed = c.seed;
  cfg.eval.bootstrap_seed = c.seed;
  cfg.eval.n_boot = f.n_boot;
  cfg.permutation_seed = c.seed;
  cfg.noise_seed = c.seed;
  cfg.n_perms = f.n_perms;
  cfg.levels = crm::LevelSet::parse(f.levels);
  cfg.features.compact_l2 = f.compact_l2;
  cfg.features.early_window = f.early_window;
  for (const auto& b : f.noise_blocks) cfg.noise_blocks.push_back(crm::NoiseBlock::parse(b));
  if (!f.noise_eps.empty()) cfg.noise_eps = f.noise_eps;

  const crm::ControlResults results =
      crm::run_evaluation(ds, artifact, cfg, crm::ControlSelection::parse(f.controls));
  const json doc = crm::controls_to_json(results);
  const std::string text = crm::format_controls(results);
  if (!c.out.empty()) write_text(c.out, doc.dump(2) + "\n");
  if (!f.table.empty()) write_text(f.table, text);
  std::cout << (f.format == "json" ? doc.dump(2) + "\n" : text);
  return 0;
}

int run_serve(const crm::ServiceConfig& config) {
  // Block the shutdown signals before any server thread exists so they are
  // delivered to sigwait below.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  auto service = crm::make_service(config);
  crm::AuditServer server(*service, config.bind_host, config.port);
  server.start();
  const auto stats = service->stats();
  std::cerr << "crm audit server on http://" << config.bind_host << ":" << server.port() << " (model "
            << stats.model_name << ", " << stats.trajectory_length << " trajectory layers, "
            << stats.total_requests << " logged audits, log " << config.log_path.string() << ")\n";

  int sig = 0;
  sigwait(&signals, &sig);
  std::cerr << "shutting down (signal " << sig << ")\n";
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Computational reality monitoring toolkit"};
  app.set_config("--config", "", "Configuration file (TOML/INI); flags and CRM_ environment variables override it")
      ->envname("CRM_CONFIG");
  app.require_subcommand(1);

  Common common;

  // generate
  std::string spec_path;
  auto* generate = app.add_subcommand("generate", "Write a synthetic trace from a planted spec");
  generate->add_option("--spec", spec_path, "Planted spec (JSON)")->envname("CRM_SPEC")->required();
  add_out(generate, common, "Output trace file");
  add_seed(generate, common);

  // calibrate
  std::size_t n_cal = 100;
  double threshold = 0.01;
  std::string direction = "pc1";
  std::string score_mode = "cross_layer_variance";
  auto* calibrate = app.add_subcommand("calibrate", "Fit layer selection, directions and LTS statistics");
  add_trace(calibrate, common);
  add_out(calibrate, common, "Output artifact file");
  add_seed(calibrate, common);
  calibrate->add_option("--n-cal", n_cal, "Calibration samples")->envname("CRM_N_CAL")->capture_default_str();
  calibrate->add_option("--threshold", threshold, "Layer score threshold")->envname("CRM_THRESHOLD")->capture_default_str();
  calibrate->add_option("--direction", direction, "pc1 | supervised | pc-rank:<r>")
      ->envname("CRM_DIRECTION")
      ->capture_default_str();
  calibrate->add_option("--score-mode", score_mode, "cross_layer_variance | pc1_explained_variance")
      ->envname("CRM_SCORE_MODE")
      ->capture_default_str();

  // featurize
  std::string levels = "L1,L2,L3";
  bool compact_l2 = false;
  std::size_t early_window = crm::kDefaultEarlyWindow;
  auto* featurize = app.add_subcommand("featurize", "Compute feature vectors for every sample");
  add_trace(featurize, common);
  add_artifact(featurize, common);
  add_out(featurize, common, "Output features file (JSON)");
  featurize->add_option("--levels", levels, "Feature levels")->envname("CRM_LEVELS")->capture_default_str();
  featurize->add_flag("--compact-l2", compact_l2, "Emit only kl_mean for L2")->envname("CRM_COMPACT_L2");
  featurize->add_option("--early-window", early_window, "KL early window")
      ->envname("CRM_EARLY_WINDOW")
      ->capture_default_str();

  // evaluate / controls
  EvalFlags eval_flags, control_flags;
  auto* evaluate = app.add_subcommand("evaluate", "Cross-validated detector evaluation with optional controls");
  add_trace(evaluate, common);
  add_artifact(evaluate, common);
  add_out(evaluate, common, "Output report (JSON)");
  add_seed(evaluate, common);
  add_eval_flags(evaluate, eval_flags, "none");
  auto* controls = app.add_subcommand("controls", "Evaluation plus the full control and ablation suite");
  add_trace(controls, common);
  add_artifact(controls, common);
  add_out(controls, common, "Output report (JSON)");
  add_seed(controls, common);
  add_eval_flags(controls, control_flags, "all");

  // serve
  crm::ServiceConfig service;
  std::string bind = "127.0.0.1:8000";
  std::string log_path = service.log_path.string();
  std::string dashboard;
  auto* serve = app.add_subcommand("serve", "Run the audit HTTP server until SIGINT/SIGTERM");
  add_artifact(serve, common);
  serve->add_option("--bind", bind, "host:port")->envname("CRM_BIND")->capture_default_str();
  serve->add_option("--log", log_path, "Audit log (JSON lines)")->envname("CRM_LOG")->capture_default_str();
  serve->add_option("--extractor-endpoint", service.extractor_endpoint, "Extractor base URL for text audits")
      ->envname("CRM_EXTRACTOR_ENDPOINT");
  serve->add_option("--extractor-timeout", service.extractor_timeout_s, "Extractor deadline in seconds")
      ->envname("CRM_EXTRACTOR_TIMEOUT")
      ->capture_default_str();
  serve->add_option("--z-threshold", service.z_threshold, "Anomaly z threshold")
      ->envname("CRM_Z_THRESHOLD")
      ->capture_default_str();
  serve->add_option("--display-threshold", service.display_threshold, "|LTS| threshold for flagged layers")
      ->envname("CRM_DISPLAY_THRESHOLD")
      ->capture_default_str();
  serve->add_flag("--retain-text", service.retain_text, "Store raw context/query in the log")
      ->envname("CRM_RETAIN_TEXT");
  serve->add_option("--dashboard", dashboard, "Static dashboard page served at /")->envname("CRM_DASHBOARD");

  // bench
  crm::BenchConfig bench_cfg;
  std::string payload = "lts";
  std::string bench_table;
  auto* bench = app.add_subcommand("bench", "Benchmark a running audit server");
  bench->add_option("--endpoint", bench_cfg.endpoint, "Server base URL")->envname("CRM_ENDPOINT")->capture_default_str();
  bench->add_option("-n,--n-requests", bench_cfg.n_requests, "Requests to issue")
      ->envname("CRM_N_REQUESTS")
      ->capture_default_str();
  bench->add_option("--payload", payload, "lts | displacements | text")->envname("CRM_PAYLOAD")->capture_default_str();
  add_seed(bench, common);
  add_out(bench, common, "Output report (JSON)");
  bench->add_option("--table", bench_table, "Also write the text table here")->envname("CRM_TABLE");

  // backproject
  std::string unembed_path, vocab_path;
  std::size_t bp_layer = 0, top_k = 20;
  auto* backproject = app.add_subcommand("backproject", "Project a layer direction through an unembedding matrix");
  add_artifact(backproject, common);
  add_out(backproject, common, "Output token list (JSON)");
  backproject->add_option("--layer", bp_layer, "Model layer index present in the artifact")
      ->envname("CRM_LAYER")
      ->required();
  backproject->add_option("--unembed", unembed_path, "Raw little-endian f32 V x d matrix")
      ->envname("CRM_UNEMBED")
      ->required();
  backproject->add_option("--vocab", vocab_path, "Vocabulary, one token per line")->envname("CRM_VOCAB")->required();
  backproject->add_option("--top-k", top_k, "Tokens to report")->envname("CRM_TOP_K")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      crm::PlantedSpec spec = crm::planted_spec_from_json(read_json(spec_path));
      if (generate->count("--seed") > 0 || std::getenv("CRM_SEED")) spec.seed = common.seed;
      if (common.out.empty()) throw crm::InvalidInput("--out is required");
      const crm::Dataset ds = crm::generate(spec);
      const auto bytes = crm::save_trace(ds, common.out);
      std::cout << "wrote " << ds.samples.size() << " samples (" << spec.num_layers << " layers x "
                << spec.hidden_dim << ") to " << common.out << " (" << bytes << " bytes)\n";
    } else if (*calibrate) {
      require_file("--trace", common.trace);
      if (common.out.empty()) throw crm::InvalidInput("--out is required");
      crm::CalibrationConfig cfg;
      cfg.n_cal = n_cal;
      cfg.threshold = threshold;
      cfg.seed = common.seed;
      cfg.direction = crm::DirectionSpec::parse(direction);
      cfg.score_mode = crm::layer_score_mode_from_string(score_mode);
      const crm::Dataset ds = crm::load_trace(common.trace);
      const crm::CalibrationArtifact artifact = crm::calibrate(ds, cfg);
      crm::save_artifact(artifact, common.out);
      crm::TextTable t({"Layer", "Score", "Selected", "LTS mean", "LTS std"});
      const auto selected = artifact.selected_layers();
      for (std::size_t l = 0; l < artifact.layer_scores.size(); ++l) {
        const auto it = std::find(selected.begin(), selected.end(), l);
        if (it == selected.end()) {
          t.add_row({"L" + std::to_string(l), crm::fmt(artifact.layer_scores[l], 4), "", "", ""});
        } else {
          const auto& st = artifact.lts_stats[static_cast<std::size_t>(it - selected.begin())];
          t.add_row({"L" + std::to_string(l), crm::fmt(artifact.layer_scores[l], 4), "yes", crm::fmt(st.mean, 4),
                     crm::fmt(st.std, 4)});
        }
      }
      std::cout << t.render() << selected.size() << " of " << artifact.num_layers << " layers selected ("
                << crm::to_string(cfg.score_mode) << " > " << threshold << ", direction " << cfg.direction.to_string()
                << ", n_cal " << artifact.n_cal << ")\nartifact " << common.out << " fingerprint "
                << crm::artifact_fingerprint(artifact) << '\n';
    } else if (*featurize) {
      require_file("--trace", common.trace);
      require_file("--artifact", common.artifact);
      if (common.out.empty()) throw crm::InvalidInput("--out is required");
      crm::FeatureOptions opts;
      opts.compact_l2 = compact_l2;
      opts.early_window = early_window;
      const crm::FeatureTable table = crm::extract_features(crm::load_trace(common.trace),
                                                            crm::load_artifact(common.artifact),
                                                            crm::LevelSet::parse(levels), opts);
      write_text(common.out, crm::features_to_json(table).dump() + "\n");
      std::cout << "wrote " << table.values.rows() << " x " << table.values.cols() << " features to " << common.out
                << '\n';
    } else if (*evaluate) {
      return run_evaluate(common, eval_flags);
    } else if (*controls) {
      return run_evaluate(common, control_flags);
    } else if (*serve) {
      service.artifact_path = common.artifact;
      service.log_path = log_path;
      service.dashboard_path = dashboard;
      std::tie(service.bind_host, service.port) = parse_bind(bind);
      return run_serve(service);
    } else if (*bench) {
      bench_cfg.kind = crm::payload_kind_from_string(payload);
      bench_cfg.seed = common.seed;
      const crm::BenchReport report = crm::run_bench(bench_cfg);
      const std::string text = crm::format_bench(report);
      if (!common.out.empty()) write_text(common.out, crm::bench_to_json(report).dump(2) + "\n");
      if (!bench_table.empty()) write_text(bench_table, text);
      std::cout << text;
      return report.n_errors == 0 ? 0 : 1;
    } else if (*backproject) {
      require_file("--artifact", common.artifact);
      require_file("--unembed", unembed_path);
      require_file("--vocab", vocab_path);
      const crm::CalibrationArtifact artifact = crm::load_artifact(common.artifact);
      const auto it = std::find_if(artifact.directions.begin(), artifact.directions.end(),
                                   [&](const crm::LayerDirection& d) { return d.layer_index == bp_layer; });
      if (it == artifact.directions.end())
        throw crm::InvalidInput("layer " + std::to_string(bp_layer) + " is not a selected layer of the artifact");
      std::vector<std::string> vocab;
      {
        std::ifstream in(vocab_path);
        for (std::string line; std::getline(in, line);) vocab.push_back(line);
      }
      const std::size_t d = artifact.hidden_dim;
      const auto bytes = std::filesystem::file_size(unembed_path);
      if (bytes % (4 * d) != 0)
        throw crm::InvalidInput("--unembed size " + std::to_string(bytes) + " is not a multiple of 4 * hidden_dim");
      const std::size_t v = bytes / (4 * d);
      std::vector<float> raw(v * d);
      std::ifstream in(unembed_path, std::ios::binary);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
      Eigen::MatrixXd unembed(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(d));
      for (std::size_t r = 0; r < v; ++r)
        for (std::size_t c = 0; c < d; ++c)
          unembed(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = raw[r * d + c];
      const auto tokens = crm::vocab_backproject(*it, unembed, vocab, top_k);
      crm::TextTable t({"Rank", "Token", "Index", "Score"});
      json rows = json::array();
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        t.add_row({std::to_string(i + 1), tokens[i].token, std::to_string(tokens[i].index), crm::fmt(tokens[i].score, 4)});
        rows.push_back({{"token", tokens[i].token}, {"index", tokens[i].index}, {"score", tokens[i].score}});
      }
      if (!common.out.empty())
        write_text(common.out, json{{"layer", bp_layer}, {"tokens", std::move(rows)}}.dump(2) + "\n");
      std::cout << t.render();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
