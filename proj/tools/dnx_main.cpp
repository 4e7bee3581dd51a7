// dnx: build, analyze, gradient-check, train and sweep the camera-encoder
// family on the synthetic heatmap task.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dnx/ablation.hpp"
#include "dnx/config_io.hpp"
#include "dnx/svg_plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 1;
};

json load_config_doc(const CommonArgs& args) {
  json doc = args.config_path.empty() ? json::object()
                                      : dnx::load_json_file(args.config_path);
  for (const std::string& s : args.overrides) dnx::apply_override(doc, s);
  return doc;
}

std::pair<int64_t, int64_t> parse_size(const std::string& s) {
  const size_t x = s.find('x');
  if (x == std::string::npos) {
    const int64_t v = std::stoll(s);
    return {v, v};
  }
  return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "model config JSON file");
  cmd->add_option("--set", args.overrides,
                  "dotted-path override KEY=VALUE (repeatable), e.g. "
                  "preset=small or stages.2.attention_tail=4");
  cmd->add_option("--seed", args.seed, "seed for all randomness");
}

int cmd_build(const CommonArgs& args, const std::string& input_size) {
  const json doc = load_config_doc(args);
  const dnx::ModelConfig cfg = dnx::model_config_from_json(doc);
  const std::vector<dnx::Violation> violations = dnx::validate_config(cfg);
  if (!violations.empty()) {
    std::cerr << "config validation failed:\n";
    for (const auto& v : violations) {
      std::cerr << "  " << v.path << ": " << v.message << "\n";
    }
    return 2;
  }
  auto [in_h, in_w] = parse_size(input_size);
  dnx::Network<float> net = dnx::build_network<float>(cfg, args.seed);

  std::cout << "config: " << (cfg.name.empty() ? "(unnamed)" : cfg.name)
            << "  id " << dnx::config_id(cfg) << "\n";
  std::cout << "input " << cfg.input_channels << "x" << in_h << "x" << in_w
            << "  stem " << (cfg.full_resolution ? "no" : "yes")
            << "  reduction x" << cfg.reduction_factor() << "\n\n";
  std::cout << std::left << std::setw(8) << "stage" << std::right
            << std::setw(8) << "blocks" << std::setw(6) << "lk" << std::setw(6)
            << "lc" << std::setw(6) << "attn" << std::setw(12) << "out"
            << "\n";
  int64_t h = in_h, w = in_w;
  if (!cfg.full_resolution) {
    h /= 2;
    w /= 2;
  }
  for (int64_t i = 0; i < cfg.stage_count(); ++i) {
    const dnx::StageConfig& st = cfg.stages[static_cast<size_t>(i)];
    h /= 2;
    w /= 2;
    std::cout << std::left << std::setw(8) << ("stage" + std::to_string(i + 1))
              << std::right << std::setw(8) << st.blocks << std::setw(6)
              << st.lk_channels << std::setw(6) << st.lc_channels
              << std::setw(6) << st.attention_tail << std::setw(12)
              << (std::to_string(h) + "x" + std::to_string(w)) << "\n";
  }
  std::cout << "\nparameters " << dnx::count_params_built(net) << "\n";
  return 0;
}

int cmd_analyze(const CommonArgs& args, const std::string& input_size,
                const std::string& format, const std::string& out_path,
                bool exclude_norm_act) {
  const dnx::ModelConfig cfg = dnx::model_config_from_json(load_config_doc(args));
  auto [in_h, in_w] = parse_size(input_size);
  dnx::CostOptions opts;
  opts.include_norm_act = !exclude_norm_act;
  const dnx::CostReport rep = dnx::analyze_config(cfg, in_h, in_w, opts);
  const dnx::ReceptiveFieldReport rf = dnx::receptive_field_analytic(cfg);

  std::string rendered;
  if (format == "table") {
    rendered = dnx::cost_report_to_table(rep);
    rendered += "receptive field per stage:";
    for (const dnx::StageRF& s : rf.per_stage) {
      rendered += s.global ? " GLOBAL" : " " + std::to_string(s.r);
    }
    rendered += "\n";
  } else if (format == "json") {
    json j = dnx::cost_report_to_json(rep);
    j["receptive_field"] = json::array();
    for (const dnx::StageRF& s : rf.per_stage) {
      j["receptive_field"].push_back(
          s.global ? json("GLOBAL") : json(s.r));
    }
    rendered = j.dump(2) + "\n";
  } else if (format == "csv") {
    rendered = dnx::cost_report_to_csv(rep);
  } else {
    throw dnx::ConfigError("unknown format '" + format + "' (table|json|csv)");
  }
  if (out_path.empty()) {
    std::cout << rendered;
  } else {
    dnx::write_text_file(out_path, rendered);
  }
  return 0;
}

int cmd_gradcheck(const CommonArgs& args, const std::string& input_size,
                  double tolerance, double epsilon,
                  const std::string& out_dir) {
  const dnx::ModelConfig cfg = dnx::model_config_from_json(load_config_doc(args));
  auto [in_h, in_w] = parse_size(input_size);
  dnx::GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.epsilon = epsilon;
  opts.input_h = in_h;
  opts.input_w = in_w;
  const dnx::GradCheckReport rep =
      dnx::grad_check(cfg, args.seed, dnx::mix_seed(args.seed, 2), opts);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    dnx::write_text_file((fs::path(out_dir) / "gradcheck.json").string(),
                         dnx::gradcheck_report_to_json(rep).dump(2) + "\n");
  }
  std::cout << (rep.pass ? "PASS" : "FAIL") << "  tensors "
            << rep.entries.size() << "  worst " << rep.worst_tensor << " "
            << dnx::format_double(rep.worst_err) << " (tolerance "
            << dnx::format_double(rep.tolerance) << ")\n";
  return rep.pass ? 0 : 1;
}

int cmd_train_toy(const CommonArgs& args, const dnx::TrainRecipe& recipe,
                  const std::string& out_dir) {
  dnx::ModelConfig cfg = dnx::model_config_from_json(load_config_doc(args));
  cfg.head = dnx::HeadKind::Heatmap;
  const auto t0 = std::chrono::steady_clock::now();
  const dnx::TrainReport rep = dnx::train_loop<float>(cfg, args.seed, recipe);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    dnx::write_text_file((fs::path(out_dir) / "train_report.json").string(),
                         dnx::train_report_to_json(rep).dump(2) + "\n");
  }
  std::cout << "steps " << rep.steps << "  initial "
            << dnx::format_double(rep.initial_loss) << "  final "
            << dnx::format_double(rep.final_loss)
            << (rep.diverged ? "  DIVERGED" : "") << "  ("
            << dnx::format_double(wall) << "s)\n";
  return rep.diverged ? 1 : 0;
}

int cmd_ablate(const CommonArgs& args, int64_t jobs, bool seed_given,
               const std::string& out_dir) {
  json doc = load_config_doc(args);
  dnx::GridSpec spec = dnx::grid_spec_from_json(doc);
  if (seed_given) spec.base_seed = args.seed;

  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<dnx::RunRecord> records = dnx::run_grid(spec, jobs);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  fs::create_directories(out_dir);
  dnx::write_text_file((fs::path(out_dir) / "results.csv").string(),
                       dnx::write_csv(records));

  // the manifest is the one output that may carry timestamps
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  json manifest;
  manifest["command"] = "ablate";
  manifest["kind"] = dnx::to_string(spec.kind);
  manifest["config"] = args.config_path;
  manifest["seed"] = spec.base_seed;
  manifest["jobs"] = jobs;
  manifest["records"] = records.size();
  manifest["seeds_per_config"] = spec.seeds_per_config;
  manifest["finished_at"] = stamp;
  manifest["wall_seconds"] = wall;
  dnx::write_text_file((fs::path(out_dir) / "manifest.json").string(),
                       manifest.dump(2) + "\n");

  std::cout << "ran " << records.size() << " configs x "
            << spec.seeds_per_config << " seeds in " << dnx::format_double(wall)
            << "s -> " << (fs::path(out_dir) / "results.csv").string() << "\n";
  return 0;
}

int cmd_plot(const std::string& csv_path, const std::string& x_metric,
             const std::string& y_metric, const std::string& objective,
             const std::string& out_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw dnx::ConfigError("cannot read CSV: " + csv_path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::vector<dnx::RunRecord> records = dnx::parse_csv(buf.str());
  const std::vector<dnx::RankedRecord> ranked =
      dnx::rank_results(records, dnx::objective_from_string(objective));
  dnx::write_text_file(out_path, dnx::scatter_svg(ranked, x_metric, y_metric));
  std::cout << "wrote " << out_path << " (" << ranked.size() << " markers)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camera-encoder architecture workbench"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string input_size = "256x256";
  std::string format = "table";
  std::string out_path;
  std::string out_dir;
  bool exclude_norm_act = false;
  double tolerance = 1e-4, epsilon = 1e-5;
  dnx::TrainRecipe recipe;
  int64_t jobs = 1;
  std::string csv_path, x_metric = "macs", y_metric = "final_loss_mean";
  std::string objective = "loss";

  CLI::App* build = app.add_subcommand("build", "validate a config and print the stage table");
  add_common(build, args);
  build->add_option("--input-size", input_size, "input HxW for shape display");

  CLI::App* analyze = app.add_subcommand("analyze", "parameter/MAC/receptive-field report");
  add_common(analyze, args);
  analyze->add_option("--input-size", input_size, "input HxW");
  analyze->add_option("--format", format, "table|json|csv");
  analyze->add_option("--out", out_path, "write to file instead of stdout");
  analyze->add_flag("--exclude-norm-act", exclude_norm_act,
                    "drop BN/GELU element costs from MAC totals");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "central-difference gradient check (64-bit)");
  add_common(gradcheck, args);
  gradcheck->add_option("--input-size", input_size, "input HxW");
  gradcheck->add_option("--tolerance", tolerance, "relative error tolerance");
  gradcheck->add_option("--epsilon", epsilon, "finite-difference step");
  gradcheck->add_option("--out", out_dir, "directory for gradcheck.json");

  CLI::App* train = app.add_subcommand("train-toy", "train on the synthetic heatmap task");
  add_common(train, args);
  train->add_option("--steps", recipe.steps, "training steps");
  train->add_option("--batch", recipe.batch, "batch size");
  train->add_option("--image-size", recipe.image_size, "square image extent");
  train->add_option("--lr-max", recipe.lr_max, "post-warmup learning rate");
  train->add_option("--warmup", recipe.warmup_steps, "warmup steps");
  train->add_option("--out", out_dir, "directory for train_report.json");

  CLI::App* ablate = app.add_subcommand("ablate", "run a design-sweep grid");
  add_common(ablate, args);
  ablate->add_option("--jobs", jobs, "concurrent configs");
  ablate->add_option("--out", out_dir, "output directory")->required();

  CLI::App* plot = app.add_subcommand("plot", "SVG scatter from a results CSV");
  plot->add_option("--csv", csv_path, "results CSV path")->required();
  plot->add_option("--x", x_metric, "x metric");
  plot->add_option("--y", y_metric, "y metric");
  plot->add_option("--objective", objective, "ranking objective (loss|loss_per_mac)");
  plot->add_option("--out", out_path, "output SVG path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed()) return cmd_build(args, input_size);
    if (analyze->parsed()) {
      return cmd_analyze(args, input_size, format, out_path, exclude_norm_act);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck(args, input_size, tolerance, epsilon, out_dir);
    }
    if (train->parsed()) {
      if (out_dir.empty()) out_dir = "out";
      return cmd_train_toy(args, recipe, out_dir);
    }
    if (ablate->parsed()) {
      return cmd_ablate(args, jobs, ablate->count("--seed") > 0, out_dir);
    }
    if (plot->parsed()) {
      return cmd_plot(csv_path, x_metric, y_metric, objective, out_path);
    }
  } catch (const dnx::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
