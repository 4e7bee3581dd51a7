#include "dnx/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "dnx/config_io.hpp"

namespace dnx {

using nlohmann::json;

GridKind grid_kind_from_string(const std::string& s) {
  if (s == "ratio") return GridKind::Ratio;
  if (s == "stage_count") return GridKind::StageCount;
  if (s == "block_multiplier") return GridKind::BlockMultiplier;
  if (s == "attention") return GridKind::Attention;
  if (s == "resolution") return GridKind::Resolution;
  throw ConfigError("unknown grid kind '" + s + "'");
}

const char* to_string(GridKind k) {
  switch (k) {
    case GridKind::Ratio: return "ratio";
    case GridKind::StageCount: return "stage_count";
    case GridKind::BlockMultiplier: return "block_multiplier";
    case GridKind::Attention: return "attention";
    case GridKind::Resolution: return "resolution";
  }
  return "?";
}

GridSpec grid_spec_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("grid config must be a JSON object");
  if (!doc.contains("grid")) {
    throw ConfigError("grid config needs a 'grid' section");
  }
  json base = doc;
  json g = doc["grid"];
  base.erase("grid");

  GridSpec spec;
  spec.base = model_config_from_json(base);

  if (!g.is_object()) throw ConfigError("'grid' must be a JSON object");
  static const std::vector<std::string> allowed{
      "kind",          "ratios",          "budget",
      "stage_min",     "stage_max",       "multipliers",
      "attention_tails", "attention_stage", "seeds_per_config",
      "seed",          "recipe"};
  for (auto it = g.begin(); it != g.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in grid section");
    }
  }
  if (!g.contains("kind")) throw ConfigError("grid section needs 'kind'");
  spec.kind = grid_kind_from_string(g["kind"].get<std::string>());
  if (g.contains("ratios")) {
    spec.ratios.clear();
    for (const json& row : g["ratios"]) {
      spec.ratios.push_back(row.get<std::vector<double>>());
    }
  }
  if (g.contains("budget")) spec.budget = g["budget"].get<int64_t>();
  if (g.contains("stage_min")) spec.stage_min = g["stage_min"].get<int64_t>();
  if (g.contains("stage_max")) spec.stage_max = g["stage_max"].get<int64_t>();
  if (g.contains("multipliers")) {
    spec.multipliers = g["multipliers"].get<std::vector<int64_t>>();
  }
  if (g.contains("attention_tails")) {
    spec.attention_tails = g["attention_tails"].get<std::vector<int64_t>>();
  }
  if (g.contains("attention_stage")) {
    spec.attention_stage = g["attention_stage"].get<int64_t>();
  }
  if (g.contains("seeds_per_config")) {
    spec.seeds_per_config = g["seeds_per_config"].get<int64_t>();
    if (spec.seeds_per_config < 1) {
      throw ConfigError("seeds_per_config must be >= 1");
    }
  }
  if (g.contains("seed")) spec.base_seed = g["seed"].get<uint64_t>();
  if (g.contains("recipe")) spec.recipe = recipe_from_json(g["recipe"]);
  return spec;
}

std::vector<int64_t> largest_remainder_blocks(
    int64_t budget, const std::vector<double>& weights) {
  const int64_t s_count = static_cast<int64_t>(weights.size());
  if (s_count < 1) throw ConfigError("ratio weights empty");
  double wsum = 0;
  for (double w : weights) {
    if (!(w > 0)) throw ConfigError("ratio weights must be positive");
    wsum += w;
  }
  std::vector<int64_t> blocks(static_cast<size_t>(s_count));
  std::vector<double> remainder(static_cast<size_t>(s_count));
  int64_t assigned = 0;
  for (int64_t i = 0; i < s_count; ++i) {
    const double ideal =
        static_cast<double>(budget) * weights[static_cast<size_t>(i)] / wsum;
    blocks[static_cast<size_t>(i)] = static_cast<int64_t>(std::floor(ideal));
    remainder[static_cast<size_t>(i)] =
        ideal - std::floor(ideal);
    assigned += blocks[static_cast<size_t>(i)];
  }
  std::vector<int64_t> order(static_cast<size_t>(s_count));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return remainder[static_cast<size_t>(a)] > remainder[static_cast<size_t>(b)];
  });
  for (int64_t i = 0; i < budget - assigned && i < s_count; ++i) {
    blocks[static_cast<size_t>(order[static_cast<size_t>(i)])] += 1;
  }
  // minimum one block per stage, stolen from the largest stage when possible
  for (int64_t i = 0; i < s_count; ++i) {
    if (blocks[static_cast<size_t>(i)] > 0) continue;
    int64_t donor = -1;
    for (int64_t j = 0; j < s_count; ++j) {
      if (blocks[static_cast<size_t>(j)] >= 2 &&
          (donor < 0 ||
           blocks[static_cast<size_t>(j)] > blocks[static_cast<size_t>(donor)])) {
        donor = j;
      }
    }
    if (donor >= 0) blocks[static_cast<size_t>(donor)] -= 1;
    blocks[static_cast<size_t>(i)] = 1;
  }
  return blocks;
}

namespace {

std::string join_ints(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += "-";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

std::vector<ModelConfig> expand_grid(const GridSpec& spec) {
  std::vector<ModelConfig> out;
  const ModelConfig& base = spec.base;
  const int64_t s_count = base.stage_count();

  switch (spec.kind) {
    case GridKind::Ratio: {
      for (const std::vector<double>& ratio : spec.ratios) {
        if (static_cast<int64_t>(ratio.size()) != s_count) {
          throw ConfigError("ratio length " + std::to_string(ratio.size()) +
                            " != stage count " + std::to_string(s_count));
        }
        ModelConfig cfg = base;
        const std::vector<int64_t> blocks =
            largest_remainder_blocks(spec.budget, ratio);
        for (int64_t i = 0; i < s_count; ++i) {
          cfg.stages[static_cast<size_t>(i)].blocks =
              blocks[static_cast<size_t>(i)];
        }
        cfg.name = "ratio-" + join_ints(blocks);
        out.push_back(std::move(cfg));
      }
      break;
    }
    case GridKind::StageCount: {
      if (s_count != 4) {
        throw ConfigError("stage_count sweeps derive widths from a 4-stage base");
      }
      const uint64_t target = count_macs(base, spec.recipe.image_size,
                                         spec.recipe.image_size);
      const std::vector<double> base_weights{1, 7, 4, 1};
      for (int64_t s = spec.stage_min; s <= spec.stage_max; ++s) {
        if (s < 2 || s > 5) {
          throw ConfigError("stage_count sweep bounds must stay in [2,5]");
        }
        ModelConfig proto = base;
        proto.stages.resize(static_cast<size_t>(std::min(s, s_count)));
        while (proto.stage_count() < s) {
          proto.stages.push_back(base.stages.back());  // repeat final widths
        }
        std::vector<double> weights(
            base_weights.begin(),
            base_weights.begin() + static_cast<size_t>(std::min(s, s_count)));
        while (static_cast<int64_t>(weights.size()) < s) {
          weights.push_back(base_weights.back());
        }
        const std::vector<int64_t> blocks = iso_complexity_blocks(
            proto, weights, target, spec.recipe.image_size,
            spec.recipe.image_size);
        for (int64_t i = 0; i < s; ++i) {
          proto.stages[static_cast<size_t>(i)].blocks =
              blocks[static_cast<size_t>(i)];
        }
        proto.name = "stages-" + std::to_string(s) + "-" + join_ints(blocks);
        out.push_back(std::move(proto));
      }
      break;
    }
    case GridKind::BlockMultiplier: {
      for (int64_t stage = 0; stage < s_count; ++stage) {
        for (int64_t factor : spec.multipliers) {
          if (factor < 1) throw ConfigError("multipliers must be >= 1");
          ModelConfig cfg = base;
          cfg.stages[static_cast<size_t>(stage)].blocks *= factor;
          cfg.name = "mult-s" + std::to_string(stage + 1) + "-x" +
                     std::to_string(factor);
          out.push_back(std::move(cfg));
        }
      }
      break;
    }
    case GridKind::Attention: {
      if (spec.attention_stage < 0 || spec.attention_stage >= s_count) {
        throw ConfigError("attention_stage out of range");
      }
      for (int64_t tail : spec.attention_tails) {
        ModelConfig cfg = base;
        for (auto& st : cfg.stages) st.attention_tail = 0;
        cfg.stages[static_cast<size_t>(spec.attention_stage)].attention_tail =
            tail;
        cfg.name = "attn-" + std::to_string(tail);
        out.push_back(std::move(cfg));
      }
      break;
    }
    case GridKind::Resolution: {
      for (bool full : {false, true}) {
        ModelConfig cfg = base;
        cfg.full_resolution = full;
        cfg.name = full ? "res-full" : "res-stem";
        out.push_back(std::move(cfg));
      }
      break;
    }
  }

  for (ModelConfig& cfg : out) {
    cfg.head = HeadKind::Heatmap;
    const std::vector<Violation> violations = validate_config(cfg);
    if (!violations.empty()) {
      std::string msg = "grid produced invalid config '" + cfg.name + "':";
      for (const auto& v : violations) msg += " " + v.path + ": " + v.message + ";";
      throw ConfigError(msg);
    }
  }
  return out;
}

namespace {

RunRecord run_one(const GridSpec& spec, const ModelConfig& cfg) {
  RunRecord rec;
  rec.config_id = config_id(cfg);
  for (const StageConfig& st : cfg.stages) {
    rec.blocks.push_back(st.blocks);
    rec.lk_channels.push_back(st.lk_channels);
    rec.lc_channels.push_back(st.lc_channels);
    rec.attention_tail.push_back(st.attention_tail);
  }
  rec.full_resolution = cfg.full_resolution;

  const CostReport rep = analyze_config(cfg, spec.recipe.image_size,
                                        spec.recipe.image_size);
  rec.params = rep.total_params;
  rec.macs = rep.total_macs;
  const ReceptiveFieldReport rf = receptive_field_analytic(cfg);
  rec.rf_final = rf.final().r;
  rec.rf_global = rf.final().global;

  const uint64_t cfg_salt = fnv1a64(rec.config_id);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> finals;
  for (int64_t k = 0; k < spec.seeds_per_config; ++k) {
    const uint64_t seed =
        mix_seed(mix_seed(spec.base_seed, cfg_salt), static_cast<uint64_t>(k));
    rec.seeds.push_back(seed);
    const TrainReport tr = train_loop<float>(cfg, seed, spec.recipe);
    if (tr.diverged) {
      rec.diverged = true;
    } else {
      finals.push_back(tr.final_loss);
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  rec.wall_seconds = std::chrono::duration<double>(t1 - t0).count();

  if (finals.empty()) {
    rec.final_loss_mean = std::nan("");
    rec.final_loss_std = std::nan("");
  } else {
    double mean = 0;
    for (double v : finals) mean += v;
    mean /= static_cast<double>(finals.size());
    double var = 0;
    for (double v : finals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(finals.size());
    rec.final_loss_mean = mean;
    rec.final_loss_std = std::sqrt(var);
  }
  return rec;
}

}  // namespace

std::vector<RunRecord> run_grid(const GridSpec& spec, int64_t jobs) {
  const std::vector<ModelConfig> configs = expand_grid(spec);
  std::vector<RunRecord> records(configs.size());
  if (configs.empty()) return records;

  jobs = std::clamp<int64_t>(jobs, 1, static_cast<int64_t>(configs.size()));
  if (jobs == 1) {
    for (size_t i = 0; i < configs.size(); ++i) {
      records[i] = run_one(spec, configs[i]);
    }
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= configs.size()) break;
        records[i] = run_one(spec, configs[i]);
      }
    };
    std::vector<std::thread> pool;
    for (int64_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  std::sort(records.begin(), records.end(),
            [](const RunRecord& a, const RunRecord& b) {
              return a.config_id < b.config_id;
            });
  return records;
}

namespace {

constexpr const char* kCsvHeader =
    "config_id,blocks,lk_channels,lc_channels,attention_tail,full_resolution,"
    "params,macs,rf_final,final_loss_mean,final_loss_std,diverged,"
    "wall_seconds,seeds";

template <typename T>
std::string join_list(const std::vector<T>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += "/";
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string token;
  std::istringstream is(s);
  while (std::getline(is, token, sep)) out.push_back(token);
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

std::vector<int64_t> parse_int_list(const std::string& s) {
  std::vector<int64_t> out;
  for (const std::string& tok : split(s, '/')) out.push_back(std::stoll(tok));
  return out;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("bad boolean cell '" + s + "' in CSV");
}

}  // namespace

std::string write_csv(const std::vector<RunRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const RunRecord& r : records) {
    out += r.config_id;
    out += "," + join_list(r.blocks);
    out += "," + join_list(r.lk_channels);
    out += "," + join_list(r.lc_channels);
    out += "," + join_list(r.attention_tail);
    out += std::string(",") + (r.full_resolution ? "true" : "false");
    out += "," + std::to_string(r.params);
    out += "," + std::to_string(r.macs);
    out += std::string(",") + (r.rf_global ? "GLOBAL" : std::to_string(r.rf_final));
    out += "," + format_double(r.final_loss_mean);
    out += "," + format_double(r.final_loss_std);
    out += std::string(",") + (r.diverged ? "true" : "false");
    out += "," + format_double(r.wall_seconds);
    out += "," + join_list(r.seeds);
    out += "\n";
  }
  return out;
}

std::vector<RunRecord> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("empty CSV document");
  if (line != kCsvHeader) {
    throw ConfigError("CSV header mismatch; expected '" +
                      std::string(kCsvHeader) + "'");
  }
  std::vector<RunRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split(line, ',');
    if (cells.size() != 14) {
      throw ConfigError("CSV row has " + std::to_string(cells.size()) +
                        " cells, expected 14");
    }
    RunRecord r;
    r.config_id = cells[0];
    r.blocks = parse_int_list(cells[1]);
    r.lk_channels = parse_int_list(cells[2]);
    r.lc_channels = parse_int_list(cells[3]);
    r.attention_tail = parse_int_list(cells[4]);
    r.full_resolution = parse_bool(cells[5]);
    r.params = std::stoll(cells[6]);
    r.macs = std::stoull(cells[7]);
    if (cells[8] == "GLOBAL") {
      r.rf_global = true;
    } else {
      r.rf_final = std::stoll(cells[8]);
    }
    r.final_loss_mean = std::stod(cells[9]);
    r.final_loss_std = std::stod(cells[10]);
    r.diverged = parse_bool(cells[11]);
    r.wall_seconds = std::stod(cells[12]);
    for (const std::string& tok : split(cells[13], '/')) {
      r.seeds.push_back(std::stoull(tok));
    }
    out.push_back(std::move(r));
  }
  return out;
}

RankObjective objective_from_string(const std::string& s) {
  if (s == "loss") return RankObjective::Loss;
  if (s == "loss_per_mac") return RankObjective::LossPerMac;
  throw ConfigError("unknown objective '" + s + "' (loss|loss_per_mac)");
}

std::vector<RankedRecord> rank_results(const std::vector<RunRecord>& records,
                                       RankObjective objective) {
  std::vector<RankedRecord> out;
  for (const RunRecord& r : records) {
    if (r.diverged) continue;
    RankedRecord rr;
    rr.record = r;
    rr.objective = objective == RankObjective::Loss
                       ? r.final_loss_mean
                       : r.final_loss_mean / static_cast<double>(r.macs);
    out.push_back(std::move(rr));
  }
  std::sort(out.begin(), out.end(),
            [](const RankedRecord& a, const RankedRecord& b) {
              if (a.objective != b.objective) return a.objective < b.objective;
              return a.record.config_id < b.record.config_id;
            });
  for (size_t i = 0; i < out.size(); ++i) {
    out[i].rank = static_cast<int64_t>(i) + 1;
    out[i].pareto = true;
    for (const RankedRecord& other : out) {
      if (other.record.final_loss_mean < out[i].record.final_loss_mean &&
          other.record.macs < out[i].record.macs) {
        out[i].pareto = false;
        break;
      }
    }
  }
  return out;
}

}  // namespace dnx
