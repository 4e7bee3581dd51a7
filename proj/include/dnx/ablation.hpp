#pragma once

#include <json.hpp>

#include "dnx/analysis.hpp"
#include "dnx/training.hpp"

namespace dnx {

enum class GridKind { Ratio, StageCount, BlockMultiplier, Attention, Resolution };

GridKind grid_kind_from_string(const std::string& s);
const char* to_string(GridKind k);

struct GridSpec {
  GridKind kind = GridKind::Ratio;
  ModelConfig base;

  // ratio: block counts from largest-remainder rounding of budget * w/sum(w)
  std::vector<std::vector<double>> ratios{
      {1, 1, 1, 1}, {1, 4, 7, 1}, {1, 7, 4, 1}, {2, 7, 4, 2}, {1, 2, 4, 1}};
  int64_t budget = 13;

  // stage_count: iso-complexity sweep over [stage_min, stage_max]
  int64_t stage_min = 2, stage_max = 5;

  // block_multiplier: one config per (stage, factor) pair
  std::vector<int64_t> multipliers{2, 4, 6};

  // attention: one config per trailing hybrid count, placed in one stage
  std::vector<int64_t> attention_tails{0, 1, 4};
  int64_t attention_stage = 2;  // zero-based; default third stage

  int64_t seeds_per_config = 3;
  uint64_t base_seed = 1;
  TrainRecipe recipe;
};

GridSpec grid_spec_from_json(const nlohmann::json& j);

struct RunRecord {
  std::string config_id;
  std::vector<int64_t> blocks, lk_channels, lc_channels, attention_tail;
  bool full_resolution = false;
  int64_t params = 0;
  uint64_t macs = 0;
  int64_t rf_final = 0;
  bool rf_global = false;
  double final_loss_mean = 0;
  double final_loss_std = 0;  // population std; 0 for a single seed
  bool diverged = false;
  double wall_seconds = 0;
  std::vector<uint64_t> seeds;
};

// Deterministic, order-stable expansion; every config validates and carries a
// heatmap head so it can train.
std::vector<ModelConfig> expand_grid(const GridSpec& spec);

// Executes config x seed jobs (configs may run concurrently across `jobs`
// workers); records come back sorted by config_id. Diverged runs are
// recorded, never retried, and never abort the grid.
std::vector<RunRecord> run_grid(const GridSpec& spec, int64_t jobs = 1);

// header: config_id,blocks,lk_channels,lc_channels,attention_tail,
//         full_resolution,params,macs,rf_final,final_loss_mean,
//         final_loss_std,diverged,wall_seconds,seeds
// List cells join with "/"; rows are newline-terminated.
std::string write_csv(const std::vector<RunRecord>& records);
std::vector<RunRecord> parse_csv(const std::string& text);

enum class RankObjective { Loss, LossPerMac };
RankObjective objective_from_string(const std::string& s);

struct RankedRecord {
  RunRecord record;
  int64_t rank = 0;
  double objective = 0;
  bool pareto = false;  // no other record has both lower loss and lower MACs
};

// Diverged records are filtered before ranking.
std::vector<RankedRecord> rank_results(const std::vector<RunRecord>& records,
                                       RankObjective objective);

// Largest-remainder rounding of budget proportional to weights, minimum one
// block per stage; conserves the budget whenever budget >= stage count.
std::vector<int64_t> largest_remainder_blocks(int64_t budget,
                                              const std::vector<double>& weights);

}  // namespace dnx
