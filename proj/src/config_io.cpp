#include "dnx/config_io.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dnx {

using nlohmann::json;

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

int64_t get_int(const json& obj, const char* key, int64_t fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_integer()) {
    throw ConfigError(std::string(key) + " must be an integer");
  }
  return obj[key].get<int64_t>();
}

double get_double(const json& obj, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number()) {
    throw ConfigError(std::string(key) + " must be a number");
  }
  return obj[key].get<double>();
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  check_keys(j, {"preset", "name", "input_channels", "full_resolution", "head",
                 "stages"},
             "model config");

  ModelConfig cfg;
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("preset must be a string");
    cfg = variant_preset(j["preset"].get<std::string>());
  }
  if (j.contains("name")) {
    if (!j["name"].is_string()) throw ConfigError("name must be a string");
    cfg.name = j["name"].get<std::string>();
  }
  cfg.input_channels = get_int(j, "input_channels", cfg.input_channels);
  if (j.contains("full_resolution")) {
    if (!j["full_resolution"].is_boolean()) {
      throw ConfigError("full_resolution must be a boolean");
    }
    cfg.full_resolution = j["full_resolution"].get<bool>();
  }
  if (j.contains("head")) {
    const std::string h = j["head"].get<std::string>();
    if (h == "none") {
      cfg.head = HeadKind::None;
    } else if (h == "heatmap") {
      cfg.head = HeadKind::Heatmap;
    } else {
      throw ConfigError("head must be 'none' or 'heatmap', got '" + h + "'");
    }
  }
  if (j.contains("stages")) {
    if (!j["stages"].is_array()) throw ConfigError("stages must be an array");
    cfg.stages.clear();
    int64_t idx = 0;
    for (const json& sj : j["stages"]) {
      const std::string where = "stages." + std::to_string(idx++);
      if (!sj.is_object()) throw ConfigError(where + " must be an object");
      check_keys(sj, {"blocks", "lk_channels", "lc_channels", "attention_tail"},
                 where);
      StageConfig st;
      st.blocks = get_int(sj, "blocks", 1);
      st.lk_channels = get_int(sj, "lk_channels", 0);
      st.lc_channels = get_int(sj, "lc_channels", 0);
      st.attention_tail = get_int(sj, "attention_tail", 0);
      cfg.stages.push_back(st);
    }
  }
  if (cfg.stages.empty()) {
    throw ConfigError("model config needs 'stages' or a 'preset'");
  }
  return cfg;
}

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["input_channels"] = cfg.input_channels;
  j["full_resolution"] = cfg.full_resolution;
  j["head"] = cfg.head == HeadKind::Heatmap ? "heatmap" : "none";
  j["stages"] = json::array();
  for (const StageConfig& st : cfg.stages) {
    json sj;
    sj["blocks"] = st.blocks;
    sj["lk_channels"] = st.lk_channels;
    sj["lc_channels"] = st.lc_channels;
    sj["attention_tail"] = st.attention_tail;
    j["stages"].push_back(sj);
  }
  return j;
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string config_id(const ModelConfig& cfg) {
  // identity excludes the display name
  json j = model_config_to_json(cfg);
  j.erase("name");
  const uint64_t h = fnv1a64(j.dump());
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

TrainRecipe recipe_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("recipe must be a JSON object");
  check_keys(j,
             {"steps", "batch", "image_size", "lr_max", "warmup_steps",
              "objects_min", "objects_max", "side_min", "side_max",
              "noise_sigma"},
             "recipe");
  TrainRecipe r;
  r.steps = get_int(j, "steps", r.steps);
  r.batch = get_int(j, "batch", r.batch);
  r.image_size = get_int(j, "image_size", r.image_size);
  r.lr_max = get_double(j, "lr_max", r.lr_max);
  r.warmup_steps = get_int(j, "warmup_steps", r.warmup_steps);
  r.objects_min = get_int(j, "objects_min", r.objects_min);
  r.objects_max = get_int(j, "objects_max", r.objects_max);
  r.side_min = get_int(j, "side_min", r.side_min);
  r.side_max = get_int(j, "side_max", r.side_max);
  r.noise_sigma = get_double(j, "noise_sigma", r.noise_sigma);
  return r;
}

json recipe_to_json(const TrainRecipe& r) {
  json j;
  j["steps"] = r.steps;
  j["batch"] = r.batch;
  j["image_size"] = r.image_size;
  j["lr_max"] = r.lr_max;
  j["warmup_steps"] = r.warmup_steps;
  j["objects_min"] = r.objects_min;
  j["objects_max"] = r.objects_max;
  j["side_min"] = r.side_min;
  j["side_max"] = r.side_max;
  j["noise_sigma"] = r.noise_sigma;
  return j;
}

json train_report_to_json(const TrainReport& r) {
  json j;
  j["seed"] = r.seed;
  j["steps"] = r.steps;
  j["initial_loss"] = r.initial_loss;
  j["final_loss"] = r.final_loss;
  j["diverged"] = r.diverged;
  j["loss_curve"] = r.loss_curve;
  return j;
}

json gradcheck_report_to_json(const GradCheckReport& r) {
  json j;
  j["pass"] = r.pass;
  j["tolerance"] = r.tolerance;
  j["worst_tensor"] = r.worst_tensor;
  j["worst_rel_err"] = r.worst_err;
  j["tensors"] = json::array();
  for (const GradCheckEntry& e : r.entries) {
    json ej;
    ej["name"] = e.name;
    ej["max_rel_err"] = e.max_rel_err;
    ej["worst_coord"] = e.worst_coord;
    ej["checked"] = e.checked;
    j["tensors"].push_back(ej);
  }
  return j;
}

json cost_report_to_json(const CostReport& r) {
  json j;
  j["totals"] = {{"params", r.total_params},
                 {"buffers", r.total_buffers},
                 {"macs", r.total_macs},
                 {"peak_activation_elements", r.peak_activation_elements}};
  j["per_stage"] = json::array();
  for (const StageCost& s : r.per_stage) {
    j["per_stage"].push_back({{"group", s.group},
                              {"params", s.params},
                              {"buffers", s.buffers},
                              {"macs", s.macs}});
  }
  j["per_layer"] = json::array();
  for (const LayerCost& l : r.per_layer) {
    j["per_layer"].push_back(
        {{"id", l.id},
         {"kind", l.kind},
         {"group", l.group},
         {"params", l.params},
         {"buffers", l.buffers},
         {"macs", l.macs},
         {"out_shape",
          {l.out_shape.n, l.out_shape.c, l.out_shape.h, l.out_shape.w}}});
  }
  return j;
}

std::string cost_report_to_table(const CostReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "group" << std::right << std::setw(14)
     << "params" << std::setw(12) << "buffers" << std::setw(18) << "macs"
     << "\n";
  for (const StageCost& s : r.per_stage) {
    os << std::left << std::setw(12) << s.group << std::right << std::setw(14)
       << s.params << std::setw(12) << s.buffers << std::setw(18) << s.macs
       << "\n";
  }
  os << std::left << std::setw(12) << "total" << std::right << std::setw(14)
     << r.total_params << std::setw(12) << r.total_buffers << std::setw(18)
     << r.total_macs << "\n";
  os << "peak activation elements: " << r.peak_activation_elements << "\n";
  return os.str();
}

std::string cost_report_to_csv(const CostReport& r) {
  std::ostringstream os;
  os << "id,kind,group,params,buffers,macs,out_shape\n";
  for (const LayerCost& l : r.per_layer) {
    os << l.id << "," << l.kind << "," << l.group << "," << l.params << ","
       << l.buffers << "," << l.macs << "," << l.out_shape.n << "/"
       << l.out_shape.c << "/" << l.out_shape.h << "/" << l.out_shape.w
       << "\n";
  }
  return os.str();
}

void apply_override(json& root, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  std::vector<std::string> parts;
  std::string token;
  std::istringstream ps(path);
  while (std::getline(ps, token, '.')) {
    if (token.empty()) throw ConfigError("empty path segment in '" + path + "'");
    parts.push_back(token);
  }
  if (parts.empty()) throw ConfigError("empty override path");

  json* node = &root;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    const std::string& seg = parts[i];
    if (node->is_array()) {
      size_t idx = 0;
      auto [p, ec] = std::from_chars(seg.data(), seg.data() + seg.size(), idx);
      if (ec != std::errc() || p != seg.data() + seg.size()) {
        throw ConfigError("expected array index, got '" + seg + "' in " + path);
      }
      if (idx >= node->size()) {
        throw ConfigError("index " + seg + " out of range in " + path);
      }
      node = &(*node)[idx];
    } else {
      node = &(*node)[seg];
    }
  }
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;  // bare string
  }
  const std::string& leaf = parts.back();
  if (node->is_array()) {
    size_t idx = 0;
    auto [p, ec] = std::from_chars(leaf.data(), leaf.data() + leaf.size(), idx);
    if (ec != std::errc() || p != leaf.data() + leaf.size() ||
        idx >= node->size()) {
      throw ConfigError("bad array index '" + leaf + "' in " + path);
    }
    (*node)[idx] = parsed;
  } else {
    (*node)[leaf] = parsed;
  }
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("JSON parse error in " + path + ": " + e.what());
  }
  return j;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StateError("cannot write file: " + path);
  out << content;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, p);
}

}  // namespace dnx
