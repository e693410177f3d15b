#include "expnet_cli/run_config.hpp"

#include <fstream>

#include "expnet/errors.hpp"

namespace expnet::cli {

namespace {

GradCheckOptions grad_check_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("grad_check must be a JSON object");
  GradCheckOptions o;
  for (const auto& [key, value] : j.items()) {
    if (key == "step") o.step = value.get<double>();
    else if (key == "tolerance") o.tolerance = value.get<double>();
    else if (key == "floor") o.floor = value.get<double>();
    else if (key == "seed") o.seed = value.get<std::uint64_t>();
    else if (key == "seq_len") o.seq_len = value.get<std::size_t>();
    else if (key == "n_regions") o.n_regions = value.get<std::size_t>();
    else throw ConfigError("unknown grad_check key '" + key + "'");
  }
  if (!(o.step > 0.0) || !(o.tolerance > 0.0) || o.floor < 0.0) throw ConfigError("grad_check step and tolerance must be positive");
  return o;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "min_freq") c.min_freq = value.get<std::size_t>();
      else if (key == "beam") c.beam = value.get<std::size_t>();
      else if (key == "model") c.model = model_config_from_json(value);
      else if (key == "xe") c.xe = train_config_from_json(value);
      else if (key == "scst") c.scst = train_config_from_json(value, TrainConfig::scst_defaults());
      else if (key == "grad_check") c.grad_check = grad_check_from_json(value);
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (c.min_freq < 1) throw ConfigError("min_freq must be at least 1");
  if (c.beam < 1) throw ConfigError("beam must be at least 1");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return run_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"min_freq", c.min_freq},
          {"beam", c.beam},
          {"model", expnet::to_json(c.model)},
          {"xe", expnet::to_json(c.xe)},
          {"scst", expnet::to_json(c.scst)},
          {"grad_check",
           {{"step", c.grad_check.step},
            {"tolerance", c.grad_check.tolerance},
            {"floor", c.grad_check.floor},
            {"seed", c.grad_check.seed},
            {"seq_len", c.grad_check.seq_len},
            {"n_regions", c.grad_check.n_regions}}}};
}

}  // namespace expnet::cli
